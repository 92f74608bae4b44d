//! Residual-scaling ablation: the same data, seed and budget under three ε policies.

use crate::error::Result;
use crate::model::{build, ScalingPolicy};
use crate::tensor::Scalar;

use super::{
    loss_trace_compare, train_on, LossTrace, TraceComparison, TrainConfig, TrainObserver,
    TrainingSet,
};

/// The compared policies: proposed (α = 24) first as the reference, then all-positive α = 61 and α = 85.
pub fn ablation_policies() -> [ScalingPolicy; 3] {
    [
        ScalingPolicy::proposed(),
        ScalingPolicy::all_positive(61.0),
        ScalingPolicy::all_positive(85.0),
    ]
}

/// One policy's run.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub policy: ScalingPolicy,
    pub trace: LossTrace,
    /// Smallest and largest ε over every residual block of the trained graph.
    pub epsilon_range: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub runs: Vec<AblationRun>,
    pub comparison: TraceComparison,
}

/// Trains `base` once per policy of [`ablation_policies`]; everything but the policy is shared.
pub fn ablate_scaling<T: Scalar>(
    base: &TrainConfig,
    data: &TrainingSet<T>,
    mut observer: impl FnMut(&ScalingPolicy) -> Box<dyn TrainObserver<T>>,
) -> Result<Ablation> {
    let mut runs = Vec::with_capacity(3);
    for policy in ablation_policies() {
        let cfg = TrainConfig {
            policy,
            ..base.clone()
        };
        let graph = build(cfg.variant, policy, cfg.channels)?;
        let eps = graph.blocks.iter().map(|b| b.epsilon);
        let epsilon_range = eps.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            (lo.min(e), hi.max(e))
        });
        let mut obs = observer(&policy);
        let outcome = train_on(&cfg, data, obs.as_mut())?;
        runs.push(AblationRun {
            policy,
            trace: LossTrace {
                label: policy.slug(),
                rows: outcome.trace,
            },
            epsilon_range,
        });
    }
    let traces: Vec<LossTrace> = runs.iter().map(|r| r.trace.clone()).collect();
    let comparison = loss_trace_compare(&traces)?;
    Ok(Ablation { runs, comparison })
}
