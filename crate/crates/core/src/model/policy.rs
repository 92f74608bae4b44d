//! Residual scaling schedules.
//!
//! Every residual block computes `x + ε·F(x)`. The proposed schedule starts at
//! `0.01·α` and decays by 0.01 per stage. The stage where it would hit zero
//! gets −0.01 instead, so stages before `α` are positive and stage `α` and
//! later are negative: ε(15) = 0.09, ε(24) = −0.01, ε(30) = −0.06 for α = 24.
//!
//! [`PolicyKind::ProposedShifted`] instead subtracts 0.01 from every stage at
//! or after `α` (ε(30) = −0.07).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Proposed,
    /// Proposed schedule with the −0.01 offset applied to every stage ≥ α.
    ProposedShifted,
    AllPositive,
}

/// How stage numbers are assigned to the main branch of the multitask graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageNumbering {
    /// Main branch restarts after the shared segment (stages 25–48), beside the binary branch.
    Parallel,
    /// Main branch continues after the binary branch (stages 61–84).
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPolicy {
    pub kind: PolicyKind,
    pub alpha: f64,
    pub numbering: StageNumbering,
}

impl ScalingPolicy {
    pub fn proposed() -> Self {
        ScalingPolicy {
            kind: PolicyKind::Proposed,
            alpha: 24.0,
            numbering: StageNumbering::Parallel,
        }
    }

    /// `ε(s) = 0.01·(α − s)` everywhere. With `α > 84` the main branch is numbered
    /// after the binary branch so every stage up to 84 stays positive.
    pub fn all_positive(alpha: f64) -> Self {
        ScalingPolicy {
            kind: PolicyKind::AllPositive,
            alpha,
            numbering: if alpha > 84.0 {
                StageNumbering::Sequential
            } else {
                StageNumbering::Parallel
            },
        }
    }

    /// Scaling factor of the block at `stage` (1-based).
    pub fn epsilon(&self, stage: usize) -> f64 {
        assert!(stage >= 1, "stages are numbered from 1");
        let s = stage as f64;
        match self.kind {
            PolicyKind::Proposed if s == self.alpha => -0.01,
            PolicyKind::ProposedShifted if s >= self.alpha => 0.01 * (self.alpha - s) - 0.01,
            _ => 0.01 * (self.alpha - s),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "scaling alpha {} must be ≥ 1",
                self.alpha
            )));
        }
        if self.kind != PolicyKind::AllPositive && self.alpha.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "proposed schedule needs an integer alpha, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Free-function form of [`ScalingPolicy::epsilon`].
pub fn epsilon(policy: &ScalingPolicy, stage: usize) -> f64 {
    policy.epsilon(stage)
}

impl ScalingPolicy {
    /// File-name friendly label, e.g. `all_positive_a61`.
    pub fn slug(&self) -> String {
        let kind = match self.kind {
            PolicyKind::Proposed => "proposed",
            PolicyKind::ProposedShifted => "proposed_shifted",
            PolicyKind::AllPositive => "all_positive",
        };
        format!("{kind}_a{}", self.alpha)
    }
}

impl fmt::Display for ScalingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::Proposed => write!(f, "proposed(alpha={})", self.alpha),
            PolicyKind::ProposedShifted => write!(f, "proposed_shifted(alpha={})", self.alpha),
            PolicyKind::AllPositive => write!(f, "all_positive(alpha={})", self.alpha),
        }
    }
}

/// Accepts `proposed`, `proposed:24`, `proposed_shifted`, `all_positive:61` and `all-positive-85`.
impl FromStr for ScalingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let (kind, alpha) = match norm.split_once([':', '=']) {
            Some((k, a)) => (k.to_string(), Some(a)),
            None => match norm.rsplit_once('_') {
                Some((k, a)) if a.parse::<f64>().is_ok() => (k.to_string(), Some(a)),
                _ => (norm.clone(), None),
            },
        };
        let alpha = alpha
            .map(|a| {
                a.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad alpha in policy {s:?}")))
            })
            .transpose()?;
        let p = match (kind.as_str(), alpha) {
            ("proposed", None) => ScalingPolicy::proposed(),
            ("proposed", Some(a)) => ScalingPolicy {
                alpha: a,
                ..ScalingPolicy::proposed()
            },
            ("proposed_shifted", a) => ScalingPolicy {
                kind: PolicyKind::ProposedShifted,
                alpha: a.unwrap_or(24.0),
                ..ScalingPolicy::proposed()
            },
            ("all_positive" | "positive", Some(a)) => ScalingPolicy::all_positive(a),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown scaling policy {s:?} (expected proposed or all_positive:<alpha>)"
                )))
            }
        };
        p.validate()?;
        Ok(p)
    }
}
