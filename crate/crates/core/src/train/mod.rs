//! Two-phase training.
//!
//! Phase 1 (the first `phase1_steps` optimizer steps, multitask only) updates
//! the stem, shared blocks and binary branch under the binary single-task
//! loss; the main branch is not even evaluated. Phase 2 updates everything
//! under the total loss. Every random choice (batch order, crops) comes from
//! streams derived from the config seed, so a run is bit-reproducible.

mod ablation;
mod checkpoint;
mod config;
mod loss;
mod optim;
mod trace;

pub use ablation::{ablate_scaling, ablation_policies, Ablation, AblationRun};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{Precision, TrainConfig, CONFIG_KEYS};
pub use loss::{
    laplacian_loss, mse_loss, single_task_loss, ssim_loss, total_loss, LaplacianLoss, LossConfig,
    LossWeights, Mse, SsimLoss, TaskTerms, TermValues, TotalTerms,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use trace::{
    loss_trace_compare, parse_csv, write_csv, LossTrace, TraceComparison, TraceRow, TraceSummary,
    TRACE_HEADER,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{build, save_weights, Params, PgtNet, RunMode};
use crate::seed;
use crate::synth::{Dataset, SampleTriplet};
use crate::tensor::{stack_batch, Scalar, Shape4, Tensor4};

/// Training images held in memory as `(1, 1, H, W)` tensors.
#[derive(Debug, Clone)]
pub struct TrainingSet<T: Scalar> {
    pub noisy: Vec<Tensor4<T>>,
    pub clean: Vec<Tensor4<T>>,
    pub binary: Vec<Tensor4<T>>,
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub noisy: Tensor4<T>,
    pub clean: Tensor4<T>,
    pub binary: Tensor4<T>,
}

fn crop<T: Scalar>(t: &Tensor4<T>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor4<T> {
    let s = t.shape();
    let mut d = Vec::with_capacity(h * w);
    for y in y0..y0 + h {
        d.extend_from_slice(&t.data()[y * s.w + x0..y * s.w + x0 + w]);
    }
    Tensor4::from_vec_unchecked(Shape4::new(1, 1, h, w), d)
}

impl<T: Scalar> TrainingSet<T> {
    pub fn from_triplets(items: &[SampleTriplet]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("training split is empty".into()))?;
        if items.iter().any(|t| !t.noisy.same_dims(&first.noisy)) {
            return Err(Error::shape("training set", "images differ in size"));
        }
        Ok(TrainingSet {
            noisy: items.iter().map(|t| t.noisy.to_tensor()).collect(),
            clean: items.iter().map(|t| t.clean.to_tensor()).collect(),
            binary: items.iter().map(|t| t.binary.to_tensor()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.noisy[0].shape();
        (s.h, s.w)
    }

    /// Stacks `indices`, optionally cropping each sample at a position drawn from `rng`.
    pub fn batch(
        &self,
        indices: &[usize],
        crop_hw: Option<(usize, usize)>,
        rng: &mut seed::Rng,
    ) -> Result<Batch<T>> {
        let (h, w) = self.dims();
        let mut parts = [Vec::new(), Vec::new(), Vec::new()];
        for &i in indices {
            let srcs = [&self.noisy[i], &self.clean[i], &self.binary[i]];
            match crop_hw {
                Some((ch, cw)) => {
                    if ch > h || cw > w {
                        return Err(Error::InvalidArgument(format!(
                            "crop {ch}x{cw} exceeds image {h}x{w}"
                        )));
                    }
                    let y0 = rng.gen_range(0..=h - ch);
                    let x0 = rng.gen_range(0..=w - cw);
                    for (p, s) in parts.iter_mut().zip(srcs) {
                        p.push(crop(s, y0, x0, ch, cw));
                    }
                }
                None => {
                    for (p, s) in parts.iter_mut().zip(srcs) {
                        p.push(s.clone());
                    }
                }
            }
        }
        let [n, c, b] = parts;
        Ok(Batch {
            noisy: stack_batch(&n)?,
            clean: stack_batch(&c)?,
            binary: stack_batch(&b)?,
        })
    }
}

/// Result of [`train_on`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub net: PgtNet<T>,
    pub initial: Params<T>,
    /// Parameters at the end of phase 1, when there was one.
    pub after_phase1: Option<Params<T>>,
    pub trace: Vec<TraceRow>,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn total_steps(&self, n_train: usize) -> usize {
        let per_epoch = n_train.div_ceil(self.batch_size);
        let all = per_epoch.saturating_mul(self.epochs);
        if self.max_steps > 0 {
            all.min(self.max_steps)
        } else {
            all
        }
    }
}

/// Hooks called during [`train_on`].
pub trait TrainObserver<T: Scalar> {
    fn on_step(&mut self, _row: &TraceRow) {}
    /// Called after every `checkpoint_every` steps.
    fn on_checkpoint(&mut self, _step: usize, _net: &PgtNet<T>, _opt: &Optimizer) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Quiet;

impl<T: Scalar> TrainObserver<T> for Quiet {}

/// Runs one optimizer step and returns its telemetry row.
pub fn train_step<T: Scalar>(
    net: &mut PgtNet<T>,
    opt: &mut Optimizer,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    step: usize,
    phase: u8,
) -> Result<TraceRow> {
    let tape = Tape::<T>::new();
    let pv = net.register(&tape, |c| phase == 2 || c.phase1)?;
    let x = tape.constant(batch.noisy.clone())?;
    let mode = if phase == 1 {
        RunMode::BinaryOnly
    } else {
        RunMode::Full
    };
    let out = net.forward_taped(&tape, &pv, x, mode)?;
    let binary = match out.binary {
        Some(b) => Some((b, tape.constant(batch.binary.clone())?)),
        None => None,
    };
    let main = match out.main {
        Some(m) => Some((m, tape.constant(batch.clean.clone())?)),
        None => None,
    };
    let terms = total_loss(&tape, binary, main, &cfg.loss)?;
    let lw = &cfg.loss.weights;
    let (wb, wm) = match (&terms.binary, &terms.main) {
        (Some(_), Some(_)) => (lw.w_binary_task, lw.w_main_task),
        _ => (1.0, 1.0),
    };
    let bv = terms.binary.map(|t| TermValues::read(&tape, &t));
    let mv = terms.main.map(|t| TermValues::read(&tape, &t));
    let contrib = |f: fn(&TermValues) -> f64, w: f64| {
        bv.as_ref().map_or(0.0, |t| f(t) * w * wb) + mv.as_ref().map_or(0.0, |t| f(t) * w * wm)
    };
    let row = TraceRow {
        step,
        phase,
        loss_total: tape.item(terms.total),
        loss_mse: contrib(|t| t.mse, lw.w_mse),
        loss_lap: contrib(|t| t.lap, lw.w_lap),
        loss_ssim: contrib(|t| t.ssim, lw.w_ssim),
        loss_binary: bv.map(|t| t.total),
        loss_main: mv.map(|t| t.total),
    };
    if !row.loss_total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            terms: format!(
                "total={} mse={} lap={} ssim={} binary={:?} main={:?}",
                row.loss_total,
                row.loss_mse,
                row.loss_lap,
                row.loss_ssim,
                row.loss_binary,
                row.loss_main
            ),
        });
    }
    tape.backward(terms.total)?;
    let grads: Vec<Option<Tensor4<T>>> = pv
        .weights
        .iter()
        .zip(&pv.biases)
        .flat_map(|(w, b)| [tape.take_grad(*w), tape.take_grad(*b)])
        .collect();
    opt.step(&mut net.params, &grads)?;
    Ok(row)
}

/// Trains a freshly initialized network on `data`.
pub fn train_on<T: Scalar>(
    cfg: &TrainConfig,
    data: &TrainingSet<T>,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let graph = build(cfg.variant, cfg.policy, cfg.channels)?;
    let mut net = PgtNet::<T>::init(graph, seed::derive(cfg.seed, "model", 0));
    let initial = net.params.clone();
    let mut opt = Optimizer::new(cfg.optimizer, net.params.tensors().count());
    let total = cfg.total_steps(data.len());
    let crop_hw = (cfg.crop_height > 0).then_some((cfg.crop_height, cfg.crop_width));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut trace = Vec::with_capacity(total);
    let mut after_phase1 = None;
    for step in 1..=total {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut seed::derived_rng(cfg.seed, "shuffle", epoch));
                epoch += 1;
                cursor = 0;
                if !idx.is_empty() {
                    break;
                }
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let mut rng = seed::derived_rng(cfg.seed, "crop", step as u64);
        let batch = data.batch(&idx, crop_hw, &mut rng)?;
        let phase = if step <= cfg.phase1_steps { 1 } else { 2 };
        let row = train_step(&mut net, &mut opt, &batch, cfg, step, phase)?;
        observer.on_step(&row);
        trace.push(row);
        if step == cfg.phase1_steps {
            after_phase1 = Some(net.params.clone());
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(step, &net, &opt)?;
        }
    }
    Ok(TrainOutcome {
        net,
        initial,
        after_phase1,
        trace,
        optimizer: opt,
    })
}

/// Files written by [`train_to_dir`].
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub weights: PathBuf,
    pub trace: PathBuf,
    pub rows: Vec<TraceRow>,
}

struct DirObserver<'a, P> {
    dir: &'a Path,
    cfg: &'a TrainConfig,
    progress: P,
}

impl<T: Scalar, P: FnMut(&TraceRow)> TrainObserver<T> for DirObserver<'_, P> {
    fn on_step(&mut self, row: &TraceRow) {
        (self.progress)(row);
    }

    fn on_checkpoint(&mut self, step: usize, net: &PgtNet<T>, opt: &Optimizer) -> Result<()> {
        let ck = Checkpoint::new(step as u64, net, opt, self.cfg);
        let path = self.dir.join(format!("checkpoint_{step:06}.pgtc"));
        fs::write(&path, ck.to_bytes()).map_err(|e| Error::io(&path, e))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads the dataset named by `cfg`, trains, and writes `trace.csv`,
/// `config.txt`, `model.pgtw`, `final.pgtc` and periodic checkpoints to `out`.
pub fn train_to_dir(
    cfg: &TrainConfig,
    out: &Path,
    progress: impl FnMut(&TraceRow),
) -> Result<TrainArtifacts> {
    cfg.validate()?;
    if cfg.dataset.is_empty() {
        return Err(Error::Config("no dataset given".into()));
    }
    let ds = Dataset::open(&cfg.dataset)?;
    let train = ds.load_split("train")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    let mut obs = DirObserver {
        dir: out,
        cfg,
        progress,
    };
    let (weights, checkpoint, rows) = match cfg.precision {
        Precision::F32 => finish(
            train_on::<f32>(cfg, &TrainingSet::from_triplets(&train)?, &mut obs)?,
            cfg,
        ),
        Precision::F64 => finish(
            train_on::<f64>(cfg, &TrainingSet::from_triplets(&train)?, &mut obs)?,
            cfg,
        ),
    };
    let art = TrainArtifacts {
        checkpoint: out.join("final.pgtc"),
        weights: out.join("model.pgtw"),
        trace: out.join("trace.csv"),
        rows,
    };
    write_file(&art.weights, &weights)?;
    write_file(&art.checkpoint, &checkpoint)?;
    write_file(&art.trace, write_csv(&art.rows).as_bytes())?;
    Ok(art)
}

fn finish<T: Scalar>(o: TrainOutcome<T>, cfg: &TrainConfig) -> (Vec<u8>, Vec<u8>, Vec<TraceRow>) {
    let step = o.trace.last().map_or(0, |r| r.step) as u64;
    let ck = Checkpoint::new(step, &o.net, &o.optimizer, cfg);
    (save_weights(&o.net), ck.to_bytes(), o.trace)
}
