//! Composite restoration loss.
//!
//! Per task: `w_mse·MSE + w_lap·Lap + w_ssim·(1 − SSIM)`. Across tasks:
//! `w_binary_task·binary + w_main_task·main`. MSE and SSIM are means; the
//! Laplacian term is a sum of squared filter differences divided by the
//! batch size only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Function, Tape, Var};
use crate::error::{Error, Result};
use crate::imgproc::{
    laplacian_plane, mse_slices, ssim_planes_with_grad, LaplacianBorder, SsimConfig,
};
use crate::tensor::{Scalar, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_mse: f64,
    pub w_lap: f64,
    pub w_ssim: f64,
    pub w_binary_task: f64,
    pub w_main_task: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_mse: 0.1,
            w_lap: 0.2,
            w_ssim: 0.7,
            w_binary_task: 0.3,
            w_main_task: 0.7,
        }
    }
}

/// Everything that shapes the loss value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub lap_border: LaplacianBorder,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            ssim: SsimConfig::default(),
            lap_border: LaplacianBorder::ZeroPad,
        }
    }
}

fn check_pair<T: Scalar>(op: &'static str, inputs: &[&Tensor4<T>]) -> Result<Shape4> {
    let [x, y] = inputs else {
        return Err(Error::InvalidArgument(format!("{op} takes two inputs")));
    };
    if x.shape() != y.shape() {
        return Err(Error::shape(op, format!("{} vs {}", x.shape(), y.shape())));
    }
    Ok(x.shape())
}

fn to_f64<T: Scalar>(t: &Tensor4<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64()).collect()
}

fn from_f64<T: Scalar>(shape: Shape4, v: Vec<f64>) -> Tensor4<T> {
    Tensor4::from_vec_unchecked(shape, v.into_iter().map(T::from_f64).collect())
}

/// Gradient for both inputs when the loss depends on `x − y` only.
fn antisymmetric<T: Scalar>(shape: Shape4, gx: Vec<f64>) -> Vec<Option<Tensor4<T>>> {
    let gy = gx.iter().map(|v| -v).collect();
    vec![Some(from_f64(shape, gx)), Some(from_f64(shape, gy))]
}

/// Mean squared error over every element.
pub struct Mse;

impl<T: Scalar> Function<T> for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn forward(&self, inputs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
        check_pair("mse", inputs)?;
        Ok(Tensor4::scalar(T::from_f64(mse_slices(
            &to_f64(inputs[0]),
            &to_f64(inputs[1]),
        ))))
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _: &Tensor4<T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let s = inputs[0].shape();
        let k = 2.0 * g.data()[0].to_f64() / s.len() as f64;
        let gx = inputs[0]
            .data()
            .iter()
            .zip(inputs[1].data())
            .map(|(a, b)| k * (a.to_f64() - b.to_f64()))
            .collect();
        Ok(antisymmetric(s, gx))
    }
}

/// `Σ (Lap(x) − Lap(y))² / batch`, per plane.
pub struct LaplacianLoss {
    pub border: LaplacianBorder,
}

impl LaplacianLoss {
    fn residual_maps(&self, s: Shape4, x: &[f64], y: &[f64]) -> Vec<Vec<f64>> {
        let p = s.plane();
        (0..s.n * s.c)
            .map(|i| {
                let d: Vec<f64> = x[i * p..(i + 1) * p]
                    .iter()
                    .zip(&y[i * p..(i + 1) * p])
                    .map(|(a, b)| a - b)
                    .collect();
                laplacian_plane(&d, s.h, s.w, self.border)
            })
            .collect()
    }
}

impl<T: Scalar> Function<T> for LaplacianLoss {
    fn name(&self) -> &'static str {
        "laplacian_loss"
    }

    fn forward(&self, inputs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
        let s = check_pair("laplacian_loss", inputs)?;
        let maps = self.residual_maps(s, &to_f64(inputs[0]), &to_f64(inputs[1]));
        let total: f64 = maps.iter().flatten().map(|v| v * v).sum();
        Ok(Tensor4::scalar(T::from_f64(total / s.n as f64)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _: &Tensor4<T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let s = inputs[0].shape();
        let k = 2.0 * g.data()[0].to_f64() / s.n as f64;
        let maps = self.residual_maps(s, &to_f64(inputs[0]), &to_f64(inputs[1]));
        // the kernel is symmetric, so the zero-padded filter is its own adjoint
        let gx = maps
            .iter()
            .flat_map(|m| laplacian_plane(m, s.h, s.w, LaplacianBorder::ZeroPad))
            .map(|v| k * v)
            .collect();
        Ok(antisymmetric(s, gx))
    }
}

/// `1 − mean_planes SSIM(x, y)`; only `x` receives a gradient.
pub struct SsimLoss {
    pub cfg: SsimConfig,
}

impl<T: Scalar> Function<T> for SsimLoss {
    fn name(&self) -> &'static str {
        "ssim_loss"
    }

    fn forward(&self, inputs: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
        let s = check_pair("ssim_loss", inputs)?;
        let (x, y) = (to_f64(inputs[0]), to_f64(inputs[1]));
        let p = s.plane();
        let mut acc = 0.0;
        for i in 0..s.n * s.c {
            let r = i * p..(i + 1) * p;
            acc += ssim_planes_with_grad(&x[r.clone()], &y[r], s.h, s.w, &self.cfg, false)?.0;
        }
        Ok(Tensor4::scalar(T::from_f64(1.0 - acc / (s.n * s.c) as f64)))
    }

    fn backward(
        &self,
        inputs: &[&Tensor4<T>],
        _: &Tensor4<T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let s = inputs[0].shape();
        let (x, y) = (to_f64(inputs[0]), to_f64(inputs[1]));
        let p = s.plane();
        let planes = (s.n * s.c) as f64;
        let k = -g.data()[0].to_f64() / planes;
        let mut gx = Vec::with_capacity(s.len());
        for i in 0..s.n * s.c {
            let r = i * p..(i + 1) * p;
            let (_, grad) = ssim_planes_with_grad(&x[r.clone()], &y[r], s.h, s.w, &self.cfg, true)?;
            gx.extend(grad.unwrap_or_default().into_iter().map(|v| k * v));
        }
        Ok(vec![Some(from_f64(s, gx)), None])
    }
}

/// Tape nodes of one task's loss.
#[derive(Debug, Clone, Copy)]
pub struct TaskTerms {
    pub mse: Var,
    pub lap: Var,
    /// `1 − SSIM`.
    pub ssim: Var,
    pub total: Var,
}

pub fn mse_loss<T: Scalar>(tape: &Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    tape.apply(Box::new(Mse), &[pred, gt])
}

pub fn laplacian_loss<T: Scalar>(
    tape: &Tape<T>,
    pred: Var,
    gt: Var,
    border: LaplacianBorder,
) -> Result<Var> {
    tape.apply(Box::new(LaplacianLoss { border }), &[pred, gt])
}

pub fn ssim_loss<T: Scalar>(tape: &Tape<T>, pred: Var, gt: Var, cfg: SsimConfig) -> Result<Var> {
    tape.apply(Box::new(SsimLoss { cfg }), &[pred, gt])
}

pub fn single_task_loss<T: Scalar>(
    tape: &Tape<T>,
    pred: Var,
    gt: Var,
    cfg: &LossConfig,
) -> Result<TaskTerms> {
    let w = &cfg.weights;
    let mse = mse_loss(tape, pred, gt)?;
    let lap = laplacian_loss(tape, pred, gt, cfg.lap_border)?;
    let ssim = ssim_loss(tape, pred, gt, cfg.ssim)?;
    let total = tape.weighted_sum(&[(mse, w.w_mse), (lap, w.w_lap), (ssim, w.w_ssim)])?;
    Ok(TaskTerms {
        mse,
        lap,
        ssim,
        total,
    })
}

/// Tape nodes of the full objective.
#[derive(Debug, Clone, Copy)]
pub struct TotalTerms {
    pub binary: Option<TaskTerms>,
    pub main: Option<TaskTerms>,
    pub total: Var,
}

/// `w_binary_task·binary + w_main_task·main`. With one task present its
/// single-task loss is the total, unweighted.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    binary: Option<(Var, Var)>,
    main: Option<(Var, Var)>,
    cfg: &LossConfig,
) -> Result<TotalTerms> {
    let b = binary
        .map(|(p, g)| single_task_loss(tape, p, g, cfg))
        .transpose()?;
    let m = main
        .map(|(p, g)| single_task_loss(tape, p, g, cfg))
        .transpose()?;
    let total = match (&b, &m) {
        (Some(b), Some(m)) => tape.weighted_sum(&[
            (b.total, cfg.weights.w_binary_task),
            (m.total, cfg.weights.w_main_task),
        ])?,
        (Some(t), None) | (None, Some(t)) => t.total,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "total_loss needs at least one task".into(),
            ))
        }
    };
    Ok(TotalTerms {
        binary: b,
        main: m,
        total,
    })
}

/// Plain values of one task's terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValues {
    pub mse: f64,
    pub lap: f64,
    pub ssim: f64,
    pub total: f64,
}

impl TermValues {
    pub fn read<T: Scalar>(tape: &Tape<T>, t: &TaskTerms) -> Self {
        TermValues {
            mse: tape.item(t.mse),
            lap: tape.item(t.lap),
            ssim: tape.item(t.ssim),
            total: tape.item(t.total),
        }
    }

    /// Terms of `pred` against `gt` without keeping a tape around.
    pub fn compute<T: Scalar>(
        pred: &Tensor4<T>,
        gt: &Tensor4<T>,
        cfg: &LossConfig,
    ) -> Result<Self> {
        let tape = Tape::new();
        let p = tape.constant(pred.clone())?;
        let g = tape.constant(gt.clone())?;
        let t = single_task_loss(&tape, p, g, cfg)?;
        Ok(Self::read(&tape, &t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(vals: impl Fn(usize) -> f64) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, 9, 11], (0..99).map(vals).collect()).unwrap()
    }

    #[test]
    fn identical_pair_is_zero() {
        let x = img(|i| (i % 13) as f64 / 13.0);
        let t = TermValues::compute(&x, &x, &LossConfig::default()).unwrap();
        assert_eq!((t.mse, t.lap, t.ssim, t.total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn constant_pair_lap_interior() {
        let cfg = LossConfig {
            lap_border: LaplacianBorder::Interior,
            ..LossConfig::default()
        };
        let t = TermValues::compute(&img(|_| 0.2), &img(|_| 0.7), &cfg).unwrap();
        assert!(t.lap.abs() < 1e-20);
        assert!((t.mse - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mse_only_weights() {
        let cfg = LossConfig {
            weights: LossWeights {
                w_mse: 1.0,
                w_lap: 0.0,
                w_ssim: 0.0,
                ..LossWeights::default()
            },
            ..LossConfig::default()
        };
        let (x, y) = (img(|i| (i % 5) as f64 / 5.0), img(|i| (i % 7) as f64 / 7.0));
        let t = TermValues::compute(&x, &y, &cfg).unwrap();
        assert_eq!(t.total, t.mse);
    }

    #[test]
    fn ssim_loss_in_range() {
        let (x, y) = (img(|i| (i % 2) as f64), img(|i| 1.0 - (i % 2) as f64));
        let t = TermValues::compute(&x, &y, &LossConfig::default()).unwrap();
        assert!(t.ssim > 1.0 && t.ssim <= 2.0, "{}", t.ssim);
    }
}
