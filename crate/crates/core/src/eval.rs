//! Test-split evaluation tables and single-image denoising.

use std::fmt::Write as _;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgproc::{GrayImage, MetricReport, SsimConfig};
use crate::model::{DType, ModelGraph, Outputs, PgtNet, WeightFile, WEIGHTS_MAGIC};
use crate::quant::QuantizedModel;
use crate::synth::SampleTriplet;
use crate::tensor::{stack_batch, Scalar, Tensor4};
use crate::train::{Checkpoint, CHECKPOINT_MAGIC};

pub const NO_ENHANCE: &str = "No enhance";
pub const EVAL_HEADER: &str =
    "model,mse,ssim,psnr,mse_improvement_pct,ssim_improvement_pct,psnr_improvement_pct";

/// Images per forward call during evaluation.
const EVAL_BATCH: usize = 8;

/// `(result − baseline) / baseline · 100`; 0 when both are equal (including both infinite or zero).
pub fn improvement_pct(result: f64, baseline: f64) -> f64 {
    if result == baseline {
        0.0
    } else {
        (result - baseline) / baseline * 100.0
    }
}

/// One table row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub metrics: MetricReport,
    pub mse_improvement_pct: f64,
    pub ssim_improvement_pct: f64,
    pub psnr_improvement_pct: f64,
}

impl EvalRow {
    /// Commas, quotes and line breaks in `label` become `_` so the CSV needs no quoting.
    pub fn new(label: impl Into<String>, metrics: MetricReport, baseline: &MetricReport) -> Self {
        EvalRow {
            label: label.into().replace([',', '"', '\n', '\r'], "_"),
            metrics,
            mse_improvement_pct: improvement_pct(metrics.mse, baseline.mse),
            ssim_improvement_pct: improvement_pct(metrics.ssim, baseline.ssim),
            psnr_improvement_pct: improvement_pct(metrics.psnr, baseline.psnr),
        }
    }
}

/// Evaluation table; the first row is always the no-enhance baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn new(baseline: MetricReport) -> Self {
        EvalTable {
            rows: vec![EvalRow::new(NO_ENHANCE, baseline, &baseline)],
        }
    }

    pub fn baseline(&self) -> &MetricReport {
        &self.rows[0].metrics
    }

    pub fn push(&mut self, label: impl Into<String>, metrics: MetricReport) {
        let row = EvalRow::new(label, metrics, self.baseline());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.label,
                r.metrics.mse,
                r.metrics.ssim,
                r.metrics.psnr,
                r.mse_improvement_pct,
                r.ssim_improvement_pct,
                r.psnr_improvement_pct
            );
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(EVAL_HEADER) {
            return Err(Error::Format("eval CSV header mismatch".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!(
                    "eval CSV row {} has {} fields",
                    i + 1,
                    f.len()
                )));
            }
            let num = |j: usize| {
                f[j].parse::<f64>().map_err(|_| {
                    Error::Format(format!("eval CSV row {}: bad number {:?}", i + 1, f[j]))
                })
            };
            rows.push(EvalRow {
                label: f[0].to_string(),
                metrics: MetricReport {
                    mse: num(1)?,
                    ssim: num(2)?,
                    psnr: num(3)?,
                },
                mse_improvement_pct: num(4)?,
                ssim_improvement_pct: num(5)?,
                psnr_improvement_pct: num(6)?,
            });
        }
        if rows.first().map(|r| r.label.as_str()) != Some(NO_ENHANCE) {
            return Err(Error::Format(
                "eval CSV does not start with the baseline row".into(),
            ));
        }
        Ok(EvalTable { rows })
    }

    pub fn to_text(&self) -> String {
        let w = self
            .rows
            .iter()
            .map(|r| r.label.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut s = format!(
            "{:<w$}  {:>10}  {:>8}  {:>8}  {:>9}  {:>9}  {:>9}\n",
            "model", "MSE", "SSIM", "PSNR", "MSE %", "SSIM %", "PSNR %"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>10.6}  {:>8.4}  {:>8.3}  {:>+9.2}  {:>+9.2}  {:>+9.2}",
                r.label,
                r.metrics.mse,
                r.metrics.ssim,
                r.metrics.psnr,
                r.mse_improvement_pct,
                r.ssim_improvement_pct,
                r.psnr_improvement_pct
            );
        }
        s
    }
}

/// Mean metrics of the noisy inputs against the clean targets.
pub fn no_enhance(samples: &[SampleTriplet], cfg: &SsimConfig) -> Result<MetricReport> {
    let reports = samples
        .iter()
        .map(|t| MetricReport::compute(&t.noisy, &t.clean, cfg))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::mean(&reports)
        .ok_or_else(|| Error::InvalidArgument("no samples to evaluate".into()))
}

/// Mean metrics of `predict` (a batch → clamped main-output map) against the clean targets.
pub fn evaluate_with<T: Scalar>(
    samples: &[SampleTriplet],
    cfg: &SsimConfig,
    mut predict: impl FnMut(&Tensor4<T>) -> Result<Tensor4<T>>,
) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = stack_batch(
            &chunk
                .iter()
                .map(|t| t.noisy.to_tensor::<T>())
                .collect::<Vec<_>>(),
        )?;
        let y = predict(&x)?;
        if y.shape().n != chunk.len() || y.shape().h != x.shape().h || y.shape().w != x.shape().w {
            return Err(Error::shape(
                "evaluate",
                format!("prediction {} for input {}", y.shape(), x.shape()),
            ));
        }
        for (i, t) in chunk.iter().enumerate() {
            let out = GrayImage::from_tensor_plane(&y, i, 0)?;
            reports.push(MetricReport::compute(&out, &t.clean, cfg)?);
        }
    }
    MetricReport::mean(&reports)
        .ok_or_else(|| Error::InvalidArgument("no samples to evaluate".into()))
}

pub fn evaluate_net<T: Scalar>(
    net: &PgtNet<T>,
    samples: &[SampleTriplet],
    cfg: &SsimConfig,
) -> Result<MetricReport> {
    evaluate_with(samples, cfg, |x| Ok(net.infer(x)?.main()?.clone()))
}

/// Denoised image and, for multitask models, the binary-branch map.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub image: GrayImage,
    pub binary: Option<GrayImage>,
}

pub fn denoise<T: Scalar>(net: &PgtNet<T>, noisy: &GrayImage) -> Result<Denoised> {
    let out = net.infer(&noisy.to_tensor())?;
    Ok(Denoised {
        image: GrayImage::from_tensor_plane(out.main()?, 0, 0)?,
        binary: out
            .binary
            .as_ref()
            .map(|b| GrayImage::from_tensor_plane(b, 0, 0))
            .transpose()?,
    })
}

/// A model read from disk in whichever form it was stored.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(PgtNet<f32>),
    F64(PgtNet<f64>),
    Quantized(QuantizedModel),
}

impl AnyModel {
    /// Parses a weight file (float or fixed-point) or a training checkpoint.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file = if bytes.starts_with(CHECKPOINT_MAGIC) {
            WeightFile::from_bytes(&Checkpoint::from_bytes(bytes)?.weights)?
        } else if bytes.starts_with(WEIGHTS_MAGIC) {
            WeightFile::from_bytes(bytes)?
        } else {
            return Err(Error::Format("not a weight file or checkpoint".into()));
        };
        match file.dtype() {
            Some(DType::F32) => Ok(AnyModel::F32(file.to_net()?)),
            Some(DType::F64) => Ok(AnyModel::F64(file.to_net()?)),
            Some(DType::Fixed { .. }) => Ok(AnyModel::Quantized(QuantizedModel::from_weight_file(
                &file,
            )?)),
            None => Err(Error::Format("weight file mixes element types".into())),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn graph(&self) -> &ModelGraph {
        match self {
            AnyModel::F32(n) => &n.graph,
            AnyModel::F64(n) => &n.graph,
            AnyModel::Quantized(q) => &q.graph,
        }
    }

    /// Inference outputs in `f64`, main output clamped to `[0, 1]`.
    pub fn infer(&self, x: &Tensor4<f64>) -> Result<Outputs<Tensor4<f64>>> {
        let up = |o: Outputs<Tensor4<f32>>| Outputs {
            binary: o.binary.map(|t| t.cast()),
            main: o.main.map(|t| t.cast()),
        };
        match self {
            AnyModel::F32(n) => Ok(up(n.infer(&x.cast())?)),
            AnyModel::F64(n) => n.infer(x),
            AnyModel::Quantized(q) => q.infer(x),
        }
    }

    pub fn evaluate(&self, samples: &[SampleTriplet], cfg: &SsimConfig) -> Result<MetricReport> {
        match self {
            AnyModel::F32(n) => evaluate_net(n, samples, cfg),
            _ => evaluate_with(samples, cfg, |x| Ok(self.infer(x)?.main()?.clone())),
        }
    }

    pub fn denoise(&self, noisy: &GrayImage) -> Result<Denoised> {
        let out = self.infer(&noisy.to_tensor())?;
        Ok(Denoised {
            image: GrayImage::from_tensor_plane(out.main()?, 0, 0)?,
            binary: out
                .binary
                .as_ref()
                .map(|b| GrayImage::from_tensor_plane(b, 0, 0))
                .transpose()?,
        })
    }
}
