//! Flat `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors. [`TrainConfig::to_text`] writes every key, and parsing that text
//! yields an equal config.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imgproc::LaplacianBorder;
use crate::model::{ScalingPolicy, Variant};
use crate::train::loss::LossConfig;
use crate::train::optim::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub policy: ScalingPolicy,
    pub channels: usize,
    pub precision: Precision,
    /// Manifest file or dataset directory.
    pub dataset: String,
    pub epochs: usize,
    /// Caps the optimizer steps when non-zero.
    pub max_steps: usize,
    pub batch_size: usize,
    /// Optimizer steps restricted to the phase-1 parameters (multitask only).
    pub phase1_steps: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Train on seeded random crops of this size; 0 uses the full image.
    pub crop_height: usize,
    pub crop_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Block84Multitask,
            policy: ScalingPolicy::proposed(),
            channels: 16,
            precision: Precision::F32,
            dataset: String::new(),
            epochs: 1,
            max_steps: 0,
            batch_size: 4,
            phase1_steps: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            crop_height: 0,
            crop_width: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "variant",
    "policy",
    "channels",
    "precision",
    "dataset",
    "epochs",
    "max_steps",
    "batch_size",
    "phase1_steps",
    "optimizer",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "w_mse",
    "w_lap",
    "w_ssim",
    "w_binary_task",
    "w_main_task",
    "ssim_window",
    "ssim_sigma",
    "ssim_c1",
    "ssim_c2",
    "lap_border",
    "checkpoint_every",
    "crop_height",
    "crop_width",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn policy_text(p: &ScalingPolicy) -> String {
    use crate::model::PolicyKind;
    match p.kind {
        PolicyKind::Proposed => format!("proposed:{}", p.alpha),
        PolicyKind::ProposedShifted => format!("proposed_shifted:{}", p.alpha),
        PolicyKind::AllPositive => format!("all_positive:{}", p.alpha),
    }
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => {
                self.variant = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "policy" => self.policy = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "channels" => self.channels = num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => {
                        return Err(Error::Config(format!(
                            "precision must be f32 or f64, got {v:?}"
                        )))
                    }
                }
            }
            "dataset" => self.dataset = v.to_string(),
            "epochs" => self.epochs = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "phase1_steps" => self.phase1_steps = num(key, v)?,
            "optimizer" => self.optimizer.kind = v.parse::<OptimizerKind>()?,
            "learning_rate" => self.optimizer.learning_rate = num(key, v)?,
            "beta1" => self.optimizer.beta1 = num(key, v)?,
            "beta2" => self.optimizer.beta2 = num(key, v)?,
            "adam_eps" => self.optimizer.eps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "w_mse" => self.loss.weights.w_mse = num(key, v)?,
            "w_lap" => self.loss.weights.w_lap = num(key, v)?,
            "w_ssim" => self.loss.weights.w_ssim = num(key, v)?,
            "w_binary_task" => self.loss.weights.w_binary_task = num(key, v)?,
            "w_main_task" => self.loss.weights.w_main_task = num(key, v)?,
            "ssim_window" => self.loss.ssim.window = num(key, v)?,
            "ssim_sigma" => self.loss.ssim.sigma = num(key, v)?,
            "ssim_c1" => self.loss.ssim.c1 = num(key, v)?,
            "ssim_c2" => self.loss.ssim.c2 = num(key, v)?,
            "lap_border" => {
                self.loss.lap_border = match v {
                    "zero_pad" => LaplacianBorder::ZeroPad,
                    "interior" => LaplacianBorder::Interior,
                    _ => {
                        return Err(Error::Config(format!(
                            "lap_border must be zero_pad or interior, got {v:?}"
                        )))
                    }
                }
            }
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "crop_height" => self.crop_height = num(key, v)?,
            "crop_width" => self.crop_width = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    lineno + 1
                )));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.channels < 8 {
            return Err(Error::Config("channels must be ≥ 8".into()));
        }
        if self.phase1_steps > 0 && !self.variant.is_multitask() {
            return Err(Error::Config(format!(
                "phase1_steps applies only to multitask, not {}",
                self.variant
            )));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if (self.crop_height == 0) != (self.crop_width == 0) {
            return Err(Error::Config(
                "set both crop_height and crop_width, or neither".into(),
            ));
        }
        Ok(())
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let w = &self.loss.weights;
        let s = &self.loss.ssim;
        let o = &self.optimizer;
        let mut t = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(t, "{k} = {v}");
        };
        kv("variant", self.variant.to_string());
        kv("policy", policy_text(&self.policy));
        kv("channels", self.channels.to_string());
        kv(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .into(),
        );
        kv("dataset", self.dataset.clone());
        kv("epochs", self.epochs.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("phase1_steps", self.phase1_steps.to_string());
        kv("optimizer", o.kind.to_string());
        kv("learning_rate", o.learning_rate.to_string());
        kv("beta1", o.beta1.to_string());
        kv("beta2", o.beta2.to_string());
        kv("adam_eps", o.eps.to_string());
        kv("seed", self.seed.to_string());
        kv("w_mse", w.w_mse.to_string());
        kv("w_lap", w.w_lap.to_string());
        kv("w_ssim", w.w_ssim.to_string());
        kv("w_binary_task", w.w_binary_task.to_string());
        kv("w_main_task", w.w_main_task.to_string());
        kv("ssim_window", s.window.to_string());
        kv("ssim_sigma", s.sigma.to_string());
        kv("ssim_c1", s.c1.to_string());
        kv("ssim_c2", s.c2.to_string());
        kv(
            "lap_border",
            match self.loss.lap_border {
                LaplacianBorder::ZeroPad => "zero_pad",
                LaplacianBorder::Interior => "interior",
            }
            .into(),
        );
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("crop_height", self.crop_height.to_string());
        kv("crop_width", self.crop_width.to_string());
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let mut c = TrainConfig::default();
        c.dataset = "data/manifest.json".into();
        c.policy = ScalingPolicy::all_positive(85.0);
        c.optimizer.learning_rate = 3e-4;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        let text = c.to_text();
        let keys: Vec<&str> = text
            .lines()
            .map(|l| l.split(" = ").next().unwrap())
            .collect();
        assert_eq!(keys, CONFIG_KEYS);
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        assert!(TrainConfig::parse("colour = red").is_err());
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("variant = edge\nphase1_steps = 3").is_err());
        assert!(TrainConfig::parse("epochs = many").is_err());
        let c = TrainConfig::parse("# comment\n\nseed = 7  # trailing\n").unwrap();
        assert_eq!(c.seed, 7);
    }
}
