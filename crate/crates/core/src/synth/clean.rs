//! Procedural clean fingerprints and adaptive binarization.
//!
//! A clean image is a ridge sinusoid laid along the normal of a smooth,
//! low-frequency orientation field, with a small elastic jitter. Ridges are
//! dark. The binary map marks ridges (sinusoid ≥ 0) with 1.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::GrayImage;
use crate::seed;

/// Knobs of the clean-fingerprint generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeParams {
    /// Ridge period range in pixels; one value is drawn per image.
    pub period_px: (f64, f64),
    /// Peak deviation of the orientation field from its base angle (radians).
    pub orientation_amplitude: f64,
    /// Peak elastic displacement in pixels.
    pub jitter_px: f64,
    /// Mean gray level and ridge/valley half-contrast before soft clipping.
    pub mid_level: f64,
    pub contrast: f64,
}

impl Default for RidgeParams {
    fn default() -> Self {
        RidgeParams {
            period_px: (6.0, 10.0),
            orientation_amplitude: 0.5,
            jitter_px: 0.8,
            mid_level: 0.55,
            contrast: 0.35,
        }
    }
}

impl RidgeParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.period_px;
        if !(4.0..=12.0).contains(&lo) || !(4.0..=12.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "ridge period range ({lo}, {hi}) must lie in [4, 12]"
            )));
        }
        if !(0.0..=1.0).contains(&self.mid_level) || self.contrast < 0.0 {
            return Err(Error::InvalidArgument("ridge levels out of range".into()));
        }
        Ok(())
    }
}

struct Wave {
    amp: f64,
    fy: f64,
    fx: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, y: f64, x: f64) -> f64 {
        self.amp * (self.fy * y + self.fx * x + self.phase).sin()
    }
}

/// Generates an aligned `(clean, binary)` pair. Pure function of its inputs.
pub fn generate_clean(
    seed_value: u64,
    height: usize,
    width: usize,
    params: &RidgeParams,
) -> Result<(GrayImage, GrayImage)> {
    if height < 8 || width < 8 || height * width < 32 * 32 {
        return Err(Error::InvalidArgument(format!(
            "fingerprint dims {height}x{width} too small (need ≥ 32·32 pixels, each side ≥ 8)"
        )));
    }
    params.validate()?;
    let mut rng = seed::rng(seed_value);
    let (plo, phi) = params.period_px;
    let period = if phi > plo {
        rng.gen_range(plo..phi)
    } else {
        plo
    };
    let base_angle = rng.gen_range(0.0..PI);
    let scale = height.max(width) as f64;

    let n_waves = rng.gen_range(2..=4);
    let waves: Vec<Wave> = (0..n_waves)
        .map(|_| Wave {
            amp: params.orientation_amplitude / n_waves as f64 * rng.gen_range(0.5..1.5),
            fy: rng.gen_range(-1.0..1.0) * 2.0 * PI / scale,
            fx: rng.gen_range(-1.0..1.0) * 2.0 * PI / scale,
            phase: rng.gen_range(0.0..2.0 * PI),
        })
        .collect();
    let jitter: Vec<Wave> = (0..2)
        .map(|_| Wave {
            amp: params.jitter_px,
            fy: rng.gen_range(-3.0..3.0) * 2.0 * PI / scale,
            fx: rng.gen_range(-3.0..3.0) * 2.0 * PI / scale,
            phase: rng.gen_range(0.0..2.0 * PI),
        })
        .collect();
    let shade = Wave {
        amp: 0.05,
        fy: rng.gen_range(-1.0..1.0) * PI / scale,
        fx: rng.gen_range(-1.0..1.0) * PI / scale,
        phase: rng.gen_range(0.0..2.0 * PI),
    };
    let phase0 = rng.gen_range(0.0..2.0 * PI);
    let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
    let k = 2.0 * PI / period;
    let gain = 2.5;
    let norm = (gain as f64).tanh();

    let mut clean = Vec::with_capacity(height * width);
    let mut binary = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64, x as f64);
            let yj = fy + jitter[0].at(fy, fx) - cy;
            let xj = fx + jitter[1].at(fy, fx) - cx;
            let theta = base_angle + waves.iter().map(|w| w.at(fy, fx)).sum::<f64>();
            // ridges run along theta; the sinusoid varies along its normal
            let s = (k * (-xj * theta.sin() + yj * theta.cos()) + phase0).sin();
            let mid = params.mid_level + shade.at(fy, fx);
            let v = mid - params.contrast * (gain * s).tanh() / norm;
            clean.push(v.clamp(0.0, 1.0));
            binary.push(if s >= 0.0 { 1.0 } else { 0.0 });
        }
    }
    Ok((
        GrayImage::new(height, width, clean)?,
        GrayImage::new(height, width, binary)?,
    ))
}

/// Adaptive local-mean threshold. A pixel darker than the mean of the
/// `block × block` window around it is a ridge (1). Windows keep their full
/// size near borders by shifting inward; on an axis shorter than `block` the
/// window spans that whole axis.
pub fn binarize(clean: &GrayImage, block: usize) -> Result<GrayImage> {
    let (h, w) = (clean.height(), clean.width());
    if block < 3 || block % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "binarize block must be odd and ≥ 3, got {block}"
        )));
    }
    if block > h.max(w) {
        return Err(Error::InvalidArgument(format!(
            "binarize block {block} larger than image {h}x{w}"
        )));
    }
    // summed-area table for O(1) window means
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += clean.get(y, x);
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let window = |c: usize, len: usize| -> (usize, usize) {
        let b = block.min(len);
        let start = c.saturating_sub(block / 2).min(len - b);
        (start, start + b)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = window(y, h);
        for x in 0..w {
            let (x0, x1) = window(x, w);
            let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
            // margin absorbs summed-area rounding on flat regions
            out.push(if clean.get(y, x) < mean - 1e-9 {
                1.0
            } else {
                0.0
            });
        }
    }
    GrayImage::new(h, w, out)
}
