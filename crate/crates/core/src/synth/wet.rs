//! Wet-finger noise synthesis: darkening Gaussian stamps centered on ridge pixels.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{gaussian_kernel, GrayImage, Kernel2};
use crate::seed;

/// How each stamp's Gaussian is scaled before multiplying by the darkness value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StampNorm {
    /// Center weight 1; a stamp darkens its center pixel by `|darkness_value|`.
    Peak,
    /// Weights sum to 1; a stamp removes `|darkness_value|` of total intensity.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub kernel_sizes: Vec<usize>,
    pub kernel_stddev: f64,
    /// Per-ridge-pixel probability of a stamp.
    pub appearance_prob: f64,
    /// Base stamp gain; negative darkens.
    pub darkness: f64,
    /// Uniform jitter added to `darkness` per stamp.
    pub darkness_range: (f64, f64),
    pub stamp_norm: StampNorm,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            kernel_sizes: vec![13, 15, 17, 19, 21],
            kernel_stddev: 1.0,
            appearance_prob: 0.2,
            darkness: -0.2,
            darkness_range: (-0.01, 0.01),
            stamp_norm: StampNorm::Peak,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() {
            return Err(Error::InvalidArgument("no noise kernel sizes".into()));
        }
        if let Some(s) = self.kernel_sizes.iter().find(|&&s| s == 0 || s % 2 == 0) {
            return Err(Error::InvalidArgument(format!(
                "noise kernel size {s} must be odd"
            )));
        }
        if !(self.kernel_stddev > 0.0) {
            return Err(Error::InvalidArgument(
                "noise kernel stddev must be > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.appearance_prob) {
            return Err(Error::InvalidArgument(format!(
                "appearance probability {} outside [0,1]",
                self.appearance_prob
            )));
        }
        let (lo, hi) = self.darkness_range;
        if !self.darkness.is_finite() || !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "bad darkness {} / range ({lo}, {hi})",
                self.darkness
            )));
        }
        Ok(())
    }

    /// Largest stamp radius; pixels farther than this from every stamp center are untouched.
    pub fn halo(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(1) / 2
    }
}

/// One applied stamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stamp {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub darkness: f64,
}

/// Wet image plus the stamps that produced it.
#[derive(Debug, Clone)]
pub struct WetSynthesis {
    pub image: GrayImage,
    pub stamps: Vec<Stamp>,
    pub ridge_pixels: usize,
}

/// Scans ridge pixels in row-major order; each independently receives a stamp
/// with probability `appearance_prob`. A stamp adds `kernel · darkness_value`
/// onto the patch centered at the pixel (clipped at borders). Stamps
/// accumulate; the result is clamped to `[0, 1]` once at the end.
pub fn synthesize_wet_logged(
    clean: &GrayImage,
    binary: &GrayImage,
    params: &NoiseParams,
    seed_value: u64,
) -> Result<WetSynthesis> {
    params.validate()?;
    if !clean.same_dims(binary) {
        return Err(Error::shape(
            "synthesize_wet",
            "clean and binary dims differ",
        ));
    }
    let (h, w) = (clean.height(), clean.width());
    let kernels: Vec<Kernel2> = params
        .kernel_sizes
        .iter()
        .map(|&s| {
            let mut k = gaussian_kernel(s, params.kernel_stddev)?;
            if params.stamp_norm == StampNorm::Peak {
                let c = k.get(k.radius(), k.radius());
                k.data.iter_mut().for_each(|v| *v /= c);
            }
            Ok(k)
        })
        .collect::<Result<_>>()?;
    let mut rng = seed::rng(seed_value);
    let mut acc = clean.pixels().to_vec();
    let mut stamps = Vec::new();
    let mut ridge_pixels = 0;
    let (lo, hi) = params.darkness_range;
    for y in 0..h {
        for x in 0..w {
            if binary.get(y, x) < 0.5 {
                continue;
            }
            ridge_pixels += 1;
            if !rng.gen_bool(params.appearance_prob) {
                continue;
            }
            let ki = rng.gen_range(0..kernels.len());
            let jitter = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let dv = params.darkness + jitter;
            let k = &kernels[ki];
            let r = k.radius() as isize;
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc[yy as usize * w + xx as usize] +=
                        dv * k.get((dy + r) as usize, (dx + r) as usize);
                }
            }
            stamps.push(Stamp {
                y,
                x,
                size: k.size,
                darkness: dv,
            });
        }
    }
    Ok(WetSynthesis {
        image: GrayImage::from_clamped(h, w, acc)?,
        stamps,
        ridge_pixels,
    })
}

pub fn synthesize_wet(
    clean: &GrayImage,
    binary: &GrayImage,
    params: &NoiseParams,
    seed_value: u64,
) -> Result<GrayImage> {
    Ok(synthesize_wet_logged(clean, binary, params, seed_value)?.image)
}
