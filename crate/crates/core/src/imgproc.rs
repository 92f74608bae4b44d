//! Grayscale images, the discrete Laplacian, Gaussian kernels and the
//! MSE / SSIM / PSNR quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// The fixed 3x3 Laplacian filter, row-major.
pub const LAPLACIAN_KERNEL: [[f64; 3]; 3] =
    [[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]];

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dims {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width} needs {} pixels, got {}",
                    height * width,
                    pixels.len()
                ),
            ));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} = {} outside [0,1]",
                pixels[i]
            )));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    /// Clamps every value into `[0, 1]`; NaN is rejected.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f64>) -> Result<Self> {
        if pixels.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Result<Self> {
        Self::new(height, width, vec![v; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut px = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                px.push(f(y, x));
            }
        }
        Self::new(height, width, px)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn same_dims(&self, other: &GrayImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Rounds every pixel to the nearest multiple of 1/255.
    pub fn quantized_u8(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.to_u8().into_iter().map(|b| b as f64 / 255.0).collect(),
        }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// A `(1, 1, height, width)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4::from_vec_unchecked(
            Shape4::new(1, 1, self.height, self.width),
            self.pixels.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    /// Reads plane `(n, c)` of a tensor, clamping into `[0, 1]`.
    pub fn from_tensor_plane<T: Scalar>(t: &Tensor4<T>, n: usize, c: usize) -> Result<Self> {
        let s = t.shape();
        Self::from_clamped(s.h, s.w, t.plane(n, c).iter().map(|v| v.to_f64()).collect())
    }
}

/// Border handling for the Laplacian filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianBorder {
    /// Zero padding; output has the input's dims.
    ZeroPad,
    /// Response kept only where the 3x3 window lies fully inside the image;
    /// border pixels of the output are zero.
    Interior,
}

/// Laplacian response of a `h × w` plane (zero padding), optionally masked to the interior.
pub fn laplacian_plane(src: &[f64], h: usize, w: usize, border: LaplacianBorder) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let interior = y >= 1 && y + 1 < h && x >= 1 && x + 1 < w;
            if border == LaplacianBorder::Interior && !interior {
                continue;
            }
            let mut acc = 0.0;
            for (dy, row) in LAPLACIAN_KERNEL.iter().enumerate() {
                let yy = y as isize + dy as isize - 1;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for (dx, &k) in row.iter().enumerate() {
                    let xx = x as isize + dx as isize - 1;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += k * src[yy as usize * w + xx as usize];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Real-valued `h × w` field, e.g. a filter response.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Field {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Convolves with [`LAPLACIAN_KERNEL`] using zero padding.
pub fn laplacian_filter(img: &GrayImage) -> Result<Field> {
    if img.height < 3 || img.width < 3 {
        return Err(Error::InvalidArgument(format!(
            "laplacian needs at least 3x3, got {}x{}",
            img.height, img.width
        )));
    }
    Ok(Field {
        height: img.height,
        width: img.width,
        data: laplacian_plane(&img.pixels, img.height, img.width, LaplacianBorder::ZeroPad),
    })
}

/// Square, normalized Gaussian kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2 {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Kernel2 {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.size + x]
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

/// Samples `exp(-(dx²+dy²)/(2σ²))` on a `size × size` grid and normalizes to sum 1.
pub fn gaussian_kernel(size: usize, stddev: f64) -> Result<Kernel2> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "gaussian kernel size must be odd, got {size}"
        )));
    }
    if !(stddev > 0.0) || !stddev.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian stddev must be > 0, got {stddev}"
        )));
    }
    let r = (size / 2) as isize;
    let mut data = Vec::with_capacity(size * size);
    for dy in -r..=r {
        for dx in -r..=r {
            data.push((-((dx * dx + dy * dy) as f64) / (2.0 * stddev * stddev)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    for v in &mut data {
        *v /= total;
    }
    Ok(Kernel2 { size, data })
}

/// Normalized 1-D Gaussian, used for separable SSIM windows.
pub fn gaussian_1d(size: usize, stddev: f64) -> Result<Vec<f64>> {
    if size == 0 || size % 2 == 0 || !(stddev > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gaussian window {size}, stddev {stddev}"
        )));
    }
    let r = (size / 2) as isize;
    let mut g: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * stddev * stddev)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    Ok(g)
}

fn check_same(x: &GrayImage, y: &GrayImage, op: &'static str) -> Result<()> {
    if !x.same_dims(y) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", x.height, x.width, y.height, y.width),
        ));
    }
    Ok(())
}

pub fn mse(x: &GrayImage, y: &GrayImage) -> Result<f64> {
    check_same(x, y, "mse")?;
    Ok(mse_slices(&x.pixels, &y.pixels))
}

pub(crate) fn mse_slices(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

/// PSNR in dB for unit dynamic range; `+∞` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(x: &GrayImage, y: &GrayImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

/// SSIM window and stabilizing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 7,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

/// Local statistics over every fully-inside window position.
struct SsimStats {
    oh: usize,
    ow: usize,
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
}

/// Separable valid correlation of a plane with `g` along both axes.
fn blur_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, gi) in g.iter().enumerate() {
                acc += gi * row[x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, gi) in g.iter().enumerate() {
            let src_row = &tmp[(y + i) * ow..(y + i + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += gi * s;
            }
        }
    }
    out
}

/// Transpose of [`blur_valid`]: scatters an `oh × ow` map back onto `h × w`.
fn blur_valid_adjoint(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        let s = &src[y * ow..(y + 1) * ow];
        for (i, gi) in g.iter().enumerate() {
            let dst = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
            for (d, v) in dst.iter_mut().zip(s) {
                *d += gi * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let s = &tmp[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, v) in s.iter().enumerate() {
            for (i, gi) in g.iter().enumerate() {
                dst[x + i] += gi * v;
            }
        }
    }
    out
}

fn ssim_stats(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64]) -> SsimStats {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mu_x = blur_valid(x, h, w, g);
    let mu_y = blur_valid(y, h, w, g);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mut var_x = blur_valid(&xx, h, w, g);
    let mut var_y = blur_valid(&yy, h, w, g);
    let mut cov = blur_valid(&xy, h, w, g);
    for i in 0..oh * ow {
        var_x[i] -= mu_x[i] * mu_x[i];
        var_y[i] -= mu_y[i] * mu_y[i];
        cov[i] -= mu_x[i] * mu_y[i];
    }
    SsimStats {
        oh,
        ow,
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov,
    }
}

fn check_window(h: usize, w: usize, cfg: &SsimConfig) -> Result<Vec<f64>> {
    if cfg.window > h || cfg.window > w {
        return Err(Error::InvalidArgument(format!(
            "ssim window {} does not fit {h}x{w}",
            cfg.window
        )));
    }
    gaussian_1d(cfg.window, cfg.sigma)
}

/// Mean SSIM over all valid window positions of two `h × w` planes.
pub fn ssim_planes(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_planes_with_grad(x, y, h, w, cfg, false)?.0)
}

/// Mean SSIM plus, optionally, its gradient with respect to `x`.
pub(crate) fn ssim_planes_with_grad(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::shape(
            "ssim",
            format!("planes must have {h}x{w} values"),
        ));
    }
    let g = check_window(h, w, cfg)?;
    let st = ssim_stats(x, y, h, w, &g);
    let n = st.oh * st.ow;
    let (c1, c2) = (cfg.c1, cfg.c2);
    let mut total = 0.0;
    // per-position coefficients of d S / d x_i = Σ_p w(i-p) [a_p + b_p x_i + c_p y_i]
    let (mut ca, mut cb, mut cc) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..n {
        let (mx, my) = (st.mu_x[p], st.mu_y[p]);
        let a1 = 2.0 * mx * my + c1;
        let a2 = 2.0 * st.cov[p] + c2;
        let b1 = mx * mx + my * my + c1;
        let b2 = st.var_x[p] + st.var_y[p] + c2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if want_grad {
            let d_mu = s * (2.0 * my / a1 - 2.0 * mx / b1);
            let d_var = -s / b2;
            let d_cov = 2.0 * s / a2;
            ca[p] = d_mu - 2.0 * mx * d_var - my * d_cov;
            cb[p] = 2.0 * d_var;
            cc[p] = d_cov;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return Ok((mean, None));
    }
    let inv = 1.0 / n as f64;
    let ga = blur_valid_adjoint(&ca, h, w, &g);
    let gb = blur_valid_adjoint(&cb, h, w, &g);
    let gc = blur_valid_adjoint(&cc, h, w, &g);
    let grad = (0..h * w)
        .map(|i| inv * (ga[i] + gb[i] * x[i] + gc[i] * y[i]))
        .collect();
    Ok((mean, Some(grad)))
}

pub fn ssim(x: &GrayImage, y: &GrayImage, cfg: &SsimConfig) -> Result<f64> {
    check_same(x, y, "ssim")?;
    ssim_planes(&x.pixels, &y.pixels, x.height, x.width, cfg)
}

/// MSE, SSIM and PSNR of one image pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub ssim: f64,
    /// `+∞` for identical images.
    pub psnr: f64,
}

impl MetricReport {
    pub fn compute(x: &GrayImage, y: &GrayImage, cfg: &SsimConfig) -> Result<Self> {
        let mse = mse(x, y)?;
        Ok(MetricReport {
            mse,
            ssim: ssim(x, y, cfg)?,
            psnr: psnr_from_mse(mse),
        })
    }

    /// Arithmetic mean of a set of reports; PSNR is averaged per image.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let (mut m, mut s, mut p) = (0.0, 0.0, 0.0);
        for r in reports {
            m += r.mse;
            s += r.ssim;
            p += r.psnr;
        }
        Some(MetricReport {
            mse: m / n,
            ssim: s / n,
            psnr: p / n,
        })
    }
}
