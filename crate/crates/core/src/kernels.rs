//! Forward and backward kernels shared by the taped and eager execution paths.
//!
//! 3×3 same-padded convolutions run on a direct kernel; every other shape is
//! lowered to im2col followed by a single GEMM per batch item.
//! All loops run in a fixed order, so results are bit-reproducible.

use crate::conv3x3;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Spatial padding mode for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves spatial dims (odd kernels only).
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_y: usize,
    pad_x: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    fn is_same3x3(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.pad_x == 1 && self.pad_y == 1
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad_x == 0 && self.pad_y == 0
    }
}

fn conv_geom(input: Shape4, weight: Shape4, bias_len: usize, padding: Padding) -> Result<ConvGeom> {
    if input.c != weight.c {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, kernel expects {}",
                input.c, weight.c
            ),
        ));
    }
    if bias_len != weight.n {
        return Err(Error::shape(
            "conv2d",
            format!(
                "bias has {bias_len} entries for {} output channels",
                weight.n
            ),
        ));
    }
    if input.h == 0 || input.w == 0 || weight.h == 0 || weight.w == 0 {
        return Err(Error::shape("conv2d", "zero-sized spatial dims"));
    }
    let (kh, kw) = (weight.h, weight.w);
    let (oh, ow, pad_y, pad_x) = match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "same padding needs odd kernel, got {kh}x{kw}"
                )));
            }
            (input.h, input.w, kh / 2, kw / 2)
        }
        Padding::Valid => {
            if kh > input.h || kw > input.w {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than input {}x{}", input.h, input.w),
                ));
            }
            (input.h - kh + 1, input.w - kw + 1, 0, 0)
        }
    };
    Ok(ConvGeom {
        cin: input.c,
        kh,
        kw,
        h: input.h,
        w: input.w,
        oh,
        ow,
        pad_y,
        pad_x,
    })
}

/// Unfolds one batch item (`cin × h × w`) into a `K × P` column matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut col[row..row + p];
                // valid output columns for this kx: ix = ox + kx - pad_x in [0, w)
                let ox_lo = g.pad_x.saturating_sub(kx);
                let ox_hi = (g.w + g.pad_x).saturating_sub(kx).min(g.ow);
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = oy + ky;
                    if iy < g.pad_y || iy - g.pad_y >= g.h || ox_lo >= ox_hi {
                        line.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[(iy - g.pad_y) * g.w..(iy - g.pad_y + 1) * g.w];
                    line[..ox_lo].fill(T::ZERO);
                    let ix_lo = ox_lo + kx - g.pad_x;
                    line[ox_lo..ox_hi].copy_from_slice(&src[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    line[ox_hi..].fill(T::ZERO);
                }
            }
        }
    }
}

/// Folds a `K × P` column gradient back onto an input gradient plane set (accumulating).
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let src = &col[row..row + p];
                let ox_lo = g.pad_x.saturating_sub(kx);
                let ox_hi = (g.w + g.pad_x).saturating_sub(kx).min(g.ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = oy + ky;
                    if iy < g.pad_y || iy - g.pad_y >= g.h {
                        continue;
                    }
                    let line = &src[oy * g.ow + ox_lo..oy * g.ow + ox_hi];
                    let ix_lo = ox_lo + kx - g.pad_x;
                    let dst = &mut plane[(iy - g.pad_y) * g.w + ix_lo..];
                    for (d, &s) in dst.iter_mut().zip(line) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation: `weight` is `(out_c, in_c, kh, kw)`, `bias` has `out_c` entries.
pub fn conv2d<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: &[T],
    padding: Padding,
) -> Result<Tensor4<T>> {
    let s = input.shape();
    let ws = weight.shape();
    let g = conv_geom(s, ws, bias.len(), padding)?;
    let (k, p, cout) = (g.k(), g.p(), ws.n);
    if g.is_same3x3() {
        let out = conv3x3::forward(input.data(), s.n, s.c, s.h, s.w, weight.data(), bias);
        return Ok(Tensor4::from_vec_unchecked(
            Shape4::new(s.n, cout, s.h, s.w),
            out,
        ));
    }
    let mut out = vec![T::ZERO; s.n * cout * p];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; k * p]
    };
    for n in 0..s.n {
        let x = &input.data()[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
        let b: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        let o = &mut out[n * cout * p..(n + 1) * cout * p];
        for (co, row) in o.chunks_exact_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        // SAFETY: all slices are sized exactly m*k, k*n, m*n with row-major strides.
        unsafe {
            T::gemm(
                cout,
                k,
                p,
                T::ONE,
                weight.data().as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                p as isize,
                1,
                T::ONE,
                o.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    Ok(Tensor4::from_vec_unchecked(
        Shape4::new(s.n, cout, g.oh, g.ow),
        out,
    ))
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &Tensor4<T>,
    padding: Padding,
    grad_out: &Tensor4<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let s = input.shape();
    let ws = weight.shape();
    let g = conv_geom(s, ws, ws.n, padding)?;
    let (k, p, cout) = (g.k(), g.p(), ws.n);
    if grad_out.shape() != Shape4::new(s.n, cout, g.oh, g.ow) {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {} for output ({},{cout},{},{})",
                grad_out.shape(),
                s.n,
                g.oh,
                g.ow
            ),
        ));
    }
    if g.is_same3x3() {
        let (dw, db) = conv3x3::param_grads(input.data(), grad_out.data(), s.c, cout, s.h, s.w);
        let dx = need_input_grad
            .then(|| conv3x3::input_grad(grad_out.data(), s.n, cout, s.c, s.h, s.w, weight.data()));
        return Ok(ConvGrads {
            input: dx.map(|d| Tensor4::from_vec_unchecked(s, d)),
            weight: Tensor4::from_vec_unchecked(ws, dw),
            bias: db,
        });
    }
    let mut dw = vec![T::ZERO; cout * k];
    let mut db = vec![T::ZERO; cout];
    let mut dx = if need_input_grad {
        vec![T::ZERO; s.len()]
    } else {
        Vec::new()
    };
    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::ZERO; k * p]
    };
    let mut dcol = if pointwise || !need_input_grad {
        Vec::new()
    } else {
        vec![T::ZERO; k * p]
    };
    for n in 0..s.n {
        let x = &input.data()[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
        let go = &grad_out.data()[n * cout * p..(n + 1) * cout * p];
        for (co, row) in go.chunks_exact(p).enumerate() {
            let mut acc = T::ZERO;
            for &v in row {
                acc += v;
            }
            db[co] += acc;
        }
        let b: &[T] = if pointwise {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        // dW (cout x k) += dOut (cout x p) * col^T (p x k)
        // SAFETY: buffer extents match the declared dims and strides.
        unsafe {
            T::gemm(
                cout,
                p,
                k,
                T::ONE,
                go.as_ptr(),
                p as isize,
                1,
                b.as_ptr(),
                1,
                p as isize,
                T::ONE,
                dw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        if need_input_grad {
            let dxn = &mut dx[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
            let target: &mut [T] = if pointwise { dxn } else { &mut dcol };
            // dcol (k x p) = W^T (k x cout) * dOut (cout x p)
            // SAFETY: as above; beta = 0 overwrites the target.
            unsafe {
                T::gemm(
                    k,
                    cout,
                    p,
                    T::ONE,
                    weight.data().as_ptr(),
                    1,
                    k as isize,
                    go.as_ptr(),
                    p as isize,
                    1,
                    T::ZERO,
                    target.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            if !pointwise {
                col2im(&dcol, &g, dxn);
            }
        }
    }
    Ok(ConvGrads {
        input: need_input_grad.then(|| Tensor4::from_vec_unchecked(s, dx)),
        weight: Tensor4::from_vec_unchecked(ws, dw),
        bias: db,
    })
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // split by sign so exp never overflows
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
        .shape();
    let mut c = 0;
    for t in parts {
        let s = t.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{s} does not match {first} in batch/spatial dims"),
            ));
        }
        c += s.c;
    }
    let plane = first.plane();
    let mut data = Vec::with_capacity(first.n * c * plane);
    for n in 0..first.n {
        for t in parts {
            let tc = t.shape().c;
            data.extend_from_slice(&t.data()[n * tc * plane..(n + 1) * tc * plane]);
        }
    }
    Ok(Tensor4::from_vec_unchecked(
        Shape4::new(first.n, c, first.h, first.w),
        data,
    ))
}

/// `trunk + epsilon * branch`.
pub fn scaled_residual_add<T: Scalar>(
    trunk: &Tensor4<T>,
    branch: &Tensor4<T>,
    epsilon: T,
) -> Result<Tensor4<T>> {
    if trunk.shape() != branch.shape() {
        return Err(Error::shape(
            "scaled_residual_add",
            format!("trunk {} vs branch {}", trunk.shape(), branch.shape()),
        ));
    }
    let data = trunk
        .data()
        .iter()
        .zip(branch.data())
        .map(|(&a, &b)| a + epsilon * b)
        .collect();
    Ok(Tensor4::from_vec_unchecked(trunk.shape(), data))
}
