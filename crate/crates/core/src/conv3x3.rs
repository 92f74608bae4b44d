//! Direct 3×3 same-padded convolution.
//!
//! Inputs are copied into zero-bordered planes whose rows are padded to a
//! multiple of [`LANES`], so the inner loops run on fixed-size blocks with no
//! edge tests. Forward and input-gradient passes accumulate [`CO_BLOCK`]
//! output channels × [`LANES`] pixels in registers; the weight gradient keeps
//! all nine taps of one `(co, ci)` pair in registers.
//!
//! On x86-64 with AVX2 and FMA the same code is compiled a second time with
//! those features and chosen at run time; results then use fused
//! multiply-adds. Either way the summation order is fixed, so a given machine
//! reproduces its results bit for bit.

use crate::tensor::Scalar;

const LANES: usize = 8;
const CO_BLOCK: usize = 8;
const TAPS: usize = 9;

/// Zero-bordered copy of `c` planes.
struct Padded<T> {
    data: Vec<T>,
    /// Row stride: `w` rounded up to `LANES`, plus the two border columns.
    wp: usize,
    hp: usize,
}

fn round_up(v: usize) -> usize {
    v.div_ceil(LANES) * LANES
}

fn pad<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Padded<T> {
    let (hp, wp) = (h + 2, round_up(w) + 2);
    let mut data = vec![T::ZERO; c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            let src = &x[(ci * h + y) * w..(ci * h + y + 1) * w];
            let at = (ci * hp + y + 1) * wp + 1;
            data[at..at + w].copy_from_slice(src);
        }
    }
    Padded { data, wp, hp }
}

#[inline(always)]
fn madd<T: Scalar, const FUSED: bool>(a: T, b: T, c: T) -> T {
    if FUSED {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Weights regrouped as `[block][ci][tap][j]`, zero-filled past `cout`.
fn regroup<T: Scalar>(w: &[T], cout: usize, cin: usize) -> Vec<T> {
    let blocks = cout.div_ceil(CO_BLOCK);
    let mut out = vec![T::ZERO; blocks * cin * TAPS * CO_BLOCK];
    for co in 0..cout {
        let (b, j) = (co / CO_BLOCK, co % CO_BLOCK);
        for ci in 0..cin {
            for t in 0..TAPS {
                out[((b * cin + ci) * TAPS + t) * CO_BLOCK + j] = w[(co * cin + ci) * TAPS + t];
            }
        }
    }
    out
}

/// Weights of the transposed convolution: `w'[ci][co][t] = w[co][ci][8 − t]`.
fn transpose_flip<T: Scalar>(w: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..TAPS {
                out[(ci * cout + co) * TAPS + t] = w[(co * cin + ci) * TAPS + (TAPS - 1 - t)];
            }
        }
    }
    out
}

#[inline(always)]
fn forward_image<T: Scalar, const FUSED: bool>(
    xp: &Padded<T>,
    cin: usize,
    h: usize,
    w: usize,
    wr: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let cout = bias.len();
    let plane = xp.hp * xp.wp;
    for blk in 0..cout.div_ceil(CO_BLOCK) {
        let wb = &wr[blk * cin * TAPS * CO_BLOCK..(blk + 1) * cin * TAPS * CO_BLOCK];
        let live = CO_BLOCK.min(cout - blk * CO_BLOCK);
        for oy in 0..h {
            for ox in (0..w).step_by(LANES) {
                let mut acc = [[T::ZERO; LANES]; CO_BLOCK];
                for ci in 0..cin {
                    let wc = &wb[ci * TAPS * CO_BLOCK..(ci + 1) * TAPS * CO_BLOCK];
                    for ky in 0..3 {
                        let at = ci * plane + (oy + ky) * xp.wp + ox;
                        let row = &xp.data[at..at + LANES + 2];
                        for kx in 0..3 {
                            let xv: [T; LANES] = row[kx..kx + LANES].try_into().unwrap();
                            let wt: [T; CO_BLOCK] = wc
                                [(ky * 3 + kx) * CO_BLOCK..(ky * 3 + kx + 1) * CO_BLOCK]
                                .try_into()
                                .unwrap();
                            for j in 0..CO_BLOCK {
                                for l in 0..LANES {
                                    acc[j][l] = madd::<T, FUSED>(wt[j], xv[l], acc[j][l]);
                                }
                            }
                        }
                    }
                }
                let len = LANES.min(w - ox);
                for (j, a) in acc.iter().enumerate().take(live) {
                    let co = blk * CO_BLOCK + j;
                    let dst = &mut out[(co * h + oy) * w + ox..(co * h + oy) * w + ox + len];
                    for (d, &v) in dst.iter_mut().zip(a) {
                        *d = v + bias[co];
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn weight_grad_image<T: Scalar, const FUSED: bool>(
    xp: &Padded<T>,
    gp: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    dw: &mut [T],
) {
    let wr = round_up(w);
    let plane = xp.hp * xp.wp;
    for co in 0..cout {
        let g = &gp[co * h * wr..(co + 1) * h * wr];
        for ci in 0..cin {
            let mut acc = [[T::ZERO; LANES]; TAPS];
            for oy in 0..h {
                for ox in (0..wr).step_by(LANES) {
                    let gv: [T; LANES] = g[oy * wr + ox..oy * wr + ox + LANES].try_into().unwrap();
                    for ky in 0..3 {
                        let at = ci * plane + (oy + ky) * xp.wp + ox;
                        let row = &xp.data[at..at + LANES + 2];
                        for kx in 0..3 {
                            let xv: [T; LANES] = row[kx..kx + LANES].try_into().unwrap();
                            let a = &mut acc[ky * 3 + kx];
                            for l in 0..LANES {
                                a[l] = madd::<T, FUSED>(gv[l], xv[l], a[l]);
                            }
                        }
                    }
                }
            }
            for (t, a) in acc.iter().enumerate() {
                let mut s = T::ZERO;
                for &v in a {
                    s += v;
                }
                dw[(co * cin + ci) * TAPS + t] += s;
            }
        }
    }
}

/// Gradient planes with rows padded to a multiple of `LANES` (zero slack).
fn pad_rows<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let wr = round_up(w);
    let mut out = vec![T::ZERO; c * h * wr];
    for (r, src) in g.chunks_exact(w).enumerate() {
        out[r * wr..r * wr + w].copy_from_slice(src);
    }
    out
}

fn fused_available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

macro_rules! dispatch {
    ($name:ident, $fast:ident, $body:ident, ($($arg:ident: $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $fast<T: Scalar>($($arg: $ty),*) {
            $body::<T, true>($($arg),*)
        }

        fn $name<T: Scalar>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if fused_available() {
                // SAFETY: the required CPU features were detected above.
                return unsafe { $fast::<T>($($arg),*) };
            }
            $body::<T, false>($($arg),*)
        }
    };
}

dispatch!(
    forward_dispatch,
    forward_avx2,
    forward_image,
    (xp: &Padded<T>, cin: usize, h: usize, w: usize, wr: &[T], bias: &[T], out: &mut [T])
);
dispatch!(
    weight_grad_dispatch,
    weight_grad_avx2,
    weight_grad_image,
    (xp: &Padded<T>, gp: &[T], cin: usize, cout: usize, h: usize, w: usize, dw: &mut [T])
);

/// Forward pass over a batch: `x` is `(n, cin, h, w)`, `weight` `(cout, cin, 3, 3)`.
pub(crate) fn forward<T: Scalar>(
    x: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let cout = bias.len();
    let wr = regroup(weight, cout, cin);
    let mut out = vec![T::ZERO; n * cout * h * w];
    for (xi, oi) in x
        .chunks_exact(cin * h * w)
        .zip(out.chunks_exact_mut(cout * h * w))
    {
        let xp = pad(xi, cin, h, w);
        forward_dispatch(&xp, cin, h, w, &wr, bias, oi);
    }
    out
}

/// Input gradient: the transposed convolution of `go` (`(n, cout, h, w)`).
pub(crate) fn input_grad<T: Scalar>(
    go: &[T],
    n: usize,
    cout: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
) -> Vec<T> {
    let wt = regroup(&transpose_flip(weight, cout, cin), cin, cout);
    let zero = vec![T::ZERO; cin];
    let mut dx = vec![T::ZERO; n * cin * h * w];
    for (gi, di) in go
        .chunks_exact(cout * h * w)
        .zip(dx.chunks_exact_mut(cin * h * w))
    {
        let gp = pad(gi, cout, h, w);
        forward_dispatch(&gp, cout, h, w, &wt, &zero, di);
    }
    dx
}

/// Weight and bias gradients summed over the batch.
pub(crate) fn param_grads<T: Scalar>(
    x: &[T],
    go: &[T],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::ZERO; cout * cin * TAPS];
    let mut db = vec![T::ZERO; cout];
    for (xi, gi) in x
        .chunks_exact(cin * h * w)
        .zip(go.chunks_exact(cout * h * w))
    {
        for (co, plane) in gi.chunks_exact(h * w).enumerate() {
            let mut s = T::ZERO;
            for &v in plane {
                s += v;
            }
            db[co] += s;
        }
        let xp = pad(xi, cin, h, w);
        let gp = pad_rows(gi, cout, h, w);
        weight_grad_dispatch(&xp, &gp, cin, cout, h, w, &mut dw);
    }
    (dw, db)
}
