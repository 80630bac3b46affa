//! Forward and backward kernels for the operations the generator and the
//! discriminator need. Every kernel is a pure function; [`Tape`](crate::Tape)
//! records them and calls the matching `*_backward` during the reverse pass.
//!
//! Reductions always run in index-ascending order so results are
//! bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Default negative slope of [`leaky_relu`].
pub const LEAKY_SLOPE: f64 = 0.2;

/// Valid output-row range and input offset of a 3x3 tap along one axis.
#[inline]
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    // Output index o reads input o + k - 1.
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

fn conv_shapes<R: Real>(
    x: &Tensor<R>,
    kernel: &Tensor<R>,
    bias: &Tensor<R>,
) -> Result<(usize, usize, usize, usize)> {
    let (cin, h, w) = x.chw()?;
    let cout = match kernel.shape() {
        &[co, ci, 3, 3] if ci == cin => co,
        s => {
            return Err(Error::dim(
                "conv3x3",
                alloc::format!("kernel [Cout, {cin}, 3, 3]"),
                s,
            ))
        }
    };
    if bias.shape() != [cout] {
        return Err(Error::dim(
            "conv3x3",
            alloc::format!("bias [{cout}]"),
            bias.shape(),
        ));
    }
    Ok((cin, cout, h, w))
}

/// Zero-padded 3x3 patches: row `ci * 9 + kh * 3 + kw`, column `oh * w + ow`.
fn im2col<R: Real>(x: &[R], cin: usize, h: usize, w: usize) -> Vec<R> {
    let plane = h * w;
    let mut cols = vec![R::zero(); cin * 9 * plane];
    for ci in 0..cin {
        let xin = &x[ci * plane..(ci + 1) * plane];
        for kh in 0..3 {
            let (h0, h1) = tap_range(kh, h);
            for kw in 0..3 {
                let (w0, w1) = tap_range(kw, w);
                if w0 >= w1 {
                    continue;
                }
                let row = &mut cols[((ci * 9) + kh * 3 + kw) * plane..][..plane];
                for oh in h0..h1 {
                    let ih = oh + kh - 1;
                    row[oh * w + w0..oh * w + w1].copy_from_slice(&xin[ih * w + w0 + kw - 1..ih * w + w1 + kw - 1]);
                }
            }
        }
    }
    cols
}

/// Transpose of [`im2col`]: scatter-add patch rows back onto `[cin, h, w]`.
fn col2im<R: Real>(cols: &[R], cin: usize, h: usize, w: usize) -> Tensor<R> {
    let plane = h * w;
    let mut out = Tensor::zeros(&[cin, h, w]);
    for ci in 0..cin {
        let dst = out.channel_mut(ci);
        for kh in 0..3 {
            let (h0, h1) = tap_range(kh, h);
            for kw in 0..3 {
                let (w0, w1) = tap_range(kw, w);
                if w0 >= w1 {
                    continue;
                }
                let row = &cols[((ci * 9) + kh * 3 + kw) * plane..][..plane];
                for oh in h0..h1 {
                    let ih = oh + kh - 1;
                    let d = &mut dst[ih * w + w0 + kw - 1..ih * w + w1 + kw - 1];
                    for (a, &b) in d.iter_mut().zip(&row[oh * w + w0..oh * w + w1]) {
                        *a += b;
                    }
                }
            }
        }
    }
    out
}

const TILE_N: usize = 8;

/// `c[i][j] += sum_t a(i, t) * b[t][j]` for an `M x TILE_N` tile, with
/// `t` ascending so every entry accumulates in a fixed order. `apack`
/// holds `a(i + r, t)` at `t * M + r`.
#[inline(always)]
fn gemm_tile<R: Real, const M: usize>(c: &mut [R], apack: &[R], b: &[R], (i, j): (usize, usize), n: usize) {
    let mut acc = [[R::zero(); TILE_N]; M];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..][..TILE_N]);
    }
    for (brow, acol) in b.chunks_exact(n).zip(apack.chunks_exact(M)) {
        let brow: &[R; TILE_N] = brow[j..j + TILE_N].try_into().expect("tile width");
        for (row, &av) in acc.iter_mut().zip(acol) {
            for (x, &y) in row.iter_mut().zip(brow) {
                *x += av * y;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..][..TILE_N].copy_from_slice(row);
    }
}

/// `C[m x n] += A[m x l] B[l x n]`, where `A(i, t) = a[i * a_rs + t * a_cs]`
/// and `B` and `C` are row-major.
fn gemm_acc<R: Real>(c: &mut [R], a: &[R], a_strides: (usize, usize), b: &[R], m: usize, n: usize, l: usize) {
    let (a_rs, a_cs) = a_strides;
    let full_n = n - n % TILE_N;
    let b = &b[..l * n];
    let mut apack = Vec::with_capacity(4 * l);
    let mut i = 0;
    while i < m {
        let mr = (m - i).min(4);
        apack.clear();
        for t in 0..l {
            apack.extend((i..i + mr).map(|r| a[r * a_rs + t * a_cs]));
        }
        for j in (0..full_n).step_by(TILE_N) {
            match mr {
                4 => gemm_tile::<R, 4>(c, &apack, b, (i, j), n),
                3 => gemm_tile::<R, 3>(c, &apack, b, (i, j), n),
                2 => gemm_tile::<R, 2>(c, &apack, b, (i, j), n),
                _ => gemm_tile::<R, 1>(c, &apack, b, (i, j), n),
            }
        }
        for r in i..i + mr {
            for q in full_n..n {
                let mut s = c[r * n + q];
                for t in 0..l {
                    s += a[r * a_rs + t * a_cs] * b[t * n + q];
                }
                c[r * n + q] = s;
            }
        }
        i += mr;
    }
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
pub fn conv3x3<R: Real>(x: &Tensor<R>, kernel: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
    let (cin, cout, h, w) = conv_shapes(x, kernel, bias)?;
    let plane = h * w;
    let taps = cin * 9;
    let cols = im2col(x.data(), cin, h, w);
    let mut out = Tensor::zeros(&[cout, h, w]);
    for co in 0..cout {
        out.channel_mut(co).fill(bias.data()[co]);
    }
    gemm_acc(out.data_mut(), kernel.data(), (taps, 1), &cols, cout, plane, taps);
    out.ensure_finite("conv3x3")
}

/// Gradients of [`conv3x3`] with respect to input, kernel and bias.
pub fn conv3x3_backward<R: Real>(
    x: &Tensor<R>,
    kernel: &Tensor<R>,
    grad_out: &Tensor<R>,
    need_input_grad: bool,
) -> (Option<Tensor<R>>, Tensor<R>, Tensor<R>) {
    let (cin, h, w) = x.chw().expect("checked in forward");
    let cout = kernel.shape()[0];
    let plane = h * w;
    let taps = cin * 9;
    let kd = kernel.data();
    let gd = grad_out.data();

    let mut gb = Tensor::zeros(&[cout]);
    for co in 0..cout {
        let mut acc = R::zero();
        for &g in &gd[co * plane..(co + 1) * plane] {
            acc += g;
        }
        gb.data_mut()[co] = acc;
    }

    let cols = im2col(x.data(), cin, h, w);
    let mut cols_t = vec![R::zero(); plane * taps];
    for k in 0..taps {
        for p in 0..plane {
            cols_t[p * taps + k] = cols[k * plane + p];
        }
    }
    let mut gk = Tensor::zeros(kernel.shape());
    gemm_acc(gk.data_mut(), gd, (plane, 1), &cols_t, cout, taps, plane);

    let gx = need_input_grad.then(|| {
        let mut gcols = vec![R::zero(); taps * plane];
        gemm_acc(&mut gcols, kd, (1, taps), gd, taps, plane, cout);
        col2im(&gcols, cin, h, w)
    });
    (gx, gk, gb)
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample2x<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (c, h, w) = x.chw()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, h2, w2]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for oh in 0..h2 {
            let row = &src[(oh / 2) * w..(oh / 2 + 1) * w];
            for (ow, d) in dst[oh * w2..(oh + 1) * w2].iter_mut().enumerate() {
                *d = row[ow / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward<R: Real>(grad_out: &Tensor<R>) -> Tensor<R> {
    let (c, h2, w2) = grad_out.chw().expect("rank 3");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let dst = gx.channel_mut(ch);
        for ih in 0..h {
            for iw in 0..w {
                let r0 = 2 * ih * w2 + 2 * iw;
                let r1 = r0 + w2;
                dst[ih * w + iw] = g[r0] + g[r0 + 1] + g[r1] + g[r1 + 1];
            }
        }
    }
    gx
}

/// `y = x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<R: Real>(x: &Tensor<R>, slope: R) -> Tensor<R> {
    x.map(|v| if v >= R::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<R: Real>(x: &Tensor<R>, slope: R, grad_out: &Tensor<R>) -> Tensor<R> {
    x.zip_map(grad_out, |v, g| if v > R::zero() { g } else { slope * g })
        .expect("same shape")
}

/// `y[c,h,w] = x[c,h,w] + scale[c] * noise[0,h,w]`.
pub fn add_scaled_noise<R: Real>(
    x: &Tensor<R>,
    noise: &Tensor<R>,
    scale: &Tensor<R>,
) -> Result<Tensor<R>> {
    let (c, h, w) = x.chw()?;
    if noise.shape() != [1, h, w] {
        return Err(Error::dim(
            "add_scaled_noise",
            alloc::format!("noise [1, {h}, {w}]"),
            noise.shape(),
        ));
    }
    if scale.shape() != [c] {
        return Err(Error::dim(
            "add_scaled_noise",
            alloc::format!("scale [{c}]"),
            scale.shape(),
        ));
    }
    let mut out = x.clone();
    let n = noise.data();
    for ch in 0..c {
        let s = scale.data()[ch];
        for (o, &nv) in out.channel_mut(ch).iter_mut().zip(n) {
            *o += s * nv;
        }
    }
    out.ensure_finite("add_scaled_noise")
}

/// Gradient of [`add_scaled_noise`] with respect to `scale`; the input
/// gradient is `grad_out` itself.
pub fn add_scaled_noise_backward<R: Real>(noise: &Tensor<R>, grad_out: &Tensor<R>) -> Tensor<R> {
    let c = grad_out.shape()[0];
    let n = noise.data();
    Tensor::from_fn(&[c], |ch| {
        let mut acc = R::zero();
        for (&g, &nv) in grad_out.channel(ch).iter().zip(n) {
            acc += g * nv;
        }
        acc
    })
}

/// `y = W x + b` for `x: [Din]`, `W: [Dout, Din]`, `b: [Dout]`.
pub fn affine<R: Real>(x: &Tensor<R>, weight: &Tensor<R>, bias: &Tensor<R>) -> Result<Tensor<R>> {
    let din = match x.shape() {
        &[d] => d,
        s => return Err(Error::dim("affine", "x of rank 1", s)),
    };
    let dout = match weight.shape() {
        &[o, i] if i == din => o,
        s => {
            return Err(Error::dim(
                "affine",
                alloc::format!("weight [Dout, {din}]"),
                s,
            ))
        }
    };
    if bias.shape() != [dout] {
        return Err(Error::dim(
            "affine",
            alloc::format!("bias [{dout}]"),
            bias.shape(),
        ));
    }
    let wd = weight.data();
    let xd = x.data();
    let out = Tensor::from_fn(&[dout], |o| {
        let mut acc = R::zero();
        for (&wv, &xv) in wd[o * din..(o + 1) * din].iter().zip(xd) {
            acc += wv * xv;
        }
        acc + bias.data()[o]
    });
    out.ensure_finite("affine")
}

/// Gradients of [`affine`] with respect to `x`, `weight` and `bias`.
pub fn affine_backward<R: Real>(
    x: &Tensor<R>,
    weight: &Tensor<R>,
    grad_out: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>, Tensor<R>) {
    let din = x.len();
    let dout = grad_out.len();
    let wd = weight.data();
    let g = grad_out.data();
    let gw = Tensor::from_fn(&[dout, din], |i| g[i / din] * x.data()[i % din]);
    let gx = Tensor::from_fn(&[din], |i| {
        let mut acc = R::zero();
        for o in 0..dout {
            acc += wd[o * din + i] * g[o];
        }
        acc
    });
    (gx, gw, grad_out.clone())
}

/// 2x2 average pooling (H and W must be even).
pub fn avg_pool2<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("avg_pool2", "even H and W", x.shape()));
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = R::from_f64(0.25);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for oh in 0..ho {
            for ow in 0..wo {
                let r0 = 2 * oh * w + 2 * ow;
                let r1 = r0 + w;
                dst[oh * wo + ow] = (src[r0] + src[r0 + 1] + src[r1] + src[r1 + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<R: Real>(grad_out: &Tensor<R>) -> Tensor<R> {
    let quarter = R::from_f64(0.25);
    // Each output gradient spreads evenly over its 2x2 source block.
    upsample2x(grad_out).expect("rank 3").map(|v| v * quarter)
}

/// Zero the listed channels of a `[C, H, W]` tensor.
pub fn zero_channels<R: Real>(x: &Tensor<R>, channels: &[usize]) -> Result<Tensor<R>> {
    let (c, _, _) = x.chw()?;
    let mut out = x.clone();
    for &ch in channels {
        if ch >= c {
            return Err(Error::OutOfRange {
                what: "channel",
                index: ch,
                limit: c,
            });
        }
        out.channel_mut(ch).fill(R::zero());
    }
    Ok(out)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<R: Real>(x: R) -> R {
    if x > R::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}
