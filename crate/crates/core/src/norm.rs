//! Pixel normalization, instance normalization, their channel-wise blend
//! (pixel-instance normalization, PIN), per-channel style modulation and
//! AdaIN.
//!
//! For `x: [C, H, W]`:
//!
//! ```text
//! PN   y[c,h,w] = x[c,h,w] / sqrt(mean_i x[i,h,w]^2 + eps)
//! IN   y[c,h,w] = (x[c,h,w] - mu_c) / sqrt(var_c + eps)       (population variance)
//! PIN  y        = rho * PN(x) + (1 - rho) * IN(x)              (rho in [0,1]^C)
//! ```
//!
//! The blend is taken channel-wise. Style modulation `gamma * y + beta` follows
//! every normalization; AdaIN is instance normalization whose `(gamma, beta)`
//! come from the latent `w` through a [`StyleSource`].

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

/// Epsilon used by both PN and IN throughout the generator.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PinParams<R> {
    /// Per-channel blend weight; kept in `[0, 1]` by [`clip_rho`].
    pub rho: Tensor<R>,
    pub epsilon: R,
}

impl<R: Real> PinParams<R> {
    pub fn new(rho: Tensor<R>, epsilon: R) -> Result<Self> {
        if rho.rank() != 1 {
            return Err(Error::dim("PinParams", "rho of rank 1", rho.shape()));
        }
        if !(epsilon > R::zero()) {
            return Err(Error::Invalid(alloc::format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { rho, epsilon })
    }

    /// `rho = 0`, which makes the layer plain instance normalization.
    pub fn zeros(channels: usize) -> Self {
        Self {
            rho: Tensor::zeros(&[channels]),
            epsilon: R::from_f64(NORM_EPS),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleAffineParams<R> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
}

impl<R: Real> StyleAffineParams<R> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
        }
    }
}

/// Learned affine maps from the latent `w` to the per-channel shift
/// `mu_y = v_mu w + b_mu` and scale `sigma_y = v_sigma w + b_sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleSource<R> {
    pub v_mu: Tensor<R>,
    pub b_mu: Tensor<R>,
    pub v_sigma: Tensor<R>,
    pub b_sigma: Tensor<R>,
}

impl<R: Real> StyleSource<R> {
    /// Zero matrices, `b_mu = 0`, `b_sigma = 1`: AdaIN reduces to plain IN.
    pub fn neutral(channels: usize, latent_dim: usize) -> Self {
        Self {
            v_mu: Tensor::zeros(&[channels, latent_dim]),
            b_mu: Tensor::zeros(&[channels]),
            v_sigma: Tensor::zeros(&[channels, latent_dim]),
            b_sigma: Tensor::ones(&[channels]),
        }
    }

    /// `(mu_y, sigma_y)` for latent `w`.
    pub fn modulation(&self, w: &Tensor<R>) -> Result<(Tensor<R>, Tensor<R>)> {
        Ok((
            ops::affine(w, &self.v_mu, &self.b_mu)?,
            ops::affine(w, &self.v_sigma, &self.b_sigma)?,
        ))
    }
}

/// Per-channel population statistics returned by [`instance_norm`].
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats<R> {
    pub mu: Vec<R>,
    pub sigma2: Vec<R>,
}

/// Pixel normalization; also returns `1 / sqrt(mean_c x^2 + eps)` per pixel.
pub(crate) fn pixel_norm_cached<R: Real>(x: &Tensor<R>, eps: R) -> Result<(Tensor<R>, Vec<R>)> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let inv_c = R::one() / R::from_usize(c);
    let xd = x.data();
    let mut inv_rms = Vec::with_capacity(plane);
    for p in 0..plane {
        let mut acc = R::zero();
        for ch in 0..c {
            let v = xd[ch * plane + p];
            acc += v * v;
        }
        inv_rms.push(R::one() / (acc * inv_c + eps).sqrt());
    }
    let mut y = x.clone();
    for ch in 0..c {
        for (v, &s) in y.channel_mut(ch).iter_mut().zip(&inv_rms) {
            *v = *v * s;
        }
    }
    Ok((y.ensure_finite("pixel_norm")?, inv_rms))
}

pub fn pixel_norm<R: Real>(x: &Tensor<R>, eps: R) -> Result<Tensor<R>> {
    pixel_norm_cached(x, eps).map(|(y, _)| y)
}

/// `dx_c = s (dy_c - y_c * mean_i(dy_i y_i))` with `s` the per-pixel inverse RMS.
pub(crate) fn pixel_norm_backward<R: Real>(
    y: &Tensor<R>,
    inv_rms: &[R],
    grad_out: &Tensor<R>,
) -> Tensor<R> {
    let (c, h, w) = y.chw().expect("rank 3");
    let plane = h * w;
    let inv_c = R::one() / R::from_usize(c);
    let (yd, gd) = (y.data(), grad_out.data());
    let mut dots = Vec::with_capacity(plane);
    for p in 0..plane {
        let mut acc = R::zero();
        for ch in 0..c {
            acc += gd[ch * plane + p] * yd[ch * plane + p];
        }
        dots.push(acc * inv_c);
    }
    Tensor::from_fn(&[c, h, w], |i| {
        let p = i % plane;
        inv_rms[p] * (gd[i] - yd[i] * dots[p])
    })
}

/// Instance normalization; also returns `1 / sqrt(var_c + eps)` per channel.
pub(crate) fn instance_norm_cached<R: Real>(
    x: &Tensor<R>,
    eps: R,
) -> Result<(Tensor<R>, InstanceStats<R>, Vec<R>)> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::dim("instance_norm", "H*W >= 1", x.shape()));
    }
    let inv_n = R::one() / R::from_usize(plane);
    let mut stats = InstanceStats {
        mu: Vec::with_capacity(c),
        sigma2: Vec::with_capacity(c),
    };
    let mut inv_std = Vec::with_capacity(c);
    let mut y = x.clone();
    for ch in 0..c {
        let xs = x.channel(ch);
        let mut sum = R::zero();
        for &v in xs {
            sum += v;
        }
        let mu = sum * inv_n;
        let mut ss = R::zero();
        for &v in xs {
            let d = v - mu;
            ss += d * d;
        }
        let sigma2 = ss * inv_n;
        let s = R::one() / (sigma2 + eps).sqrt();
        for v in y.channel_mut(ch) {
            *v = (*v - mu) * s;
        }
        stats.mu.push(mu);
        stats.sigma2.push(sigma2);
        inv_std.push(s);
    }
    Ok((y.ensure_finite("instance_norm")?, stats, inv_std))
}

pub fn instance_norm<R: Real>(x: &Tensor<R>, eps: R) -> Result<(Tensor<R>, InstanceStats<R>)> {
    instance_norm_cached(x, eps).map(|(y, stats, _)| (y, stats))
}

/// `dx = s (dy - mean(dy) - y * mean(dy y))` per channel.
pub(crate) fn instance_norm_backward<R: Real>(
    y: &Tensor<R>,
    inv_std: &[R],
    grad_out: &Tensor<R>,
) -> Tensor<R> {
    let (c, h, w) = y.chw().expect("rank 3");
    let inv_n = R::one() / R::from_usize(h * w);
    let mut gx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let (ys, gs) = (y.channel(ch), grad_out.channel(ch));
        let mut g_sum = R::zero();
        let mut gy_sum = R::zero();
        for (&yv, &gv) in ys.iter().zip(gs) {
            g_sum += gv;
            gy_sum += gv * yv;
        }
        let (g_mean, gy_mean) = (g_sum * inv_n, gy_sum * inv_n);
        let s = inv_std[ch];
        for ((d, &yv), &gv) in gx.channel_mut(ch).iter_mut().zip(ys).zip(gs) {
            *d = s * (gv - g_mean - yv * gy_mean);
        }
    }
    gx
}

/// `rho_c * pn + (1 - rho_c) * inst`, channel-wise.
pub(crate) fn blend<R: Real>(pn: &Tensor<R>, inst: &Tensor<R>, rho: &Tensor<R>) -> Result<Tensor<R>> {
    let (c, _, _) = pn.chw()?;
    if inst.shape() != pn.shape() {
        return Err(Error::dim(
            "pin",
            alloc::format!("{:?}", pn.shape()),
            inst.shape(),
        ));
    }
    if rho.shape() != [c] {
        return Err(Error::dim("pin", alloc::format!("rho [{c}]"), rho.shape()));
    }
    let mut y = pn.clone();
    for ch in 0..c {
        let r = rho.data()[ch];
        let keep = R::one() - r;
        for (v, &iv) in y.channel_mut(ch).iter_mut().zip(inst.channel(ch)) {
            *v = r * *v + keep * iv;
        }
    }
    y.ensure_finite("pin")
}

/// Gradients of [`blend`] w.r.t. the PN output, the IN output and `rho`.
pub(crate) fn blend_backward<R: Real>(
    pn: &Tensor<R>,
    inst: &Tensor<R>,
    rho: &Tensor<R>,
    grad_out: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>, Tensor<R>) {
    let c = rho.len();
    let mut g_pn = grad_out.clone();
    let mut g_in = grad_out.clone();
    let mut g_rho = Tensor::zeros(&[c]);
    for ch in 0..c {
        let r = rho.data()[ch];
        let keep = R::one() - r;
        g_pn.channel_mut(ch).iter_mut().for_each(|v| *v = *v * r);
        g_in.channel_mut(ch).iter_mut().for_each(|v| *v = *v * keep);
        let mut acc = R::zero();
        for ((&g, &p), &i) in grad_out.channel(ch).iter().zip(pn.channel(ch)).zip(inst.channel(ch)) {
            acc += g * (p - i);
        }
        g_rho.data_mut()[ch] = acc;
    }
    (g_pn, g_in, g_rho)
}

/// Pixel-instance normalization. PN and IN are both computed in full and
/// blended.
pub fn pin<R: Real>(x: &Tensor<R>, p: &PinParams<R>) -> Result<Tensor<R>> {
    let pn = pixel_norm(x, p.epsilon)?;
    let (inst, _) = instance_norm(x, p.epsilon)?;
    blend(&pn, &inst, &p.rho)
}

/// `y'[c] = gamma[c] * y[c] + beta[c]`.
pub fn style_modulate<R: Real>(y: &Tensor<R>, s: &StyleAffineParams<R>) -> Result<Tensor<R>> {
    modulate(y, &s.gamma, &s.beta)
}

pub(crate) fn modulate<R: Real>(y: &Tensor<R>, gamma: &Tensor<R>, beta: &Tensor<R>) -> Result<Tensor<R>> {
    let (c, _, _) = y.chw()?;
    for t in [gamma, beta] {
        if t.shape() != [c] {
            return Err(Error::dim(
                "style_modulate",
                alloc::format!("[{c}]"),
                t.shape(),
            ));
        }
    }
    let mut out = y.clone();
    for ch in 0..c {
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for v in out.channel_mut(ch) {
            *v = g * *v + b;
        }
    }
    out.ensure_finite("style_modulate")
}

/// Gradients of [`modulate`] w.r.t. `y`, `gamma` and `beta`.
pub(crate) fn modulate_backward<R: Real>(
    y: &Tensor<R>,
    gamma: &Tensor<R>,
    grad_out: &Tensor<R>,
) -> (Tensor<R>, Tensor<R>, Tensor<R>) {
    let c = gamma.len();
    let mut gy = grad_out.clone();
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for ch in 0..c {
        let g = gamma.data()[ch];
        gy.channel_mut(ch).iter_mut().for_each(|v| *v = *v * g);
        let (mut sg, mut sb) = (R::zero(), R::zero());
        for (&go, &yv) in grad_out.channel(ch).iter().zip(y.channel(ch)) {
            sg += go * yv;
            sb += go;
        }
        gg.data_mut()[ch] = sg;
        gb.data_mut()[ch] = sb;
    }
    (gy, gg, gb)
}

/// `sigma_y * IN(x) + mu_y` with `(mu_y, sigma_y)` computed from `w`.
pub fn adain<R: Real>(x: &Tensor<R>, w: &Tensor<R>, src: &StyleSource<R>, eps: R) -> Result<Tensor<R>> {
    let (mu_y, sigma_y) = src.modulation(w)?;
    let (inst, _) = instance_norm(x, eps)?;
    modulate(&inst, &sigma_y, &mu_y)
}

/// Project every `rho` component onto `[0, 1]`.
pub fn clip_rho<R: Real>(p: &PinParams<R>) -> PinParams<R> {
    let mut out = p.clone();
    clip_rho_in_place(&mut out.rho);
    out
}

pub fn clip_rho_in_place<R: Real>(rho: &mut Tensor<R>) {
    for v in rho.data_mut() {
        *v = v.max(R::zero()).min(R::one());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use alloc::vec;
    use proptest::prelude::*;

    fn block_1234() -> Tensor<f64> {
        Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < tol, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn pixel_norm_zero_and_hand_value() {
        let z = Tensor::<f32>::zeros(&[3, 2, 2]);
        assert_eq!(pixel_norm(&z, 1e-8).unwrap(), z);
        // (3, 4) at one pixel: sqrt((9 + 16) / 2) = sqrt(12.5).
        let x = Tensor::new(&[2, 1, 1], vec![3.0, 4.0]).unwrap();
        let y = pixel_norm(&x, 1e-14).unwrap();
        assert_close(y.data(), &[0.848528137, 1.131370850], 1e-8);
    }

    #[test]
    fn pixel_norm_equal_channels_gives_sign() {
        let x = Tensor::<f64>::new(&[3, 1, 2], vec![5.0, -2.0, 5.0, -2.0, 5.0, -2.0]).unwrap();
        let y = pixel_norm(&x, 1e-8).unwrap();
        assert_close(y.data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0], 1e-8);
    }

    #[test]
    fn instance_norm_hand_value() {
        let (y, stats) = instance_norm(&block_1234(), 1e-14).unwrap();
        assert_eq!(stats.mu, vec![2.5]);
        assert_eq!(stats.sigma2, vec![1.25]);
        assert_close(y.data(), &[-1.341640786, -0.447213595, 0.447213595, 1.341640786], 1e-8);
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let x = Tensor::<f32>::full(&[2, 3, 3], 4.5);
        let (y, _) = instance_norm(&x, 1e-8).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_variance_shrinks_with_eps() {
        let (y, _) = instance_norm(&block_1234(), 0.25).unwrap();
        let var = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.25 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn pin_endpoints_are_exact() {
        let mut rng = seeded(10, 0);
        let x: Tensor<f32> = normal_tensor(&mut rng, &[5, 4, 3], 2.0);
        let eps = NORM_EPS as f32;
        let pn = pixel_norm(&x, eps).unwrap();
        let (inst, _) = instance_norm(&x, eps).unwrap();
        let zero = PinParams::new(Tensor::zeros(&[5]), eps).unwrap();
        let one = PinParams::new(Tensor::ones(&[5]), eps).unwrap();
        assert_eq!(pin(&x, &zero).unwrap(), inst);
        assert_eq!(pin(&x, &one).unwrap(), pn);
        let half = PinParams::new(Tensor::full(&[5], 0.5), eps).unwrap();
        let avg = pn.zip_map(&inst, |a, b| 0.5 * a + 0.5 * b).unwrap();
        assert!(pin(&x, &half).unwrap().max_abs_diff(&avg) < 1e-6);
    }

    #[test]
    fn style_modulate_examples() {
        let mut rng = seeded(11, 0);
        let y: Tensor<f64> = normal_tensor(&mut rng, &[3, 2, 2], 1.0);
        assert_eq!(style_modulate(&y, &StyleAffineParams::identity(3)).unwrap(), y);
        let s = StyleAffineParams {
            gamma: Tensor::<f64>::vector(&[2.0, 3.0, 4.0]),
            beta: Tensor::vector(&[-1.0, 0.5, 7.0]),
        };
        let out = style_modulate(&Tensor::zeros(&[3, 2, 2]), &s).unwrap();
        for c in 0..3 {
            assert!(out.channel(c).iter().all(|&v| v == s.beta.data()[c]));
        }
        let (inst, _) = instance_norm(&block_1234(), 1e-14).unwrap();
        let s = StyleAffineParams {
            gamma: Tensor::vector(&[3.0]),
            beta: Tensor::vector(&[2.0]),
        };
        let out = style_modulate(&inst, &s).unwrap();
        assert_close(out.data(), &[-2.024922359, 0.658359214, 3.341640786, 6.024922359], 1e-8);
    }

    #[test]
    fn adain_examples() {
        let mut rng = seeded(12, 0);
        let x: Tensor<f64> = normal_tensor(&mut rng, &[3, 4, 4], 1.0);
        let w: Tensor<f64> = normal_tensor(&mut rng, &[5], 1.0);
        let neutral = StyleSource::neutral(3, 5);
        let (inst, _) = instance_norm(&x, 1e-8).unwrap();
        assert_eq!(adain(&x, &w, &neutral, 1e-8).unwrap(), inst);

        let mut src: StyleSource<f64> = StyleSource {
            v_mu: normal_tensor(&mut rng, &[3, 5], 1.0),
            b_mu: normal_tensor(&mut rng, &[3], 1.0),
            v_sigma: normal_tensor(&mut rng, &[3, 5], 1.0),
            b_sigma: normal_tensor(&mut rng, &[3], 1.0),
        };
        let (mu_y, _) = src.modulation(&w).unwrap();
        let out = adain(&Tensor::full(&[3, 4, 4], 2.0), &w, &src, 1e-8).unwrap();
        for c in 0..3 {
            assert!(out.channel(c).iter().all(|&v| (v - mu_y.data()[c]).abs() < 1e-12));
        }

        // w = e0 with v[:,0] = (2, 3) and zero biases gives (mu_y, sigma_y) = (2, 3).
        src = StyleSource::neutral(1, 2);
        src.v_mu.data_mut()[0] = 2.0;
        src.v_sigma.data_mut()[0] = 3.0;
        src.b_sigma.data_mut()[0] = 0.0;
        let out = adain(&block_1234(), &Tensor::vector(&[1.0, 0.0]), &src, 1e-14).unwrap();
        assert_close(out.data(), &[-2.024922359, 0.658359214, 3.341640786, 6.024922359], 1e-8);
    }

    #[test]
    fn clip_rho_examples() {
        let p = PinParams::new(Tensor::<f64>::vector(&[-0.3, 0.5, 1.7]), 1e-8).unwrap();
        let c = clip_rho(&p);
        assert_eq!(c.rho.data(), &[0.0, 0.5, 1.0]);
        assert_eq!(clip_rho(&c), c);
        let inside = PinParams::new(Tensor::<f64>::vector(&[0.0, 0.2, 1.0]), 1e-8).unwrap();
        assert_eq!(clip_rho(&inside), inside);
    }

    #[test]
    fn pin_params_reject_bad_eps() {
        assert!(PinParams::<f32>::new(Tensor::zeros(&[2]), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn instance_norm_channel_means_vanish(seed in 0u64..1000, c in 1usize..6, h in 1usize..9, w in 2usize..9) {
            let mut rng = seeded(seed, 1);
            let x: Tensor<f32> = normal_tensor(&mut rng, &[c, h, w], 3.0);
            let (y, _) = instance_norm(&x, NORM_EPS as f32).unwrap();
            for ch in 0..c {
                let m: f32 = y.channel(ch).iter().sum::<f32>() / (h * w) as f32;
                prop_assert!(m.abs() < 1e-5);
            }
        }

        #[test]
        fn pixel_norm_rms_at_most_one(seed in 0u64..1000, c in 1usize..8, hw in 1usize..20) {
            let mut rng = seeded(seed, 2);
            let x: Tensor<f64> = normal_tensor(&mut rng, &[c, 1, hw], 1.0);
            let y = pixel_norm(&x, NORM_EPS).unwrap();
            for p in 0..hw {
                let ms: f64 = (0..c).map(|ch| y.at3(ch, 0, p).powi(2)).sum::<f64>() / c as f64;
                prop_assert!(ms <= 1.0 + 1e-12);
            }
        }

        #[test]
        fn pin_is_convex_blend(seed in 0u64..1000, c in 1usize..5) {
            let mut rng = seeded(seed, 3);
            let x: Tensor<f64> = normal_tensor(&mut rng, &[c, 3, 4], 1.0);
            let rho = Tensor::from_fn(&[c], |_| crate::rng::uniform(&mut rng, 0.0, 1.0));
            let p = PinParams::new(rho.clone(), NORM_EPS).unwrap();
            let y = pin(&x, &p).unwrap();
            let pn = pixel_norm(&x, NORM_EPS).unwrap();
            let (inst, _) = instance_norm(&x, NORM_EPS).unwrap();
            for ch in 0..c {
                let r = rho.data()[ch];
                for i in 0..12 {
                    let want = r * pn.channel(ch)[i] + (1.0 - r) * inst.channel(ch)[i];
                    prop_assert_eq!(y.channel(ch)[i], want);
                }
            }
        }

        #[test]
        fn instance_norm_is_scale_invariant(seed in 0u64..1000, k in 0.01f64..100.0) {
            let mut rng = seeded(seed, 4);
            let x: Tensor<f64> = normal_tensor(&mut rng, &[3, 4, 4], 1.0);
            let (a, _) = instance_norm(&x, 1e-14).unwrap();
            let (b, _) = instance_norm(&x.map(|v| k * v), 1e-14).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-5);
        }

        #[test]
        fn clip_is_idempotent(vals in proptest::collection::vec(-3.0f64..3.0, 1..10)) {
            let p = PinParams::new(Tensor::vector(&vals), 1e-8).unwrap();
            let once = clip_rho(&p);
            prop_assert!(once.rho.data().iter().all(|&r| (0.0..=1.0).contains(&r)));
            prop_assert_eq!(clip_rho(&once), once);
        }
    }
}
