//! Analytic model of how instance normalization amplifies a sparse set of
//! high-magnitude pixels.
//!
//! An `l x l` map is split into the `alpha * l^2` highest-magnitude pixels
//! `S1` (mean `mu1`, stdev `sigma1`) and the rest `S2` (`mu2`, `sigma2`). The
//! whole map then has
//!
//! ```text
//! mu      = alpha mu1 + (1 - alpha) mu2
//! sigma^2 = alpha sigma1^2 + (1 - alpha) sigma2^2 + alpha (1 - alpha) (mu1 - mu2)^2
//! ```
//!
//! and after instance normalization the mean of `S1` becomes
//! `(1 - alpha)(mu1 - mu2) / sigma`, which tends to `sqrt((1 - alpha) / alpha)`
//! when `mu2`, `sigma1`, `sigma2` are small against `mu1`. The planted-map
//! functions realise the split on a concrete map so the closed forms can be
//! checked against a numeric instance norm.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::norm::instance_norm;
use crate::rng::{seeded, standard_normal, uniform, LabRng};
use crate::tensor::Tensor;

/// Epsilon for the numeric instance norm in this module; small enough that
/// the closed form is matched to ~1e-12.
pub const EMPIRICAL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSpec {
    pub alpha: f64,
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
    pub l: usize,
}

impl RegionSpec {
    pub fn new(alpha: f64, mu1: f64, sigma1: f64, mu2: f64, sigma2: f64, l: usize) -> Result<Self> {
        let r = Self {
            alpha,
            mu1,
            sigma1,
            mu2,
            sigma2,
            l,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::InvalidRegion(format!(
                "alpha must lie in (0, 0.5], got {}",
                self.alpha
            )));
        }
        if !(self.mu1 > 0.0 && self.mu2 > 0.0) {
            return Err(Error::InvalidRegion(format!(
                "mu1 and mu2 must be positive, got {} and {}",
                self.mu1, self.mu2
            )));
        }
        if !(self.sigma1 >= 0.0 && self.sigma2 >= 0.0) {
            return Err(Error::InvalidRegion("sigma1 and sigma2 must be >= 0".into()));
        }
        if self.region_pixels() < 1 {
            return Err(Error::InvalidRegion(format!(
                "alpha * l^2 = {} rounds to no pixels",
                self.alpha * (self.l * self.l) as f64
            )));
        }
        Ok(())
    }

    /// `round(alpha * l^2)`, the size of `S1` on a concrete map.
    pub fn region_pixels(&self) -> usize {
        round_to_usize(self.alpha * (self.l * self.l) as f64)
    }

    /// The same spec with `alpha` snapped to the fraction a concrete map
    /// can realise, `round(alpha l^2) / l^2`.
    pub fn realized(&self) -> Self {
        Self {
            alpha: self.region_pixels() as f64 / (self.l * self.l) as f64,
            ..*self
        }
    }
}

fn round_to_usize(v: f64) -> usize {
    num_traits::Float::round(v) as usize
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureStats {
    pub mu: f64,
    pub sigma2: f64,
}

pub fn mixture_stats(r: &RegionSpec) -> MixtureStats {
    let a = r.alpha;
    let d = r.mu1 - r.mu2;
    MixtureStats {
        mu: a * r.mu1 + (1.0 - a) * r.mu2,
        sigma2: r.sigma1 * r.sigma1 * a + r.sigma2 * r.sigma2 * (1.0 - a) + a * (1.0 - a) * d * d,
    }
}

/// Post-normalization mean of `S1`, `(1 - alpha)(mu1 - mu2) / sigma`.
pub fn post_in_mean_exact(r: &RegionSpec) -> Result<f64> {
    let s = mixture_stats(r);
    if !(s.sigma2 > 0.0) {
        return Err(Error::DegenerateMixture);
    }
    Ok((1.0 - r.alpha) * (r.mu1 - r.mu2) / num_traits::Float::sqrt(s.sigma2))
}

/// `sqrt((1 - alpha) / alpha)`.
pub fn post_in_mean_approx(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::InvalidRegion(format!(
            "alpha must lie in (0, 0.5], got {alpha}"
        )));
    }
    Ok(num_traits::Float::sqrt((1.0 - alpha) / alpha))
}

/// Where the `S1` pixels go on a planted map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// The `n` pixels closest to a random centre.
    Disc,
    /// `n` uniformly chosen pixels.
    Scattered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedMap {
    /// `[1, l, l]` magnitudes.
    pub map: Tensor<f64>,
    /// Row-major membership of `S1`.
    pub mask1: Vec<bool>,
}

impl PlantedMap {
    pub fn region_len(&self) -> usize {
        self.mask1.iter().filter(|&&m| m).count()
    }
}

// Normal draw resampled until positive; exact `mean` when `std == 0`.
fn positive_normal(rng: &mut LabRng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean;
    }
    loop {
        let v = mean + std * standard_normal(rng);
        if v > 0.0 {
            return v;
        }
    }
}

pub fn plant_map(r: &RegionSpec, seed: u64, placement: Placement) -> Result<PlantedMap> {
    r.validate()?;
    let l = r.l;
    let total = l * l;
    let n = r.region_pixels();
    if n > total {
        return Err(Error::InvalidRegion(format!(
            "region of {n} pixels does not fit a {l}x{l} map"
        )));
    }
    let mut rng = seeded(seed, 0x706c_616e_74);
    let mut mask1 = alloc::vec![false; total];
    match placement {
        Placement::Scattered => {
            for i in sample(&mut rng, total, n) {
                mask1[i] = true;
            }
        }
        Placement::Disc => {
            let ch = uniform(&mut rng, 0.0, l as f64);
            let cw = uniform(&mut rng, 0.0, l as f64);
            let mut order: Vec<(f64, usize)> = (0..total)
                .map(|i| {
                    let dh = (i / l) as f64 + 0.5 - ch;
                    let dw = (i % l) as f64 + 0.5 - cw;
                    (dh * dh + dw * dw, i)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, i) in &order[..n] {
                mask1[i] = true;
            }
        }
    }
    let data = mask1
        .iter()
        .map(|&m| {
            if m {
                positive_normal(&mut rng, r.mu1, r.sigma1)
            } else {
                positive_normal(&mut rng, r.mu2, r.sigma2)
            }
        })
        .collect();
    Ok(PlantedMap {
        map: Tensor::new(&[1, l, l], data)?,
        mask1,
    })
}

/// Mean over `S1` of the instance-normalized map.
pub fn empirical_post_in_mean(m: &PlantedMap, eps: f64) -> Result<f64> {
    let (y, _) = instance_norm(&m.map, eps)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for (&v, &inside) in y.data().iter().zip(&m.mask1) {
        if inside {
            acc += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidRegion("empty S1 mask".into()));
    }
    Ok(acc / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub exact: f64,
    pub approx: f64,
    pub empirical_mean: f64,
    pub empirical_stderr: f64,
    pub n_seeds: usize,
}

/// Closed forms at each requested `alpha` next to the planted-map average
/// over seeds `0..seeds`. The empirical column uses `round(alpha l^2)`
/// pixels.
pub fn amplification_sweep(
    alphas: &[f64],
    template: &RegionSpec,
    seeds: usize,
    placement: Placement,
) -> Result<Vec<SweepRow>> {
    if seeds == 0 {
        return Err(Error::Invalid("amplification sweep needs at least one seed".into()));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let r = RegionSpec { alpha, ..*template };
            r.validate()?;
            let samples = (0..seeds as u64)
                .map(|s| plant_map(&r, s, placement).and_then(|m| empirical_post_in_mean(&m, EMPIRICAL_EPS)))
                .collect::<Result<Vec<f64>>>()?;
            let (mean, stderr) = mean_stderr(&samples);
            Ok(SweepRow {
                alpha,
                exact: post_in_mean_exact(&r)?,
                approx: post_in_mean_approx(alpha)?,
                empirical_mean: mean,
                empirical_stderr: stderr,
                n_seeds: seeds,
            })
        })
        .collect()
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, num_traits::Float::sqrt(var / n))
}
