//! Unit ablation, iterative ablation toward the artifact, keep-one-unit,
//! noise resampling and high-magnitude region detection.

use alloc::collections::BTreeSet;
use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::generator::{
    synthesize_masked, GeneratorConfig, GeneratorParams, LatentZ, NoiseInputs, Stage, SynthesisTrace,
};
use crate::real::Real;
use crate::tensor::Tensor;

pub use crate::generator::UnitRef;

pub const DEFAULT_K: f64 = 8.0;

/// MAD is floored at this fraction of `|median|` so flat maps flag nothing.
const MAD_FLOOR: f64 = 1e-6;

/// Set of units whose post-conv output is zeroed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct AblationMask {
    units: BTreeSet<UnitRef>,
}

impl AblationMask {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails on duplicates.
    pub fn from_units(units: impl IntoIterator<Item = UnitRef>) -> Result<Self> {
        let mut m = Self::new();
        for u in units {
            if !m.insert(u) {
                return Err(Error::Invalid(alloc::format!(
                    "duplicate unit {}:{} in mask",
                    u.site,
                    u.channel
                )));
            }
        }
        Ok(m)
    }

    /// Returns false if already present.
    pub fn insert(&mut self, u: UnitRef) -> bool {
        self.units.insert(u)
    }

    pub fn contains(&self, u: UnitRef) -> bool {
        self.units.contains(&u)
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Sorted by `(site, channel)`.
    pub fn units(&self) -> Vec<UnitRef> {
        self.units.iter().copied().collect()
    }

    pub fn validate(&self, cfg: &GeneratorConfig) -> Result<()> {
        self.units.iter().try_for_each(|u| u.check(cfg))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// `(h, w)`, unweighted mean of the pixel coordinates.
    pub centroid: (f64, f64),
    /// Row-major order.
    pub pixels: Vec<(usize, usize)>,
    pub peak: f64,
    pub mean: f64,
    /// Region mean over the mean of all unflagged pixels.
    pub contrast: f64,
}

impl Region {
    pub fn n_pixels(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactReport {
    pub site: usize,
    pub height: usize,
    pub width: usize,
    pub median: f64,
    pub mad: f64,
    pub threshold: f64,
    /// Sorted by peak, highest first.
    pub regions: Vec<Region>,
}

impl ArtifactReport {
    pub fn top(&self) -> Option<&Region> {
        self.regions.first()
    }
}

/// Per-pixel mean of `|x|` over channels, row-major `[H*W]`.
pub fn magnitude_map<R: Real>(x: &Tensor<R>) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = x.chw()?;
    let mut acc = vec![0.0f64; h * w];
    for ch in 0..c {
        for (a, v) in acc.iter_mut().zip(x.channel(ch)) {
            *a += v.as_f64().abs();
        }
    }
    acc.iter_mut().for_each(|a| *a /= c as f64);
    Ok((acc, h, w))
}

fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Threshold the magnitude map at `median + k * MAD` and group flagged
/// pixels into 4-connected regions.
pub fn detect_in_map(mag: &[f64], height: usize, width: usize, site: usize, k: f64) -> ArtifactReport {
    let med = median(mag);
    let deviations: Vec<f64> = mag.iter().map(|v| (v - med).abs()).collect();
    let mad = median(&deviations);
    let threshold = med + k * mad.max(MAD_FLOOR * med.abs());
    let flagged: Vec<bool> = mag.iter().map(|&v| v > threshold).collect();

    let (mut sum_bg, mut n_bg) = (0.0, 0usize);
    for (&v, &f) in mag.iter().zip(&flagged) {
        if !f {
            sum_bg += v;
            n_bg += 1;
        }
    }
    let bg = if n_bg > 0 { sum_bg / n_bg as f64 } else { 0.0 };

    let mut seen = vec![false; mag.len()];
    let mut regions = Vec::new();
    for start in 0..mag.len() {
        if !flagged[start] || seen[start] {
            continue;
        }
        let mut idx = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            idx.push(i);
            let (h, w) = (i / width, i % width);
            let mut visit = |j: usize| {
                if flagged[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if h > 0 {
                visit(i - width);
            }
            if h + 1 < height {
                visit(i + width);
            }
            if w > 0 {
                visit(i - 1);
            }
            if w + 1 < width {
                visit(i + 1);
            }
        }
        idx.sort_unstable();
        let n = idx.len() as f64;
        let pixels: Vec<(usize, usize)> = idx.iter().map(|&i| (i / width, i % width)).collect();
        let ch = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let cw = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let peak = idx.iter().map(|&i| mag[i]).fold(f64::NEG_INFINITY, f64::max);
        let mean = idx.iter().map(|&i| mag[i]).sum::<f64>() / n;
        let contrast = if bg > 0.0 { mean / bg } else { f64::INFINITY };
        regions.push(Region {
            centroid: (ch, cw),
            pixels,
            peak,
            mean,
            contrast,
        });
    }
    regions.sort_by(|a, b| b.peak.total_cmp(&a.peak));
    ArtifactReport {
        site,
        height,
        width,
        median: med,
        mad,
        threshold,
        regions,
    }
}

/// Regions of unusually high cross-channel magnitude at a site's
/// post-norm stage.
pub fn detect_regions<R: Real>(trace: &SynthesisTrace<R>, site: usize, k: f64) -> Result<ArtifactReport> {
    let (mag, h, w) = magnitude_map(trace.get(site, Stage::PostNorm)?)?;
    Ok(detect_in_map(&mag, h, w, site, k))
}

/// [`synthesize`](crate::generator::synthesize) with masked units zeroed
/// after their convolution.
pub fn ablate_synthesize<R: Real>(
    z: &LatentZ<R>,
    noise: &NoiseInputs,
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Tensor<R>>,
    mask: &AblationMask,
) -> Result<(Tensor<R>, SynthesisTrace<R>)> {
    mask.validate(cfg)?;
    synthesize_masked(z, noise, cfg, params, &mask.units())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationStep {
    pub mask: AblationMask,
    /// Detection at the final site after applying `mask`.
    pub report: ArtifactReport,
    /// Unit added at this step; `None` for the baseline.
    pub added: Option<UnitRef>,
}

/// Pixels of `region` at `from_res`, projected onto a grid of `to_res`.
fn project(pixels: &[(usize, usize)], from_res: usize, to_res: usize) -> Vec<usize> {
    let f = from_res / to_res;
    let set: BTreeSet<usize> = pixels.iter().map(|&(h, w)| (h / f) * to_res + w / f).collect();
    set.into_iter().collect()
}

/// Unmasked channel at `site` with the largest mean `|post-conv|` over
/// `pixels` (all pixels if empty). Ties go to the lowest channel.
fn strongest_unit<R: Real>(
    trace: &SynthesisTrace<R>,
    site: usize,
    pixels: &[usize],
    mask: &AblationMask,
) -> Result<Option<UnitRef>> {
    let conv = trace.get(site, Stage::PostConv)?;
    let (c, h, w) = conv.chw()?;
    let all: Vec<usize>;
    let pixels = if pixels.is_empty() {
        all = (0..h * w).collect();
        &all
    } else {
        pixels
    };
    let mut best: Option<(usize, f64)> = None;
    for ch in 0..c {
        if mask.contains(UnitRef::new(site, ch)) {
            continue;
        }
        let data = conv.channel(ch);
        let score = pixels.iter().map(|&i| data[i].as_f64().abs()).sum::<f64>() / pixels.len() as f64;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((ch, score));
        }
    }
    Ok(best.map(|(ch, _)| UnitRef::new(site, ch)))
}

/// First site whose input carries the styled output of `site`; the final
/// site for the last one.
pub fn detection_site(cfg: &GeneratorConfig, site: usize) -> usize {
    (site + 1).min(cfg.final_site())
}

/// Repeatedly detect the top region at [`detection_site`], ablate the unit
/// at `site` with the largest activation over it, and re-synthesize.
///
/// Returns `steps + 1` entries; entry `i` carries a mask of `i` units and
/// entry 0 is the unablated baseline.
pub fn iterative_ablation<R: Real>(
    z: &LatentZ<R>,
    noise: &NoiseInputs,
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Tensor<R>>,
    site: usize,
    steps: usize,
    k: f64,
) -> Result<Vec<AblationStep>> {
    if steps == 0 {
        return Err(Error::Invalid("iterative ablation needs at least one step".into()));
    }
    cfg.check_site(site)?;
    if steps > cfg.site_channels(site) {
        return Err(Error::OutOfRange {
            what: "ablation steps",
            index: steps,
            limit: cfg.site_channels(site),
        });
    }
    let last = detection_site(cfg, site);
    let mut mask = AblationMask::new();
    let (_, mut trace) = ablate_synthesize(z, noise, cfg, params, &mask)?;
    let mut report = detect_regions(&trace, last, k)?;
    let mut out = vec![AblationStep {
        mask: mask.clone(),
        report: report.clone(),
        added: None,
    }];
    for _ in 0..steps {
        let pixels = report
            .top()
            .map(|r| project(&r.pixels, cfg.site_resolution(last), cfg.site_resolution(site)))
            .unwrap_or_default();
        let unit = strongest_unit(&trace, site, &pixels, &mask)?.expect("steps bounded by channel count");
        mask.insert(unit);
        (_, trace) = ablate_synthesize(z, noise, cfg, params, &mask)?;
        report = detect_regions(&trace, last, k)?;
        out.push(AblationStep {
            mask: mask.clone(),
            report: report.clone(),
            added: Some(unit),
        });
    }
    Ok(out)
}

/// Ablate every channel at `site` except `channel`.
pub fn keep_one_unit<R: Real>(
    z: &LatentZ<R>,
    noise: &NoiseInputs,
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Tensor<R>>,
    site: usize,
    channel: usize,
) -> Result<(Tensor<R>, SynthesisTrace<R>)> {
    UnitRef::new(site, channel).check(cfg)?;
    let mask = AblationMask::from_units(
        (0..cfg.site_channels(site))
            .filter(|&c| c != channel)
            .map(|c| UnitRef::new(site, c)),
    )?;
    ablate_synthesize(z, noise, cfg, params, &mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidDistance {
    pub a: usize,
    pub b: usize,
    /// Between top-region centroids; `Some(0.0)` when both runs detect
    /// nothing, `None` when only one does.
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseResample {
    pub seeds: Vec<u64>,
    pub reports: Vec<ArtifactReport>,
    pub distances: Vec<CentroidDistance>,
}

impl NoiseResample {
    pub fn max_distance(&self) -> Option<f64> {
        self.distances.iter().filter_map(|d| d.distance).reduce(f64::max)
    }
}

/// Same `z`, one synthesis per noise seed; detection at the final site.
pub fn noise_resample_experiment<R: Real>(
    z: &LatentZ<R>,
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Tensor<R>>,
    n_seeds: usize,
    k: f64,
) -> Result<NoiseResample> {
    let seeds: Vec<u64> = (0..n_seeds as u64).collect();
    noise_resample_with_seeds(z, cfg, params, &seeds, k)
}

pub fn noise_resample_with_seeds<R: Real>(
    z: &LatentZ<R>,
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Tensor<R>>,
    seeds: &[u64],
    k: f64,
) -> Result<NoiseResample> {
    if seeds.len() < 2 {
        return Err(Error::Invalid("noise resampling needs at least two seeds".into()));
    }
    let last = cfg.final_site();
    let reports = seeds
        .iter()
        .map(|&s| {
            let (_, trace) = synthesize_masked(z, &NoiseInputs::from_seed(s, cfg), cfg, params, &[])?;
            detect_regions(&trace, last, k)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut distances = Vec::new();
    for a in 0..reports.len() {
        for b in a + 1..reports.len() {
            let distance = match (reports[a].top(), reports[b].top()) {
                (None, None) => Some(0.0),
                (Some(p), Some(q)) => {
                    let (dh, dw) = (p.centroid.0 - q.centroid.0, p.centroid.1 - q.centroid.1);
                    Some(Float::sqrt(dh * dh + dw * dw))
                }
                _ => None,
            };
            distances.push(CentroidDistance { a, b, distance });
        }
    }
    Ok(NoiseResample {
        seeds: seeds.to_vec(),
        reports,
        distances,
    })
}
