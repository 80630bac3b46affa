//! Toy style-based synthesis network: mapping MLP, learned 4x4 constant,
//! two normalization sites per resolution and a 3x3 conv to RGB.
//!
//! Every site runs `conv3x3 -> [zero ablated channels] -> add noise ->
//! leaky_relu -> norm -> gamma * y + beta`, with `gamma = v_sigma w + b_sigma`
//! and `beta = v_mu w + b_mu`. The first site of each resolution above 4x4
//! upsamples its input first.

mod config;
mod params;

use alloc::vec::Vec;

pub use config::{GeneratorConfig, NormKind};
pub use params::{parameter_shapes, GeneratorParams, Layer, SiteParams, StyleParams};

use crate::error::{Error, Result};
use crate::norm::NORM_EPS;
use crate::ops::LEAKY_SLOPE;
use crate::real::Real;
use crate::rng::{normal_tensor, seeded};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const Z_STREAM: u64 = 0x7a;
const NOISE_STREAM: u64 = 0x6e6f_6973_6500;

/// Input latent, `[latent_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentZ<R = f32>(pub Tensor<R>);

/// Output of the mapping network, `[latent_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentW<R = f32>(pub Tensor<R>);

impl<R: Real> LatentZ<R> {
    pub fn new(t: Tensor<R>) -> Result<Self> {
        if t.rank() != 1 {
            return Err(Error::dim("latent", "[D]", t.shape()));
        }
        Ok(Self(t.ensure_finite("latent")?))
    }

    /// Standard normal draw.
    pub fn from_seed(seed: u64, dim: usize) -> Self {
        let mut rng = seeded(seed, Z_STREAM);
        Self(normal_tensor(&mut rng, &[dim], 1.0))
    }
}

/// Noise for one site.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    /// Standard normal map drawn from this seed and the site index.
    Seed(u64),
    /// Explicit `[1,H,W]` map.
    Map(Tensor<f64>),
}

/// Per-site noise inputs. Ignored when the config disables noise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseInputs {
    pub sites: Vec<NoiseSource>,
}

impl NoiseInputs {
    pub fn from_seed(seed: u64, cfg: &GeneratorConfig) -> Self {
        Self {
            sites: (0..cfg.num_sites()).map(|_| NoiseSource::Seed(seed)).collect(),
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    /// The `[1,H,W]` map per site, or an empty list if noise is disabled.
    pub fn resolve<R: Real>(&self, cfg: &GeneratorConfig) -> Result<Vec<Tensor<R>>> {
        if !cfg.noise_enabled {
            return Ok(Vec::new());
        }
        if self.sites.len() != cfg.num_sites() {
            return Err(Error::ParamMismatch(alloc::format!(
                "expected noise for {} sites, got {}",
                cfg.num_sites(),
                self.sites.len()
            )));
        }
        self.sites
            .iter()
            .enumerate()
            .map(|(s, src)| {
                let r = cfg.site_resolution(s);
                match src {
                    NoiseSource::Seed(seed) => {
                        let mut rng = seeded(*seed, NOISE_STREAM + s as u64);
                        Ok(normal_tensor(&mut rng, &[1, r, r], 1.0))
                    }
                    NoiseSource::Map(m) if m.shape() == [1, r, r] => Ok(m.cast()),
                    NoiseSource::Map(m) => Err(Error::dim("noise", alloc::format!("[1,{r},{r}]"), m.shape())),
                }
            })
            .collect()
    }
}

/// One convolutional unit: a channel at a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitRef {
    pub site: usize,
    pub channel: usize,
}

impl UnitRef {
    pub fn new(site: usize, channel: usize) -> Self {
        Self { site, channel }
    }

    pub fn check(&self, cfg: &GeneratorConfig) -> Result<()> {
        cfg.check_site(self.site)?;
        let c = cfg.site_channels(self.site);
        if self.channel >= c {
            return Err(Error::OutOfRange {
                what: "channel",
                index: self.channel,
                limit: c,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    PostConv,
    PostNoise,
    PostNorm,
    PostStyle,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::PostConv, Stage::PostNoise, Stage::PostNorm, Stage::PostStyle];

    pub fn name(self) -> &'static str {
        match self {
            Stage::PostConv => "post-conv",
            Stage::PostNoise => "post-noise",
            Stage::PostNorm => "post-norm",
            Stage::PostStyle => "post-style",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord<R> {
    pub site: usize,
    pub resolution: usize,
    pub stage: Stage,
    pub map: Tensor<R>,
}

/// Every stage of every site, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisTrace<R = f32> {
    pub records: Vec<TraceRecord<R>>,
}

impl<R: Real> SynthesisTrace<R> {
    pub fn get(&self, site: usize, stage: Stage) -> Result<&Tensor<R>> {
        self.records
            .iter()
            .find(|r| r.site == site && r.stage == stage)
            .map(|r| &r.map)
            .ok_or(Error::OutOfRange {
                what: "trace site",
                index: site,
                limit: self.num_sites(),
            })
    }

    pub fn num_sites(&self) -> usize {
        self.records.iter().map(|r| r.site + 1).max().unwrap_or(0)
    }

    /// True when every site has all four stages with the configured shape.
    pub fn is_complete(&self, cfg: &GeneratorConfig) -> bool {
        self.records.len() == 4 * cfg.num_sites()
            && (0..cfg.num_sites()).all(|s| {
                let (c, r) = (cfg.site_channels(s), cfg.site_resolution(s));
                Stage::ALL.iter().all(|&st| {
                    self.get(s, st)
                        .map(|m| m.shape() == [c, r, r])
                        .unwrap_or(false)
                })
            })
    }
}

/// Tape handles produced by [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub w: Var,
    pub image: Var,
    /// Per site, indexed like [`Stage::ALL`].
    pub stages: Vec<[Var; 4]>,
}

fn check_mask(cfg: &GeneratorConfig, mask: &[UnitRef]) -> Result<()> {
    mask.iter().try_for_each(|u| u.check(cfg))
}

/// Mapping network on a tape.
pub fn mapping_tape<R: Real>(tape: &mut Tape<R>, params: &GeneratorParams<Var>, z: Var) -> Result<Var> {
    let mut h = z;
    let last = params.mapping.len().saturating_sub(1);
    for (i, l) in params.mapping.iter().enumerate() {
        h = tape.affine(h, l.weight, l.bias)?;
        if i != last {
            h = tape.leaky_relu(h, R::from_f64(LEAKY_SLOPE))?;
        }
    }
    Ok(h)
}

/// Full generator on a tape. `noise` comes from [`NoiseInputs::resolve`].
pub fn forward<R: Real>(
    tape: &mut Tape<R>,
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Var>,
    z: Var,
    noise: &[Tensor<R>],
    mask: &[UnitRef],
) -> Result<ForwardVars> {
    cfg.validate()?;
    check_mask(cfg, mask)?;
    if params.sites.len() != cfg.num_sites() || params.mapping.len() != cfg.mapping_layers {
        return Err(Error::ParamMismatch("parameters do not match config".into()));
    }
    if cfg.noise_enabled && noise.len() != cfg.num_sites() {
        return Err(Error::ParamMismatch("missing noise maps".into()));
    }
    let eps = R::from_f64(NORM_EPS);
    let slope = R::from_f64(LEAKY_SLOPE);
    let w = mapping_tape(tape, params, z)?;
    let mut x = params.constant;
    let mut stages = Vec::with_capacity(cfg.num_sites());
    for (s, sp) in params.sites.iter().enumerate() {
        if s > 0 && s % 2 == 0 {
            x = tape.upsample2x(x)?;
        }
        let mut conv = tape.conv3x3(x, sp.conv.weight, sp.conv.bias)?;
        let ablated: Vec<usize> = mask.iter().filter(|u| u.site == s).map(|u| u.channel).collect();
        if !ablated.is_empty() {
            conv = tape.zero_channels(conv, &ablated)?;
        }
        let noisy = if cfg.noise_enabled {
            tape.add_scaled_noise(conv, &noise[s], sp.noise_scale)?
        } else {
            conv
        };
        let act = tape.leaky_relu(noisy, slope)?;
        let normed = match cfg.norm_kinds[s] {
            NormKind::InStyle | NormKind::Adain => tape.instance_norm(act, eps)?,
            NormKind::PnStyle => tape.pixel_norm(act, eps)?,
            NormKind::PinStyle => {
                let rho = sp.rho.ok_or_else(|| Error::ParamMismatch(alloc::format!("site{s}.rho missing")))?;
                tape.pin(act, rho, eps)?
            }
        };
        let beta = tape.affine(w, sp.style.v_mu, sp.style.b_mu)?;
        let gamma = tape.affine(w, sp.style.v_sigma, sp.style.b_sigma)?;
        let styled = tape.style_modulate(normed, gamma, beta)?;
        stages.push([conv, noisy, normed, styled]);
        x = styled;
    }
    let image = tape.conv3x3(x, params.to_rgb.weight, params.to_rgb.bias)?;
    Ok(ForwardVars { w, image, stages })
}

/// `z -> w`.
pub fn mapping_forward<R: Real>(z: &LatentZ<R>, params: &GeneratorParams<Tensor<R>>) -> Result<LatentW<R>> {
    let mut tape = Tape::new();
    let p = params.to_constants(&mut tape);
    let zv = tape.constant(z.0.clone());
    let w = mapping_tape(&mut tape, &p, zv)?;
    Ok(LatentW(tape.value(w).clone()))
}

/// Image `[3,R,R]` and full trace.
pub fn synthesize<R: Real>(
    z: &LatentZ<R>,
    noise: &NoiseInputs,
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Tensor<R>>,
) -> Result<(Tensor<R>, SynthesisTrace<R>)> {
    synthesize_masked(z, noise, cfg, params, &[])
}

/// [`synthesize`] with the post-conv output of every unit in `mask` zeroed.
pub fn synthesize_masked<R: Real>(
    z: &LatentZ<R>,
    noise: &NoiseInputs,
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Tensor<R>>,
    mask: &[UnitRef],
) -> Result<(Tensor<R>, SynthesisTrace<R>)> {
    params.validate(cfg)?;
    if z.0.shape() != [cfg.latent_dim] {
        return Err(Error::dim("synthesize", alloc::format!("[{}]", cfg.latent_dim), z.0.shape()));
    }
    let maps = noise.resolve(cfg)?;
    let mut tape = Tape::new();
    let p = params.to_constants(&mut tape);
    let zv = tape.constant(z.0.clone());
    let fv = forward(&mut tape, cfg, &p, zv, &maps, mask)?;
    let mut records = Vec::with_capacity(4 * cfg.num_sites());
    for (s, vars) in fv.stages.iter().enumerate() {
        for (stage, v) in Stage::ALL.iter().zip(vars) {
            records.push(TraceRecord {
                site: s,
                resolution: cfg.site_resolution(s),
                stage: *stage,
                map: tape.value(*v).clone(),
            });
        }
    }
    Ok((tape.value(fv.image).clone(), SynthesisTrace { records }))
}

fn require_adain(cfg: &GeneratorConfig, site: usize) -> Result<()> {
    cfg.check_site(site)?;
    match cfg.norm_kinds[site] {
        NormKind::Adain => Ok(()),
        k => Err(Error::WrongNormKind {
            site,
            kind: k.name(),
            expected: NormKind::Adain.name(),
        }),
    }
}

/// `(mu_y, sigma_y)` at an AdaIN site.
pub fn style_params_at<R: Real>(
    cfg: &GeneratorConfig,
    site: usize,
    w: &LatentW<R>,
    params: &GeneratorParams<Tensor<R>>,
) -> Result<(Tensor<R>, Tensor<R>)> {
    require_adain(cfg, site)?;
    let st = &params.sites[site].style;
    let mu = crate::ops::affine(&w.0, &st.v_mu, &st.b_mu)?;
    let sigma = crate::ops::affine(&w.0, &st.v_sigma, &st.b_sigma)?;
    Ok((mu, sigma))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasRow {
    pub channel: usize,
    pub abs_b_mu: f64,
    pub abs_b_sigma: f64,
}

/// `(channel, |b_mu|, |b_sigma|)` per channel of an AdaIN site.
pub fn bias_scatter<R: Real>(
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Tensor<R>>,
    site: usize,
) -> Result<Vec<BiasRow>> {
    require_adain(cfg, site)?;
    let st = &params.sites[site].style;
    Ok(st
        .b_mu
        .data()
        .iter()
        .zip(st.b_sigma.data())
        .enumerate()
        .map(|(c, (m, s))| BiasRow {
            channel: c,
            abs_b_mu: m.as_f64().abs(),
            abs_b_sigma: s.as_f64().abs(),
        })
        .collect())
}

/// Post-norm value of every channel at one pixel.
pub fn channel_profile<R: Real>(trace: &SynthesisTrace<R>, site: usize, pixel: (usize, usize)) -> Result<Vec<R>> {
    let m = trace.get(site, Stage::PostNorm)?;
    let (c, h, w) = m.chw()?;
    if pixel.0 >= h {
        return Err(Error::OutOfRange { what: "pixel row", index: pixel.0, limit: h });
    }
    if pixel.1 >= w {
        return Err(Error::OutOfRange { what: "pixel column", index: pixel.1, limit: w });
    }
    Ok((0..c).map(|ch| m.at3(ch, pixel.0, pixel.1)).collect())
}
