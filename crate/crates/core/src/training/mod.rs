//! Tiny adversarial training loop: synthetic dataset, small conv
//! discriminator, non-saturating loss, SGD or Adam, `rho` projected onto
//! `[0,1]` after every generator update.

mod dataset;
mod disc;
mod optim;

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub use dataset::SyntheticDatasetSpec;
pub use disc::{disc_parameter_shapes, disc_tape, discriminator_forward, DiscParams};
pub use optim::{OptState, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use crate::dissect::{detect_regions, magnitude_map, DEFAULT_K};
use crate::error::{Error, Result};
use crate::generator::{
    forward, synthesize, GeneratorConfig, GeneratorParams, LatentZ, NoiseInputs, NormKind, Stage,
};
use crate::norm::clip_rho_in_place;
use crate::rng::{index, next_seed, seeded};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const STEP_STREAM: u64 = 0x7374_6570_0000_0000;
const PROBE_SEED: u64 = 0x7072_6f62_6500;
pub const PROBE_COUNT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// The amplification metric is logged every this many steps and at
    /// the last step.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            checkpoint_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config(
                "batch_size and checkpoint_interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Named `f32` tensors plus the generator structure hash and step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn check_hash(&self, cfg: &GeneratorConfig) -> Result<()> {
        if self.config_hash != cfg.structure_hash() {
            return Err(Error::ParamMismatch(format!(
                "checkpoint config hash {:016x} does not match config hash {:016x}",
                self.config_hash,
                cfg.structure_hash()
            )));
        }
        Ok(())
    }

    /// Generator parameters, after checking the config hash.
    pub fn generator(&self, cfg: &GeneratorConfig) -> Result<GeneratorParams<Tensor<f32>>> {
        self.check_hash(cfg)?;
        GeneratorParams::from_named(cfg, &self.tensors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub amp_metric: Option<f64>,
}

/// Mean over a fixed probe batch of `max / median` of the cross-channel
/// mean magnitude at the final post-norm site, and the total number of
/// detected regions over the batch.
pub fn amplification_metric(
    cfg: &GeneratorConfig,
    params: &GeneratorParams<Tensor<f32>>,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut regions = 0;
    for i in 0..PROBE_COUNT as u64 {
        let z = LatentZ::from_seed(PROBE_SEED + i, cfg.latent_dim);
        let noise = NoiseInputs::from_seed(PROBE_SEED + i, cfg);
        let (_, trace) = synthesize(&z, &noise, cfg, params)?;
        let site = cfg.final_site();
        let (mag, _, _) = magnitude_map(trace.get(site, Stage::PostNorm)?)?;
        let mut sorted = mag.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        sum += sorted[n - 1] / median.max(1e-12);
        regions += detect_regions(&trace, site, DEFAULT_K)?.regions.len();
    }
    Ok((sum / PROBE_COUNT as f64, regions))
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub gcfg: GeneratorConfig,
    pub tcfg: TrainConfig,
    pub generator: GeneratorParams<Tensor<f32>>,
    pub disc: DiscParams<Tensor<f32>>,
    pub g_opt: OptState,
    pub d_opt: OptState,
    pub step: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("training diverged at step {step}: {error}")]
    Diverged {
        step: u64,
        error: Error,
        /// State before the failing step.
        checkpoint: Box<Checkpoint>,
        metrics: Vec<MetricsRow>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.state.checkpoint()
    }
}

fn names_of(shapes: Vec<(String, Vec<usize>)>) -> Vec<String> {
    shapes.into_iter().map(|(n, _)| n).collect()
}

fn load_opt(
    ckpt: &Checkpoint,
    kind: OptimizerKind,
    net: &str,
    names: &[(String, Vec<usize>)],
) -> Result<OptState> {
    match kind {
        OptimizerKind::Sgd => Ok(OptState::Sgd),
        OptimizerKind::Adam => {
            let fetch = |moment: &str| -> Result<Vec<Tensor<f32>>> {
                names
                    .iter()
                    .map(|(n, shape)| {
                        let key = format!("opt.{net}.{moment}.{n}");
                        let t = ckpt
                            .get(&key)
                            .ok_or_else(|| Error::ParamMismatch(format!("missing tensor {key}")))?;
                        if t.shape() != shape.as_slice() {
                            return Err(Error::ParamMismatch(format!("{key}: wrong shape {:?}", t.shape())));
                        }
                        Ok(t.clone())
                    })
                    .collect()
            };
            Ok(OptState::Adam {
                m: fetch("m")?,
                v: fetch("v")?,
            })
        }
    }
}

impl TrainState {
    pub fn new(tcfg: TrainConfig, gcfg: GeneratorConfig) -> Result<Self> {
        tcfg.validate()?;
        let generator = GeneratorParams::<Tensor<f32>>::init(&gcfg)?;
        let disc = DiscParams::<Tensor<f32>>::init(&gcfg, gcfg.seed)?;
        let g_opt = OptState::new(tcfg.optimizer, &generator.leaves());
        let d_opt = OptState::new(tcfg.optimizer, &disc.leaves());
        Ok(Self {
            gcfg,
            tcfg,
            generator,
            disc,
            g_opt,
            d_opt,
            step: 0,
        })
    }

    /// Restore from a checkpoint written by [`checkpoint`](Self::checkpoint).
    pub fn from_checkpoint(ckpt: &Checkpoint, tcfg: TrainConfig, gcfg: GeneratorConfig) -> Result<Self> {
        tcfg.validate()?;
        let generator = ckpt.generator(&gcfg)?;
        let disc = DiscParams::from_named(&gcfg, &ckpt.tensors)?;
        let g_opt = load_opt(ckpt, tcfg.optimizer, "g", &crate::generator::parameter_shapes(&gcfg))?;
        let d_opt = load_opt(ckpt, tcfg.optimizer, "d", &disc_parameter_shapes(&gcfg))?;
        Ok(Self {
            gcfg,
            tcfg,
            generator,
            disc,
            g_opt,
            d_opt,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.generator.named();
        tensors.extend(self.disc.named());
        let g_names = names_of(crate::generator::parameter_shapes(&self.gcfg));
        let d_names = names_of(disc_parameter_shapes(&self.gcfg));
        for (net, names, opt) in [("g", &g_names, &self.g_opt), ("d", &d_names, &self.d_opt)] {
            if let OptState::Adam { m, v } = opt {
                for (moment, ts) in [("m", m), ("v", v)] {
                    for (n, t) in names.iter().zip(ts) {
                        tensors.push((format!("opt.{net}.{moment}.{n}"), t.clone()));
                    }
                }
            }
        }
        Checkpoint {
            config_hash: self.gcfg.structure_hash(),
            step: self.step,
            tensors,
        }
    }

    fn fake_image(
        &self,
        tape: &mut Tape<f32>,
        params: &GeneratorParams<Var>,
        z_seed: u64,
        noise_seed: u64,
    ) -> Result<Var> {
        let z = LatentZ::<f32>::from_seed(z_seed, self.gcfg.latent_dim);
        let noise = NoiseInputs::from_seed(noise_seed, &self.gcfg).resolve::<f32>(&self.gcfg)?;
        let zv = tape.constant(z.0);
        Ok(forward(tape, &self.gcfg, params, zv, &noise, &[])?.image)
    }

    /// `mean(softplus(sign * logit))` over the images.
    fn disc_loss(
        tape: &mut Tape<f32>,
        d: &DiscParams<Var>,
        images: &[(Var, f32)],
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for &(img, sign) in images {
            let logit = disc_tape(tape, d, img)?;
            let signed = tape.scale(logit, sign)?;
            let l = tape.softplus(signed)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
        tape.scale(total, 1.0 / images.len() as f32)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, data: &[Tensor<f32>]) -> Result<MetricsRow> {
        if data.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        let t = self.step + 1;
        let b = self.tcfg.batch_size;
        let mut rng = seeded(self.tcfg.seed, STEP_STREAM + t);

        let mut tape = Tape::new();
        let gc = self.generator.to_constants(&mut tape);
        let dv = self.disc.to_leaves(&mut tape);
        let mut images = Vec::with_capacity(2 * b);
        for _ in 0..b {
            let real = data[index(&mut rng, data.len())].clone();
            images.push((tape.constant(real), -1.0));
        }
        for _ in 0..b {
            let (zs, ns) = (next_seed(&mut rng), next_seed(&mut rng));
            let img = self.fake_image(&mut tape, &gc, zs, ns)?;
            let detached = tape.constant(tape.value(img).clone());
            images.push((detached, 1.0));
        }
        let d_loss_var = Self::disc_loss(&mut tape, &dv, &images)?;
        let d_loss = tape.value(d_loss_var).data()[0] as f64;
        let mut grads = tape.backward(d_loss_var)?;
        let d_grads: Vec<Tensor<f32>> = dv
            .leaves()
            .into_iter()
            .zip(self.disc.leaves())
            .map(|(v, p)| grads.take_or_zeros(*v, p))
            .collect();

        let mut tape = Tape::new();
        let gv = self.generator.to_leaves(&mut tape);
        let dc = self.disc.to_constants(&mut tape);
        let mut fakes = Vec::with_capacity(b);
        for _ in 0..b {
            let (zs, ns) = (next_seed(&mut rng), next_seed(&mut rng));
            fakes.push((self.fake_image(&mut tape, &gv, zs, ns)?, -1.0));
        }
        let g_loss_var = Self::disc_loss(&mut tape, &dc, &fakes)?;
        let g_loss = tape.value(g_loss_var).data()[0] as f64;
        let mut grads = tape.backward(g_loss_var)?;
        let g_grads: Vec<Tensor<f32>> = gv
            .leaves()
            .into_iter()
            .zip(self.generator.leaves())
            .map(|(v, p)| grads.take_or_zeros(*v, p))
            .collect();

        if !(d_loss.is_finite() && g_loss.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        self.d_opt.apply(self.disc.leaves_mut(), &d_grads, self.tcfg.lr, t);
        self.g_opt.apply(self.generator.leaves_mut(), &g_grads, self.tcfg.lr, t);
        for s in &mut self.generator.sites {
            if let Some(rho) = &mut s.rho {
                clip_rho_in_place(rho);
            }
        }
        self.step = t;

        let amp_metric = if t % self.tcfg.checkpoint_interval == 0 || t == self.tcfg.steps {
            Some(amplification_metric(&self.gcfg, &self.generator)?.0)
        } else {
            None
        };
        Ok(MetricsRow {
            step: t,
            d_loss,
            g_loss,
            amp_metric,
        })
    }

    /// Train until `tcfg.steps`, calling `observer` after every step.
    pub fn run(
        mut self,
        data: &[Tensor<f32>],
        mut observer: impl FnMut(&TrainState, &MetricsRow),
    ) -> core::result::Result<TrainOutcome, TrainError> {
        let mut metrics = Vec::new();
        while self.step < self.tcfg.steps {
            let before = self.checkpoint();
            match self.train_step(data) {
                Ok(row) => {
                    observer(&self, &row);
                    metrics.push(row);
                }
                Err(error) => {
                    return Err(TrainError::Diverged {
                        step: self.step + 1,
                        error,
                        checkpoint: Box::new(before),
                        metrics,
                    })
                }
            }
        }
        Ok(TrainOutcome { state: self, metrics })
    }
}

fn check_data(gcfg: &GeneratorConfig, data: &SyntheticDatasetSpec) -> Result<()> {
    data.validate()?;
    if data.resolution != gcfg.max_resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match generator resolution {}",
            data.resolution, gcfg.max_resolution
        )));
    }
    Ok(())
}

pub fn train(
    tcfg: TrainConfig,
    gcfg: GeneratorConfig,
    data: &SyntheticDatasetSpec,
) -> core::result::Result<TrainOutcome, TrainError> {
    train_observed(tcfg, gcfg, data, |_, _| {})
}

pub fn train_observed(
    tcfg: TrainConfig,
    gcfg: GeneratorConfig,
    data: &SyntheticDatasetSpec,
    observer: impl FnMut(&TrainState, &MetricsRow),
) -> core::result::Result<TrainOutcome, TrainError> {
    check_data(&gcfg, data)?;
    let images = data.generate();
    TrainState::new(tcfg, gcfg)?.run(&images, observer)
}

/// Continue from a checkpoint up to `tcfg.steps`.
pub fn resume(
    ckpt: &Checkpoint,
    tcfg: TrainConfig,
    gcfg: GeneratorConfig,
    data: &SyntheticDatasetSpec,
) -> core::result::Result<TrainOutcome, TrainError> {
    check_data(&gcfg, data)?;
    let images = data.generate();
    TrainState::from_checkpoint(ckpt, tcfg, gcfg)?.run(&images, |_, _| {})
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoHistogram {
    pub site: usize,
    pub resolution: usize,
    /// Bin `i` covers `[i/bins, (i+1)/bins)`; the last bin also holds 1.
    pub counts: Vec<usize>,
}

pub fn rho_histogram(ckpt: &Checkpoint, cfg: &GeneratorConfig, bins: usize) -> Result<Vec<RhoHistogram>> {
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let params = ckpt.generator(cfg)?;
    let out: Vec<RhoHistogram> = params
        .sites
        .iter()
        .enumerate()
        .filter_map(|(s, sp)| sp.rho.as_ref().map(|r| (s, r)))
        .map(|(s, rho)| {
            let mut counts = alloc::vec![0; bins];
            for &v in rho.data() {
                let i = ((v as f64) * bins as f64) as usize;
                counts[i.min(bins - 1)] += 1;
            }
            RhoHistogram {
                site: s,
                resolution: cfg.site_resolution(s),
                counts,
            }
        })
        .collect();
    if out.is_empty() {
        return Err(Error::NoPinSites);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub variant: NormKind,
    pub amp_metric: f64,
    pub final_d_loss: f64,
    pub final_g_loss: f64,
    /// Regions detected at the final site, summed over the probe batch.
    pub region_count: usize,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
}

/// Train one generator per variant from the same seeds.
pub fn variant_compare(
    variants: &[NormKind],
    tcfg: TrainConfig,
    gcfg: &GeneratorConfig,
    data: &SyntheticDatasetSpec,
) -> core::result::Result<Vec<VariantRow>, TrainError> {
    if let Some(k) = variants.iter().find(|k| **k == NormKind::Adain) {
        return Err(Error::Config(format!("variant {k} is not comparable (use IN, PN or PIN)")).into());
    }
    variants
        .iter()
        .map(|&kind| {
            let cfg = gcfg.clone().with_uniform_norm(kind);
            let out = train(tcfg, cfg.clone(), data)?;
            let (amp, regions) = amplification_metric(&cfg, &out.state.generator)?;
            let last = out.metrics.last();
            Ok(VariantRow {
                variant: kind,
                amp_metric: amp,
                final_d_loss: last.map_or(f64::NAN, |r| r.d_loss),
                final_g_loss: last.map_or(f64::NAN, |r| r.g_loss),
                region_count: regions,
                checkpoint: out.checkpoint(),
                metrics: out.metrics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (TrainConfig, GeneratorConfig, SyntheticDatasetSpec) {
        let mut g = GeneratorConfig::new(8, NormKind::PinStyle).unwrap();
        g.channels = alloc::vec![6, 4];
        g.latent_dim = 8;
        g.mapping_layers = 2;
        let t = TrainConfig {
            steps: 6,
            batch_size: 2,
            lr: 5e-2,
            checkpoint_interval: 3,
            ..TrainConfig::default()
        };
        (t, g, SyntheticDatasetSpec::new(8, 16, 1))
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let (mut t, g, d) = tiny();
        t.steps = 0;
        let out = train(t, g.clone(), &d).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.state.generator, GeneratorParams::<Tensor<f32>>::init(&g).unwrap());
        let h = rho_histogram(&out.checkpoint(), &g, 4).unwrap();
        assert_eq!(h.len(), 4);
        for site in &h {
            assert_eq!(site.counts[0], g.site_channels(site.site));
            assert_eq!(site.counts.iter().sum::<usize>(), g.site_channels(site.site));
        }
    }

    #[test]
    fn rho_stays_clipped_and_moves() {
        let (mut t, g, d) = tiny();
        t.lr = 0.5;
        let mut seen = 0;
        let out = train_observed(t, g.clone(), &d, |s, row| {
            assert!(row.d_loss.is_finite() && row.g_loss.is_finite());
            for site in &s.generator.sites {
                assert!(site.rho.as_ref().unwrap().data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 6);
        let moved = out
            .state
            .generator
            .sites
            .iter()
            .any(|s| s.rho.as_ref().unwrap().data().iter().any(|&v| v != 0.0));
        assert!(moved);
        assert_eq!(out.metrics[2].amp_metric.is_some(), true);
        assert_eq!(out.metrics[3].amp_metric, None);
        assert!(out.metrics[5].amp_metric.is_some());
    }

    #[test]
    fn deterministic_metrics() {
        let (t, g, d) = tiny();
        let a = train(t, g.clone(), &d).unwrap();
        let b = train(t, g, &d).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint(), b.checkpoint());
    }

    #[test]
    fn resume_is_bit_exact() {
        for opt in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let (mut t, g, d) = tiny();
            t.optimizer = opt;
            let full = train(t, g.clone(), &d).unwrap();
            let half = train(TrainConfig { steps: 3, ..t }, g.clone(), &d).unwrap();
            let rest = resume(&half.checkpoint(), t, g.clone(), &d).unwrap();
            assert_eq!(rest.checkpoint(), full.checkpoint());
            assert_eq!(rest.metrics[..], full.metrics[3..]);
        }
    }

    #[test]
    fn checkpoint_hash_is_checked() {
        let (t, g, _) = tiny();
        let ck = TrainState::new(t, g.clone()).unwrap().checkpoint();
        let other = g.with_uniform_norm(NormKind::PnStyle);
        assert!(ck.generator(&other).is_err());
        assert!(rho_histogram(&ck, &other, 4).is_err());
        let pn = TrainState::new(t, other.clone()).unwrap().checkpoint();
        assert_eq!(rho_histogram(&pn, &other, 4), Err(Error::NoPinSites));
    }

    #[test]
    fn rho_histogram_edges() {
        let (t, g, _) = tiny();
        let mut st = TrainState::new(t, g.clone()).unwrap();
        st.generator.sites[0].rho = Some(Tensor::vector(&[0.0, 0.25, 0.5, 0.74, 1.0, 0.999]));
        let h = rho_histogram(&st.checkpoint(), &g, 4).unwrap();
        assert_eq!(h[0].counts, alloc::vec![1, 1, 2, 2]);
    }

    #[test]
    fn compare_rows() {
        let (mut t, g, d) = tiny();
        t.steps = 2;
        let rows = variant_compare(&[NormKind::InStyle, NormKind::InStyle, NormKind::PnStyle], t, &g, &d).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], rows[1]);
        assert_ne!(rows[0].amp_metric, rows[2].amp_metric);
        assert!(variant_compare(&[NormKind::Adain], t, &g, &d).is_err());
    }
}
