use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::config::{GeneratorConfig, NormKind};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{normal_tensor, LabRng};
use crate::tape::{StyleVars, Tape, Var};
use crate::tensor::Tensor;

/// Weight and bias of a dense or convolutional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: T,
    pub bias: T,
}

impl<T> Layer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Layer<U> {
        Layer {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

/// Style affine of one site: `beta = mu_y = v_mu w + b_mu`,
/// `gamma = sigma_y = v_sigma w + b_sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleParams<T> {
    pub v_mu: T,
    pub b_mu: T,
    pub v_sigma: T,
    pub b_sigma: T,
}

impl<T> StyleParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> StyleParams<U> {
        StyleParams {
            v_mu: f(&self.v_mu),
            b_mu: f(&self.b_mu),
            v_sigma: f(&self.v_sigma),
            b_sigma: f(&self.b_sigma),
        }
    }
}

impl StyleParams<Var> {
    pub fn vars(&self) -> StyleVars {
        StyleVars {
            v_mu: self.v_mu,
            b_mu: self.b_mu,
            v_sigma: self.v_sigma,
            b_sigma: self.b_sigma,
        }
    }
}

/// Parameters owned by one normalization site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteParams<T> {
    pub conv: Layer<T>,
    pub noise_scale: T,
    pub style: StyleParams<T>,
    /// Present only at pixel-instance normalization sites.
    pub rho: Option<T>,
}

/// All generator parameters, generic over the leaf type so the same tree
/// holds tensors, tape handles or gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    pub mapping: Vec<Layer<T>>,
    pub constant: T,
    pub sites: Vec<SiteParams<T>>,
    pub to_rgb: Layer<T>,
}

impl<T> GeneratorParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GeneratorParams<U> {
        let f = &mut f;
        GeneratorParams {
            mapping: self.mapping.iter().map(|l| l.map(f)).collect(),
            constant: f(&self.constant),
            sites: self
                .sites
                .iter()
                .map(|s| SiteParams {
                    conv: s.conv.map(f),
                    noise_scale: f(&s.noise_scale),
                    style: s.style.map(f),
                    rho: s.rho.as_ref().map(&mut *f),
                })
                .collect(),
            to_rgb: self.to_rgb.map(f),
        }
    }

    /// Leaves in canonical order with their names.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, l) in self.mapping.iter().enumerate() {
            out.push((format!("mapping.{i}.weight"), &l.weight));
            out.push((format!("mapping.{i}.bias"), &l.bias));
        }
        out.push(("const".into(), &self.constant));
        for (i, s) in self.sites.iter().enumerate() {
            out.push((format!("site{i}.conv.weight"), &s.conv.weight));
            out.push((format!("site{i}.conv.bias"), &s.conv.bias));
            out.push((format!("site{i}.noise_scale"), &s.noise_scale));
            out.push((format!("site{i}.style.v_mu"), &s.style.v_mu));
            out.push((format!("site{i}.style.b_mu"), &s.style.b_mu));
            out.push((format!("site{i}.style.v_sigma"), &s.style.v_sigma));
            out.push((format!("site{i}.style.b_sigma"), &s.style.b_sigma));
            if let Some(rho) = &s.rho {
                out.push((format!("site{i}.rho"), rho));
            }
        }
        out.push(("to_rgb.weight".into(), &self.to_rgb.weight));
        out.push(("to_rgb.bias".into(), &self.to_rgb.bias));
        out
    }

    /// Mutable leaves in the same order as [`entries`](Self::entries).
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for l in &mut self.mapping {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.constant);
        for s in &mut self.sites {
            out.push(&mut s.conv.weight);
            out.push(&mut s.conv.bias);
            out.push(&mut s.noise_scale);
            out.push(&mut s.style.v_mu);
            out.push(&mut s.style.b_mu);
            out.push(&mut s.style.v_sigma);
            out.push(&mut s.style.b_sigma);
            if let Some(rho) = &mut s.rho {
                out.push(rho);
            }
        }
        out.push(&mut self.to_rgb.weight);
        out.push(&mut self.to_rgb.bias);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.entries().into_iter().map(|(_, t)| t).collect()
    }
}

/// Expected `(name, shape)` of every generator parameter for `cfg`.
pub fn parameter_shapes(cfg: &GeneratorConfig) -> Vec<(String, Vec<usize>)> {
    let shapes = shape_tree(cfg);
    shapes
        .entries()
        .into_iter()
        .map(|(n, s)| (n, s.clone()))
        .collect()
}

fn shape_tree(cfg: &GeneratorConfig) -> GeneratorParams<Vec<usize>> {
    let d = cfg.latent_dim;
    GeneratorParams {
        mapping: (0..cfg.mapping_layers)
            .map(|_| Layer {
                weight: alloc::vec![d, d],
                bias: alloc::vec![d],
            })
            .collect(),
        constant: alloc::vec![cfg.channels[0], 4, 4],
        sites: (0..cfg.num_sites())
            .map(|s| {
                let (cin, c) = (cfg.site_in_channels(s), cfg.site_channels(s));
                SiteParams {
                    conv: Layer {
                        weight: alloc::vec![c, cin, 3, 3],
                        bias: alloc::vec![c],
                    },
                    noise_scale: alloc::vec![c],
                    style: StyleParams {
                        v_mu: alloc::vec![c, d],
                        b_mu: alloc::vec![c],
                        v_sigma: alloc::vec![c, d],
                        b_sigma: alloc::vec![c],
                    },
                    rho: (cfg.norm_kinds[s] == NormKind::PinStyle).then(|| alloc::vec![c]),
                }
            })
            .collect(),
        to_rgb: Layer {
            weight: alloc::vec![3, *cfg.channels.last().expect("validated"), 3, 3],
            bias: alloc::vec![3],
        },
    }
}

fn he_std(fan_in: usize) -> f64 {
    num_traits::Float::sqrt(2.0 / fan_in as f64)
}

impl<R: Real> GeneratorParams<Tensor<R>> {
    /// Fresh parameters: He-normal conv and hidden mapping weights, biases
    /// and noise scales zero, learned constant ones, `b_sigma = 1`,
    /// `rho = 0`.
    pub fn init(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::seeded(cfg.seed, 1);
        Ok(Self::init_with(cfg, &mut rng))
    }

    fn init_with(cfg: &GeneratorConfig, rng: &mut LabRng) -> Self {
        let d = cfg.latent_dim;
        let shapes = shape_tree(cfg);
        let last = cfg.mapping_layers - 1;
        let mut f = |shape: &Vec<usize>| Tensor::<R>::zeros(shape);
        let mut p = shapes.map(&mut f);
        for (i, l) in p.mapping.iter_mut().enumerate() {
            let std = if i == last { num_traits::Float::sqrt(1.0 / d as f64) } else { he_std(d) };
            l.weight = normal_tensor(rng, &[d, d], std);
        }
        p.constant = Tensor::ones(p.constant.shape());
        for (s, site) in p.sites.iter_mut().enumerate() {
            let (cin, c) = (cfg.site_in_channels(s), cfg.site_channels(s));
            site.conv.weight = normal_tensor(rng, &[c, cin, 3, 3], he_std(cin * 9));
            let std = num_traits::Float::sqrt(1.0 / d as f64);
            site.style.v_mu = normal_tensor(rng, &[c, d], std);
            site.style.v_sigma = normal_tensor(rng, &[c, d], std);
            site.style.b_sigma = Tensor::ones(&[c]);
        }
        let c_last = *cfg.channels.last().expect("validated");
        p.to_rgb.weight = normal_tensor(rng, &[3, c_last, 3, 3], num_traits::Float::sqrt(1.0 / (c_last * 9) as f64));
        p
    }

    pub fn named(&self) -> Vec<(String, Tensor<R>)> {
        self.entries().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    /// Rebuild from `(name, tensor)` pairs; every expected name must be
    /// present with the expected shape.
    pub fn from_named(cfg: &GeneratorConfig, named: &[(String, Tensor<R>)]) -> Result<Self> {
        cfg.validate()?;
        let shapes = shape_tree(cfg);
        let mut p = shapes.map(|s| Tensor::<R>::zeros(s));
        let names: Vec<String> = shapes.entries().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(p.leaves_mut()) {
            let t = named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::ParamMismatch(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(p)
    }

    /// Check that shapes match `cfg`.
    pub fn validate(&self, cfg: &GeneratorConfig) -> Result<()> {
        let want = parameter_shapes(cfg);
        let got = self.entries();
        if want.len() != got.len() {
            return Err(Error::ParamMismatch(format!(
                "expected {} tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, ws), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || ws.as_slice() != gt.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{wn}: expected shape {ws:?}, got {gn} {:?}",
                    gt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Register every tensor as a differentiable leaf.
    pub fn to_leaves(&self, tape: &mut Tape<R>) -> GeneratorParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }

    pub fn to_constants(&self, tape: &mut Tape<R>) -> GeneratorParams<Var> {
        self.map(|t| tape.constant(t.clone()))
    }

    pub fn cast<S: Real>(&self) -> GeneratorParams<Tensor<S>> {
        self.map(|t| t.cast())
    }
}
