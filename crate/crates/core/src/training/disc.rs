use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, Layer};
use crate::ops::LEAKY_SLOPE;
use crate::real::Real;
use crate::rng::{normal_tensor, seeded};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(conv3x3 -> leaky_relu -> avg_pool2)` down to 4x4, then a dense layer
/// to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscParams<T> {
    pub blocks: Vec<Layer<T>>,
    pub head: Layer<T>,
}

impl<T> DiscParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> DiscParams<U> {
        let f = &mut f;
        DiscParams {
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            head: self.head.map(f),
        }
    }

    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("disc.block{i}.weight"), &b.weight));
            out.push((format!("disc.block{i}.bias"), &b.bias));
        }
        out.push(("disc.head.weight".into(), &self.head.weight));
        out.push(("disc.head.bias".into(), &self.head.bias));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.entries().into_iter().map(|(_, t)| t).collect()
    }
}

/// Block `i` works at resolution `R >> i` and outputs the generator's
/// channel count for that resolution.
fn shape_tree(cfg: &GeneratorConfig) -> DiscParams<Vec<usize>> {
    let levels = cfg.levels();
    let mut cin = 3;
    let mut blocks = Vec::new();
    for level in (1..levels).rev() {
        let c = cfg.channels[level];
        blocks.push(Layer {
            weight: alloc::vec![c, cin, 3, 3],
            bias: alloc::vec![c],
        });
        cin = c;
    }
    DiscParams {
        blocks,
        head: Layer {
            weight: alloc::vec![1, cin * 16],
            bias: alloc::vec![1],
        },
    }
}

pub fn disc_parameter_shapes(cfg: &GeneratorConfig) -> Vec<(String, Vec<usize>)> {
    shape_tree(cfg)
        .entries()
        .into_iter()
        .map(|(n, s)| (n, s.clone()))
        .collect()
}

impl<R: Real> DiscParams<Tensor<R>> {
    /// He-normal weights, zero biases.
    pub fn init(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed, 2);
        Ok(shape_tree(cfg).map(|s| {
            if s.len() == 1 {
                Tensor::zeros(s)
            } else {
                let fan_in: usize = s[1..].iter().product();
                normal_tensor(&mut rng, s, Float::sqrt(2.0 / fan_in as f64))
            }
        }))
    }

    pub fn named(&self) -> Vec<(String, Tensor<R>)> {
        self.entries().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }

    pub fn from_named(cfg: &GeneratorConfig, named: &[(String, Tensor<R>)]) -> Result<Self> {
        let shapes = shape_tree(cfg);
        let names: Vec<String> = shapes.entries().into_iter().map(|(n, _)| n).collect();
        let mut p = shapes.map(|s| Tensor::<R>::zeros(s));
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

    pub fn to_leaves(&self, tape: &mut Tape<R>) -> DiscParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }

    pub fn to_constants(&self, tape: &mut Tape<R>) -> DiscParams<Var> {
        self.map(|t| tape.constant(t.clone()))
    }
}

/// Logit `[1]` on a tape.
pub fn disc_tape<R: Real>(tape: &mut Tape<R>, params: &DiscParams<Var>, image: Var) -> Result<Var> {
    let mut h = image;
    for b in &params.blocks {
        h = tape.conv3x3(h, b.weight, b.bias)?;
        h = tape.leaky_relu(h, R::from_f64(LEAKY_SLOPE))?;
        h = tape.avg_pool2(h)?;
    }
    let n = tape.value(h).len();
    let flat = tape.reshape(h, &[n])?;
    tape.affine(flat, params.head.weight, params.head.bias)
}

pub fn discriminator_forward<R: Real>(image: &Tensor<R>, params: &DiscParams<Tensor<R>>) -> Result<R> {
    let mut tape = Tape::new();
    let p = params.to_constants(&mut tape);
    let x = tape.constant(image.clone());
    let out = disc_tape(&mut tape, &p, x)?;
    Ok(tape.value(out).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::NormKind;
    use crate::gradcheck::{check_gradients_sampled, DEFAULT_STEP};

    fn cfg() -> GeneratorConfig {
        let mut c = GeneratorConfig::new(16, NormKind::PinStyle).unwrap();
        c.channels = alloc::vec![4, 3, 2];
        c
    }

    #[test]
    fn shapes_follow_generator_channels() {
        let shapes = disc_parameter_shapes(&cfg());
        assert_eq!(shapes[0], ("disc.block0.weight".into(), alloc::vec![2, 3, 3, 3]));
        assert_eq!(shapes[2], ("disc.block1.weight".into(), alloc::vec![3, 2, 3, 3]));
        assert_eq!(shapes[4], ("disc.head.weight".into(), alloc::vec![1, 48]));
    }

    #[test]
    fn zero_weights_give_head_bias() {
        let c = cfg();
        let mut p = DiscParams::<Tensor<f64>>::init(&c, 0).unwrap().map(|t| Tensor::zeros(t.shape()));
        p.head.bias = Tensor::vector(&[0.75]);
        let img = Tensor::from_fn(&[3, 16, 16], |i| (i % 5) as f64);
        assert_eq!(discriminator_forward(&img, &p).unwrap(), 0.75);
        assert!(discriminator_forward(&Tensor::zeros(&[3, 8, 8]), &p).is_err());
    }

    #[test]
    fn deterministic() {
        let c = cfg();
        let p = DiscParams::<Tensor<f32>>::init(&c, 4).unwrap();
        assert_eq!(p, DiscParams::<Tensor<f32>>::init(&c, 4).unwrap());
        let img = Tensor::from_fn(&[3, 16, 16], |i| ((i % 9) as f32 - 4.0) / 4.0);
        assert_eq!(
            discriminator_forward(&img, &p).unwrap(),
            discriminator_forward(&img, &p).unwrap()
        );
    }

    #[test]
    fn gradients() {
        let c = cfg();
        let mut p = DiscParams::<Tensor<f64>>::init(&c, 1).unwrap();
        let mut rng = seeded(3, 0);
        for b in &mut p.blocks {
            b.bias = normal_tensor(&mut rng, b.bias.shape(), 0.2);
        }
        let img: Tensor<f64> = normal_tensor(&mut rng, &[3, 16, 16], 1.0);
        let template = p.clone();
        let flat: Vec<Tensor<f64>> = p.leaves().into_iter().cloned().collect();
        let report = check_gradients_sampled(
            |tape, vars| {
                let mut it = vars.iter();
                let pv = template.map(|_| *it.next().expect("one var per tensor"));
                let x = tape.constant(img.clone());
                let logit = disc_tape(tape, &pv, x)?;
                tape.softplus(logit)
            },
            &flat,
            DEFAULT_STEP,
            20,
            5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
