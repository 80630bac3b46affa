use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(alloc::format!(
                "unknown optimizer {s:?} (expected sgd or adam)"
            ))),
        }
    }
}

/// Per-tensor optimizer state. Adam keeps first and second moments; the
/// step count comes from the caller.
#[derive(Debug, Clone, PartialEq)]
pub enum OptState {
    Sgd,
    Adam { m: Vec<Tensor<f32>>, v: Vec<Tensor<f32>> },
}

impl OptState {
    pub fn new(kind: OptimizerKind, like: &[&Tensor<f32>]) -> Self {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam => OptState::Adam {
                m: like.iter().map(|t| Tensor::zeros(t.shape())).collect(),
                v: like.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            },
        }
    }

    /// Update `params` in place; `t` is the 1-based step number.
    pub fn apply(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Tensor<f32>], lr: f64, t: u64) {
        match self {
            OptState::Sgd => {
                let lr = lr as f32;
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            OptState::Adam { m, v } => {
                let t = i32::try_from(t).unwrap_or(i32::MAX);
                let c1 = (1.0 - Float::powi(ADAM_BETA1, t)) as f32;
                let c2 = (1.0 - Float::powi(ADAM_BETA2, t)) as f32;
                let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
                let (lr, eps) = (lr as f32, ADAM_EPS as f32);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut());
                    for (((x, &d), mi), vi) in it {
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *vi = b2 * *vi + (1.0 - b2) * d * d;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *x -= lr * mh / (Float::sqrt(vh) + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = Tensor::<f32>::vector(&[1.0, -2.0]);
        let mut s = OptState::new(OptimizerKind::Sgd, &[&p]);
        s.apply(alloc::vec![&mut p], &[Tensor::vector(&[0.5, 1.0])], 0.1, 1);
        assert_eq!(p.data(), &[0.95, -2.1]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::<f32>::vector(&[1.0, -2.0]);
        let mut s = OptState::new(OptimizerKind::Adam, &[&p]);
        s.apply(alloc::vec![&mut p], &[Tensor::vector(&[3.0, -0.01])], 0.1, 1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 1.9).abs() < 1e-4);
    }

    #[test]
    fn adam_matches_reference() {
        let grads = [0.3f64, -1.2, 0.7, 0.05];
        let (mut x, mut m, mut v) = (0.5f64, 0.0, 0.0);
        let mut p = Tensor::<f32>::vector(&[0.5]);
        let mut s = OptState::new(OptimizerKind::Adam, &[&p]);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.01 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            s.apply(alloc::vec![&mut p], &[Tensor::vector(&[*g])], 0.01, t as u64);
        }
        assert!((p.data()[0] as f64 - x).abs() < 1e-6);
    }

    #[test]
    fn parses_kind() {
        assert_eq!("Adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
