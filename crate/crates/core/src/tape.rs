//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node holding its output value.
//! [`Tape::backward`] walks the nodes once in reverse execution order and
//! accumulates gradients additively. Leaves created with [`Tape::leaf`]
//! receive gradients; leaves created with [`Tape::constant`] do not, and
//! neither does any node whose inputs are all constants.
//!
//! ```
//! use pinlab_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::vector(&[1.0, -2.0, 3.0]));
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::norm;
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf,
    Conv3x3 { x: Var, kernel: Var, bias: Var },
    Upsample2x { x: Var },
    LeakyRelu { x: Var, slope: R },
    AddScaledNoise { x: Var, scale: Var, noise: Tensor<R> },
    Affine { x: Var, weight: Var, bias: Var },
    AvgPool2 { x: Var },
    Reshape { x: Var },
    ZeroChannels { x: Var, channels: Vec<usize> },
    PixelNorm { x: Var, inv_rms: Vec<R> },
    InstanceNorm { x: Var, inv_std: Vec<R> },
    Blend { pn: Var, inst: Var, rho: Var },
    Modulate { y: Var, gamma: Var, beta: Var },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Tensor<R> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: R },
    Square { x: Var },
    Softplus { x: Var },
}

#[derive(Debug, Clone)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Recorded computation. One tape belongs to one single-threaded context.
#[derive(Debug, Clone, Default)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing reached it.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor<R>) -> Tensor<R> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let y = ops::conv3x3(self.value(x), self.value(kernel), self.value(bias))?;
        Ok(self.push(y, Op::Conv3x3 { x, kernel, bias }, &[x, kernel, bias]))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample2x(self.value(x))?;
        Ok(self.push(y, Op::Upsample2x { x }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: R) -> Result<Var> {
        let y = ops::leaky_relu(self.value(x), slope);
        Ok(self.push(y, Op::LeakyRelu { x, slope }, &[x]))
    }

    /// `x + scale[c] * noise`; `noise` is a `[1, H, W]` constant.
    pub fn add_scaled_noise(&mut self, x: Var, noise: &Tensor<R>, scale: Var) -> Result<Var> {
        let y = ops::add_scaled_noise(self.value(x), noise, self.value(scale))?;
        Ok(self.push(
            y,
            Op::AddScaledNoise {
                x,
                scale,
                noise: noise.clone(),
            },
            &[x, scale],
        ))
    }

    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::affine(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(y, Op::Affine { x, weight, bias }, &[x, weight, bias]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let y = ops::avg_pool2(self.value(x))?;
        Ok(self.push(y, Op::AvgPool2 { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    pub fn zero_channels(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let y = ops::zero_channels(self.value(x), channels)?;
        Ok(self.push(
            y,
            Op::ZeroChannels {
                x,
                channels: channels.to_vec(),
            },
            &[x],
        ))
    }

    pub fn pixel_norm(&mut self, x: Var, eps: R) -> Result<Var> {
        let (y, inv_rms) = norm::pixel_norm_cached(self.value(x), eps)?;
        Ok(self.push(y, Op::PixelNorm { x, inv_rms }, &[x]))
    }

    pub fn instance_norm(&mut self, x: Var, eps: R) -> Result<Var> {
        let (y, _, inv_std) = norm::instance_norm_cached(self.value(x), eps)?;
        Ok(self.push(y, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// Pixel-instance normalization: both branches in full, then blended by `rho`.
    pub fn pin(&mut self, x: Var, rho: Var, eps: R) -> Result<Var> {
        let pn = self.pixel_norm(x, eps)?;
        let inst = self.instance_norm(x, eps)?;
        self.blend(pn, inst, rho)
    }

    pub fn blend(&mut self, pn: Var, inst: Var, rho: Var) -> Result<Var> {
        let y = norm::blend(self.value(pn), self.value(inst), self.value(rho))?;
        Ok(self.push(y, Op::Blend { pn, inst, rho }, &[pn, inst, rho]))
    }

    /// `gamma[c] * y + beta[c]`.
    pub fn style_modulate(&mut self, y: Var, gamma: Var, beta: Var) -> Result<Var> {
        let out = norm::modulate(self.value(y), self.value(gamma), self.value(beta))?;
        Ok(self.push(out, Op::Modulate { y, gamma, beta }, &[y, gamma, beta]))
    }

    /// AdaIN from its parts: `sigma_y * IN(x) + mu_y`, where
    /// `mu_y = v_mu w + b_mu` and `sigma_y = v_sigma w + b_sigma`.
    pub fn adain(&mut self, x: Var, w: Var, src: &StyleVars, eps: R) -> Result<Var> {
        let mu_y = self.affine(w, src.v_mu, src.b_mu)?;
        let sigma_y = self.affine(w, src.v_sigma, src.b_sigma)?;
        let inst = self.instance_norm(x, eps)?;
        self.style_modulate(inst, sigma_y, mu_y)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::new(&[1], vec![self.value(x).sum()])?;
        Ok(self.push(y, Op::Sum { x }, &[x]))
    }

    /// `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<R>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::dim(
                "weighted_sum",
                alloc::format!("{:?}", xv.shape()),
                weights.shape(),
            ));
        }
        let mut acc = R::zero();
        for (&a, &b) in xv.data().iter().zip(weights.data()) {
            acc += a * b;
        }
        let y = Tensor::new(&[1], vec![acc])?.ensure_finite("weighted_sum")?;
        Ok(self.push(
            y,
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            &[x],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self
            .value(a)
            .zip_map(self.value(b), |p, q| p + q)?
            .ensure_finite("add")?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self
            .value(a)
            .zip_map(self.value(b), |p, q| p * q)?
            .ensure_finite("mul")?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: R) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor).ensure_finite("scale")?;
        Ok(self.push(y, Op::Scale { x, factor }, &[x]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v * v).ensure_finite("square")?;
        Ok(self.push(y, Op::Square { x }, &[x]))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(ops::softplus).ensure_finite("softplus")?;
        Ok(self.push(y, Op::Softplus { x }, &[x]))
    }

    /// Reverse pass from `loss`, seeded with ones.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            if !g.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<R>, out: &Tensor<R>, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv3x3 { x, kernel, bias } => {
                let (gx, gk, gb) =
                    ops::conv3x3_backward(self.value(*x), self.value(*kernel), g, self.needs(*x));
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                self.accumulate(grads, *kernel, gk);
                self.accumulate(grads, *bias, gb);
            }
            Op::Upsample2x { x } => self.accumulate(grads, *x, ops::upsample2x_backward(g)),
            Op::LeakyRelu { x, slope } => {
                let gx = ops::leaky_relu_backward(self.value(*x), *slope, g);
                self.accumulate(grads, *x, gx);
            }
            Op::AddScaledNoise { x, scale, noise } => {
                if self.needs(*scale) {
                    self.accumulate(grads, *scale, ops::add_scaled_noise_backward(noise, g));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Affine { x, weight, bias } => {
                let (gx, gw, gb) = ops::affine_backward(self.value(*x), self.value(*weight), g);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::AvgPool2 { x } => self.accumulate(grads, *x, ops::avg_pool2_backward(g)),
            Op::Reshape { x } => {
                let gx = g.reshape(self.value(*x).shape()).expect("same numel");
                self.accumulate(grads, *x, gx);
            }
            Op::ZeroChannels { x, channels } => {
                let gx = ops::zero_channels(g, channels).expect("validated in forward");
                self.accumulate(grads, *x, gx);
            }
            Op::PixelNorm { x, inv_rms } => {
                self.accumulate(grads, *x, norm::pixel_norm_backward(out, inv_rms, g));
            }
            Op::InstanceNorm { x, inv_std } => {
                self.accumulate(grads, *x, norm::instance_norm_backward(out, inv_std, g));
            }
            Op::Blend { pn, inst, rho } => {
                let (gp, gi, gr) =
                    norm::blend_backward(self.value(*pn), self.value(*inst), self.value(*rho), g);
                self.accumulate(grads, *pn, gp);
                self.accumulate(grads, *inst, gi);
                self.accumulate(grads, *rho, gr);
            }
            Op::Modulate { y, gamma, beta } => {
                let (gy, gg, gb) = norm::modulate_backward(self.value(*y), self.value(*gamma), g);
                self.accumulate(grads, *y, gy);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::Sum { x } => {
                let gx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                self.accumulate(grads, *x, gx);
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * s));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                let ga = g.zip_map(self.value(*b), |p, q| p * q).expect("same shape");
                let gb = g.zip_map(self.value(*a), |p, q| p * q).expect("same shape");
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale { x, factor } => self.accumulate(grads, *x, g.map(|v| v * *factor)),
            Op::Square { x } => {
                let two = R::from_f64(2.0);
                let gx = g.zip_map(self.value(*x), |p, q| two * p * q).expect("same shape");
                self.accumulate(grads, *x, gx);
            }
            Op::Softplus { x } => {
                let gx = g
                    .zip_map(self.value(*x), |p, q| p * ops::sigmoid(q))
                    .expect("same shape");
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

/// Tape handles of a [`StyleSource`](crate::norm::StyleSource).
#[derive(Debug, Clone, Copy)]
pub struct StyleVars {
    pub v_mu: Var,
    pub b_mu: Var,
    pub v_sigma: Var,
    pub b_sigma: Var,
}
