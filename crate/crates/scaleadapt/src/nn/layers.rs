//! Parameterized layers built on the tape, plus initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// He fan-in normal initialization for convolution weights.
pub fn he_normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<F> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(z * std)
        })
        .collect();
    Tensor::new(shape, data)
}

/// Uniform init in [-bound, bound], used for the classifier head.
pub fn uniform_init<F: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape, data)
}

/// Read-only or mutable traversal of named parameters, in a stable order.
pub trait Params<F: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>));

    fn named_params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2dLayer<F> {
    pub name: String,
    pub w: Tensor<F>,
    pub b: Option<Tensor<F>>,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl<F: Scalar> Conv2dLayer<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        Conv2dLayer {
            name: name.to_string(),
            w: he_normal(rng, vec![cout, cin, k, k]),
            b: Some(Tensor::zeros(vec![cout])),
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var, trainable: bool) -> Var {
        let w = tape.bind_param(&format!("{}.w", self.name), &self.w, trainable);
        let b = self
            .b
            .as_ref()
            .map(|b| tape.bind_param(&format!("{}.b", self.name), b, trainable));
        tape.conv2d(x, w, b, self.stride, self.pad, self.dilation)
    }
}

impl<F: Scalar> Params<F> for Conv2dLayer<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        f(&format!("{}.w", self.name), &self.w);
        if let Some(b) = &self.b {
            f(&format!("{}.b", self.name), b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(&format!("{}.w", self.name), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&format!("{}.b", self.name), b);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer<F> {
    pub name: String,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub eps: f64,
    pub momentum: f64,
}

impl<F: Scalar> BatchNormLayer<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNormLayer {
            name: name.to_string(),
            gamma: Tensor::new(vec![channels], vec![F::one(); channels]),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Training mode: normalize with batch statistics and update the running
    /// averages. Single-writer by construction (`&mut self`).
    pub fn forward_train(&mut self, tape: &mut Tape<F>, x: Var, trainable: bool) -> Var {
        let g = tape.bind_param(&format!("{}.gamma", self.name), &self.gamma, trainable);
        let b = tape.bind_param(&format!("{}.beta", self.name), &self.beta, trainable);
        let (y, mean, var) = tape.batch_norm_train(x, g, b, self.eps);
        let m = F::from_f64(self.momentum);
        let one_m = F::one() - m;
        for c in 0..mean.len() {
            self.running_mean[c] = one_m * self.running_mean[c] + m * mean[c];
            self.running_var[c] = one_m * self.running_var[c] + m * var[c];
        }
        y
    }

    /// Eval mode: running statistics, no state mutation.
    pub fn forward_eval(&self, tape: &mut Tape<F>, x: Var) -> Var {
        let c = self.gamma.numel();
        let mut scale = vec![F::zero(); c];
        let mut shift = vec![F::zero(); c];
        for i in 0..c {
            scale[i] = self.gamma.data[i] / (self.running_var[i] + F::from_f64(self.eps)).sqrt();
            shift[i] = self.beta.data[i] - self.running_mean[i] * scale[i];
        }
        tape.channel_affine(x, scale, shift)
    }

    pub fn forward(&mut self, tape: &mut Tape<F>, x: Var, training: bool, trainable: bool) -> Var {
        if training {
            self.forward_train(tape, x, trainable)
        } else {
            self.forward_eval(tape, x)
        }
    }
}

impl<F: Scalar> Params<F> for BatchNormLayer<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        f(&format!("{}.gamma", self.name), &self.gamma);
        f(&format!("{}.beta", self.name), &self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        f(&format!("{}.gamma", self.name), &mut self.gamma);
        f(&format!("{}.beta", self.name), &mut self.beta);
    }
}
