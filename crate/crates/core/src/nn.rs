//! Layer helpers, initialisation and optimisers on top of the autodiff tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Grads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Normal initialisation with standard deviation `std`.
pub fn normal_tensor<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect())
}

/// Affine map `x·W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// LeCun-normal weights scaled by `gain`, zero bias.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
    ) -> Self {
        let std = gain / (inputs as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.w"), normal_tensor(rng, inputs, outputs, std)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, outputs)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }
}

/// Causal dilated (optionally strided) 1-D convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let std = (2.0 / (inputs * kernel) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.w"), normal_tensor(rng, kernel * inputs, outputs, std)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, outputs)),
            kernel,
            stride,
            dilation,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.conv1d(x, w, self.kernel, self.stride, self.dilation);
        tape.add_row(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        entries: usize,
        width: usize,
        std: f64,
    ) -> Self {
        Self { table: store.add(name, normal_tensor(rng, entries, width, std)) }
    }

    pub fn entries<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.table).rows
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, indices: &[usize]) -> Var {
        let t = tape.param(store, self.table);
        tape.gather(t, indices)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Tensor::new(1, width, vec![T::one(); width])),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self { beta1, beta2, eps: 1e-8, step: 0, first: zeros(), second: zeros() }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(&grads.0).zip(&mut self.first).zip(&mut self.second)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (T::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (T::one() - b2) * gi * gi;
                p.data[i] -= step_size * m.data[i] / (v.data[i].sqrt() + eps);
            }
        }
    }
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyak<T> {
    pub decay: f64,
    pub shadow: Vec<Tensor<T>>,
}

impl<T: Scalar> Polyak<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        Self { decay, shadow: store.tensors().to_vec() }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        let d = T::of(self.decay);
        for (s, p) in self.shadow.iter_mut().zip(store.tensors()) {
            for (a, &b) in s.data.iter_mut().zip(&p.data) {
                *a = d * *a + (T::one() - d) * b;
            }
        }
    }

    /// A parameter store holding the averaged values.
    pub fn averaged(&self, like: &ParamStore<T>) -> ParamStore<T> {
        let mut out = like.clone();
        for (dst, src) in out.tensors_mut().iter_mut().zip(&self.shadow) {
            dst.data.copy_from_slice(&src.data);
        }
        out
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}
