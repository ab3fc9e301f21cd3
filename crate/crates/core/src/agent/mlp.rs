use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::Scalar;

/// Dense layer y = W x + b. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Layer<T: Scalar> {
    pub w: DMatrix<T>,
    pub b: DVector<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros_like(&self) -> Self {
        Self {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.len()),
        }
    }
}

/// Multilayer perceptron with tanh hidden units. Batches are matrices with
/// one column per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T: Scalar> {
    pub layers: Vec<Layer<T>>,
    /// Squash the output through tanh as well.
    pub tanh_output: bool,
}

/// Activations recorded by [`Mlp::forward_cached`] for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpCache<T: Scalar> {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<DMatrix<T>>,
    output: DMatrix<T>,
}

impl<T: Scalar> MlpCache<T> {
    pub fn output(&self) -> &DMatrix<T> {
        &self.output
    }
}

pub type MlpGrads<T> = Vec<Layer<T>>;

impl<T: Scalar> Mlp<T> {
    /// Hidden layers drawn from U(±1/√fan_in); the last layer from U(±`final_scale`).
    pub fn new(sizes: &[usize], tanh_output: bool, final_scale: f64, rng: &mut SimRng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let r = if i + 1 == n { final_scale } else { 1.0 / (fan_in as f64).sqrt() };
                let mut draw = || T::of(rng.gen_range(-r..=r));
                Layer {
                    w: DMatrix::from_fn(fan_out, fan_in, |_, _| draw()),
                    b: DVector::from_fn(fan_out, |_, _| draw()),
                }
            })
            .collect();
        Self { layers, tanh_output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").w.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.w.nrows()))
            .collect()
    }

    fn apply(&self, i: usize, x: &DMatrix<T>) -> DMatrix<T> {
        let layer = &self.layers[i];
        let mut z = &layer.w * x;
        for mut col in z.column_iter_mut() {
            col += &layer.b;
        }
        if i + 1 < self.layers.len() || self.tanh_output {
            z.apply(|v| *v = v.tanh());
        }
        z
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut h = self.apply(0, x);
        for i in 1..self.layers.len() {
            h = self.apply(i, &h);
        }
        h
    }

    pub fn forward_cached(&self, x: &DMatrix<T>) -> MlpCache<T> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for i in 0..self.layers.len() {
            let next = self.apply(i, &h);
            inputs.push(h);
            h = next;
        }
        MlpCache { inputs, output: h }
    }

    /// Output layer's affine part before any output squashing.
    pub fn pre_output(&self, cache: &MlpCache<T>) -> DMatrix<T> {
        let last = self.layers.len() - 1;
        let layer = &self.layers[last];
        let mut z = &layer.w * &cache.inputs[last];
        for mut col in z.column_iter_mut() {
            col += &layer.b;
        }
        z
    }

    /// Gradients of a scalar loss given ∂loss/∂output; returns parameter
    /// gradients and ∂loss/∂input.
    pub fn backward(&self, cache: &MlpCache<T>, d_out: &DMatrix<T>) -> (MlpGrads<T>, DMatrix<T>) {
        self.backward_with_pre(cache, d_out, None)
    }

    /// As [`Mlp::backward`], with an extra loss term whose gradient with
    /// respect to [`Mlp::pre_output`] is `d_pre`.
    pub fn backward_with_pre(
        &self,
        cache: &MlpCache<T>,
        d_out: &DMatrix<T>,
        d_pre: Option<&DMatrix<T>>,
    ) -> (MlpGrads<T>, DMatrix<T>) {
        let n = self.layers.len();
        let mut grads: MlpGrads<T> = self.layers.iter().map(Layer::zeros_like).collect();
        let mut delta = d_out.clone();
        if self.tanh_output {
            delta.zip_apply(&cache.output, |d, y| *d *= T::one() - y * y);
        }
        if let Some(extra) = d_pre {
            delta += extra;
        }
        for i in (0..n).rev() {
            let x = &cache.inputs[i];
            grads[i].w = &delta * x.transpose();
            grads[i].b = delta.column_sum();
            let mut d_in = self.layers[i].w.transpose() * &delta;
            if i > 0 {
                // x is the tanh output of the previous layer
                d_in.zip_apply(x, |d, h| *d *= T::one() - h * h);
            }
            delta = d_in;
        }
        (grads, delta)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameters flattened layer by layer: W (column-major) then b.
    pub fn params_flat(&self) -> Vec<T> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_params(), "parameter vector length");
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.as_mut_slice().copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    /// θ_target ← τ θ + (1 − τ) θ_target.
    pub fn soft_update_from(&mut self, src: &Self, tau: T) {
        for (t, s) in self.layers.iter_mut().zip(&src.layers) {
            t.w.zip_apply(&s.w, |a, b| *a = tau * b + (T::one() - tau) * *a);
            t.b.zip_apply(&s.b, |a, b| *a = tau * b + (T::one() - tau) * *a);
        }
    }
}

pub fn flatten<T: Scalar>(layers: &[Layer<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.w.as_slice());
        out.extend_from_slice(l.b.as_slice());
    }
    out
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Adam<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }

    pub fn step(&mut self, net: &mut Mlp<T>, grads: &MlpGrads<T>, lr: T) {
        if lr == T::zero() {
            return;
        }
        let g = flatten(grads);
        let mut p = net.params_flat();
        self.t += 1;
        let bc1 = T::one() - self.beta1.powi(self.t as i32);
        let bc2 = T::one() - self.beta2.powi(self.t as i32);
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        net.set_params_flat(&p);
    }
}
