//! Small neural building blocks on top of the tape: dense layers, MLPs and an
//! AdamW optimizer.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Mat, ParamId, ParamStore, StoreRef, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x·W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers a Xavier-uniform initialized layer.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        Self::from_values(store, name, w, Array2::zeros((1, fan_out)))
    }

    pub fn from_values(store: &mut ParamStore, name: &str, weight: Mat, bias: Mat) -> Self {
        let (fan_in, fan_out) = weight.dim();
        assert_eq!(bias.dim(), (1, fan_out));
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), bias);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: StoreRef, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    pub fn forward_plain(&self, store: &ParamStore, x: ArrayView2<f64>) -> Mat {
        x.dot(store.get(self.weight)) + store.get(self.bias)
    }
}

/// Feed-forward stack; `activation` follows every layer except the last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, store: StoreRef, x: Var) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i < last {
                h = self.activation.apply_tape(tape, h);
            }
        }
        h
    }

    pub fn forward_plain(&self, store: &ParamStore, x: ArrayView2<f64>) -> Mat {
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].forward_plain(store, x);
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = layer.forward_plain(store, h.view());
            }
            if i < last {
                let act = self.activation;
                h.mapv_inplace(|v| act.apply(v));
            }
        }
        h
    }
}

/// Gaussian matrix with the given standard deviation.
pub fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let c = self.config;
        let clip = if c.clip_norm > 0.0 {
            let n = grads.sq_norm().sqrt();
            if n > c.clip_norm {
                c.clip_norm / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = self.m[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "enc", &[5, 8, 3], Activation::Relu, &mut rng);
        let x = normal_matrix(4, 5, 1.0, &mut rng);
        let mut tape = Tape::new();
        let s = tape.bind(&store);
        let xv = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, s, xv);
        let plain = mlp.forward_plain(&store, x.view());
        assert!((tape.value(y) - &plain).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Array2::from_elem((1, 3), 5.0));
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &store);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let s = tape.bind(&store);
            let wv = tape.param(s, w);
            let sq = tape.square(wv);
            let loss = tape.sum(sq);
            let mut g = tape.backward(loss);
            let grads = g.params(s);
            opt.step(&mut store, &grads);
        }
        assert!(store.get(w).iter().all(|x| x.abs() < 1e-2));
    }
}
