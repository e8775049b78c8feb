//! Parameter containers shared by the model modules: named visitation (for
//! checkpoints and optimizers) and tape binding (for differentiation).

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Uniform fan-in initialization for a `[d_in x d_out]` weight.
pub fn uniform_fan_in(rng: &mut ChaCha20Rng, d_in: usize, d_out: usize) -> Tensor {
    let bound = 1.0 / (d_in as f64).sqrt();
    let data: Vec<f64> = (0..d_in * d_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(d_in, d_out, data).unwrap().with_grad()
}

/// One dense layer: `x @ w + b` with `w: [d_in x d_out]`, `b: [1 x d_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

impl Affine {
    pub fn init(rng: &mut ChaCha20Rng, d_in: usize, d_out: usize) -> Affine {
        Affine {
            w: uniform_fan_in(rng, d_in, d_out),
            b: Tensor::zeros(1, d_out).with_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AffineIds {
        AffineIds {
            w: tape.leaf(&self.w),
            b: tape.leaf(&self.b),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows
    }

    pub fn d_out(&self) -> usize {
        self.w.cols
    }

    /// Forward pass outside any tape, for frozen inference paths.
    pub fn forward_plain(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.d_in());
        let (k, n) = (self.d_in(), self.d_out());
        let mut out = self.b.data.clone();
        for (p, &xp) in x.iter().enumerate().take(k) {
            if xp == 0.0 {
                continue;
            }
            for j in 0..n {
                out[j] += xp * self.w.data[p * n + j];
            }
        }
        out
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Tape-bound handles of an [`Affine`].
#[derive(Debug, Clone, Copy)]
pub struct AffineIds {
    pub w: TensorId,
    pub b: TensorId,
}

impl AffineIds {
    pub fn apply(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        tape.affine(x, self.w, self.b)
    }

    /// Handles in the same order `Affine::visit` emits tensors.
    pub fn id_list(&self) -> Vec<TensorId> {
        vec![self.w, self.b]
    }
}

/// Layer-norm gain/bias pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    pub fn init(dim: usize) -> Norm {
        Norm {
            gamma: Tensor::full(1, dim, 1.0).with_grad(),
            beta: Tensor::zeros(1, dim).with_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> NormIds {
        NormIds {
            gamma: tape.leaf(&self.gamma),
            beta: tape.leaf(&self.beta),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gamma: TensorId,
    pub beta: TensorId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl NormIds {
    pub fn apply(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        tape.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)
    }

    /// Handles in the same order `Norm::visit` emits tensors.
    pub fn id_list(&self) -> Vec<TensorId> {
        vec![self.gamma, self.beta]
    }
}
