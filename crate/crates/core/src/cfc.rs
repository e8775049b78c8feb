//! Closed-form continuous-time recurrence over irregular steps.
//!
//! Each step blends two candidate states through a decay gate driven by the
//! elapsed time: `h = sigma(-f(z) * dt) . g(z) + (1 - sigma(-f(z) * dt)) . k(z)`,
//! where `z` concatenates the step input with the previous hidden state and
//! `f`, `g`, `k` are small heads on a shared tanh backbone. Long gaps push
//! the state toward `k(z)`, so unobserved intervals decay instead of freeze.
//! An ODE reference integrator for the underlying liquid dynamics lives here
//! too, used only for comparative tests.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatientSequence;
use crate::error::{Error, Result};
use crate::params::Affine;
use crate::tape::{sigmoid_scalar, Tape, TensorId};
use crate::tensor::Tensor;

/// Backbone + head weights of the continuous-time cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfcParams {
    pub backbone: Affine,
    pub head_f: Affine,
    pub head_g: Affine,
    pub head_k: Affine,
}

impl CfcParams {
    pub fn init(rng: &mut ChaCha20Rng, d_in: usize, d_h: usize) -> CfcParams {
        let backbone = Affine::init(rng, d_in + d_h, d_h);
        let mut head_f = Affine::init(rng, d_h, d_h);
        // Positive initial decay logits keep early gates moderate rather
        // than saturated.
        head_f.b.data.iter_mut().for_each(|b| *b = 1.0);
        CfcParams {
            backbone,
            head_f,
            head_g: Affine::init(rng, d_h, d_h),
            head_k: Affine::init(rng, d_h, d_h),
        }
    }

    pub fn d_in(&self) -> usize {
        self.backbone.d_in() - self.d_h()
    }

    pub fn d_h(&self) -> usize {
        self.backbone.d_out()
    }

    pub fn bind(&self, tape: &mut Tape) -> CfcIds {
        CfcIds {
            backbone: self.backbone.bind(tape),
            head_f: self.head_f.bind(tape),
            head_g: self.head_g.bind(tape),
            head_k: self.head_k.bind(tape),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.backbone.visit(&format!("{prefix}.backbone"), f);
        self.head_f.visit(&format!("{prefix}.head_f"), f);
        self.head_g.visit(&format!("{prefix}.head_g"), f);
        self.head_k.visit(&format!("{prefix}.head_k"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.backbone.visit_mut(&format!("{prefix}.backbone"), f);
        self.head_f.visit_mut(&format!("{prefix}.head_f"), f);
        self.head_g.visit_mut(&format!("{prefix}.head_g"), f);
        self.head_k.visit_mut(&format!("{prefix}.head_k"), f);
    }
}

/// Tape-bound handles of [`CfcParams`].
#[derive(Debug, Clone, Copy)]
pub struct CfcIds {
    pub backbone: crate::params::AffineIds,
    pub head_f: crate::params::AffineIds,
    pub head_g: crate::params::AffineIds,
    pub head_k: crate::params::AffineIds,
}

impl CfcIds {
    /// Handles in the same order `CfcParams::visit` emits tensors.
    pub fn id_list(&self) -> Vec<TensorId> {
        let mut v = self.backbone.id_list();
        v.extend(self.head_f.id_list());
        v.extend(self.head_g.id_list());
        v.extend(self.head_k.id_list());
        v
    }

    /// One recurrence step; `u_t: [1 x d_in]`, `h_prev: [1 x d_h]`.
    pub fn cell(
        &self,
        tape: &mut Tape,
        u_t: TensorId,
        h_prev: TensorId,
        dt: f64,
    ) -> Result<TensorId> {
        if dt < 0.0 {
            return Err(Error::invalid(format!("negative elapsed time {dt}")));
        }
        let z = tape.concat_cols(&[u_t, h_prev])?;
        let zb = self.backbone.apply(tape, z)?;
        let zb = tape.tanh(zb);
        let f = self.head_f.apply(tape, zb)?;
        let g = self.head_g.apply(tape, zb)?;
        let g = tape.tanh(g);
        let k = self.head_k.apply(tape, zb)?;
        let k = tape.tanh(k);
        let neg_f_dt = tape.scalar_mul(f, -dt);
        let gate = tape.sigmoid(neg_f_dt);
        let gated_g = tape.mul(gate, g)?;
        let inv_gate = tape.scalar_mul(gate, -1.0);
        let inv_gate = tape.scalar_add(inv_gate, 1.0);
        let gated_k = tape.mul(inv_gate, k)?;
        tape.add(gated_g, gated_k)
    }
}

/// Step input `u_t = [values ; obs_mask ; log1p(feature_delta) ; 1.0]`, so
/// `d_in = 3F + 1`. The trailing validity flag distinguishes a real all-zero
/// step from padding.
pub fn step_input(seq: &PatientSequence, t: usize) -> Vec<f64> {
    let nf = seq.n_features();
    let mut u = Vec::with_capacity(3 * nf + 1);
    for f in 0..nf {
        u.push(seq.value_at(t, f));
    }
    for f in 0..nf {
        u.push(seq.mask_at(t, f));
    }
    for f in 0..nf {
        u.push(seq.feature_delta_at(t, f).ln_1p());
    }
    u.push(1.0);
    u
}

pub fn input_dim(n_features: usize) -> usize {
    3 * n_features + 1
}

/// Runs the recurrence over the valid steps, returning one `[1 x d_h]` node
/// per step (row t depends only on steps <= t).
pub fn encode_sequence(
    tape: &mut Tape,
    ids: &CfcIds,
    seq: &PatientSequence,
    d_in: usize,
    d_h: usize,
) -> Result<Vec<TensorId>> {
    if seq.t_valid == 0 {
        return Err(Error::invalid(format!(
            "{}: empty sequence",
            seq.patient_id
        )));
    }
    if input_dim(seq.n_features()) != d_in {
        return Err(Error::ShapeMismatch {
            op: "encode_sequence",
            lhs: format!("1x{}", input_dim(seq.n_features())),
            rhs: format!("1x{d_in}"),
        });
    }
    let inputs: Result<Vec<TensorId>> = (0..seq.t_valid)
        .map(|t| tape.constant(1, d_in, step_input(seq, t)))
        .collect();
    encode_rows(tape, ids, &inputs?, &seq.step_delta[..seq.t_valid], d_h)
}

/// Runs the recurrence over pre-built input rows. This is the layer-stacking
/// entry point: a deeper encoder feeds one cell's states into the next with
/// the same elapsed times.
pub fn encode_rows(
    tape: &mut Tape,
    ids: &CfcIds,
    inputs: &[TensorId],
    step_delta: &[f64],
    d_h: usize,
) -> Result<Vec<TensorId>> {
    if inputs.is_empty() {
        return Err(Error::invalid("no input rows to encode"));
    }
    if inputs.len() != step_delta.len() {
        return Err(Error::ShapeMismatch {
            op: "encode_rows",
            lhs: format!("{} rows", inputs.len()),
            rhs: format!("{} step deltas", step_delta.len()),
        });
    }
    let mut h = tape.constant(1, d_h, vec![0.0; d_h])?;
    let mut rows = Vec::with_capacity(inputs.len());
    for (&u, &dt) in inputs.iter().zip(step_delta) {
        h = ids.cell(tape, u, h, dt)?;
        rows.push(h);
    }
    Ok(rows)
}

/// Materializes encoded rows as a `[T_max x d_h]` tensor, zero rows beyond
/// the valid range.
pub fn states_matrix(tape: &Tape, rows: &[TensorId], t_max: usize, d_h: usize) -> Tensor {
    let mut out = Tensor::zeros(t_max, d_h);
    for (t, &id) in rows.iter().enumerate() {
        out.data[t * d_h..(t + 1) * d_h].copy_from_slice(tape.value(id));
    }
    out
}

/// Reference integrator for the liquid dynamics
/// `dh/dt = -(w + f(z)) . h + w . f(z)` with `f` sigmoid-squashed on the
/// shared backbone and `w` a positive per-unit rate. Fixed-step RK4; test
/// and demo use only.
pub struct LtcReference {
    pub params: CfcParams,
    /// Positive decay rates, one per hidden unit.
    pub w: Vec<f64>,
}

impl LtcReference {
    pub fn init(rng: &mut ChaCha20Rng, d_in: usize, d_h: usize) -> LtcReference {
        LtcReference {
            params: CfcParams::init(rng, d_in, d_h),
            w: (0..d_h).map(|_| rng.gen_range(0.2..1.5)).collect(),
        }
    }

    fn f_squashed(&self, u_t: &[f64], h: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(u_t.len() + h.len());
        z.extend_from_slice(u_t);
        z.extend_from_slice(h);
        let zb: Vec<f64> = self
            .params
            .backbone
            .forward_plain(&z)
            .into_iter()
            .map(f64::tanh)
            .collect();
        self.params
            .head_f
            .forward_plain(&zb)
            .into_iter()
            .map(sigmoid_scalar)
            .collect()
    }

    fn derivative(&self, u_t: &[f64], h: &[f64]) -> Vec<f64> {
        let f = self.f_squashed(u_t, h);
        h.iter()
            .zip(&f)
            .zip(&self.w)
            .map(|((&hi, &fi), &wi)| -(wi + fi) * hi + wi * fi)
            .collect()
    }

    /// Integrates over `[0, dt]` with `solver_steps` RK4 steps.
    pub fn cell(
        &self,
        u_t: &[f64],
        h_prev: &[f64],
        dt: f64,
        solver_steps: usize,
    ) -> Result<Vec<f64>> {
        if solver_steps == 0 {
            return Err(Error::invalid("solver_steps must be at least 1"));
        }
        if dt < 0.0 {
            return Err(Error::invalid(format!("negative elapsed time {dt}")));
        }
        let step = dt / solver_steps as f64;
        let mut h = h_prev.to_vec();
        for _ in 0..solver_steps {
            let k1 = self.derivative(u_t, &h);
            let h2: Vec<f64> = h.iter().zip(&k1).map(|(&a, &b)| a + 0.5 * step * b).collect();
            let k2 = self.derivative(u_t, &h2);
            let h3: Vec<f64> = h.iter().zip(&k2).map(|(&a, &b)| a + 0.5 * step * b).collect();
            let k3 = self.derivative(u_t, &h3);
            let h4: Vec<f64> = h.iter().zip(&k3).map(|(&a, &b)| a + step * b).collect();
            let k4 = self.derivative(u_t, &h4);
            for i in 0..h.len() {
                h[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                if !h[i].is_finite() {
                    return Err(Error::NonFinite("reference integrator state".into()));
                }
            }
        }
        Ok(h)
    }
}
