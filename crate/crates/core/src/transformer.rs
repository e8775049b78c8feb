//! Causal multi-head self-attention over the continuous-time states.
//!
//! Pre-norm blocks with a strict causal mask produce per-step contexts
//! `H_trans`, the global context `G` (the last valid row), and the
//! head-averaged final-layer attention matrix `A` that the causal head
//! consumes. All computation runs on the `[T_valid x d_model]` submatrix;
//! padded steps never enter a softmax.

use std::rc::Rc;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Affine, AffineIds, Norm, NormIds};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub ln_attn: Norm,
    pub wq: Affine,
    pub wk: Affine,
    pub wv: Affine,
    pub wo: Affine,
    pub ln_ff: Norm,
    pub ff1: Affine,
    pub ff2: Affine,
}

impl TransformerLayer {
    fn init(rng: &mut ChaCha20Rng, d_model: usize, d_ff: usize) -> TransformerLayer {
        TransformerLayer {
            ln_attn: Norm::init(d_model),
            wq: Affine::init(rng, d_model, d_model),
            wk: Affine::init(rng, d_model, d_model),
            wv: Affine::init(rng, d_model, d_model),
            wo: Affine::init(rng, d_model, d_model),
            ln_ff: Norm::init(d_model),
            ff1: Affine::init(rng, d_model, d_ff),
            ff2: Affine::init(rng, d_ff, d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub layers: Vec<TransformerLayer>,
    pub final_norm: Norm,
    pub n_heads: usize,
}

impl TransformerParams {
    pub fn init(
        rng: &mut ChaCha20Rng,
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
    ) -> Result<TransformerParams> {
        if d_model % n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(TransformerParams {
            layers: (0..n_layers)
                .map(|_| TransformerLayer::init(rng, d_model, d_ff))
                .collect(),
            final_norm: Norm::init(d_model),
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.final_norm.gamma.cols
    }

    pub fn bind(&self, tape: &mut Tape) -> TransformerIds {
        TransformerIds {
            layers: self
                .layers
                .iter()
                .map(|l| LayerIds {
                    ln_attn: l.ln_attn.bind(tape),
                    wq: l.wq.bind(tape),
                    wk: l.wk.bind(tape),
                    wv: l.wv.bind(tape),
                    wo: l.wo.bind(tape),
                    ln_ff: l.ln_ff.bind(tape),
                    ff1: l.ff1.bind(tape),
                    ff2: l.ff2.bind(tape),
                })
                .collect(),
            final_norm: self.final_norm.bind(tape),
            n_heads: self.n_heads,
            d_model: self.d_model(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.ln_attn.visit(&format!("{prefix}.layer{i}.ln_attn"), f);
            l.wq.visit(&format!("{prefix}.layer{i}.wq"), f);
            l.wk.visit(&format!("{prefix}.layer{i}.wk"), f);
            l.wv.visit(&format!("{prefix}.layer{i}.wv"), f);
            l.wo.visit(&format!("{prefix}.layer{i}.wo"), f);
            l.ln_ff.visit(&format!("{prefix}.layer{i}.ln_ff"), f);
            l.ff1.visit(&format!("{prefix}.layer{i}.ff1"), f);
            l.ff2.visit(&format!("{prefix}.layer{i}.ff2"), f);
        }
        self.final_norm.visit(&format!("{prefix}.final_norm"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.ln_attn.visit_mut(&format!("{prefix}.layer{i}.ln_attn"), f);
            l.wq.visit_mut(&format!("{prefix}.layer{i}.wq"), f);
            l.wk.visit_mut(&format!("{prefix}.layer{i}.wk"), f);
            l.wv.visit_mut(&format!("{prefix}.layer{i}.wv"), f);
            l.wo.visit_mut(&format!("{prefix}.layer{i}.wo"), f);
            l.ln_ff.visit_mut(&format!("{prefix}.layer{i}.ln_ff"), f);
            l.ff1.visit_mut(&format!("{prefix}.layer{i}.ff1"), f);
            l.ff2.visit_mut(&format!("{prefix}.layer{i}.ff2"), f);
        }
        self.final_norm.visit_mut(&format!("{prefix}.final_norm"), f);
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln_attn: NormIds,
    wq: AffineIds,
    wk: AffineIds,
    wv: AffineIds,
    wo: AffineIds,
    ln_ff: NormIds,
    ff1: AffineIds,
    ff2: AffineIds,
}

/// Per-layer handle bundle, in `visit` order. Only needed when reassembling
/// ids outside this module, e.g. for whole-model gradient sweeps.
#[derive(Debug, Clone)]
pub struct LayerIdParts {
    pub ln_attn: NormIds,
    pub wq: AffineIds,
    pub wk: AffineIds,
    pub wv: AffineIds,
    pub wo: AffineIds,
    pub ln_ff: NormIds,
    pub ff1: AffineIds,
    pub ff2: AffineIds,
}

#[derive(Debug, Clone)]
pub struct TransformerIds {
    layers: Vec<LayerIds>,
    final_norm: NormIds,
    n_heads: usize,
    d_model: usize,
}

impl TransformerIds {
    /// Handles in the same order `TransformerParams::visit` emits tensors.
    pub fn id_list(&self) -> Vec<TensorId> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.ln_attn.id_list());
            v.extend(l.wq.id_list());
            v.extend(l.wk.id_list());
            v.extend(l.wv.id_list());
            v.extend(l.wo.id_list());
            v.extend(l.ln_ff.id_list());
            v.extend(l.ff1.id_list());
            v.extend(l.ff2.id_list());
        }
        v.extend(self.final_norm.id_list());
        v
    }

    pub fn from_parts(
        layers: Vec<LayerIdParts>,
        final_norm: NormIds,
        n_heads: usize,
        d_model: usize,
    ) -> TransformerIds {
        TransformerIds {
            layers: layers
                .into_iter()
                .map(|p| LayerIds {
                    ln_attn: p.ln_attn,
                    wq: p.wq,
                    wk: p.wk,
                    wv: p.wv,
                    wo: p.wo,
                    ln_ff: p.ln_ff,
                    ff1: p.ff1,
                    ff2: p.ff2,
                })
                .collect(),
            final_norm,
            n_heads,
            d_model,
        }
    }
}

/// Encoder outputs, all on the tape: `h_trans: [T_valid x d_model]`,
/// `attn: [T_valid x T_valid]` (head-averaged, final layer), and
/// `g: [1 x d_model]` (last valid row of `h_trans`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub h_trans: TensorId,
    pub attn: TensorId,
    pub g: TensorId,
}

/// Lower-triangular-inclusive mask over a `[t x t]` score matrix.
pub fn causal_mask(t: usize) -> Rc<Vec<bool>> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            m[i * t + j] = true;
        }
    }
    Rc::new(m)
}

impl TransformerIds {
    /// Runs the block stack over `[t_valid x d_model]` states.
    pub fn encode(
        &self,
        tape: &mut Tape,
        h_cfc: TensorId,
        t_valid: usize,
    ) -> Result<AttentionOutput> {
        let (rows, cols) = tape.shape(h_cfc);
        if rows != t_valid || cols != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "transformer_encode",
                lhs: format!("{rows}x{cols}"),
                rhs: format!("{t_valid}x{}", self.d_model),
            });
        }
        let mask = causal_mask(t_valid);
        let d_head = self.d_model / self.n_heads;
        let scale = 1.0 / (d_head as f64).sqrt();

        let mut x = h_cfc;
        let mut attn = None;
        for layer in &self.layers {
            // Attention sublayer (pre-norm residual).
            let xn = layer.ln_attn.apply(tape, x)?;
            let q = layer.wq.apply(tape, xn)?;
            let k = layer.wk.apply(tape, xn)?;
            let v = layer.wv.apply(tape, xn)?;
            let mut head_outs = Vec::with_capacity(self.n_heads);
            let mut head_attns = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let qh = tape.slice_cols(q, h * d_head, d_head)?;
                let kh = tape.slice_cols(k, h * d_head, d_head)?;
                let vh = tape.slice_cols(v, h * d_head, d_head)?;
                let kht = tape.transpose(kh);
                let scores = tape.matmul(qh, kht)?;
                let scores = tape.scalar_mul(scores, scale);
                let a = tape.row_softmax_masked(scores, Rc::clone(&mask))?;
                head_attns.push(a);
                head_outs.push(tape.matmul(a, vh)?);
            }
            let concat = tape.concat_cols(&head_outs)?;
            let proj = layer.wo.apply(tape, concat)?;
            x = tape.add(x, proj)?;

            // Mean over heads keeps each row stochastic.
            let mut sum = head_attns[0];
            for &a in &head_attns[1..] {
                sum = tape.add(sum, a)?;
            }
            attn = Some(tape.scalar_mul(sum, 1.0 / self.n_heads as f64));

            // Feed-forward sublayer.
            let xn = layer.ln_ff.apply(tape, x)?;
            let hidden = layer.ff1.apply(tape, xn)?;
            let hidden = tape.relu(hidden);
            let ff = layer.ff2.apply(tape, hidden)?;
            x = tape.add(x, ff)?;
        }
        let h_trans = self.final_norm.apply(tape, x)?;
        let g = tape.row(h_trans, t_valid - 1)?;
        let attn = attn.ok_or_else(|| Error::invalid("transformer has zero layers"))?;
        Ok(AttentionOutput {
            h_trans,
            attn,
            g,
        })
    }
}

/// First-stage prediction from the global context: `sigma(w . G + b)`.
pub fn stage1_probability(tape: &mut Tape, head: &AffineIds, g: TensorId) -> Result<TensorId> {
    let logit = head.apply(tape, g)?;
    Ok(tape.sigmoid(logit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn rand_states(rng: &mut ChaCha20Rng, t: usize, d: usize) -> Tensor {
        let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(t, d, data).unwrap()
    }

    fn encode_once(
        params: &TransformerParams,
        states: &Tensor,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let x = tape.leaf(states);
        let out = ids.encode(&mut tape, x, states.rows).unwrap();
        (
            tape.value(out.h_trans).to_vec(),
            tape.value(out.attn).to_vec(),
            tape.value(out.g).to_vec(),
        )
    }

    #[test]
    fn single_step_attention_is_identity() {
        let mut r = rng(1);
        let params = TransformerParams::init(&mut r, 2, 2, 8, 16).unwrap();
        let states = rand_states(&mut r, 1, 8);
        let (h, a, g) = encode_once(&params, &states);
        assert_eq!(a, vec![1.0]);
        assert_eq!(g, h);
    }

    #[test]
    fn attention_rows_are_stochastic_and_causally_zero() {
        let mut r = rng(2);
        let params = TransformerParams::init(&mut r, 3, 4, 8, 16).unwrap();
        let t = 7;
        let states = rand_states(&mut r, t, 8);
        let (_, a, _) = encode_once(&params, &states);
        for i in 0..t {
            let row_sum: f64 = a[i * t..(i + 1) * t].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9, "row {i} sums to {row_sum}");
            for j in i + 1..t {
                assert_eq!(a[i * t + j], 0.0, "future weight at ({i}, {j})");
            }
        }
    }

    #[test]
    fn future_perturbations_leave_earlier_rows_unchanged() {
        let mut r = rng(3);
        let params = TransformerParams::init(&mut r, 2, 2, 6, 12).unwrap();
        let t = 6;
        let states = rand_states(&mut r, t, 6);
        let (h_base, a_base, _) = encode_once(&params, &states);

        let mut bumped = states.clone();
        for c in 0..6 {
            bumped.data[4 * 6 + c] += 0.9; // perturb step 4
        }
        let (h_after, a_after, _) = encode_once(&params, &bumped);
        for row in 0..4 {
            assert_eq!(
                h_base[row * 6..(row + 1) * 6],
                h_after[row * 6..(row + 1) * 6],
                "h_trans row {row} changed"
            );
            assert_eq!(
                a_base[row * t..(row + 1) * t],
                a_after[row * t..(row + 1) * t],
                "attention row {row} changed"
            );
        }
        assert_ne!(h_base[4 * 6..5 * 6], h_after[4 * 6..5 * 6]);
    }

    #[test]
    fn d_model_mismatch_is_rejected() {
        let mut r = rng(4);
        let params = TransformerParams::init(&mut r, 1, 2, 8, 16).unwrap();
        let states = rand_states(&mut r, 4, 6);
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let x = tape.leaf(&states);
        assert!(ids.encode(&mut tape, x, 4).is_err());
        assert!(TransformerParams::init(&mut r, 1, 3, 8, 16).is_err());
    }

    #[test]
    fn stage1_probability_closed_forms() {
        let head = Affine {
            w: Tensor::zeros(4, 1),
            b: Tensor::zeros(1, 1),
        };
        let g = Tensor::new(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let mut tape = Tape::new();
        let ids = head.bind(&mut tape);
        let gi = tape.leaf(&g);
        let p = stage1_probability(&mut tape, &ids, gi).unwrap();
        assert_eq!(tape.scalar_value(p), 0.5);

        let head2 = Affine {
            w: Tensor::zeros(4, 1),
            b: Tensor::new(1, 1, vec![2.0]).unwrap(),
        };
        let mut tape2 = Tape::new();
        let ids2 = head2.bind(&mut tape2);
        let gi2 = tape2.leaf(&g);
        let p2 = stage1_probability(&mut tape2, &ids2, gi2).unwrap();
        assert!((tape2.scalar_value(p2) - 0.8807970779778823).abs() < 1e-15);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut r = rng(5);
        let g = rand_states(&mut r, 1, 5);
        let w = Tensor::new(5, 1, (0..5).map(|_| r.gen_range(-0.5..0.5)).collect())
            .unwrap()
            .with_grad();
        let b = Tensor::new(1, 1, vec![0.1]).unwrap().with_grad();
        let report = check_gradients(&[w, b], 1e-6, move |tape, ids| {
            let head = AffineIds {
                w: ids[0],
                b: ids[1],
            };
            let gi = tape.leaf(&g);
            let p = stage1_probability(tape, &head, gi)?;
            tape.binary_cross_entropy(p, 1.0)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn full_block_gradients_match_finite_differences() {
        let mut r = rng(6);
        let params = TransformerParams::init(&mut r, 1, 2, 4, 8).unwrap();
        let states = rand_states(&mut r, 3, 4);
        // Sweep every parameter of the single block plus the input states.
        let mut flat = vec![states.clone().with_grad()];
        params.visit("t", &mut |_, t| flat.push(t.clone()));
        let n_heads = params.n_heads;
        let report = check_gradients(&flat, 1e-5, move |tape, ids| {
            let aff = |w: usize| AffineIds { w: ids[w], b: ids[w + 1] };
            let norm = |w: usize| NormIds { gamma: ids[w], beta: ids[w + 1] };
            let t_ids = TransformerIds {
                layers: vec![LayerIds {
                    ln_attn: norm(1),
                    wq: aff(3),
                    wk: aff(5),
                    wv: aff(7),
                    wo: aff(9),
                    ln_ff: norm(11),
                    ff1: aff(13),
                    ff2: aff(15),
                }],
                final_norm: norm(17),
                n_heads,
                d_model: 4,
            };
            let out = t_ids.encode(tape, ids[0], 3)?;
            let pooled = tape.mean_all(out.h_trans);
            let attn_pool = tape.mean_all(out.attn);
            let g_pool = tape.mean_all(out.g);
            let s = tape.add(pooled, attn_pool)?;
            tape.add(s, g_pool)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
