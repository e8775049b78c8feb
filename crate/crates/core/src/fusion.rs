//! Gated fusion of the global context with the local causal vector, the
//! final prediction head, and the second-stage training loss.
//!
//! `g = sigma(W_g [G; L] + b_g)` interpolates elementwise between the two
//! pathways (`h = g . G + (1 - g) . L`); the loss adds a sparsity penalty on
//! the directed matrix to the cross entropy: `CE + lambda * mean|B|` over the
//! valid strictly-lower entries.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::causal::structural_mask;
use crate::error::{Error, Result};
use crate::params::{Affine, AffineIds};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Gate and classifier weights; `lambda` scales the sparsity penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub gate: Affine,
    pub classifier: Affine,
    pub lambda: f64,
}

impl FusionParams {
    pub fn init(rng: &mut ChaCha20Rng, d_h: usize, lambda: f64) -> FusionParams {
        let mut gate = Affine::init(rng, 2 * d_h, d_h);
        // Bias the gate open toward the global pathway, so the fused model
        // starts near the first-stage solution and recruits the local vector
        // coordinate by coordinate where it reduces loss — the local pathway
        // is pure noise until the causal map has trained.
        gate.b.data.iter_mut().for_each(|b| *b = 2.0);
        FusionParams {
            gate,
            classifier: Affine::init(rng, d_h, 1),
            lambda,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> FusionIds {
        FusionIds {
            gate: self.gate.bind(tape),
            classifier: self.classifier.bind(tape),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.gate.visit(&format!("{prefix}.gate"), f);
        self.classifier.visit(&format!("{prefix}.classifier"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.gate.visit_mut(&format!("{prefix}.gate"), f);
        self.classifier.visit_mut(&format!("{prefix}.classifier"), f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionIds {
    pub gate: AffineIds,
    pub classifier: AffineIds,
}

/// Gate activations and the fused vector; both `[1 x d_h]`.
pub fn gated_fusion(
    tape: &mut Tape,
    ids: &FusionIds,
    g_vec: TensorId,
    l_vec: TensorId,
) -> Result<(TensorId, TensorId)> {
    let (gr, gc) = tape.shape(g_vec);
    let (lr, lc) = tape.shape(l_vec);
    if (gr, gc) != (lr, lc) || gr != 1 {
        return Err(Error::ShapeMismatch {
            op: "gated_fusion",
            lhs: format!("{gr}x{gc}"),
            rhs: format!("{lr}x{lc}"),
        });
    }
    let cat = tape.concat_cols(&[g_vec, l_vec])?;
    let gate_logits = ids.gate.apply(tape, cat)?;
    let gate = tape.sigmoid(gate_logits);
    let from_global = tape.mul(gate, g_vec)?;
    let inv = tape.scalar_mul(gate, -1.0);
    let inv = tape.scalar_add(inv, 1.0);
    let from_local = tape.mul(inv, l_vec)?;
    let fused = tape.add(from_global, from_local)?;
    Ok((gate, fused))
}

/// `sigma(W_cls h + b_cls)`, a `1x1` probability node.
pub fn predict(tape: &mut Tape, ids: &FusionIds, h_final: TensorId) -> Result<TensorId> {
    let logit = ids.classifier.apply(tape, h_final)?;
    Ok(tape.sigmoid(logit))
}

/// `CE(prob, y) + lambda * mean|B|` over valid strictly-lower entries.
///
/// `pos_weight` scales the cross-entropy term for positive targets only
/// (1.0 leaves the loss unweighted); the sparsity penalty is never scaled.
pub fn stage2_loss(
    tape: &mut Tape,
    prob: TensorId,
    target: f64,
    b: TensorId,
    lambda: f64,
    t_valid: usize,
    pos_weight: f64,
) -> Result<TensorId> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!("negative sparsity weight {lambda}")));
    }
    if pos_weight <= 0.0 {
        return Err(Error::invalid(format!(
            "positive-class weight must be positive, got {pos_weight}"
        )));
    }
    let mut ce = tape.binary_cross_entropy(prob, target)?;
    if target == 1.0 && pos_weight != 1.0 {
        ce = tape.scalar_mul(ce, pos_weight);
    }
    if lambda == 0.0 {
        return Ok(ce);
    }
    let (t_max, _) = tape.shape(b);
    let penalty = tape.l1_masked(b, structural_mask(t_max, t_valid))?;
    let weighted = tape.scalar_mul(penalty, lambda);
    tape.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::{causal_attention, causal_matrix, impact_scores, local_vector};
    use crate::gradcheck::check_gradients;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn rand_row(rng: &mut ChaCha20Rng, n: usize) -> Tensor {
        Tensor::new(1, n, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn equal_inputs_pass_through_any_gate() {
        let mut r = rng(1);
        let params = FusionParams::init(&mut r, 6, 0.0);
        let g = rand_row(&mut r, 6);
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let gi = tape.leaf(&g);
        let (_, fused) = gated_fusion(&mut tape, &ids, gi, gi).unwrap();
        for (a, b) in tape.value(fused).to_vec().iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gate_weights_average_the_pathways() {
        let params = FusionParams {
            gate: Affine {
                w: Tensor::zeros(8, 4),
                b: Tensor::zeros(1, 4),
            },
            classifier: Affine {
                w: Tensor::zeros(4, 1),
                b: Tensor::zeros(1, 1),
            },
            lambda: 0.0,
        };
        let g = Tensor::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let l = Tensor::new(1, 4, vec![3.0, 2.0, 1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let (gi, li) = (tape.leaf(&g), tape.leaf(&l));
        let (gate, fused) = gated_fusion(&mut tape, &ids, gi, li).unwrap();
        assert!(tape.value(gate).iter().all(|&x| x == 0.5));
        assert_eq!(tape.value(fused), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn gate_lies_strictly_inside_unit_interval_and_fusion_interpolates() {
        let mut r = rng(2);
        for _ in 0..10 {
            let params = FusionParams::init(&mut r, 5, 0.0);
            let g = rand_row(&mut r, 5);
            let l = rand_row(&mut r, 5);
            let mut tape = Tape::new();
            let ids = params.bind(&mut tape);
            let (gi, li) = (tape.leaf(&g), tape.leaf(&l));
            let (gate, fused) = gated_fusion(&mut tape, &ids, gi, li).unwrap();
            for d in 0..5 {
                let gd = tape.value(gate)[d];
                assert!(gd > 0.0 && gd < 1.0);
                let fd = tape.value(fused)[d];
                let (lo, hi) = (g.data[d].min(l.data[d]), g.data[d].max(l.data[d]));
                assert!(fd >= lo - 1e-12 && fd <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_pathway_dims_are_rejected() {
        let mut r = rng(3);
        let params = FusionParams::init(&mut r, 4, 0.0);
        let g = rand_row(&mut r, 4);
        let l = rand_row(&mut r, 5);
        let mut tape = Tape::new();
        let ids = params.bind(&mut tape);
        let (gi, li) = (tape.leaf(&g), tape.leaf(&l));
        assert!(gated_fusion(&mut tape, &ids, gi, li).is_err());
    }

    #[test]
    fn prediction_closed_forms_and_bias_monotonicity() {
        let h = Tensor::new(1, 3, vec![0.2, -0.4, 0.6]).unwrap();
        let probe = |bias: f64| {
            let params = FusionParams {
                gate: Affine {
                    w: Tensor::zeros(6, 3),
                    b: Tensor::zeros(1, 3),
                },
                classifier: Affine {
                    w: Tensor::zeros(3, 1),
                    b: Tensor::new(1, 1, vec![bias]).unwrap(),
                },
                lambda: 0.0,
            };
            let mut tape = Tape::new();
            let ids = params.bind(&mut tape);
            let hi = tape.leaf(&h);
            let p = predict(&mut tape, &ids, hi).unwrap();
            tape.scalar_value(p)
        };
        assert_eq!(probe(0.0), 0.5);
        assert!((probe(-2.0) - 0.11920292202211755).abs() < 1e-15);
        let probs: Vec<f64> = [-3.0, -1.0, 0.0, 1.5, 4.0].iter().map(|&b| probe(b)).collect();
        assert!(probs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn loss_reduces_to_cross_entropy_at_zero_lambda() {
        let mut tape = Tape::new();
        let p = tape.constant(1, 1, vec![0.99]).unwrap();
        let b = tape.constant(3, 3, vec![1.0; 9]).unwrap();
        let loss = stage2_loss(&mut tape, p, 1.0, b, 0.0, 3, 1.0).unwrap();
        assert!((tape.scalar_value(loss) - 0.010050335853501441).abs() < 1e-15);
    }

    #[test]
    fn doubling_the_matrix_doubles_the_penalty() {
        let mut r = rng(4);
        let t = 4;
        let data: Vec<f64> = (0..t * t).map(|_| r.gen_range(-1.0..1.0)).collect();
        let doubled: Vec<f64> = data.iter().map(|x| 2.0 * x).collect();
        let mut tape = Tape::new();
        let p = tape.constant(1, 1, vec![0.7]).unwrap();
        let b1 = tape.constant(t, t, data).unwrap();
        let b2 = tape.constant(t, t, doubled).unwrap();
        let l1 = stage2_loss(&mut tape, p, 1.0, b1, 0.5, t, 1.0).unwrap();
        let l2 = stage2_loss(&mut tape, p, 1.0, b2, 0.5, t, 1.0).unwrap();
        let ce = tape.binary_cross_entropy(p, 1.0).unwrap();
        let pen1 = tape.scalar_value(l1) - tape.scalar_value(ce);
        let pen2 = tape.scalar_value(l2) - tape.scalar_value(ce);
        assert!((pen2 - 2.0 * pen1).abs() < 1e-12);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.constant(1, 1, vec![0.5]).unwrap();
        let b = tape.constant(2, 2, vec![0.0; 4]).unwrap();
        assert!(stage2_loss(&mut tape, p, 0.0, b, -0.1, 2, 1.0).is_err());
    }

    #[test]
    fn stage2_loss_gradients_match_finite_differences() {
        // Differentiates the full second-stage path: W_c through the
        // rectified matrix and attention pooling, W_g and W_cls through
        // fusion and prediction.
        let mut r = rng(5);
        let t_max = 4;
        let t_valid = 3;
        let d_h = 3;
        let a = Tensor::new(
            t_max,
            t_max,
            (0..t_max * t_max).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let h = Tensor::new(
            t_max,
            d_h,
            (0..t_max * d_h).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let g_vec = rand_row(&mut r, d_h);
        let causal = crate::causal::CausalParams::init(&mut r, t_max);
        let fusion = FusionParams::init(&mut r, d_h, 1e-3);
        let flat = [
            causal.w_c.clone(),
            fusion.gate.w.clone(),
            fusion.gate.b.clone(),
            fusion.classifier.w.clone(),
            fusion.classifier.b.clone(),
        ];
        let report = check_gradients(&flat, 1e-5, move |tape, ids| {
            let fusion_ids = FusionIds {
                gate: AffineIds { w: ids[1], b: ids[2] },
                classifier: AffineIds { w: ids[3], b: ids[4] },
            };
            let ai = tape.leaf(&a);
            let hi = tape.leaf(&h);
            let gi = tape.leaf(&g_vec);
            let b = causal_matrix(tape, ai, ids[0], t_valid)?;
            let s = impact_scores(tape, b);
            let alpha = causal_attention(tape, s, t_valid)?;
            let l = local_vector(tape, alpha, hi)?;
            let (_, fused) = gated_fusion(tape, &fusion_ids, gi, l)?;
            let prob = predict(tape, &fusion_ids, fused)?;
            stage2_loss(tape, prob, 1.0, b, 1e-3, t_valid, 1.0)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
