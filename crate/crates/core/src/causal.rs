//! Second-stage temporal decoupling: rectify the attention field into a
//! strictly directed matrix, score each step by its downstream impact, and
//! aggregate the continuous-time states into a local acute vector.
//!
//! `B = relu(A . W_c) . M` with `M` strictly lower triangular, so temporal
//! precedence is enforced by structure rather than learned; `S_j` sums column
//! `j` of `B`; `alpha = softmax(S)` over valid steps; `L = sum_j alpha_j h_j`.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Trainable square map over step indices (second stage only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalParams {
    pub w_c: Tensor,
}

impl CausalParams {
    /// Identity plus small noise: the rectified matrix starts as a masked
    /// copy of the attention it purifies.
    pub fn init(rng: &mut ChaCha20Rng, t_max: usize) -> CausalParams {
        let mut w_c = Tensor::zeros(t_max, t_max).with_grad();
        for i in 0..t_max {
            for j in 0..t_max {
                w_c.data[i * t_max + j] =
                    if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.01..0.01);
            }
        }
        CausalParams { w_c }
    }

    pub fn t_max(&self) -> usize {
        self.w_c.rows
    }

    pub fn bind(&self, tape: &mut Tape) -> TensorId {
        tape.leaf(&self.w_c)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w_c"), &self.w_c);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_c"), &mut self.w_c);
    }
}

/// Boolean strict-lower-triangle restricted to the valid block: true iff
/// `i > j`, `i < t_valid`, `j < t_valid`.
pub fn structural_mask(t_max: usize, t_valid: usize) -> Rc<Vec<bool>> {
    let mut m = vec![false; t_max * t_max];
    for i in 1..t_valid {
        for j in 0..i {
            m[i * t_max + j] = true;
        }
    }
    Rc::new(m)
}

fn mask_tensor(mask: &[bool], rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        rows,
        cols,
        mask.iter().map(|&b| b as u8 as f64).collect(),
    )
    .unwrap()
}

/// `B = relu(A . W_c)` confined to the strict lower triangle of the valid
/// block; `a` and `w_c` are `[t_max x t_max]` nodes.
pub fn causal_matrix(
    tape: &mut Tape,
    a: TensorId,
    w_c: TensorId,
    t_valid: usize,
) -> Result<TensorId> {
    let (ar, ac) = tape.shape(a);
    let (wr, wc) = tape.shape(w_c);
    if ar != ac || (ar, ac) != (wr, wc) {
        return Err(Error::ShapeMismatch {
            op: "causal_matrix",
            lhs: format!("{ar}x{ac}"),
            rhs: format!("{wr}x{wc}"),
        });
    }
    if t_valid > ar {
        return Err(Error::invalid(format!(
            "t_valid {t_valid} exceeds matrix size {ar}"
        )));
    }
    let raw = tape.matmul(a, w_c)?;
    let rect = tape.relu(raw);
    let mask = structural_mask(ar, t_valid);
    let mask_t = mask_tensor(&mask, ar, ac);
    let mask_id = tape.leaf(&mask_t);
    tape.mul(rect, mask_id)
}

/// Column sums `S_j = sum_i B[i][j]`, shape `[1 x t_max]`; columns outside
/// the valid block are already zero in `B`.
pub fn impact_scores(tape: &mut Tape, b: TensorId) -> TensorId {
    tape.sum_axis0(b)
}

/// Masked softmax of the impact scores over valid steps.
pub fn causal_attention(tape: &mut Tape, s: TensorId, t_valid: usize) -> Result<TensorId> {
    let (_, t_max) = tape.shape(s);
    if t_valid == 0 {
        return Err(Error::invalid("causal_attention on an empty sequence"));
    }
    if t_valid > t_max {
        return Err(Error::invalid(format!(
            "t_valid {t_valid} exceeds score length {t_max}"
        )));
    }
    let mask: Vec<bool> = (0..t_max).map(|j| j < t_valid).collect();
    tape.row_softmax_masked(s, Rc::new(mask))
}

/// Attention-weighted pooling of hidden states: `alpha [1 x t_max]` against
/// `h [t_max x d_h]` (zero-padded rows beyond the valid block).
pub fn local_vector(tape: &mut Tape, alpha: TensorId, h: TensorId) -> Result<TensorId> {
    tape.matmul(alpha, h)
}

/// Plain CSV rows of a row-major matrix, for external heatmap rendering.
pub fn matrix_csv(data: &[f64], rows: usize, cols: usize) -> String {
    let mut out = String::new();
    for r in 0..rows {
        let row: Vec<String> = (0..cols).map(|c| data[r * cols + c].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    fn rand_square(rng: &mut ChaCha20Rng, n: usize) -> Tensor {
        Tensor::new(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_inputs_yield_the_zero_matrix() {
        let mut tape = Tape::new();
        let a = tape.leaf(&eye(4));
        let w = tape.leaf(&eye(4));
        let b = causal_matrix(&mut tape, a, w, 4).unwrap();
        assert!(tape.value(b).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upper_triangle_diagonal_and_padding_are_exactly_zero() {
        let mut r = rng(1);
        let t_max = 6;
        let t_valid = 4;
        let mut tape = Tape::new();
        let a = tape.leaf(&rand_square(&mut r, t_max));
        let w = tape.leaf(&rand_square(&mut r, t_max));
        let b = causal_matrix(&mut tape, a, w, t_valid).unwrap();
        let v = tape.value(b);
        for i in 0..t_max {
            for j in 0..t_max {
                let inside = i > j && i < t_valid && j < t_valid;
                if !inside {
                    assert_eq!(v[i * t_max + j], 0.0, "leak at ({i}, {j})");
                }
                assert!(v[i * t_max + j] >= 0.0);
            }
        }
        // The rectifier actually fired somewhere: some negative pre-image
        // position inside the triangle is zero while another is positive.
        assert!(v.iter().any(|&x| x > 0.0));
    }

    #[test]
    fn rectifier_zeroes_negative_products() {
        // A . W_c = [[-1, 0], [5, -2]] on a 2-step instance: only (1, 0)
        // survives the strict mask, and it is positive.
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::new(2, 2, vec![-1.0, 0.0, 5.0, -2.0]).unwrap());
        let w = tape.leaf(&eye(2));
        let b = causal_matrix(&mut tape, a, w, 2).unwrap();
        assert_eq!(tape.value(b), &[0.0, 0.0, 5.0, 0.0]);
        // Flip the sign: the surviving position goes through the rectifier.
        let a2 = tape.leaf(&Tensor::new(2, 2, vec![-1.0, 0.0, -5.0, -2.0]).unwrap());
        let b2 = causal_matrix(&mut tape, a2, w, 2).unwrap();
        assert_eq!(tape.value(b2), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn impact_scores_are_column_sums() {
        let mut tape = Tape::new();
        let b = tape
            .constant(3, 3, vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0, 3.0, 0.0])
            .unwrap();
        let s = impact_scores(&mut tape, b);
        assert_eq!(tape.value(s), &[3.0, 3.0, 0.0]);

        let z = tape.constant(3, 3, vec![0.0; 9]).unwrap();
        let sz = impact_scores(&mut tape, z);
        assert_eq!(tape.value(sz), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn final_step_always_scores_zero() {
        let mut r = rng(2);
        for t_valid in 1..=5 {
            let mut tape = Tape::new();
            let a = tape.leaf(&rand_square(&mut r, 5));
            let w = tape.leaf(&rand_square(&mut r, 5));
            let b = causal_matrix(&mut tape, a, w, t_valid).unwrap();
            let s = impact_scores(&mut tape, b);
            assert_eq!(tape.value(s)[t_valid - 1], 0.0);
        }
    }

    #[test]
    fn attention_matches_hand_softmax() {
        let mut tape = Tape::new();
        let s = tape.constant(1, 3, vec![3.0, 3.0, 0.0]).unwrap();
        let alpha = causal_attention(&mut tape, s, 3).unwrap();
        let v = tape.value(alpha);
        // e^3 / (2 e^3 + 1) and 1 / (2 e^3 + 1).
        assert!((v[0] - 0.4878555511603684).abs() < 1e-12, "{v:?}");
        assert!((v[1] - 0.4878555511603684).abs() < 1e-12);
        assert!((v[2] - 0.0242888976792632).abs() < 1e-12);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attention_is_uniform_for_equal_scores_and_zero_on_padding() {
        let mut tape = Tape::new();
        let s = tape.constant(1, 5, vec![0.7, 0.7, 0.7, 0.0, 0.0]).unwrap();
        let alpha = causal_attention(&mut tape, s, 3).unwrap();
        let v = tape.value(alpha);
        for j in 0..3 {
            assert!((v[j] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(&v[3..], &[0.0, 0.0]);
    }

    #[test]
    fn attention_is_shift_invariant() {
        let mut tape = Tape::new();
        let s = tape.constant(1, 4, vec![0.3, -1.2, 2.0, 0.6]).unwrap();
        let shifted = tape.scalar_add(s, 17.5);
        let a1 = causal_attention(&mut tape, s, 4).unwrap();
        let a2 = causal_attention(&mut tape, shifted, 4).unwrap();
        for (x, y) in tape.value(a1).to_vec().iter().zip(tape.value(a2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut tape = Tape::new();
        let s = tape.constant(1, 3, vec![0.0; 3]).unwrap();
        assert!(causal_attention(&mut tape, s, 0).is_err());
    }

    #[test]
    fn local_vector_special_and_random_cases() {
        let mut r = rng(3);
        let h = Tensor::new(
            3,
            4,
            vec![
                1.0, 2.0, 3.0, 4.0, //
                5.0, 6.0, 7.0, 8.0, //
                5.0, 6.0, 7.0, 8.0,
            ],
        )
        .unwrap();
        let mut tape = Tape::new();
        let hi = tape.leaf(&h);

        let one_hot = tape.constant(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let l = local_vector(&mut tape, one_hot, hi).unwrap();
        assert_eq!(tape.value(l), &[5.0, 6.0, 7.0, 8.0]);

        // Rows 1 and 2 identical: uniform weight over them returns the row.
        let half = tape.constant(1, 3, vec![0.0, 0.5, 0.5]).unwrap();
        let l2 = local_vector(&mut tape, half, hi).unwrap();
        assert_eq!(tape.value(l2), &[5.0, 6.0, 7.0, 8.0]);

        let weights: Vec<f64> = (0..3).map(|_| r.gen_range(0.0..1.0)).collect();
        let alpha = tape.constant(1, 3, weights.clone()).unwrap();
        let l3 = local_vector(&mut tape, alpha, hi).unwrap();
        for c in 0..4 {
            let naive: f64 = (0..3).map(|j| weights[j] * h.at(j, c)).sum();
            assert!((tape.value(l3)[c] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_a_column_entry_never_lowers_that_attention_weight() {
        let mut r = rng(4);
        let t = 5;
        for _ in 0..20 {
            let mut b = vec![0.0; t * t];
            for i in 1..t {
                for j in 0..i {
                    b[i * t + j] = r.gen_range(0.0..2.0);
                }
            }
            let alpha_of = |b: &[f64]| {
                let mut tape = Tape::new();
                let bi = tape.constant(t, t, b.to_vec()).unwrap();
                let s = impact_scores(&mut tape, bi);
                let a = causal_attention(&mut tape, s, t).unwrap();
                tape.value(a).to_vec()
            };
            let base = alpha_of(&b);
            let i = r.gen_range(1..t);
            let j = r.gen_range(0..i);
            b[i * t + j] += r.gen_range(0.1..1.0);
            let bumped = alpha_of(&b);
            assert!(
                bumped[j] >= base[j] - 1e-15,
                "alpha[{j}] fell from {} to {}",
                base[j],
                bumped[j]
            );
        }
    }

    #[test]
    fn stage2_path_gradients_match_finite_differences() {
        let mut r = rng(5);
        let t_max = 4;
        let t_valid = 3;
        let a = rand_square(&mut r, t_max);
        let h = Tensor::new(
            t_max,
            3,
            (0..t_max * 3).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let params = CausalParams::init(&mut r, t_max);
        let report = check_gradients(&[params.w_c.clone()], 1e-5, move |tape, ids| {
            let ai = tape.leaf(&a);
            let hi = tape.leaf(&h);
            let b = causal_matrix(tape, ai, ids[0], t_valid)?;
            let s = impact_scores(tape, b);
            let alpha = causal_attention(tape, s, t_valid)?;
            let l = local_vector(tape, alpha, hi)?;
            let pooled = tape.mean_all(l);
            let sparsity = tape.l1_masked(b, structural_mask(t_max, t_valid))?;
            let weighted = tape.scalar_mul(sparsity, 0.05);
            tape.add(pooled, weighted)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
