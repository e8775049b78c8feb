//! Finite-difference verification of tape gradients.
//!
//! For each parameter entry, a central difference `(f(x+eps) - f(x-eps)) / 2eps`
//! is compared against the analytic gradient using a relative error that
//! tolerates near-zero magnitudes.

use crate::error::Result;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Worst-offender summary from a [`check_gradients`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error observed across every parameter entry.
    pub max_rel_err: f64,
    /// `(parameter index, entry index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-2)` — absolute near zero, relative at scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Rebuilds the scalar loss under `build` for perturbed copies of `params`
/// and compares central differences against the analytic gradients.
///
/// `build` must construct the full forward graph from the leaves it is given
/// (same order as `params`) and return the loss node.
pub fn check_gradients<F>(params: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ps.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.data.len()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        if !p.requires_grad {
            continue;
        }
        for ei in 0..p.data.len() {
            let orig = work[pi].data[ei];
            work[pi].data[ei] = orig + eps;
            let fp = eval(&work)?;
            work[pi].data[ei] = orig - eps;
            let fm = eval(&work)?;
            work[pi].data[ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = relative_error(analytic[pi][ei], numeric);
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ei);
                report.analytic = analytic[pi][ei];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
