//! Threshold-free evaluation: AUROC (rank-based, ties half-weighted), AUPRC
//! (average precision, index-stable tie order), and curve-point export.

use crate::error::{Error, Result};

/// Scores paired with binary labels.
#[derive(Debug, Clone)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<ScoredSet> {
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        Ok(ScoredSet { scores, labels })
    }

    fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Indices sorted by descending score; equal scores stay in input order.
    fn descending_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    }
}

/// Probability that a random positive outscores a random negative, ties at
/// half weight. Computed from midranks, which matches exhaustive pairwise
/// counting exactly.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.positives();
    let n_neg = set.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(format!(
            "auroc needs both classes; got {n_pos} positives / {n_neg} negatives"
        )));
    }
    // Ascending midranks: tied scores share the mean of their rank span.
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| {
        set.scores[a]
            .partial_cmp(&set.scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if set.labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Average precision: mean over positives of precision at that positive's
/// rank in the descending ordering (stable by index on ties).
pub fn auprc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.positives();
    if n_pos == 0 {
        return Err(Error::invalid("auprc needs at least one positive"));
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in set.descending_order().iter().enumerate() {
        if set.labels[idx] == 1 {
            tp += 1;
            sum += tp as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurveKind {
    Roc,
    Pr,
}

/// One exported operating point: the threshold and the curve coordinates
/// (FPR/TPR for ROC, recall/precision for PR).
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// Operating points at every distinct score, endpoints included.
pub fn curve_points(set: &ScoredSet, kind: CurveKind) -> Result<Vec<CurvePoint>> {
    let n_pos = set.positives();
    let n_neg = set.labels.len() - n_pos;
    if n_pos == 0 || (kind == CurveKind::Roc && n_neg == 0) {
        return Err(Error::invalid("curve export needs both classes"));
    }
    let order = set.descending_order();
    let mut points = Vec::new();
    match kind {
        CurveKind::Roc => points.push(CurvePoint {
            threshold: f64::INFINITY,
            x: 0.0,
            y: 0.0,
        }),
        CurveKind::Pr => points.push(CurvePoint {
            threshold: f64::INFINITY,
            x: 0.0,
            y: 1.0,
        }),
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        // Consume the whole tie group before emitting a point: a threshold
        // either admits all equal scores or none.
        let score = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == score {
            if set.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let point = match kind {
            CurveKind::Roc => CurvePoint {
                threshold: score,
                x: fp as f64 / n_neg as f64,
                y: tp as f64 / n_pos as f64,
            },
            CurveKind::Pr => CurvePoint {
                threshold: score,
                x: tp as f64 / n_pos as f64,
                y: tp as f64 / (tp + fp) as f64,
            },
        };
        points.push(point);
    }
    Ok(points)
}

/// Trapezoidal area under an emitted curve (used to cross-check ROC export
/// against the rank-based AUROC).
pub fn trapezoid_area(points: &[CurvePoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].x - w[0].x) * (w[1].y + w[0].y) / 2.0)
        .sum()
}

/// CSV rows for external plotting: `threshold,x,y` with a header line.
pub fn curve_csv(points: &[CurvePoint], kind: CurveKind) -> String {
    let header = match kind {
        CurveKind::Roc => "threshold,fpr,tpr",
        CurveKind::Pr => "threshold,recall,precision",
    };
    let mut out = String::from(header);
    out.push('\n');
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.x, p.y));
    }
    out
}
