//! Cohort data model: irregular multivariate sequences with observation
//! masks, elapsed-time matrices, and synthetic ground truth.

pub mod ndjson;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unnormalized physiologic channels kept alongside the feature matrix so the
/// labeling rules stay auditable after normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    pub creatinine: Vec<f64>,
    pub urine_rate: Vec<f64>,
    pub resp_rate: Vec<f64>,
}

/// One patient record. Matrices are `[T_max x F]` row-major and identically
/// zero at rows >= `t_valid`; `timestamps` holds only the valid steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSequence {
    pub patient_id: String,
    /// Hours since admission, strictly increasing, length `t_valid`.
    pub timestamps: Vec<f64>,
    /// Feature values; 0.0 wherever unobserved or padded.
    pub values: Vec<f64>,
    /// 1.0 where a feature was measured at a step, 0.0 elsewhere.
    pub obs_mask: Vec<f64>,
    /// Hours since each feature was last observed (0 at step 0).
    pub feature_delta: Vec<f64>,
    /// Hours since the previous step (0 at step 0), length `T_max`.
    pub step_delta: Vec<f64>,
    pub t_valid: usize,
    pub label: u8,
    /// Step index of the planted deterioration within the retained window
    /// (synthetic ground truth; absent for controls).
    pub onset_index: Option<usize>,
    pub raw_series: Option<RawSeries>,
}

impl PatientSequence {
    pub fn t_max(&self) -> usize {
        self.step_delta.len()
    }

    pub fn n_features(&self) -> usize {
        if self.step_delta.is_empty() {
            0
        } else {
            self.values.len() / self.step_delta.len()
        }
    }

    pub fn value_at(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.n_features() + f]
    }

    pub fn mask_at(&self, t: usize, f: usize) -> f64 {
        self.obs_mask[t * self.n_features() + f]
    }

    pub fn feature_delta_at(&self, t: usize, f: usize) -> f64 {
        self.feature_delta[t * self.n_features() + f]
    }

    /// Checks every structural invariant; used on load and after generation.
    pub fn validate(&self) -> Result<()> {
        let t_max = self.t_max();
        let nf = self.n_features();
        let fail = |msg: String| Err(Error::InvariantViolation(format!("{}: {msg}", self.patient_id)));
        if self.values.len() != t_max * nf
            || self.obs_mask.len() != t_max * nf
            || self.feature_delta.len() != t_max * nf
        {
            return fail("matrix lengths disagree".into());
        }
        if self.t_valid == 0 || self.t_valid > t_max {
            return fail(format!("t_valid {} outside 1..={t_max}", self.t_valid));
        }
        if self.timestamps.len() != self.t_valid {
            return fail(format!(
                "{} timestamps for t_valid {}",
                self.timestamps.len(),
                self.t_valid
            ));
        }
        for i in 1..self.t_valid {
            if self.timestamps[i] <= self.timestamps[i - 1] {
                return fail(format!("timestamps not strictly increasing at step {i}"));
            }
        }
        for t in self.t_valid..t_max {
            if self.step_delta[t] != 0.0 {
                return fail(format!("step_delta nonzero at padded step {t}"));
            }
            for f in 0..nf {
                if self.value_at(t, f) != 0.0
                    || self.mask_at(t, f) != 0.0
                    || self.feature_delta_at(t, f) != 0.0
                {
                    return fail(format!("padded row {t} not identically zero"));
                }
            }
        }
        for f in 0..nf {
            if self.feature_delta_at(0, f) != 0.0 {
                return fail(format!("feature_delta nonzero at step 0, feature {f}"));
            }
        }
        for t in 1..self.t_valid {
            let dt = self.timestamps[t] - self.timestamps[t - 1];
            if (self.step_delta[t] - dt).abs() > 1e-9 {
                return fail(format!("step_delta mismatch at step {t}"));
            }
            for f in 0..nf {
                let expect = if self.mask_at(t - 1, f) == 1.0 {
                    dt
                } else {
                    self.feature_delta_at(t - 1, f) + dt
                };
                if (self.feature_delta_at(t, f) - expect).abs() > 1e-9 {
                    return fail(format!("feature_delta recurrence broken at ({t}, {f})"));
                }
            }
        }
        for (t, f) in (0..self.t_valid).flat_map(|t| (0..nf).map(move |f| (t, f))) {
            let m = self.mask_at(t, f);
            if m != 0.0 && m != 1.0 {
                return fail(format!("obs_mask not binary at ({t}, {f})"));
            }
            if m == 0.0 && self.value_at(t, f) != 0.0 {
                return fail(format!("unobserved cell ({t}, {f}) has nonzero value"));
            }
        }
        if self.label > 1 {
            return fail(format!("label {} not binary", self.label));
        }
        Ok(())
    }
}

/// Knobs for the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub n_features: usize,
    pub t_max: usize,
    pub target_prevalence: f64,
    /// Per-cell probability that a measurement is dropped.
    pub missing_rate: f64,
    /// Early-warning horizon W: cases are truncated this many hours before
    /// their deterioration onset.
    pub lead_time_hours: f64,
    pub shock_magnitude: f64,
    /// Duration of the acute multi-channel transient at the shock hour.
    pub shock_ramp_hours: f64,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_patients: 200,
            n_features: 12,
            t_max: 48,
            target_prevalence: 0.35,
            missing_rate: 0.4,
            lead_time_hours: 6.0,
            shock_magnitude: 1.2,
            shock_ramp_hours: 5.0,
            rng_seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_prevalence > 0.0 && self.target_prevalence < 1.0) {
            return Err(Error::invalid(format!(
                "target_prevalence {} outside (0, 1)",
                self.target_prevalence
            )));
        }
        const LEADS: [f64; 5] = [0.0, 6.0, 12.0, 18.0, 24.0];
        if !LEADS.contains(&self.lead_time_hours) {
            return Err(Error::invalid(format!(
                "lead_time_hours {} not one of {LEADS:?}",
                self.lead_time_hours
            )));
        }
        if self.t_max < 8 {
            return Err(Error::invalid(format!("t_max {} below minimum 8", self.t_max)));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::invalid(format!(
                "missing_rate {} outside [0, 1)",
                self.missing_rate
            )));
        }
        if self.n_features < 3 {
            return Err(Error::invalid(
                "n_features must be at least 3 (the pinned physiologic channels)",
            ));
        }
        Ok(())
    }
}

/// Elapsed-time matrices for one sequence.
///
/// `feature_delta[t][f]` is the time since feature `f` was last observed
/// (resetting on observation, accumulating through gaps); `step_delta[t]` is
/// the time since the previous step. Both are 0 at step 0.
pub fn compute_deltas(
    timestamps: &[f64],
    obs_mask: &[f64],
    n_features: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = timestamps.len();
    if obs_mask.len() != t_len * n_features {
        return Err(Error::invalid(format!(
            "obs_mask length {} does not match {t_len} steps x {n_features} features",
            obs_mask.len()
        )));
    }
    for i in 1..t_len {
        if timestamps[i] <= timestamps[i - 1] {
            return Err(Error::invalid(format!(
                "timestamps not strictly increasing at step {i}: {} then {}",
                timestamps[i - 1],
                timestamps[i]
            )));
        }
    }
    let mut feature_delta = vec![0.0; t_len * n_features];
    let mut step_delta = vec![0.0; t_len];
    for t in 1..t_len {
        let dt = timestamps[t] - timestamps[t - 1];
        step_delta[t] = dt;
        for f in 0..n_features {
            feature_delta[t * n_features + f] = if obs_mask[(t - 1) * n_features + f] == 1.0 {
                dt
            } else {
                feature_delta[(t - 1) * n_features + f] + dt
            };
        }
    }
    Ok((feature_delta, step_delta))
}

/// Per-feature first and second moments fitted on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose observed values had zero variance (std forced to 1).
    pub degenerate: Vec<bool>,
}

impl NormalizationStats {
    /// Moments over observed cells of the given patients.
    pub fn fit(cohort: &[PatientSequence], indices: &[usize]) -> Result<NormalizationStats> {
        let first = indices
            .first()
            .and_then(|&i| cohort.get(i))
            .ok_or_else(|| Error::invalid("cannot fit normalization on an empty split"))?;
        let nf = first.n_features();
        let mut sum = vec![0.0; nf];
        let mut sumsq = vec![0.0; nf];
        let mut count = vec![0usize; nf];
        for &i in indices {
            let p = &cohort[i];
            for t in 0..p.t_valid {
                for f in 0..nf {
                    if p.mask_at(t, f) == 1.0 {
                        let v = p.value_at(t, f);
                        sum[f] += v;
                        sumsq[f] += v * v;
                        count[f] += 1;
                    }
                }
            }
        }
        let mut mean = vec![0.0; nf];
        let mut std = vec![1.0; nf];
        let mut degenerate = vec![false; nf];
        for f in 0..nf {
            if count[f] == 0 {
                degenerate[f] = true;
                continue;
            }
            mean[f] = sum[f] / count[f] as f64;
            let var = (sumsq[f] / count[f] as f64 - mean[f] * mean[f]).max(0.0);
            if var.sqrt() > 1e-12 {
                std[f] = var.sqrt();
            } else {
                degenerate[f] = true;
            }
        }
        Ok(NormalizationStats {
            mean,
            std,
            degenerate,
        })
    }

    /// Transforms observed cells in place; unobserved and padded cells stay 0.
    pub fn apply(&self, patient: &mut PatientSequence) {
        let nf = patient.n_features();
        debug_assert_eq!(nf, self.mean.len());
        for t in 0..patient.t_valid {
            for f in 0..nf {
                let idx = t * nf + f;
                if patient.obs_mask[idx] == 1.0 {
                    patient.values[idx] = (patient.values[idx] - self.mean[f]) / self.std[f];
                }
            }
        }
    }

    pub fn apply_all(&self, cohort: &mut [PatientSequence]) {
        for p in cohort.iter_mut() {
            self.apply(p);
        }
    }
}

/// Index partition of a cohort into train/validation/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic shuffled split by patient index.
pub fn split_indices(n: usize, val_frac: f64, test_frac: f64, seed: u64) -> Splits {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut rng);
    let n_test = ((n as f64) * test_frac).round() as usize;
    let n_val = ((n as f64) * val_frac).round() as usize;
    let test = order[..n_test].to_vec();
    let val = order[n_test..n_test + n_val].to_vec();
    let train = order[n_test + n_val..].to_vec();
    Splits { train, val, test }
}
