//! Post-hoc Shapley attribution over a trained model: temporal coalition
//! pruning, event-, feature-, and cell-level values, and the overlap check
//! between attention weights and Shapley rankings.
//!
//! A player is "off" when its cells are made unobserved (mask and value
//! zeroed, elapsed-time features re-derived), so the background is the
//! model's native representation of missing data rather than an imputed
//! filler.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{compute_deltas, PatientSequence};
use crate::error::{Error, Result};
use crate::model::{full_forward, Model};
use crate::tape::Tape;
use crate::train::predict_sequence;

/// Largest player count for exhaustive enumeration (2^15 coalitions).
pub const EXACT_PLAYER_LIMIT: usize = 15;

/// Knobs for one attribution run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    /// Pruning tolerance: largest acceptable |attribution| of the grouped
    /// historical prefix.
    pub eta: f64,
    /// Permutation budget when a game exceeds the exact-enumeration limit.
    pub n_permutations: usize,
    pub seed: u64,
    /// Events kept for the cell-level breakdown.
    pub top_k_events: usize,
    /// Features kept for the cell-level breakdown.
    pub top_m_features: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            eta: 0.05,
            n_permutations: 500,
            seed: 0,
            top_k_events: 3,
            top_m_features: 5,
        }
    }
}

// ---- perturbation -----------------------------------------------------------

/// Turns off every valid cell for which `off(step, feature)` is true:
/// the cell becomes unobserved (mask 0, value 0) and the per-feature
/// elapsed-time channel is re-derived. Timestamps and step deltas are
/// untouched.
pub fn perturb_cells(
    seq: &PatientSequence,
    off: impl Fn(usize, usize) -> bool,
) -> Result<PatientSequence> {
    let nf = seq.n_features();
    let mut out = seq.clone();
    let mut changed = false;
    for t in 0..seq.t_valid {
        for f in 0..nf {
            if off(t, f) {
                let idx = t * nf + f;
                if out.obs_mask[idx] != 0.0 || out.values[idx] != 0.0 {
                    changed = true;
                }
                out.obs_mask[idx] = 0.0;
                out.values[idx] = 0.0;
            }
        }
    }
    if changed {
        let (fd, _) = compute_deltas(&out.timestamps, &out.obs_mask[..seq.t_valid * nf], nf)?;
        out.feature_delta[..seq.t_valid * nf].copy_from_slice(&fd);
    }
    out.validate()?;
    Ok(out)
}

/// Spec'd perturbation entry point: a cell is turned off when its step is in
/// `off_events` or its feature is in `off_features`.
pub fn perturb_sequence(
    seq: &PatientSequence,
    off_events: &BTreeSet<usize>,
    off_features: &BTreeSet<usize>,
) -> Result<PatientSequence> {
    if let Some(&t) = off_events.iter().next_back() {
        if t >= seq.t_valid {
            return Err(Error::invalid(format!(
                "event {t} out of range for {} valid steps",
                seq.t_valid
            )));
        }
    }
    if let Some(&f) = off_features.iter().next_back() {
        if f >= seq.n_features() {
            return Err(Error::invalid(format!(
                "feature {f} out of range for {} features",
                seq.n_features()
            )));
        }
    }
    perturb_cells(seq, |t, f| off_events.contains(&t) || off_features.contains(&f))
}

// ---- coalition games --------------------------------------------------------

/// A cooperative game: `n` players and a deterministic value function over
/// on/off coalitions.
pub struct CoalitionGame<'a> {
    pub n: usize,
    value: Box<dyn Fn(&[bool]) -> Result<f64> + Sync + 'a>,
}

impl<'a> CoalitionGame<'a> {
    pub fn new(n: usize, value: impl Fn(&[bool]) -> Result<f64> + Sync + 'a) -> Self {
        CoalitionGame {
            n,
            value: Box::new(value),
        }
    }

    pub fn value(&self, on: &[bool]) -> Result<f64> {
        debug_assert_eq!(on.len(), self.n);
        (self.value)(on)
    }
}

fn mask_to_on(mask: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask & (1 << i) != 0).collect()
}

/// Exact Shapley values by subset enumeration; `n <= 15`.
pub fn exact_shapley(game: &CoalitionGame) -> Result<Vec<f64>> {
    let n = game.n;
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > EXACT_PLAYER_LIMIT {
        return Err(Error::invalid(format!(
            "{n} players exceed the enumeration limit of {EXACT_PLAYER_LIMIT}; \
             use sampled_shapley"
        )));
    }
    let table: Result<Vec<f64>> = (0u32..1 << n)
        .into_par_iter()
        .map(|mask| game.value(&mask_to_on(mask, n)))
        .collect();
    let table = table?;

    let mut factorial = [1.0f64; 16];
    for i in 1..16 {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let mut phi = vec![0.0; n];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        for mask in 0u32..1 << n {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = factorial[s] * factorial[n - 1 - s] / factorial[n];
            *phi_i += weight * (table[(mask | bit) as usize] - table[mask as usize]);
        }
    }
    Ok(phi)
}

/// Permutation-sampling Shapley estimates with per-player standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledShapley {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub n_permutations: usize,
}

pub fn sampled_shapley(
    game: &CoalitionGame,
    n_permutations: usize,
    seed: u64,
) -> Result<SampledShapley> {
    let n = game.n;
    if n_permutations == 0 {
        return Err(Error::invalid("n_permutations must be positive"));
    }
    if n == 0 {
        return Ok(SampledShapley {
            values: Vec::new(),
            std_errors: Vec::new(),
            n_permutations,
        });
    }
    // Draw all permutations up front from one stream, then evaluate them in
    // parallel; the reduction below walks them in draw order.
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..n_permutations)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let marginals: Result<Vec<Vec<f64>>> = perms
        .par_iter()
        .map(|perm| {
            let mut on = vec![false; n];
            let mut prev = game.value(&on)?;
            let mut out = vec![0.0; n];
            for &i in perm {
                on[i] = true;
                let next = game.value(&on)?;
                out[i] = next - prev;
                prev = next;
            }
            Ok(out)
        })
        .collect();
    let marginals = marginals?;

    let m = n_permutations as f64;
    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    for row in &marginals {
        for i in 0..n {
            sum[i] += row[i];
            sumsq[i] += row[i] * row[i];
        }
    }
    let values: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let std_errors: Vec<f64> = (0..n)
        .map(|i| {
            if n_permutations < 2 {
                return 0.0;
            }
            let var = ((sumsq[i] - sum[i] * sum[i] / m) / (m - 1.0)).max(0.0);
            (var / m).sqrt()
        })
        .collect();
    Ok(SampledShapley {
        values,
        std_errors,
        n_permutations,
    })
}

// ---- temporal pruning -------------------------------------------------------

/// Shapley value of the grouped prefix in the 2-player game
/// {prefix steps < cut} vs {steps >= cut}.
fn prefix_attribution(
    model: &Model,
    seq: &PatientSequence,
    cut: usize,
    v00: f64,
    v11: f64,
) -> Result<f64> {
    let prefix_only = perturb_cells(seq, |t, _| t >= cut)?;
    let rest_only = perturb_cells(seq, |t, _| t < cut)?;
    let v10 = predict_sequence(model, &prefix_only)?;
    let v01 = predict_sequence(model, &rest_only)?;
    Ok(0.5 * (v10 - v00) + 0.5 * (v11 - v01))
}

/// Largest cut point whose grouped historical prefix carries an attribution
/// magnitude of at most `eta`; steps before the cut are treated as stable
/// background context from then on.
pub fn temporal_prune(model: &Model, seq: &PatientSequence, eta: f64) -> Result<usize> {
    if eta < 0.0 {
        return Err(Error::invalid(format!("pruning tolerance {eta} is negative")));
    }
    if seq.t_valid <= 1 {
        return Ok(0);
    }
    let v11 = predict_sequence(model, seq)?;
    let background = perturb_cells(seq, |_, _| true)?;
    let v00 = predict_sequence(model, &background)?;
    let cuts: Result<Vec<f64>> = (1..seq.t_valid)
        .into_par_iter()
        .map(|cut| prefix_attribution(model, seq, cut, v00, v11))
        .collect();
    let mut best = 0;
    for (k, phi) in cuts?.iter().enumerate() {
        if phi.abs() <= eta {
            best = k + 1;
        }
    }
    Ok(best)
}

// ---- attribution report -----------------------------------------------------

/// Values estimated for one game, exact or sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelValues {
    pub values: Vec<f64>,
    /// Present only when the game was sampled.
    pub std_errors: Option<Vec<f64>>,
    pub exact: bool,
}

fn solve_game(game: &CoalitionGame, cfg: &AttributionConfig, salt: u64) -> Result<LevelValues> {
    if game.n <= EXACT_PLAYER_LIMIT {
        Ok(LevelValues {
            values: exact_shapley(game)?,
            std_errors: None,
            exact: true,
        })
    } else {
        let sampled = sampled_shapley(game, cfg.n_permutations, cfg.seed ^ salt)?;
        Ok(LevelValues {
            values: sampled.values,
            std_errors: Some(sampled.std_errors),
            exact: false,
        })
    }
}

/// Indices of the `k` largest magnitudes, ties broken toward lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Per-patient attribution at all three granularities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub patient_id: String,
    /// First retained step; earlier steps form the aggregated prefix.
    pub pruning_index: usize,
    /// Joint attribution of the aggregated prefix (0 when nothing is pruned).
    pub pruned_value: f64,
    /// Retained step indices, aligned with `event_values`.
    pub event_steps: Vec<usize>,
    pub event_values: Vec<f64>,
    pub event_std_errors: Option<Vec<f64>>,
    pub event_exact: bool,
    /// One value per feature, toggled across the retained window.
    pub feature_values: Vec<f64>,
    pub feature_std_errors: Option<Vec<f64>>,
    pub feature_exact: bool,
    /// Cell breakdown over `cell_events x cell_features`, row-major, with the
    /// remaining retained mass in `cell_other`.
    pub cell_events: Vec<usize>,
    pub cell_features: Vec<usize>,
    pub cell_values: Vec<f64>,
    pub cell_other: f64,
    pub cell_std_errors: Option<Vec<f64>>,
    pub cell_other_std_error: Option<f64>,
    pub cell_exact: bool,
    /// Model probability on the unperturbed sequence.
    pub full_value: f64,
    /// Probability with every step off (event-level background).
    pub event_background: f64,
    /// Probability with the retained window off and the prefix intact
    /// (feature- and cell-level background).
    pub feature_background: f64,
    pub eta: f64,
    pub seed: u64,
    pub n_permutations: usize,
}

/// Runs pruning plus the three attribution levels for one patient. The
/// sequence must already be normalized the way the model was trained.
pub fn attribution_report(
    model: &Model,
    seq: &PatientSequence,
    cfg: &AttributionConfig,
) -> Result<AttributionReport> {
    let p = temporal_prune(model, seq, cfg.eta)?;
    let full_value = predict_sequence(model, seq)?;
    let background = perturb_cells(seq, |_, _| true)?;
    let event_background = predict_sequence(model, &background)?;
    let retained_off = perturb_cells(seq, |t, _| t >= p)?;
    let feature_background = predict_sequence(model, &retained_off)?;

    // Event level: one player per retained step, plus the grouped prefix as
    // player 0 when a prefix exists.
    let retained: Vec<usize> = (p..seq.t_valid).collect();
    let has_prefix = p > 0;
    let n_event = retained.len() + has_prefix as usize;
    let event_game = CoalitionGame::new(n_event, |on: &[bool]| {
        let prefix_on = !has_prefix || on[0];
        let offset = has_prefix as usize;
        let perturbed = perturb_cells(seq, |t, _| {
            if t < p {
                !prefix_on
            } else {
                !on[offset + (t - p)]
            }
        })?;
        predict_sequence(model, &perturbed)
    });
    let event_level = solve_game(&event_game, cfg, 0x45)?;
    let (pruned_value, event_values, event_std_errors) = if has_prefix {
        (
            event_level.values[0],
            event_level.values[1..].to_vec(),
            event_level.std_errors.as_ref().map(|s| s[1..].to_vec()),
        )
    } else {
        (0.0, event_level.values.clone(), event_level.std_errors.clone())
    };

    // Feature level: each feature toggled across the whole retained window;
    // the prefix stays untouched in every coalition.
    let nf = seq.n_features();
    let feature_game = CoalitionGame::new(nf, |on: &[bool]| {
        let perturbed = perturb_cells(seq, |t, f| t >= p && !on[f])?;
        predict_sequence(model, &perturbed)
    });
    let feature_level = solve_game(&feature_game, cfg, 0x46)?;

    // Cell level: dominant (event x feature) intersections as individual
    // players, everything else in the retained window grouped as "other".
    let top_events: Vec<usize> = top_k_indices(&event_values, cfg.top_k_events)
        .into_iter()
        .map(|i| retained[i])
        .collect();
    let top_features = top_k_indices(&feature_level.values, cfg.top_m_features);
    let k = top_events.len();
    let m = top_features.len();
    let cell_of = |t: usize, f: usize| -> Option<usize> {
        let ei = top_events.iter().position(|&e| e == t)?;
        let fi = top_features.iter().position(|&g| g == f)?;
        Some(ei * m + fi)
    };
    let n_cell = k * m + 1; // + the "other" bucket
    let cell_level = {
        let cell_game = CoalitionGame::new(n_cell, |on: &[bool]| {
            let perturbed = perturb_cells(seq, |t, f| {
                if t < p {
                    return false;
                }
                match cell_of(t, f) {
                    Some(i) => !on[i],
                    None => !on[k * m],
                }
            })?;
            predict_sequence(model, &perturbed)
        });
        solve_game(&cell_game, cfg, 0x47)?
    };
    let cell_other = cell_level.values[k * m];
    let cell_values = cell_level.values[..k * m].to_vec();
    let (cell_std_errors, cell_other_std_error) = match &cell_level.std_errors {
        Some(s) => (Some(s[..k * m].to_vec()), Some(s[k * m])),
        None => (None, None),
    };

    Ok(AttributionReport {
        patient_id: seq.patient_id.clone(),
        pruning_index: p,
        pruned_value,
        event_steps: retained,
        event_values,
        event_std_errors,
        event_exact: event_level.exact,
        feature_values: feature_level.values,
        feature_std_errors: feature_level.std_errors,
        feature_exact: feature_level.exact,
        cell_events: top_events,
        cell_features: top_features,
        cell_values,
        cell_other,
        cell_std_errors,
        cell_other_std_error,
        cell_exact: cell_level.exact,
        full_value,
        event_background,
        feature_background,
        eta: cfg.eta,
        seed: cfg.seed,
        n_permutations: cfg.n_permutations,
    })
}

// ---- attention/Shapley alignment ---------------------------------------------

/// Top-k sets from the causal attention and from event-level Shapley
/// magnitudes, with their Jaccard overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub patient_id: String,
    pub k: usize,
    pub attention_top: Vec<usize>,
    pub shapley_top: Vec<usize>,
    pub overlap: f64,
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: BTreeSet<usize> = a.iter().copied().collect();
    let sb: BTreeSet<usize> = b.iter().copied().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Compares the model's own causal attention against post-hoc event-level
/// Shapley rankings over the retained steps of `report`.
pub fn alignment_check(
    model: &Model,
    seq: &PatientSequence,
    report: &AttributionReport,
    k: usize,
) -> Result<AlignmentReport> {
    let stage2 = model
        .stage2
        .as_ref()
        .ok_or_else(|| Error::invalid("alignment check requires a causal stage"))?;
    let mut tape = Tape::new();
    let s1 = model.stage1.bind(&mut tape);
    let s2 = stage2.bind(&mut tape);
    let out = full_forward(&mut tape, &s1, Some(&s2), seq, &model.config)?;
    let alpha = tape.value(out.stage2.as_ref().expect("causal stage").alpha);

    // Rank only the retained steps, so both sides see the same candidates.
    let alpha_retained: Vec<f64> = report.event_steps.iter().map(|&t| alpha[t]).collect();
    let k = k.min(report.event_steps.len());
    let attention_top: Vec<usize> = top_k_indices(&alpha_retained, k)
        .into_iter()
        .map(|i| report.event_steps[i])
        .collect();
    let shapley_top: Vec<usize> = top_k_indices(&report.event_values, k)
        .into_iter()
        .map(|i| report.event_steps[i])
        .collect();
    let overlap = jaccard(&attention_top, &shapley_top);
    Ok(AlignmentReport {
        patient_id: seq.patient_id.clone(),
        k,
        attention_top,
        shapley_top,
        overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_synthetic_cohort;
    use crate::data::SyntheticConfig;
    use crate::model::{ModelConfig, Variant};

    fn tiny_model(seed: u64) -> Model {
        Model::init(
            ModelConfig {
                n_features: 3,
                t_max: 10,
                d_h: 4,
                cfc_layers: 1,
                n_layers: 1,
                n_heads: 2,
                d_ff: 8,
                variant: Variant::Full,
                lambda: 1e-3,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_sequence(seed: u64) -> PatientSequence {
        generate_synthetic_cohort(&SyntheticConfig {
            n_patients: 4,
            n_features: 3,
            t_max: 10,
            target_prevalence: 0.5,
            lead_time_hours: 0.0,
            rng_seed: seed,
            ..Default::default()
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn empty_perturbation_is_identity() {
        let seq = tiny_sequence(1);
        let out = perturb_sequence(&seq, &BTreeSet::new(), &BTreeSet::new()).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn turning_off_a_step_blanks_its_row_and_rederives_deltas() {
        let seq = tiny_sequence(2);
        let nf = seq.n_features();
        let t_off = 1;
        let out =
            perturb_sequence(&seq, &BTreeSet::from([t_off]), &BTreeSet::new()).unwrap();
        for f in 0..nf {
            assert_eq!(out.obs_mask[t_off * nf + f], 0.0);
            assert_eq!(out.values[t_off * nf + f], 0.0);
        }
        // Oracle: recompute the elapsed-time channel from scratch on the
        // modified mask.
        let (fd, _) =
            compute_deltas(&out.timestamps, &out.obs_mask[..seq.t_valid * nf], nf).unwrap();
        assert_eq!(&out.feature_delta[..seq.t_valid * nf], &fd[..]);
        assert_eq!(out.timestamps, seq.timestamps);
        assert_eq!(out.step_delta, seq.step_delta);
    }

    #[test]
    fn all_off_yields_a_valid_background_sequence() {
        let seq = tiny_sequence(3);
        let bg = perturb_cells(&seq, |_, _| true).unwrap();
        assert!(bg.obs_mask.iter().all(|&m| m == 0.0));
        assert!(bg.values.iter().all(|&v| v == 0.0));
        bg.validate().unwrap();
        // The model still produces a probability on it.
        let p = predict_sequence(&tiny_model(1), &bg).unwrap();
        assert!(p > 0.0 && p < 1.0);
    }

    #[test]
    fn out_of_range_players_are_rejected() {
        let seq = tiny_sequence(4);
        assert!(perturb_sequence(&seq, &BTreeSet::from([seq.t_valid]), &BTreeSet::new()).is_err());
        assert!(perturb_sequence(&seq, &BTreeSet::new(), &BTreeSet::from([99])).is_err());
    }

    #[test]
    fn exact_shapley_two_player_example() {
        // v(∅)=0, v({0})=1, v({1})=2, v({0,1})=4. Enumerating both
        // orderings: player 0 contributes 1 then 2, player 1 contributes 2
        // then 3, so φ = (1.5, 2.5).
        let game = CoalitionGame::new(2, |on: &[bool]| {
            Ok(match (on[0], on[1]) {
                (false, false) => 0.0,
                (true, false) => 1.0,
                (false, true) => 2.0,
                (true, true) => 4.0,
            })
        });
        let phi = exact_shapley(&game).unwrap();
        assert_eq!(phi, vec![1.5, 2.5]);
    }

    #[test]
    fn additive_games_attribute_each_player_its_own_weight() {
        let c = [0.3, -1.2, 0.0, 2.5, 0.7];
        let game = CoalitionGame::new(5, |on: &[bool]| {
            Ok(on.iter().zip(&c).filter(|(o, _)| **o).map(|(_, v)| v).sum())
        });
        let phi = exact_shapley(&game).unwrap();
        for (p, expect) in phi.iter().zip(&c) {
            assert!((p - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_players_share_value_equally() {
        // v(S) = |S|^2: every player is interchangeable.
        let game = CoalitionGame::new(4, |on: &[bool]| {
            let s = on.iter().filter(|o| **o).count() as f64;
            Ok(s * s)
        });
        let phi = exact_shapley(&game).unwrap();
        for p in &phi {
            assert!((p - 4.0).abs() < 1e-12); // total 16 split four ways
        }
    }

    #[test]
    fn enumeration_limit_points_to_the_sampler() {
        let game = CoalitionGame::new(16, |_: &[bool]| Ok(0.0));
        let err = exact_shapley(&game).unwrap_err().to_string();
        assert!(err.contains("sampled_shapley"), "{err}");
    }

    fn random_game(seed: u64, n: usize) -> (CoalitionGame<'static>, Vec<f64>) {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // Weighted pairwise-interaction game: rich enough to exercise the
        // estimator, cheap to evaluate.
        let solo: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pair: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let solo2 = solo.clone();
        let pair2 = pair.clone();
        let game = CoalitionGame::new(n, move |on: &[bool]| {
            let mut v = 0.0;
            for i in 0..n {
                if on[i] {
                    v += solo2[i];
                    for j in i + 1..n {
                        if on[j] {
                            v += pair2[i * n + j];
                        }
                    }
                }
            }
            Ok(v)
        });
        (game, solo)
    }

    #[test]
    fn sampling_approaches_the_exact_values() {
        let (game, _) = random_game(11, 8);
        let exact = exact_shapley(&game).unwrap();
        let sampled = sampled_shapley(&game, 5000, 13).unwrap();
        for (e, s) in exact.iter().zip(&sampled.values) {
            assert!((e - s).abs() < 0.01, "exact {e} vs sampled {s}");
        }
        let again = sampled_shapley(&game, 5000, 13).unwrap();
        assert_eq!(sampled, again);
    }

    #[test]
    fn sampling_is_exactly_efficient() {
        let (game, _) = random_game(17, 9);
        let sampled = sampled_shapley(&game, 200, 5).unwrap();
        let full = game.value(&vec![true; 9]).unwrap();
        let empty = game.value(&vec![false; 9]).unwrap();
        let total: f64 = sampled.values.iter().sum();
        assert!(
            (total - (full - empty)).abs() < 1e-9,
            "sum {total} vs span {}",
            full - empty
        );
    }

    #[test]
    fn infinite_tolerance_prunes_everything_but_the_last_step() {
        let model = tiny_model(5);
        let seq = tiny_sequence(6);
        let p = temporal_prune(&model, &seq, f64::INFINITY).unwrap();
        assert_eq!(p, seq.t_valid - 1);
    }

    #[test]
    fn zero_tolerance_keeps_a_prefix_that_matters() {
        let model = tiny_model(7);
        let seq = tiny_sequence(8);
        // Confirm the premise: even the earliest cut moves the output.
        let v11 = predict_sequence(&model, &seq).unwrap();
        let bg = perturb_cells(&seq, |_, _| true).unwrap();
        let v00 = predict_sequence(&model, &bg).unwrap();
        let phi1 = prefix_attribution(&model, &seq, 1, v00, v11).unwrap();
        assert!(phi1 != 0.0, "degenerate fixture, prefix has no effect");
        assert_eq!(temporal_prune(&model, &seq, 0.0).unwrap(), 0);
    }

    #[test]
    fn pruning_is_monotone_in_the_tolerance() {
        let model = tiny_model(9);
        let seq = tiny_sequence(10);
        let mut last = 0;
        for eta in [0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0] {
            let p = temporal_prune(&model, &seq, eta).unwrap();
            assert!(p >= last, "eta {eta} shrank the cut from {last} to {p}");
            last = p;
        }
    }

    #[test]
    fn report_satisfies_the_efficiency_identities() {
        let model = tiny_model(21);
        let seq = tiny_sequence(22);
        let cfg = AttributionConfig {
            eta: 0.02,
            top_k_events: 2,
            top_m_features: 3,
            ..Default::default()
        };
        let report = attribution_report(&model, &seq, &cfg).unwrap();
        assert!(report.event_exact && report.feature_exact && report.cell_exact);

        let event_sum: f64 = report.pruned_value + report.event_values.iter().sum::<f64>();
        assert!(
            (event_sum - (report.full_value - report.event_background)).abs() < 1e-6,
            "event level: {event_sum} vs {}",
            report.full_value - report.event_background
        );
        let feature_sum: f64 = report.feature_values.iter().sum();
        assert!(
            (feature_sum - (report.full_value - report.feature_background)).abs() < 1e-6
        );
        let cell_sum: f64 = report.cell_values.iter().sum::<f64>() + report.cell_other;
        assert!((cell_sum - (report.full_value - report.feature_background)).abs() < 1e-6);

        assert_eq!(report.event_steps.len(), report.event_values.len());
        assert_eq!(report.feature_values.len(), seq.n_features());
        assert_eq!(
            report.cell_values.len(),
            report.cell_events.len() * report.cell_features.len()
        );
    }

    #[test]
    fn fully_unobserved_feature_is_a_null_player() {
        let mut seq = tiny_sequence(30);
        let nf = seq.n_features();
        for t in 0..seq.t_valid {
            seq.obs_mask[t * nf + 2] = 0.0;
            seq.values[t * nf + 2] = 0.0;
        }
        let (fd, _) =
            compute_deltas(&seq.timestamps, &seq.obs_mask[..seq.t_valid * nf], nf).unwrap();
        seq.feature_delta[..seq.t_valid * nf].copy_from_slice(&fd);
        seq.validate().unwrap();

        let model = tiny_model(31);
        let report =
            attribution_report(&model, &seq, &AttributionConfig::default()).unwrap();
        assert_eq!(report.feature_values[2], 0.0);
    }

    #[test]
    fn jaccard_extremes() {
        assert_eq!(jaccard(&[1, 2, 3], &[3, 2, 1]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(jaccard(&[1, 2], &[2, 3]), 1.0 / 3.0);
        assert_eq!(jaccard(&[], &[]), 1.0);
    }

    #[test]
    fn alignment_report_ranks_retained_steps_on_both_sides() {
        let model = tiny_model(33);
        let seq = tiny_sequence(34);
        let cfg = AttributionConfig {
            eta: 0.0,
            ..Default::default()
        };
        let report = attribution_report(&model, &seq, &cfg).unwrap();
        let alignment = alignment_check(&model, &seq, &report, 3).unwrap();
        assert_eq!(alignment.attention_top.len(), 3.min(report.event_steps.len()));
        for t in alignment.attention_top.iter().chain(&alignment.shapley_top) {
            assert!(report.event_steps.contains(t));
        }
        assert!((0.0..=1.0).contains(&alignment.overlap));

        // Degenerate sanity case: comparing the Shapley ranking with itself.
        assert_eq!(jaccard(&alignment.shapley_top, &alignment.shapley_top), 1.0);
    }

    #[test]
    fn attribution_is_deterministic_for_a_fixed_seed() {
        let model = tiny_model(40);
        let seq = tiny_sequence(41);
        let cfg = AttributionConfig {
            // Force the sampled path by shrinking the exact limit's reach:
            // a 9-step window with prefix exceeds nothing, so instead drop
            // the permutation count and compare bitwise reproducibility of
            // the full report (exact games are trivially deterministic).
            n_permutations: 50,
            ..Default::default()
        };
        let a = attribution_report(&model, &seq, &cfg).unwrap();
        let b = attribution_report(&model, &seq, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
