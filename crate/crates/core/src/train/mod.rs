//! Two-stage decoupled training: stage 1 fits the encoder, context model,
//! and classification head; extraction caches frozen representations; stage 2
//! fits only the causal map and fusion/classifier on those tuples.

pub mod adam;
pub mod checkpoint;

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, NormalizationStats, PatientSequence, Splits};
use crate::error::{Error, Result};
use crate::fusion::stage2_loss;
use crate::metrics::{auprc, auroc, ScoredSet};
use crate::model::{
    full_forward, stage1_forward, stage2_path, Model, Stage1Params, Stage2Params, Variant,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

use adam::Adam;
use checkpoint::stage1_digest;

/// Salts deriving independent shuffling streams from one run seed.
const STAGE1_SHUFFLE_SALT: u64 = 0x5317_AC3B_90D4_E681;
const STAGE2_SHUFFLE_SALT: u64 = 0xA0E4_112D_66FB_49C7;

/// Optimization and protocol hyperparameters for both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs (validation AUPRC, ties broken by
    /// validation loss) tolerated before stopping.
    pub patience: usize,
    /// Sparsity weight on the causal matrix in the stage-2 objective.
    pub lambda: f64,
    pub rng_seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    /// Cross-entropy weight on positive targets; 1.0 disables weighting.
    pub pos_weight: f64,
    /// Start the stage-2 classifier from the stage-1 head instead of a fresh
    /// initialization.
    pub warm_start_classifier: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr_stage1: 1e-3,
            lr_stage2: 1e-3,
            max_epochs: 200,
            patience: 10,
            lambda: 1e-3,
            rng_seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            train_frac: 0.70,
            val_frac: 0.15,
            test_frac: 0.15,
            pos_weight: 1.0,
            warm_start_classifier: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be positive"));
        }
        for (name, v) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::invalid("eps must be positive"));
        }
        let fracs = [
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ];
        for (name, v) in fracs {
            if !(0.0..1.0).contains(&v) || v == 0.0 {
                return Err(Error::invalid(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        if self.pos_weight <= 0.0 {
            return Err(Error::invalid(format!(
                "pos_weight must be positive, got {}",
                self.pos_weight
            )));
        }
        Ok(())
    }
}

/// Which split a patient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Frozen first-stage products for one patient, consumed by stage 2.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTwoTuple {
    pub patient_id: String,
    pub split: SplitTag,
    pub t_valid: usize,
    pub label: u8,
    /// Encoder states, `[t_max x d_h]`, zero below `t_valid`.
    pub h_cfc: Tensor,
    /// Global context `[1 x d_h]`.
    pub g: Tensor,
    /// Head-averaged attention `[t_max x t_max]`, zero outside the valid
    /// block.
    pub a: Tensor,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: f64,
    pub val_auprc: f64,
}

/// Appends records as NDJSON lines; the file is never rewritten.
pub fn append_training_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a training log back, rejecting non-increasing epoch indices.
pub fn read_training_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = std::fs::File::open(path)?;
    let mut records: Vec<EpochRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EpochRecord = serde_json::from_str(&line).map_err(|e| Error::DataFormat {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Some(prev) = records.last() {
            if record.epoch <= prev.epoch {
                return Err(Error::DataFormat {
                    line: i + 1,
                    msg: format!(
                        "epoch {} does not increase past {}",
                        record.epoch, prev.epoch
                    ),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// A cohort with normalization applied and patient-level splits fixed.
#[derive(Debug, Clone)]
pub struct PreparedCohort {
    pub sequences: Vec<PatientSequence>,
    pub splits: Splits,
    pub stats: NormalizationStats,
    /// Split membership, indexed like `sequences`.
    pub tags: Vec<SplitTag>,
}

/// Splits the cohort by patient, fits normalization on the training split
/// only, and returns standardized copies of every sequence.
pub fn prepare_cohort(cohort: &[PatientSequence], cfg: &TrainConfig) -> Result<PreparedCohort> {
    cfg.validate()?;
    let splits = split_indices(cohort.len(), cfg.val_frac, cfg.test_frac, cfg.rng_seed);
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::invalid(format!(
            "cohort of {} patients leaves an empty train or validation split",
            cohort.len()
        )));
    }
    let stats = NormalizationStats::fit(cohort, &splits.train)?;
    let mut sequences = cohort.to_vec();
    stats.apply_all(&mut sequences);
    let mut tags = vec![SplitTag::Train; cohort.len()];
    for &i in &splits.val {
        tags[i] = SplitTag::Val;
    }
    for &i in &splits.test {
        tags[i] = SplitTag::Test;
    }
    Ok(PreparedCohort {
        sequences,
        splits,
        stats,
        tags,
    })
}

/// What a training stage reports back.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auprc: f64,
    /// Stream position of the shuffling generator at the end of training.
    pub rng_word_pos: u128,
}

/// Loss and ranking metrics over one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub loss: f64,
    pub auroc: f64,
    pub auprc: f64,
}

fn eval_from_pairs(pairs: Vec<(f64, f64)>, labels: Vec<u8>) -> Result<SplitEval> {
    let n = pairs.len();
    let (probs, losses): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let set = ScoredSet::new(probs, labels)?;
    Ok(SplitEval {
        loss: losses.iter().sum::<f64>() / n as f64,
        auroc: auroc(&set)?,
        auprc: auprc(&set)?,
    })
}

/// Mean loss plus AUROC/AUPRC of the stage-1 head over the given patients.
pub fn evaluate_stage1(
    model: &Model,
    prepared: &PreparedCohort,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<SplitEval> {
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let pairs: Result<Vec<(f64, f64)>> = indices
        .par_iter()
        .map(|&i| {
            let seq = &prepared.sequences[i];
            let mut tape = Tape::new();
            let ids = model.stage1.bind(&mut tape);
            let out = stage1_forward(&mut tape, &ids, seq, &model.config)?;
            let mut loss = tape.binary_cross_entropy(out.prob, seq.label as f64)?;
            if seq.label == 1 && cfg.pos_weight != 1.0 {
                loss = tape.scalar_mul(loss, cfg.pos_weight);
            }
            Ok((tape.scalar_value(out.prob), tape.scalar_value(loss)))
        })
        .collect();
    let labels = indices.iter().map(|&i| prepared.sequences[i].label).collect();
    eval_from_pairs(pairs?, labels)
}

/// Sums per-patient gradients (aligned with the visit order) and averages
/// them together with the loss. Reduction order is the batch order, so the
/// result is deterministic.
fn reduce_batch(
    results: Vec<(f64, Vec<Option<Vec<f64>>>)>,
    n_params: usize,
) -> (f64, Vec<Vec<f64>>) {
    let m = results.len() as f64;
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); n_params];
    let mut loss_sum = 0.0;
    for (loss, item) in results {
        loss_sum += loss;
        for (k, g) in item.into_iter().enumerate() {
            if let Some(g) = g {
                if grads[k].is_empty() {
                    grads[k] = vec![0.0; g.len()];
                }
                for (acc, v) in grads[k].iter_mut().zip(&g) {
                    *acc += v;
                }
            }
        }
    }
    for g in &mut grads {
        for v in g.iter_mut() {
            *v /= m;
        }
    }
    (loss_sum / m, grads)
}

fn param_norms(walk: impl FnOnce(&mut dyn FnMut(String, &Tensor))) -> String {
    let mut parts = Vec::new();
    walk(&mut |name, t| {
        let norm = t.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        parts.push(format!("{name}={norm:.3e}"));
    });
    parts.join(", ")
}

struct EarlyStop {
    best_auprc: f64,
    best_loss: f64,
    best_epoch: usize,
    strikes: usize,
}

impl EarlyStop {
    fn new() -> EarlyStop {
        EarlyStop {
            best_auprc: f64::NEG_INFINITY,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            strikes: 0,
        }
    }

    /// Registers one epoch; returns (improved, stop_now).
    fn observe(&mut self, epoch: usize, auprc: f64, loss: f64, patience: usize) -> (bool, bool) {
        let improved =
            auprc > self.best_auprc || (auprc == self.best_auprc && loss < self.best_loss);
        if improved {
            self.best_auprc = auprc;
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.strikes = 0;
            (true, false)
        } else {
            self.strikes += 1;
            (false, self.strikes > patience)
        }
    }
}

/// Algorithm: minimize cross entropy of `sigma(head(G))` over the training
/// split with Adam, early-stopping on validation AUPRC; the model is left at
/// the best-validation epoch.
pub fn train_stage1(
    model: &mut Model,
    prepared: &PreparedCohort,
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let n_params = {
        let mut n = 0;
        model.stage1.visit(&mut |_, _| n += 1);
        n
    };
    let mut adam = Adam::new(cfg.lr_stage1, cfg.beta1, cfg.beta2, cfg.eps);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.rng_seed ^ STAGE1_SHUFFLE_SALT);
    let mut stopper = EarlyStop::new();
    let mut best: Option<Stage1Params> = None;
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut order = prepared.splits.train.clone();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let frozen: &Model = model;
            let results: Result<Vec<_>> = batch
                .par_iter()
                .map(|&i| {
                    let seq = &prepared.sequences[i];
                    let mut tape = Tape::new();
                    let ids = frozen.stage1.bind(&mut tape);
                    let out = stage1_forward(&mut tape, &ids, seq, &frozen.config)?;
                    let mut loss = tape.binary_cross_entropy(out.prob, seq.label as f64)?;
                    if seq.label == 1 && cfg.pos_weight != 1.0 {
                        loss = tape.scalar_mul(loss, cfg.pos_weight);
                    }
                    tape.backward(loss)?;
                    let grads = ids
                        .id_list()
                        .iter()
                        .map(|&id| tape.grad(id).map(|g| g.to_vec()))
                        .collect();
                    Ok((tape.scalar_value(loss), grads))
                })
                .collect();
            let (batch_loss, grads) = reduce_batch(results?, n_params);
            if !batch_loss.is_finite() {
                return Err(Error::TrainingAborted(format!(
                    "non-finite stage-1 loss at epoch {epoch}, batch {n_batches}; \
                     parameter norms: {}",
                    param_norms(|f| model.stage1.visit(f))
                )));
            }
            adam.begin_step();
            let mut k = 0;
            model.stage1.visit_mut(&mut |name, t| {
                if !grads[k].is_empty() {
                    adam.update(&name, &mut t.data, &grads[k]);
                }
                k += 1;
            });
            epoch_loss += batch_loss;
            n_batches += 1;
        }
        let val = evaluate_stage1(model, prepared, &prepared.splits.val, cfg)?;
        log.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n_batches as f64,
            val_loss: val.loss,
            val_auroc: val.auroc,
            val_auprc: val.auprc,
        });
        let (improved, stop) = stopper.observe(epoch, val.auprc, val.loss, cfg.patience);
        if improved {
            best = Some(model.stage1.clone());
        }
        if stop {
            break;
        }
    }
    model.stage1 = best.expect("at least one epoch ran");
    Ok(StageOutcome {
        log,
        best_epoch: stopper.best_epoch,
        best_val_auprc: stopper.best_auprc,
        rng_word_pos: shuffle_rng.get_word_pos(),
    })
}

/// Runs the frozen stage-1 model over every patient and materializes the
/// second-stage tuples, one per patient across all splits.
pub fn extract_representations(
    model: &Model,
    prepared: &PreparedCohort,
) -> Result<Vec<StageTwoTuple>> {
    if !model.config.variant.has_transformer() {
        return Err(Error::invalid(format!(
            "variant '{}' produces no attention and has no second stage",
            model.config.variant
        )));
    }
    let t_max = model.config.t_max;
    let d_h = model.config.d_h;
    (0..prepared.sequences.len())
        .into_par_iter()
        .map(|i| {
            let seq = &prepared.sequences[i];
            if seq.t_max() != t_max {
                return Err(Error::SchemaMismatch(format!(
                    "{}: sequence grid {} does not match model grid {t_max}",
                    seq.patient_id,
                    seq.t_max()
                )));
            }
            let mut tape = Tape::new();
            let ids = model.stage1.bind(&mut tape);
            let out = stage1_forward(&mut tape, &ids, seq, &model.config)?;
            let h_cfc = crate::cfc::states_matrix(&tape, &out.h_rows, t_max, d_h);
            let attn = out.attn.expect("transformer variant");
            let mut a = Tensor::zeros(t_max, t_max);
            let a_val = tape.value(attn);
            for r in 0..seq.t_valid {
                for c in 0..seq.t_valid {
                    a.data[r * t_max + c] = a_val[r * seq.t_valid + c];
                }
            }
            Ok(StageTwoTuple {
                patient_id: seq.patient_id.clone(),
                split: prepared.tags[i],
                t_valid: seq.t_valid,
                label: seq.label,
                h_cfc,
                g: tape.to_tensor(out.g),
                a,
            })
        })
        .collect()
}

fn tuple_indices(tuples: &[StageTwoTuple], tag: SplitTag) -> Vec<usize> {
    (0..tuples.len()).filter(|&i| tuples[i].split == tag).collect()
}

/// Mean stage-2 loss plus AUROC/AUPRC of the fused classifier over tuples of
/// one split.
pub fn evaluate_stage2(
    model: &Model,
    tuples: &[StageTwoTuple],
    tag: SplitTag,
    cfg: &TrainConfig,
    unit_gate: bool,
) -> Result<SplitEval> {
    let stage2 = model
        .stage2
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no second stage"))?;
    let indices = tuple_indices(tuples, tag);
    if indices.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let pairs: Result<Vec<(f64, f64)>> = indices
        .par_iter()
        .map(|&i| {
            let tuple = &tuples[i];
            let mut tape = Tape::new();
            let ids = stage2.bind(&mut tape);
            let (prob, loss) =
                stage2_tuple_loss(&mut tape, &ids, tuple, model.config.variant, cfg, unit_gate)?;
            Ok((tape.scalar_value(prob), tape.scalar_value(loss)))
        })
        .collect();
    let labels = indices.iter().map(|&i| tuples[i].label).collect();
    eval_from_pairs(pairs?, labels)
}

fn stage2_tuple_loss(
    tape: &mut Tape,
    ids: &crate::model::Stage2Ids,
    tuple: &StageTwoTuple,
    variant: Variant,
    cfg: &TrainConfig,
    unit_gate: bool,
) -> Result<(crate::tape::TensorId, crate::tape::TensorId)> {
    let a = tape.constant(tuple.a.rows, tuple.a.cols, tuple.a.data.clone())?;
    let h = tape.constant(tuple.h_cfc.rows, tuple.h_cfc.cols, tuple.h_cfc.data.clone())?;
    let g = tape.constant(tuple.g.rows, tuple.g.cols, tuple.g.data.clone())?;
    let out = stage2_path(tape, ids, a, h, g, tuple.t_valid, variant, unit_gate)?;
    let loss = stage2_loss(
        tape,
        out.prob,
        tuple.label as f64,
        out.b,
        cfg.lambda,
        tuple.t_valid,
        cfg.pos_weight,
    )?;
    Ok((out.prob, loss))
}

/// Algorithm: minimize `CE + lambda * mean|B|` over training tuples with
/// Adam, touching only the causal map and the fusion/classifier block. The
/// first stage is never bound to a tape here, so no gradient can reach it;
/// a digest comparison asserts the same thing after the fact.
pub fn train_stage2(
    model: &mut Model,
    tuples: &[StageTwoTuple],
    cfg: &TrainConfig,
    unit_gate: bool,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if model.stage2.is_none() {
        return Err(Error::invalid(format!(
            "variant '{}' has no second stage to train",
            model.config.variant
        )));
    }
    let frozen_digest = stage1_digest(&model.stage1);
    if cfg.warm_start_classifier {
        let head = model.stage1.head.clone();
        model.stage2.as_mut().unwrap().fusion.classifier = head;
    }
    let train_idx = tuple_indices(tuples, SplitTag::Train);
    if train_idx.is_empty() || tuple_indices(tuples, SplitTag::Val).is_empty() {
        return Err(Error::invalid(
            "tuple cache leaves an empty train or validation split",
        ));
    }
    let n_params = {
        let mut n = 0;
        model.stage2.as_ref().unwrap().visit(&mut |_, _| n += 1);
        n
    };
    let variant = model.config.variant;
    let mut adam = Adam::new(cfg.lr_stage2, cfg.beta1, cfg.beta2, cfg.eps);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.rng_seed ^ STAGE2_SHUFFLE_SALT);
    let mut stopper = EarlyStop::new();
    let mut best: Option<Stage2Params> = None;
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let stage2: &Stage2Params = model.stage2.as_ref().unwrap();
            let results: Result<Vec<_>> = batch
                .par_iter()
                .map(|&i| {
                    let mut tape = Tape::new();
                    let ids = stage2.bind(&mut tape);
                    let (_, loss) =
                        stage2_tuple_loss(&mut tape, &ids, &tuples[i], variant, cfg, unit_gate)?;
                    tape.backward(loss)?;
                    let grads = ids
                        .id_list()
                        .iter()
                        .map(|&id| tape.grad(id).map(|g| g.to_vec()))
                        .collect();
                    Ok((tape.scalar_value(loss), grads))
                })
                .collect();
            let (batch_loss, grads) = reduce_batch(results?, n_params);
            if !batch_loss.is_finite() {
                return Err(Error::TrainingAborted(format!(
                    "non-finite stage-2 loss at epoch {epoch}, batch {n_batches}; \
                     parameter norms: {}",
                    param_norms(|f| model.stage2.as_ref().unwrap().visit(f))
                )));
            }
            adam.begin_step();
            let mut k = 0;
            model.stage2.as_mut().unwrap().visit_mut(&mut |name, t| {
                if !grads[k].is_empty() {
                    adam.update(&name, &mut t.data, &grads[k]);
                }
                k += 1;
            });
            epoch_loss += batch_loss;
            n_batches += 1;
        }
        let val = evaluate_stage2(model, tuples, SplitTag::Val, cfg, unit_gate)?;
        log.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n_batches as f64,
            val_loss: val.loss,
            val_auroc: val.auroc,
            val_auprc: val.auprc,
        });
        let (improved, stop) = stopper.observe(epoch, val.auprc, val.loss, cfg.patience);
        if improved {
            best = Some(model.stage2.as_ref().unwrap().clone());
        }
        if stop {
            break;
        }
    }
    *model.stage2.as_mut().unwrap() = best.expect("at least one epoch ran");
    if stage1_digest(&model.stage1) != frozen_digest {
        return Err(Error::InvariantViolation(
            "stage-1 parameters changed during stage 2".into(),
        ));
    }
    Ok(StageOutcome {
        log,
        best_epoch: stopper.best_epoch,
        best_val_auprc: stopper.best_auprc,
        rng_word_pos: shuffle_rng.get_word_pos(),
    })
}

/// One row of the ablation study: every variant reports the same schema,
/// with the causal-stage fields absent where the variant cannot produce
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub rng_seed: u64,
    pub has_causal_stage: bool,
    pub stage1_epochs: usize,
    pub stage1_best_epoch: usize,
    pub stage1_val: SplitEval,
    pub stage1_test: SplitEval,
    pub stage2_epochs: Option<usize>,
    pub stage2_best_epoch: Option<usize>,
    pub stage2_val: Option<SplitEval>,
    pub stage2_test: Option<SplitEval>,
    /// Metrics of the variant's final predictor (stage 2 when present,
    /// stage 1 otherwise).
    pub final_val: SplitEval,
    pub final_test: SplitEval,
}

/// Trains one architecture variant end to end and reports its metrics.
pub fn run_ablation(
    variant: Variant,
    cohort: &[PatientSequence],
    base: &crate::model::ModelConfig,
    cfg: &TrainConfig,
) -> Result<AblationReport> {
    let mut config = base.clone();
    config.variant = variant;
    config.lambda = cfg.lambda;
    let prepared = prepare_cohort(cohort, cfg)?;
    let mut model = Model::init(config, cfg.rng_seed)?;
    let s1 = train_stage1(&mut model, &prepared, cfg)?;
    let stage1_val = evaluate_stage1(&model, &prepared, &prepared.splits.val, cfg)?;
    let stage1_test = evaluate_stage1(&model, &prepared, &prepared.splits.test, cfg)?;

    if variant.has_stage2() {
        let tuples = extract_representations(&model, &prepared)?;
        let s2 = train_stage2(&mut model, &tuples, cfg, false)?;
        let stage2_val = evaluate_stage2(&model, &tuples, SplitTag::Val, cfg, false)?;
        let stage2_test = evaluate_stage2(&model, &tuples, SplitTag::Test, cfg, false)?;
        Ok(AblationReport {
            variant,
            rng_seed: cfg.rng_seed,
            has_causal_stage: true,
            stage1_epochs: s1.log.len(),
            stage1_best_epoch: s1.best_epoch,
            stage1_val,
            stage1_test,
            stage2_epochs: Some(s2.log.len()),
            stage2_best_epoch: Some(s2.best_epoch),
            stage2_val: Some(stage2_val),
            stage2_test: Some(stage2_test),
            final_val: stage2_val,
            final_test: stage2_test,
        })
    } else {
        Ok(AblationReport {
            variant,
            rng_seed: cfg.rng_seed,
            has_causal_stage: false,
            stage1_epochs: s1.log.len(),
            stage1_best_epoch: s1.best_epoch,
            stage1_val,
            stage1_test,
            stage2_epochs: None,
            stage2_best_epoch: None,
            stage2_val: None,
            stage2_test: None,
            final_val: stage1_val,
            final_test: stage1_test,
        })
    }
}

/// Final probability of the trained variant for one (normalized) sequence.
pub fn predict_sequence(model: &Model, seq: &PatientSequence) -> Result<f64> {
    let mut tape = Tape::new();
    let s1 = model.stage1.bind(&mut tape);
    let s2 = model.stage2.as_ref().map(|p| p.bind(&mut tape));
    let out = full_forward(&mut tape, &s1, s2.as_ref(), seq, &model.config)?;
    Ok(tape.scalar_value(out.prob()))
}
