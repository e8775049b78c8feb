//! Command implementations. Every command fills a run directory with the
//! effective config, NDJSON logs and metrics, and CSV exports; nothing in
//! those files depends on wall-clock time or absolute paths, so a rerun from
//! the stored config reproduces them byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use ctformer::attribution::{alignment_check, attribution_report, top_k_indices};
use ctformer::data::ndjson::save_cohort;
use ctformer::data::synthetic::generate_synthetic_cohort;
use ctformer::data::{split_indices, NormalizationStats, PatientSequence};
use ctformer::metrics::{curve_csv, curve_points, CurveKind, ScoredSet};
use ctformer::model::{full_forward, Model, ModelConfig, Variant};
use ctformer::tape::Tape;
use ctformer::train::checkpoint::{
    load_checkpoint, load_tuple_cache, save_checkpoint, save_tuple_cache, stage1_digest,
    Checkpoint, CheckpointMeta, Stage, SCHEMA_VERSION,
};
use ctformer::train::{
    append_training_log, evaluate_stage1, evaluate_stage2, extract_representations,
    predict_sequence, prepare_cohort, run_ablation, train_stage1, train_stage2, EpochRecord,
    SplitTag, StageTwoTuple, TrainConfig,
};
use ctformer::Error;

use crate::config::RunConfig;

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const TUPLE_CACHE: &str = "tuples.cache";

// ---- shared output helpers ----------------------------------------------------

fn write_metrics(dir: &Path, rows: &[Value]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).expect("metric row serializes"));
        text.push('\n');
    }
    fs::write(dir.join("metrics.ndjson"), text).context("writing metrics.ndjson")?;
    Ok(())
}

fn write_csv(
    dir: &Path,
    name: &str,
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    fs::write(dir.join(name), text).with_context(|| format!("writing {name}"))?;
    Ok(())
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(dir.join(name), text + "\n").with_context(|| format!("writing {name}"))?;
    Ok(())
}

fn write_log(dir: &Path, name: &str, log: &[EpochRecord]) -> Result<()> {
    let path = dir.join(name);
    if path.exists() {
        fs::remove_file(&path)?;
    }
    append_training_log(&path, log)?;
    Ok(())
}

fn eval_row(stage: u32, split: &str, eval: ctformer::train::SplitEval) -> Value {
    json!({
        "stage": stage,
        "split": split,
        "loss": eval.loss,
        "auroc": eval.auroc,
        "auprc": eval.auprc,
    })
}

// ---- gen-data ------------------------------------------------------------------

pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let cohort = generate_synthetic_cohort(&cfg.data)?;
    save_cohort(dir.join("cohort.ndjson"), &cfg.data, &cohort)?;
    let n_cases = cohort.iter().filter(|p| p.label == 1).count();
    let mean_t_valid =
        cohort.iter().map(|p| p.t_valid).sum::<usize>() as f64 / cohort.len() as f64;
    let summary = json!({
        "n_patients": cohort.len(),
        "n_cases": n_cases,
        "prevalence": n_cases as f64 / cohort.len() as f64,
        "mean_t_valid": mean_t_valid,
        "n_features": cfg.data.n_features,
        "t_max": cfg.data.t_max,
        "lead_time_hours": cfg.data.lead_time_hours,
    });
    write_json(dir, "summary.json", &summary)?;
    write_metrics(dir, &[summary])
}

// ---- train ---------------------------------------------------------------------

fn checkpoint_meta(
    stage: Stage,
    model: &Model,
    train: &TrainConfig,
    norm: &NormalizationStats,
    outcome: &ctformer::train::StageOutcome,
    digest: String,
) -> CheckpointMeta {
    CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        kind: "checkpoint".into(),
        stage,
        model: model.config.clone(),
        train: train.clone(),
        rng_seed: train.rng_seed,
        rng_word_pos: outcome.rng_word_pos.to_string(),
        norm: norm.clone(),
        best_epoch: outcome.best_epoch,
        best_val_auprc: outcome.best_val_auprc,
        stage1_digest: digest,
    }
}

/// Trains stage 1 on a fresh cohort, checkpoints it, and (when the variant
/// has a causal stage) extracts and caches the frozen tuples.
fn run_stage1(
    cfg: &RunConfig,
    dir: &Path,
    rows: &mut Vec<Value>,
) -> Result<(Model, ctformer::train::PreparedCohort, Option<Vec<StageTwoTuple>>)> {
    let cohort = generate_synthetic_cohort(&cfg.data)?;
    let prepared = prepare_cohort(&cohort, &cfg.train)?;
    let mut model = Model::init(cfg.model.clone(), cfg.train.rng_seed)?;
    let outcome = train_stage1(&mut model, &prepared, &cfg.train)?;
    write_log(dir, "stage1_log.ndjson", &outcome.log)?;

    let digest = stage1_digest(&model.stage1);
    save_checkpoint(
        &dir.join(STAGE1_CKPT),
        &Checkpoint {
            meta: checkpoint_meta(
                Stage::Stage1,
                &model,
                &cfg.train,
                &prepared.stats,
                &outcome,
                digest.clone(),
            ),
            model: model.clone(),
        },
    )?;

    for (split, indices) in [
        ("train", &prepared.splits.train),
        ("val", &prepared.splits.val),
        ("test", &prepared.splits.test),
    ] {
        rows.push(eval_row(
            1,
            split,
            evaluate_stage1(&model, &prepared, indices, &cfg.train)?,
        ));
    }

    let tuples = if model.config.variant.has_stage2() {
        let tuples = extract_representations(&model, &prepared)?;
        save_tuple_cache(&dir.join(TUPLE_CACHE), &model.config, &digest, &tuples)?;
        Some(tuples)
    } else {
        None
    };
    Ok((model, prepared, tuples))
}

/// Trains the causal stage on frozen tuples, checkpoints the full model, and
/// exports final test curves computed on `sequences` (already normalized).
fn run_stage2(
    cfg: &RunConfig,
    dir: &Path,
    model: &mut Model,
    tuples: &[StageTwoTuple],
    norm: &NormalizationStats,
    sequences: &[PatientSequence],
    rows: &mut Vec<Value>,
) -> Result<()> {
    let outcome = train_stage2(model, tuples, &cfg.train, false)?;
    write_log(dir, "stage2_log.ndjson", &outcome.log)?;
    save_checkpoint(
        &dir.join(STAGE2_CKPT),
        &Checkpoint {
            meta: checkpoint_meta(
                Stage::Stage2,
                model,
                &cfg.train,
                norm,
                &outcome,
                stage1_digest(&model.stage1),
            ),
            model: model.clone(),
        },
    )?;
    for (split, tag) in [("val", SplitTag::Val), ("test", SplitTag::Test)] {
        rows.push(eval_row(
            2,
            split,
            evaluate_stage2(model, tuples, tag, &cfg.train, false)?,
        ));
    }
    export_test_curves(dir, model, tuples, sequences)
}

/// ROC and PR operating points of the final predictor on the test split.
fn export_test_curves(
    dir: &Path,
    model: &Model,
    tuples: &[StageTwoTuple],
    sequences: &[PatientSequence],
) -> Result<()> {
    let by_id: BTreeMap<&str, &PatientSequence> = sequences
        .iter()
        .map(|s| (s.patient_id.as_str(), s))
        .collect();
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for t in tuples.iter().filter(|t| t.split == SplitTag::Test) {
        let seq = by_id.get(t.patient_id.as_str()).with_context(|| {
            format!("patient {} from the tuple cache is not in the cohort", t.patient_id)
        })?;
        probs.push(predict_sequence(model, seq)?);
        labels.push(t.label);
    }
    let set = ScoredSet::new(probs, labels)?;
    for (kind, name) in [(CurveKind::Roc, "roc_test.csv"), (CurveKind::Pr, "pr_test.csv")] {
        let points = curve_points(&set, kind)?;
        fs::write(dir.join(name), curve_csv(&points, kind))
            .with_context(|| format!("writing {name}"))?;
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, stage: &str, dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    match stage {
        "1" => {
            run_stage1(cfg, dir, &mut rows)?;
        }
        "all" => {
            let (mut model, prepared, tuples) = run_stage1(cfg, dir, &mut rows)?;
            match tuples {
                Some(tuples) => run_stage2(
                    cfg,
                    dir,
                    &mut model,
                    &tuples,
                    &prepared.stats,
                    &prepared.sequences,
                    &mut rows,
                )?,
                // No causal stage: the stage-1 head is the final predictor.
                None => export_stage1_curves(dir, &model, &prepared)?,
            }
        }
        "2" => {
            let ckpt_path = dir.join(STAGE1_CKPT);
            if !ckpt_path.exists() {
                return Err(Error::MissingArtifact {
                    what: format!("stage-1 checkpoint {STAGE1_CKPT}"),
                    producer: "ctformer train --stage 1".into(),
                }
                .into());
            }
            let cache_path = dir.join(TUPLE_CACHE);
            if !cache_path.exists() {
                return Err(Error::MissingArtifact {
                    what: format!("frozen tuple cache {TUPLE_CACHE}"),
                    producer: "ctformer train --stage 1".into(),
                }
                .into());
            }
            let ckpt = load_checkpoint(&ckpt_path)?;
            let (cache_meta, tuples) = load_tuple_cache(&cache_path)?;
            if ckpt.meta.stage1_digest != cache_meta.stage1_digest {
                bail!(
                    "tuple cache was extracted from different stage-1 parameters; \
                     rerun `ctformer train --stage 1`"
                );
            }
            if ckpt.meta.model != cfg.model {
                bail!(
                    "stage-1 checkpoint was built with a different model configuration; \
                     rerun `ctformer train --stage 1` with the current config"
                );
            }
            let mut model = ckpt.model;
            let mut cohort = generate_synthetic_cohort(&cfg.data)?;
            ckpt.meta.norm.apply_all(&mut cohort);
            run_stage2(
                cfg,
                dir,
                &mut model,
                &tuples,
                &ckpt.meta.norm,
                &cohort,
                &mut rows,
            )?;
        }
        other => bail!("unknown stage `{other}` (expected 1, 2, or all)"),
    }
    write_metrics(dir, &rows)
}

/// Curve export for variants whose final predictor is the stage-1 head.
fn export_stage1_curves(
    dir: &Path,
    model: &Model,
    prepared: &ctformer::train::PreparedCohort,
) -> Result<()> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for &i in &prepared.splits.test {
        let seq = &prepared.sequences[i];
        probs.push(predict_sequence(model, seq)?);
        labels.push(seq.label);
    }
    let set = ScoredSet::new(probs, labels)?;
    for (kind, name) in [(CurveKind::Roc, "roc_test.csv"), (CurveKind::Pr, "pr_test.csv")] {
        let points = curve_points(&set, kind)?;
        fs::write(dir.join(name), curve_csv(&points, kind))
            .with_context(|| format!("writing {name}"))?;
    }
    Ok(())
}

// ---- evaluate ------------------------------------------------------------------

pub fn evaluate(cfg: &RunConfig, lead_times: &[f64], dir: &Path) -> Result<()> {
    if lead_times.is_empty() {
        bail!("no lead times given");
    }
    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    for &w in lead_times {
        let mut data = cfg.data.clone();
        data.lead_time_hours = w;
        data.validate()?;
        let cohort = generate_synthetic_cohort(&data)?;
        let report = run_ablation(cfg.model.variant, &cohort, &cfg.model, &cfg.train)?;
        rows.push(json!({
            "lead_time_hours": w,
            "variant": report.variant,
            "final_val": report.final_val,
            "final_test": report.final_test,
            "stage1_epochs": report.stage1_epochs,
            "stage2_epochs": report.stage2_epochs,
        }));
        csv_rows.push(format!(
            "{w},{},{}",
            report.final_test.auroc, report.final_test.auprc
        ));
    }
    write_csv(dir, "lead_times.csv", "lead_time_hours,auroc,auprc", csv_rows)?;
    write_metrics(dir, &rows)
}

// ---- ablate --------------------------------------------------------------------

pub fn ablate(cfg: &RunConfig, variants: &[Variant], dir: &Path) -> Result<()> {
    let cohort = generate_synthetic_cohort(&cfg.data)?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    for &variant in variants {
        let report = run_ablation(variant, &cohort, &cfg.model, &cfg.train)?;
        rows.push(serde_json::to_value(&report).expect("report serializes"));
        csv_rows.push(format!(
            "{variant},{},{},{},{}",
            report.final_val.auroc,
            report.final_val.auprc,
            report.final_test.auroc,
            report.final_test.auprc
        ));
        reports.push(report);
    }
    write_json(dir, "ablation.json", &reports)?;
    write_csv(
        dir,
        "ablation.csv",
        "variant,val_auroc,val_auprc,test_auroc,test_auprc",
        csv_rows,
    )?;
    write_metrics(dir, &rows)
}

// ---- depth-grid ----------------------------------------------------------------

/// Parses `a..b` (inclusive) or a single integer.
pub fn parse_depth_range(text: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .with_context(|| format!("`{s}` is not a layer count"))
    };
    let range = match text.split_once("..") {
        Some((a, b)) => parse(a)?..=parse(b)?,
        None => {
            let v = parse(text)?;
            v..=v
        }
    };
    if range.is_empty() {
        bail!("depth range `{text}` is empty");
    }
    Ok(range)
}

pub fn depth_grid(
    cfg: &RunConfig,
    cfc_layers: &str,
    transformer_layers: &str,
    dir: &Path,
) -> Result<()> {
    let cfc_range = parse_depth_range(cfc_layers)?;
    let tf_range = parse_depth_range(transformer_layers)?;
    let cohort = generate_synthetic_cohort(&cfg.data)?;
    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    for c in cfc_range {
        for l in tf_range.clone() {
            let model = ModelConfig {
                cfc_layers: c,
                n_layers: l,
                ..cfg.model.clone()
            };
            let report = run_ablation(model.variant, &cohort, &model, &cfg.train)?;
            rows.push(json!({
                "cfc_layers": c,
                "transformer_layers": l,
                "final_val": report.final_val,
                "final_test": report.final_test,
            }));
            csv_rows.push(format!("{c},{l},{}", report.final_test.auroc));
        }
    }
    write_csv(
        dir,
        "depth_grid.csv",
        "cfc_layers,transformer_layers,auroc",
        csv_rows,
    )?;
    write_metrics(dir, &rows)
}

// ---- explain / align-check -------------------------------------------------------

/// A trained model plus the normalized cohort it was trained on, rebuilt from
/// a run directory and the current config.
struct TrainedContext {
    model: Model,
    cohort: Vec<PatientSequence>,
    tags: Vec<SplitTag>,
}

fn load_trained(cfg: &RunConfig, from: &Path) -> Result<TrainedContext> {
    let path = from.join(STAGE2_CKPT);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: format!("trained checkpoint {}", path.display()),
            producer: "ctformer train --stage all".into(),
        }
        .into());
    }
    let ckpt = load_checkpoint(&path)?;
    if ckpt.meta.model != cfg.model {
        bail!(
            "checkpoint model configuration differs from the current config; \
             point --from at a matching run or adjust the config"
        );
    }
    let mut cohort = generate_synthetic_cohort(&cfg.data)?;
    ckpt.meta.norm.apply_all(&mut cohort);
    let splits = split_indices(
        cohort.len(),
        ckpt.meta.train.val_frac,
        ckpt.meta.train.test_frac,
        ckpt.meta.train.rng_seed,
    );
    let mut tags = vec![SplitTag::Train; cohort.len()];
    for &i in &splits.val {
        tags[i] = SplitTag::Val;
    }
    for &i in &splits.test {
        tags[i] = SplitTag::Test;
    }
    Ok(TrainedContext {
        model: ckpt.model,
        cohort,
        tags,
    })
}

/// Causal attention weights over the valid steps of one sequence.
fn alpha_vector(model: &Model, seq: &PatientSequence) -> Result<Vec<f64>> {
    let stage2 = model
        .stage2
        .as_ref()
        .ok_or_else(|| Error::invalid("this variant has no causal attention"))?;
    let mut tape = Tape::new();
    let s1 = model.stage1.bind(&mut tape);
    let s2 = stage2.bind(&mut tape);
    let out = full_forward(&mut tape, &s1, Some(&s2), seq, &model.config)?;
    let alpha = out.stage2.as_ref().expect("causal stage present").alpha;
    Ok(tape.value(alpha)[..seq.t_valid].to_vec())
}

pub fn explain(
    cfg: &RunConfig,
    patient: Option<&str>,
    whole_cohort: bool,
    from: &Path,
    dir: &Path,
) -> Result<()> {
    if patient.is_some() == whole_cohort {
        bail!("pass exactly one of --patient <ID> or --cohort");
    }
    let ctx = load_trained(cfg, from)?;
    let targets: Vec<&PatientSequence> = if let Some(id) = patient {
        let seq = ctx
            .cohort
            .iter()
            .find(|p| p.patient_id == id)
            .with_context(|| format!("patient `{id}` is not in the cohort"))?;
        vec![seq]
    } else {
        // Cohort mode explains the held-out positives.
        ctx.cohort
            .iter()
            .zip(&ctx.tags)
            .filter(|(p, tag)| **tag == SplitTag::Test && p.label == 1)
            .map(|(p, _)| p)
            .collect()
    };
    if targets.is_empty() {
        bail!("no patients to explain (the test split has no positives)");
    }

    let attr_dir = dir.join("attribution");
    fs::create_dir_all(&attr_dir)?;
    let mut rows = Vec::new();
    let mut summary_rows = Vec::new();
    for seq in targets {
        let report = attribution_report(&ctx.model, seq, &cfg.attribution)?;
        write_json(&attr_dir, &format!("{}.json", seq.patient_id), &report)?;
        let mut cells = Vec::with_capacity(report.cell_values.len());
        for (i, &step) in report.cell_events.iter().enumerate() {
            for (j, &feature) in report.cell_features.iter().enumerate() {
                cells.push(format!(
                    "{step},{feature},{}",
                    report.cell_values[i * report.cell_features.len() + j]
                ));
            }
        }
        write_csv(
            &attr_dir,
            &format!("{}_cells.csv", seq.patient_id),
            "step,feature,value",
            cells,
        )?;
        summary_rows.push(format!(
            "{},{},{},{},{},{}",
            seq.patient_id,
            seq.label,
            seq.t_valid,
            report.pruning_index,
            report.full_value,
            report.pruned_value
        ));
        rows.push(json!({
            "patient_id": report.patient_id,
            "pruning_index": report.pruning_index,
            "full_value": report.full_value,
            "pruned_value": report.pruned_value,
            "event_exact": report.event_exact,
            "cell_exact": report.cell_exact,
        }));
    }
    write_csv(
        dir,
        "summary.csv",
        "patient_id,label,t_valid,pruning_index,full_value,pruned_value",
        summary_rows,
    )?;
    write_metrics(dir, &rows)
}

pub fn align_check(cfg: &RunConfig, k: usize, from: &Path, dir: &Path) -> Result<()> {
    if k == 0 {
        bail!("--k must be positive");
    }
    let ctx = load_trained(cfg, from)?;
    let positives: Vec<&PatientSequence> = ctx
        .cohort
        .iter()
        .zip(&ctx.tags)
        .filter(|(p, tag)| **tag == SplitTag::Test && p.label == 1)
        .map(|(p, _)| p)
        .collect();
    if positives.is_empty() {
        bail!("the test split has no positives to check");
    }

    let mut csv_rows = Vec::new();
    let mut onset_hits = 0usize;
    let mut with_onset = 0usize;
    let mut jaccard_sum = 0.0;
    for seq in &positives {
        let report = attribution_report(&ctx.model, seq, &cfg.attribution)?;
        let alignment = alignment_check(&ctx.model, seq, &report, k)?;
        let alpha = alpha_vector(&ctx.model, seq)?;
        let top_alpha = top_k_indices(&alpha, k);
        let onset = seq.onset_index;
        let onset_in_top = onset.map(|o| top_alpha.contains(&o));
        if let Some(hit) = onset_in_top {
            with_onset += 1;
            onset_hits += hit as usize;
        }
        jaccard_sum += alignment.overlap;
        csv_rows.push(format!(
            "{},{},{},{}",
            seq.patient_id,
            onset.map(|o| o.to_string()).unwrap_or_default(),
            onset_in_top.map(|h| (h as u8).to_string()).unwrap_or_default(),
            alignment.overlap
        ));
    }
    let summary = json!({
        "k": k,
        "n_patients": positives.len(),
        "n_with_onset": with_onset,
        "onset_top_k_rate": if with_onset > 0 {
            Value::from(onset_hits as f64 / with_onset as f64)
        } else {
            Value::Null
        },
        "mean_jaccard": jaccard_sum / positives.len() as f64,
    });
    write_csv(
        dir,
        "alignment.csv",
        "patient_id,onset_step,onset_in_top_k,jaccard",
        csv_rows,
    )?;
    write_json(dir, "alignment_summary.json", &summary)?;
    write_metrics(dir, &[summary])
}
