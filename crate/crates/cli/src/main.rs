//! `ctformer`: synthetic-cohort workflow for the continuous-time causal
//! transformer — data generation, two-stage training, lead-time evaluation,
//! ablations, depth grids, and Shapley attribution.

mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use ctformer::model::Variant;

#[derive(Parser, Debug)]
#[command(name = "ctformer", version, about = "Early-event prediction workflow")]
struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config value, e.g. --set train.max_epochs=40. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Run directory (default: <out_root>/<command>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads for per-patient parallelism (default: all cores).
    /// Results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort and write it as NDJSON
    GenData,
    /// Train the model (stage 1, stage 2 from cached tuples, or both)
    Train {
        /// Which stage to run.
        #[arg(long, default_value = "all", value_parser = ["1", "2", "all"])]
        stage: String,
    },
    /// Train and score one model per early-warning lead time
    Evaluate {
        /// Comma-separated lead times in hours.
        #[arg(long, value_delimiter = ',', default_value = "0,6,12,18,24")]
        lead_times: Vec<f64>,
    },
    /// Train architecture variants on one cohort and compare them
    Ablate {
        /// Variant to include (repeatable; default: all).
        #[arg(long = "variant", value_name = "NAME")]
        variants: Vec<String>,
    },
    /// Test AUROC over an encoder-depth x attention-depth grid
    DepthGrid {
        /// Encoder depths, inclusive (e.g. 1..2 or 1).
        #[arg(long, default_value = "1..2", value_name = "A..B")]
        cfc_layers: String,
        /// Attention depths, inclusive (e.g. 1..3 or 3).
        #[arg(long, default_value = "1..3", value_name = "A..B")]
        transformer_layers: String,
    },
    /// Shapley attribution for one patient or all held-out positives
    Explain {
        /// Patient to explain (e.g. p00017).
        #[arg(long, value_name = "ID")]
        patient: Option<String>,
        /// Explain every positive in the test split instead.
        #[arg(long)]
        cohort: bool,
        /// Run directory holding the trained checkpoint
        /// (default: <out_root>/train).
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
    },
    /// Agreement between causal attention and Shapley rankings
    AlignCheck {
        /// Top-k set size for the overlap.
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Run directory holding the trained checkpoint
        /// (default: <out_root>/train).
        #[arg(long, value_name = "DIR")]
        from: Option<PathBuf>,
    },
}

impl Command {
    fn dir_name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::DepthGrid { .. } => "depth-grid",
            Command::Explain { .. } => "explain",
            Command::AlignCheck { .. } => "align-check",
        }
    }
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Ok(vec![
            Variant::Full,
            Variant::NoCfc,
            Variant::NoTransformer,
            Variant::GOnly,
            Variant::LOnly,
        ]);
    }
    names
        .iter()
        .map(|n| n.parse::<Variant>().map_err(anyhow::Error::from))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = config::load_config(cli.config.as_deref(), &cli.set)?;
    let dir = cli
        .out
        .unwrap_or_else(|| PathBuf::from(&cfg.out_root).join(cli.command.dir_name()));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    config::write_effective_config(&dir, &cfg)?;

    let default_from = || PathBuf::from(&cfg.out_root).join("train");
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, &dir),
        Command::Train { stage } => commands::train(&cfg, stage, &dir),
        Command::Evaluate { lead_times } => commands::evaluate(&cfg, lead_times, &dir),
        Command::Ablate { variants } => {
            commands::ablate(&cfg, &parse_variants(variants)?, &dir)
        }
        Command::DepthGrid {
            cfc_layers,
            transformer_layers,
        } => commands::depth_grid(&cfg, cfc_layers, transformer_layers, &dir),
        Command::Explain {
            patient,
            cohort,
            from,
        } => commands::explain(
            &cfg,
            patient.as_deref(),
            *cohort,
            &from.clone().unwrap_or_else(default_from),
            &dir,
        ),
        Command::AlignCheck { k, from } => commands::align_check(
            &cfg,
            *k,
            &from.clone().unwrap_or_else(default_from),
            &dir,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
