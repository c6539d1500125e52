//! `karst` command-line interface.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::adapter::AdapterShape;
use crate::bench;
use crate::config::ExperimentConfig;
use crate::error::{KarstError, Result};
use crate::format::Archive;
use crate::numerics::{gaussian_vector, rel_err, SeededRng};
use crate::training::metrics::{write_csv, write_jsonl};
use crate::training::{build_model, make_task_from, train, ToyModel};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Largest relative deviation `merge` accepts between the adapted and merged
/// forward passes.
pub const MERGE_TOLERANCE: f64 = 1e-10;
const PROBE_BATCH: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "karst", version, about = "Kronecker adapters with re-scaling: train, merge, verify, bench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train adapters on a synthetic task and write metrics plus the model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fold a trained model into plain affine layers.
    Merge {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suite.
    Verify,
    /// Time materialized, structured, merged and plain layer application.
    Bench {
        #[arg(long, default_value_t = 768)]
        d_in: usize,
        #[arg(long, default_value_t = 768)]
        d_out: usize,
        #[arg(long, default_value_t = 8)]
        m: usize,
        #[arg(long, default_value_t = 8)]
        r: usize,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = bench::MIN_REPS)]
        reps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn exit_code(e: &KarstError) -> i32 {
    match e {
        KarstError::Diverged { .. } => EXIT_FAILED,
        _ => EXIT_USAGE,
    }
}

pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train { config, seed, out } => cmd_train(&config, seed, out.as_deref()),
        Command::Merge { model, out } => cmd_merge(&model, &out),
        Command::Verify => Ok(cmd_verify()),
        Command::Bench {
            d_in,
            d_out,
            m,
            r,
            n,
            reps,
            batch,
            csv,
        } => cmd_bench(d_in, d_out, m, r, n, reps, batch, csv.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<i32> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = out {
        cfg.output.dir = out.to_path_buf();
    }
    let resolved = cfg.resolved_json();
    let task = make_task_from(&cfg.task)?;
    let mut model = build_model(&task, &cfg.train)?;
    let history = train(&mut model, &task, &cfg.train)?;

    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    write_csv(BufWriter::new(File::create(dir.join("metrics.csv"))?), &history, &resolved)?;
    write_jsonl(BufWriter::new(File::create(dir.join("metrics.jsonl"))?), &history, &resolved)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;
    model.to_archive(resolved).save(dir.join("model.karst"))?;

    let last = history.last();
    println!(
        "epochs={} train_loss={:.6} train_acc={:.4} test_acc={:.4} params={} -> {}",
        last.epoch,
        last.train_loss,
        last.train_acc,
        last.test_acc,
        history.param_count,
        dir.display()
    );
    Ok(EXIT_OK)
}

/// Largest relative deviation between the adapted and merged forward passes
/// over a seeded Gaussian probe batch.
pub fn merge_deviation(model: &ToyModel, merged: &crate::training::MergedModel) -> Result<f64> {
    let mut rng = SeededRng::new(0);
    let mut worst = 0.0f64;
    for _ in 0..PROBE_BATCH {
        let x = gaussian_vector(&mut rng, model.d_in(), 1.0)?;
        let a = model.predict_one(&x)?;
        let b = merged.predict_one(&x)?;
        worst = worst.max(rel_err(b.as_slice(), a.as_slice()));
    }
    Ok(worst)
}

pub fn cmd_merge(model_path: &Path, out: &Path) -> Result<i32> {
    let archive = Archive::load(model_path)?;
    let model = ToyModel::from_archive(&archive)?;
    let merged = model.merge()?;
    let deviation = merge_deviation(&model, &merged)?;
    let provenance = archive.header.get("provenance").cloned().unwrap_or_default();
    merged.to_archive(provenance).save(out)?;
    println!("max relative deviation over {PROBE_BATCH} probes: {deviation:e}");
    if deviation > MERGE_TOLERANCE {
        eprintln!("deviation exceeds {MERGE_TOLERANCE:e}");
        return Ok(EXIT_FAILED);
    }
    Ok(EXIT_OK)
}

pub fn cmd_verify() -> i32 {
    let outcomes = verify::run_all();
    let width = outcomes.iter().map(|o| o.family.len() + o.name.len() + 3).max().unwrap_or(0);
    let stdout = io::stdout();
    let mut w = stdout.lock();
    for o in &outcomes {
        let label = format!("{} / {}", o.family, o.name);
        let _ = writeln!(
            w,
            "{} {label:<width$}  {:>6} ms  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.millis,
            o.detail
        );
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    let _ = writeln!(
        w,
        "{} checks in {} families, {failed} failed",
        outcomes.len(),
        verify::families(&outcomes).len()
    );
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(d_in: usize, d_out: usize, m: usize, r: usize, n: usize, reps: usize, batch: usize, csv: Option<&Path>) -> Result<i32> {
    let shape = AdapterShape::new(d_in, d_out, m, r, n)?;
    let report = bench::run(shape, reps, batch, 0)?;
    match csv {
        Some(path) => {
            report.write_csv(BufWriter::new(File::create(path)?))?;
            for row in &report.rows {
                println!("{:<12} {:>12.1} ns  {:>10} flops", row.path, row.median_ns, row.flops);
            }
        }
        None => report.write_csv(io::stdout().lock())?,
    }
    eprintln!("merged/plain time ratio: {:.3}", report.merged_over_plain);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if !report.flop_identity {
        eprintln!("structured multiply count disagrees with the closed form");
        return Ok(EXIT_FAILED);
    }
    Ok(EXIT_OK)
}
