//! Run orchestration behind the `train`, `eval` and `sweep` commands, and the
//! artifacts each run leaves in its output directory:
//!
//! - `manifest.json`: the resolved config, re-runnable as is
//! - `trace.csv`: `epoch,loss,seconds,recall,ndcg`
//! - `timing.csv`: per-epoch seconds (deterministic runs only; their
//!   `trace.csv` leaves the seconds column empty)
//! - `checkpoint.bin`: final embeddings
//! - `report.csv`: `dataset,encoder,loss,k,recall,ndcg,users_evaluated`

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::InteractionDataset;
use crate::encoder::{EmbeddingTable, EncoderKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::trainer::{self, SweepCell, SweepReport};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.csv";
pub const SWEEP_REPORT_FILE: &str = "sweep_report.csv";

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Leave wall-clock seconds out of `trace.csv` so repeated runs produce
    /// byte-identical files.
    pub deterministic: bool,
    /// Print per-epoch progress to stderr.
    pub verbose: bool,
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    dataset: &'a str,
    encoder: &'a str,
    loss: &'a str,
    k: usize,
    recall: f64,
    ndcg: f64,
    users_evaluated: usize,
}

fn encoder_name(kind: EncoderKind) -> &'static str {
    match kind {
        EncoderKind::Mf => "mf",
        EncoderKind::BehaviorAvg => "behavior_avg",
    }
}

pub fn write_report(path: &Path, cfg: &RunConfig, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.serialize(ReportRow {
        dataset: &cfg.dataset.name(),
        encoder: encoder_name(cfg.encoder.kind),
        loss: cfg.loss.kind_name(),
        k: report.k,
        recall: report.recall,
        ndcg: report.ndcg,
        users_evaluated: report.users_evaluated,
    })?;
    w.flush()?;
    Ok(())
}

/// Trains, writes all run artifacts to `cfg.output_dir`, and returns the
/// test-split report of the saved checkpoint.
pub fn execute_train(cfg: &RunConfig, ds: &InteractionDataset, opts: RunOptions) -> Result<EvalReport> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join(MANIFEST_FILE), cfg.to_json_pretty())?;

    let ckpt_dir = out.join("checkpoints");
    let early_stop = cfg.train.early_stop;
    let eval_every = cfg.train.eval_every;
    let trained = trainer::train_with_observer(ds, &cfg.encoder, &cfg.loss, &cfg.train, |rec, tbl| {
        if opts.verbose {
            let val = rec
                .recall
                .map(|r| format!("  val Recall@{} {r:.4}", trainer::VALIDATION_K))
                .unwrap_or_default();
            eprintln!(
                "epoch {:>4}  loss {:.6}  {:.2}s{val}",
                rec.epoch, rec.loss, rec.seconds
            );
        }
        if early_stop && rec.epoch % eval_every == 0 {
            fs::create_dir_all(&ckpt_dir)?;
            tbl.write_checkpoint(&ckpt_dir.join(format!("epoch_{:04}.bin", rec.epoch)))?;
        }
        Ok(())
    })?;

    // Metrics are computed at checkpoint precision so `eval` on the saved
    // file reproduces them exactly.
    let table = trained.table.round_to_f32();
    table.write_checkpoint(&out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(TRACE_FILE), trained.trace.to_csv(!opts.deterministic))?;
    if opts.deterministic {
        fs::write(out.join(TIMING_FILE), trained.trace.timing_csv())?;
    }
    let report = evaluate(&cfg.encoder, &table, ds, cfg.eval_k)?;
    write_report(&out.join(REPORT_FILE), cfg, &report)?;
    Ok(report)
}

/// Evaluates a saved checkpoint against the config's dataset and writes
/// `eval_report.csv`.
pub fn execute_eval(cfg: &RunConfig, ds: &InteractionDataset, checkpoint: &Path) -> Result<EvalReport> {
    let table = EmbeddingTable::read_checkpoint(checkpoint).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("{}: {io}", checkpoint.display())),
        other => other,
    })?;
    if table.num_users() != ds.num_users() || table.num_items() != ds.num_items() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {}x{} but dataset has {} users and {} items",
            table.num_users(),
            table.num_items(),
            ds.num_users(),
            ds.num_items()
        )));
    }
    let report = evaluate(&cfg.encoder, &table, ds, cfg.eval_k)?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_report(&cfg.output_dir.join(EVAL_REPORT_FILE), cfg, &report)?;
    Ok(report)
}

/// Runs every grid cell as a full training run in its own directory and
/// writes the ranked `sweep_report.csv` to the base output directory.
pub fn execute_sweep(
    cfg: &RunConfig,
    ds: &InteractionDataset,
    opts: RunOptions,
) -> Result<(PathBuf, SweepReport)> {
    let cells = cfg.expand_sweep()?;
    let sweep_cells: Vec<SweepCell> = cells
        .iter()
        .map(|(label, c)| SweepCell {
            label: label.clone(),
            loss: c.loss.clone(),
            train: c.train.clone(),
        })
        .collect();
    let report = trainer::sweep(&sweep_cells, cfg.eval_k, |idx, _| {
        let (label, cell_cfg) = &cells[idx];
        if opts.verbose {
            eprintln!("cell {idx}: {label}");
        }
        execute_train(cell_cfg, ds, opts)
    })?;
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(SWEEP_REPORT_FILE);
    report.write_csv(&path)?;
    Ok((path, report))
}
