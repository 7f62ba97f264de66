//! Mini-batch training: sample negatives, score, evaluate the loss, push
//! gradients back and apply a lazy Adam step. Also early stopping on a carved
//! validation split and grid sweeps.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::encoder::{backward_scores, score_batch, EmbeddingTable, EncoderConfig, Example, GradAccumulator};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::LossSpec;
use crate::sampler::{NegativeSampler, SamplerConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cutoff used for early-stopping validation.
pub const VALIDATION_K: usize = 20;

// Offsets from the top-level seed for each random stream.
const SEED_INIT: u64 = 0;
const SEED_SAMPLER: u64 = 1;
const SEED_SHUFFLE: u64 = 2;
const SEED_VALIDATION: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2_reg: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub num_negatives: usize,
    pub embedding_dim: usize,
    pub early_stop: bool,
    pub patience: usize,
    pub eval_every: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            l2_reg: 1e-9,
            batch_size: 512,
            epochs: 100,
            num_negatives: 100,
            embedding_dim: 64,
            early_stop: false,
            patience: 3,
            eval_every: 1,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(Error::config(format!("train.{field}"), msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(
                "learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            );
        }
        if !(self.l2_reg >= 0.0 && self.l2_reg.is_finite()) {
            return err("l2_reg", format!("must be >= 0, got {}", self.l2_reg));
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be at least 1".into());
        }
        if self.num_negatives == 0 {
            return err("num_negatives", "must be at least 1".into());
        }
        if self.embedding_dim == 0 {
            return err("embedding_dim", "must be at least 1".into());
        }
        if self.patience == 0 {
            return err("patience", "must be at least 1".into());
        }
        if self.eval_every == 0 {
            return err("eval_every", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return err(
                "validation_fraction",
                format!("must be in [0, 1), got {}", self.validation_fraction),
            );
        }
        Ok(())
    }
}

/// First and second Adam moments shaped like the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: EmbeddingTable,
    second: EmbeddingTable,
    step: u64,
}

impl AdamState {
    pub fn new(tbl: &EmbeddingTable) -> Self {
        let zeros = EmbeddingTable::zeros(tbl.num_users(), tbl.num_items(), tbl.dim())
            .expect("table has a valid dimension");
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update over the rows present in `grads`, with
/// `l2_reg * θ` added to each touched row's gradient. Untouched rows and their
/// moments are left alone.
pub fn adam_step(
    tbl: &mut EmbeddingTable,
    grads: &GradAccumulator,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (row, g) in grads.iter() {
        if !tbl.contains(row) {
            return Err(Error::invalid(format!("gradient for {row} outside the table")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                epoch: 0,
                row: Some(row),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = cfg.learning_rate;
    let l2 = cfg.l2_reg;
    for (row, g) in grads.iter() {
        let theta = tbl.row_mut(row);
        let m = state.first.row_mut(row);
        let v = state.second.row_mut(row);
        for k in 0..g.len() {
            let gk = g[k] + l2 * theta[k];
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            theta[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub seconds: f64,
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl TrainTrace {
    /// `epoch,loss,seconds,recall,ndcg`. With `with_seconds = false` the
    /// wall-clock column is left empty so the file depends only on the run's
    /// numerics.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut out = String::from("epoch,loss,seconds,recall,ndcg\n");
        for r in &self.epochs {
            let secs = if with_seconds {
                r.seconds.to_string()
            } else {
                String::new()
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.loss,
                secs,
                opt(r.recall),
                opt(r.ndcg)
            );
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{}", r.epoch, r.seconds);
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub table: EmbeddingTable,
    pub trace: TrainTrace,
    /// Epoch whose table was returned when early stopping selected one.
    pub best_epoch: Option<usize>,
}

pub fn train(
    ds: &InteractionDataset,
    enc: &EncoderConfig,
    loss: &LossSpec,
    cfg: &TrainConfig,
) -> Result<Trained> {
    train_with_observer(ds, enc, loss, cfg, |_, _| Ok(()))
}

/// Like [`train`], calling `observer` after every completed epoch with the
/// epoch's record and the current table.
pub fn train_with_observer<F>(
    ds: &InteractionDataset,
    enc: &EncoderConfig,
    loss: &LossSpec,
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<Trained>
where
    F: FnMut(&EpochRecord, &EmbeddingTable) -> Result<()>,
{
    cfg.validate()?;
    enc.validate()?;
    loss.validate()?;
    if ds.train_pairs().is_empty() {
        return Err(Error::invalid("training set has no interactions"));
    }

    let carved;
    let train_ds = if cfg.early_stop {
        carved = ds.carve_validation(cfg.validation_fraction, cfg.seed.wrapping_add(SEED_VALIDATION))?;
        &carved
    } else {
        ds
    };

    let mut table = EmbeddingTable::init(
        ds.num_users(),
        ds.num_items(),
        cfg.embedding_dim,
        cfg.seed.wrapping_add(SEED_INIT),
    )?;
    let mut adam = AdamState::new(&table);
    let mut sampler = NegativeSampler::new(SamplerConfig {
        num_negatives: cfg.num_negatives,
        seed: cfg.seed.wrapping_add(SEED_SAMPLER),
    })?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_SHUFFLE));
    let pairs = train_ds.train_pairs();
    let mut order: Vec<usize> = (0..pairs.len()).collect();

    let mut trace = TrainTrace::default();
    let mut best: Option<(f64, usize, EmbeddingTable)> = None;
    let mut stale_evals = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut examples = Vec::with_capacity(cfg.batch_size);
        for chunk in order.chunks(cfg.batch_size) {
            examples.clear();
            for &p in chunk {
                let (user, pos_item) = pairs[p];
                let neg_items = sampler.sample(train_ds, user)?;
                examples.push(Example {
                    user,
                    pos_item,
                    neg_items,
                });
            }
            let scored = score_batch(enc, &table, train_ds, &examples)?;
            let lg = loss.evaluate(&scored.scores)?;
            if !lg.loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    epoch,
                    row: None,
                });
            }
            let grads = backward_scores(enc, &table, train_ds, &examples, &scored, &lg);
            adam_step(&mut table, &grads, &mut adam, cfg).map_err(|e| match e {
                Error::NonFinite { what, row, .. } => Error::NonFinite { what, epoch, row },
                other => other,
            })?;
            loss_sum += lg.loss * chunk.len() as f64;
        }

        let mut record = EpochRecord {
            epoch,
            loss: loss_sum / pairs.len() as f64,
            seconds: 0.0,
            recall: None,
            ndcg: None,
        };
        let mut stop = false;
        if cfg.early_stop && epoch % cfg.eval_every == 0 {
            let rep = evaluate(enc, &table, train_ds, VALIDATION_K)?;
            record.recall = Some(rep.recall);
            record.ndcg = Some(rep.ndcg);
            if best.as_ref().is_none_or(|(r, _, _)| rep.recall > *r) {
                best = Some((rep.recall, epoch, table.clone()));
                stale_evals = 0;
            } else {
                stale_evals += 1;
                stop = stale_evals >= cfg.patience;
            }
        }
        record.seconds = started.elapsed().as_secs_f64();
        observer(&record, &table)?;
        trace.epochs.push(record);
        if stop {
            break;
        }
    }

    Ok(match best {
        Some((_, epoch, best_table)) => Trained {
            table: best_table,
            trace,
            best_epoch: Some(epoch),
        },
        None => Trained {
            table,
            trace,
            best_epoch: None,
        },
    })
}

/// One grid cell: a loss and training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub loss: LossSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub label: String,
    pub loss: String,
    pub seed: u64,
    pub num_negatives: usize,
    pub recall: Option<f64>,
    pub ndcg: Option<f64>,
    pub users_evaluated: Option<usize>,
    pub error: Option<String>,
}

/// Sweep results ranked by recall, descending; failed cells sort last.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub k: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every cell through `run` and ranks the outcomes. A failing cell is
/// recorded with its error and the sweep moves on.
pub fn sweep<F>(cells: &[SweepCell], k: usize, mut run: F) -> Result<SweepReport>
where
    F: FnMut(usize, &SweepCell) -> Result<EvalReport>,
{
    if cells.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let mut rows: Vec<SweepRow> = cells
        .iter()
        .enumerate()
        .map(|(idx, cell)| {
            let outcome = run(idx, cell);
            let (report, error) = match outcome {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepRow {
                cell: idx,
                label: cell.label.clone(),
                loss: cell.loss.kind_name().to_string(),
                seed: cell.train.seed,
                num_negatives: cell.train.num_negatives,
                recall: report.map(|r| r.recall),
                ndcg: report.map(|r| r.ndcg),
                users_evaluated: report.map(|r| r.users_evaluated),
                error,
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.recall, b.recall) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cell.cmp(&b.cell)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cell.cmp(&b.cell),
    });
    Ok(SweepReport { k, rows })
}

/// Sweep that trains each cell on `ds` and evaluates on its test split.
pub fn sweep_in_memory(
    ds: &InteractionDataset,
    enc: &EncoderConfig,
    cells: &[SweepCell],
    k: usize,
) -> Result<SweepReport> {
    sweep(cells, k, |_, cell| {
        let trained = train(ds, enc, &cell.loss, &cell.train)?;
        evaluate(enc, &trained.table, ds, k)
    })
}

/// `w_p : w_n` ratios 1:150 .. 1:450 in steps of 50.
pub fn yelp_ratio_grid() -> Vec<f64> {
    (150..=450).step_by(50).map(f64::from).collect()
}

/// `w_p : w_n` ratios 1:500 .. 1:1000 in steps of 100.
pub fn gowalla_ratio_grid() -> Vec<f64> {
    (500..=1000).step_by(100).map(f64::from).collect()
}

/// Margin lists growing from `[0.9]` down to `[0.5, 0.6, 0.7, 0.8, 0.9]`.
pub fn margin_grid() -> Vec<Vec<f64>> {
    let all = [0.5, 0.6, 0.7, 0.8, 0.9];
    (1..=all.len()).map(|n| all[all.len() - n..].to_vec()).collect()
}
