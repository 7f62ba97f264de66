mod common;

use std::collections::BTreeMap;

use common::all_loss_specs;
use mrec::eval::evaluate;
use mrec::trainer::{margin_grid, sweep_in_memory, train, train_with_observer, SweepCell};
use mrec::{EmbeddingTable, EncoderConfig, InteractionDataset, LossSpec, TrainConfig};

fn fixture() -> InteractionDataset {
    InteractionDataset::make_synthetic(200, 100, 2, 0.0, 7).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 256,
        epochs,
        num_negatives: 10,
        embedding_dim: 16,
        ..TrainConfig::default()
    }
}

fn bits(t: &EmbeddingTable) -> Vec<u64> {
    t.values().map(f64::to_bits).collect()
}

#[test]
fn every_loss_kind_decreases_over_ten_epochs() {
    let ds = fixture();
    for spec in all_loss_specs() {
        for enc in [EncoderConfig::mf(), EncoderConfig::behavior_avg(0.5)] {
            let trained = train(&ds, &enc, &spec, &quick(10)).unwrap();
            let e = &trained.trace.epochs;
            assert_eq!(e.len(), 10);
            assert!(
                e[9].loss < e[0].loss,
                "{} {:?}: {} -> {}",
                spec.kind_name(),
                enc.kind,
                e[0].loss,
                e[9].loss
            );
        }
    }
}

#[test]
fn same_seed_gives_bit_identical_runs() {
    let ds = fixture();
    let spec = LossSpec::mmcl_with_ratio(vec![0.7, 0.8, 0.9], vec![0.1, 0.15, 0.75], 100.0);
    let enc = EncoderConfig::behavior_avg(0.5);
    let a = train(&ds, &enc, &spec, &quick(5)).unwrap();
    let b = train(&ds, &enc, &spec, &quick(5)).unwrap();
    assert_eq!(bits(&a.table), bits(&b.table));
    assert_eq!(a.trace.to_csv(false), b.trace.to_csv(false));
    let c = train(&ds, &enc, &spec, &TrainConfig { seed: 1, ..quick(5) }).unwrap();
    assert_ne!(bits(&a.table), bits(&c.table));
}

#[test]
fn early_stopping_returns_the_best_validation_table() {
    let ds = fixture();
    let spec = LossSpec::ccl(0.8, 50.0);
    let cfg = TrainConfig {
        early_stop: true,
        patience: 2,
        eval_every: 1,
        learning_rate: 5e-2,
        ..quick(40)
    };
    let mut snapshots = BTreeMap::new();
    let trained = train_with_observer(&ds, &EncoderConfig::mf(), &spec, &cfg, |rec, tbl| {
        snapshots.insert(rec.epoch, (rec.recall, bits(tbl)));
        Ok(())
    })
    .unwrap();
    let best = trained.best_epoch.expect("validation ran");
    let best_recall = snapshots[&best].0.unwrap();
    assert!(snapshots.values().all(|(r, _)| r.unwrap() <= best_recall));
    assert_eq!(bits(&trained.table), snapshots[&best].1);
    // Stopped within `patience` evaluations of the best epoch.
    let last = *snapshots.keys().last().unwrap();
    assert!(last == 40 || last - best == cfg.patience);
}

#[test]
fn single_cell_sweep_equals_a_direct_run() {
    let ds = fixture();
    let enc = EncoderConfig::mf();
    let spec = LossSpec::mmcl(vec![0.8, 0.9], vec![5.0, 15.0]);
    let cfg = quick(3);
    let cell = SweepCell {
        label: "only".into(),
        loss: spec.clone(),
        train: cfg.clone(),
    };
    let report = sweep_in_memory(&ds, &enc, &[cell], 10).unwrap();
    let direct = evaluate(&enc, &train(&ds, &enc, &spec, &cfg).unwrap().table, &ds, 10).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].recall, Some(direct.recall));
    assert_eq!(report.rows[0].ndcg, Some(direct.ndcg));
}

#[test]
fn sweep_ranks_cells_and_keeps_failures() {
    let ds = fixture();
    let enc = EncoderConfig::mf();
    let mut cells: Vec<SweepCell> = margin_grid()
        .into_iter()
        .take(3)
        .map(|m| {
            let w = vec![10.0 / m.len() as f64; m.len()];
            SweepCell {
                label: format!("{m:?}"),
                loss: LossSpec::mmcl(m, w),
                train: quick(3),
            }
        })
        .collect();
    cells.push(SweepCell {
        label: "bad".into(),
        loss: LossSpec::mmcl(vec![0.9], vec![1.0]),
        train: TrainConfig {
            learning_rate: -1.0,
            ..quick(3)
        },
    });
    let report = sweep_in_memory(&ds, &enc, &cells, 20).unwrap();
    assert_eq!(report.rows.len(), 4);
    let recalls: Vec<f64> = report.rows.iter().filter_map(|r| r.recall).collect();
    assert_eq!(recalls.len(), 3);
    assert!(recalls.windows(2).all(|w| w[0] >= w[1]));
    let last = report.rows.last().unwrap();
    assert_eq!(last.label, "bad");
    assert!(last.error.as_deref().unwrap().contains("train.learning_rate"));
}

#[test]
fn seed_cells_give_distinct_rows() {
    let ds = fixture();
    let enc = EncoderConfig::mf();
    let spec = LossSpec::ccl(0.9, 10.0);
    let cells: Vec<SweepCell> = (0..3)
        .map(|seed| SweepCell {
            label: format!("seed={seed}"),
            loss: spec.clone(),
            train: TrainConfig { seed, ..quick(2) },
        })
        .collect();
    let report = sweep_in_memory(&ds, &enc, &cells, 10).unwrap();
    let mut seeds: Vec<u64> = report.rows.iter().map(|r| r.seed).collect();
    seeds.sort();
    assert_eq!(seeds, vec![0, 1, 2]);
}
