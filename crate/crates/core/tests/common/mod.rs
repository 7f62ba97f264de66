//! Test-only oracles: finite differences, brute-force ranking metrics and
//! random fixtures. Nothing here calls into the code paths it checks.

#![allow(dead_code)]

use std::collections::HashSet;

use mrec::encoder::{distance_from_score, RowId};
use mrec::losses::{InnerTerm, PositiveTerm};
use mrec::{EmbeddingTable, InteractionDataset, LossSpec, Scores};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(|a|, |b|)`, with both-zero treated as exact agreement.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale.max(1e-8)
    }
}

pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// One instance of every loss kind, with the generalized loss in each of its
/// four inner forms.
pub fn all_loss_specs() -> Vec<LossSpec> {
    vec![
        LossSpec::mmcl(vec![0.6, 0.7, 0.8, 0.9], vec![0.05, 0.15, 0.2, 0.6]),
        LossSpec::mmcl_with_ratio(vec![-0.2, 0.3, 0.7], vec![0.1, 0.15, 0.75], 150.0),
        LossSpec::ccl(0.5, 2.0),
        LossSpec::Contrastive { margin: 1.2 },
        LossSpec::Triplet { margin: 0.3 },
        LossSpec::InfoNce,
        LossSpec::Bsl {
            tau_pos: 1.0,
            tau_neg: 0.5,
        },
        LossSpec::Bpr,
        LossSpec::PairwiseHinge { margin: 0.4 },
        LossSpec::SoftmaxCe,
        LossSpec::Mse,
        LossSpec::Generalized {
            pos_weight: 1.0,
            neg_weight: 3.0,
            pos_term: PositiveTerm::OneMinusScore,
            inner: InnerTerm::Score,
            margin: None,
        },
        LossSpec::Generalized {
            pos_weight: 0.5,
            neg_weight: 2.0,
            pos_term: PositiveTerm::OneMinusScore,
            inner: InnerTerm::ScoreMinusMargin,
            margin: Some(0.2),
        },
        LossSpec::Generalized {
            pos_weight: 1.0,
            neg_weight: 1.0,
            pos_term: PositiveTerm::SquaredDistance,
            inner: InnerTerm::MarginMinusDistance,
            margin: Some(1.1),
        },
        LossSpec::Generalized {
            pos_weight: 0.0,
            neg_weight: 1.0,
            pos_term: PositiveTerm::SquaredDistance,
            inner: InnerTerm::TripletDistance,
            margin: Some(0.3),
        },
    ]
}

/// Hinge arguments of every kink, expressed so that 0 is the kink.
fn kink_args(spec: &LossSpec, pos: f64, negs: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for &s in negs {
        match spec {
            LossSpec::Mmcl { margins, .. } => out.extend(margins.iter().map(|m| s - m)),
            LossSpec::Ccl { margin, .. } => out.push(s - margin),
            LossSpec::Contrastive { margin } => out.push(margin - distance_from_score(s)),
            LossSpec::Triplet { margin } => out.push(s - pos + margin / 2.0),
            LossSpec::PairwiseHinge { margin } => out.push(margin - pos + s),
            LossSpec::Generalized { inner, margin, .. } => {
                let m = margin.unwrap_or(0.0);
                out.push(match inner {
                    InnerTerm::Score => s,
                    InnerTerm::ScoreMinusMargin => s - m,
                    InnerTerm::MarginMinusDistance => m - distance_from_score(s),
                    InnerTerm::TripletDistance => distance_from_score(pos) - distance_from_score(s) + m,
                })
            }
            _ => {}
        }
    }
    out
}

pub fn near_kink(spec: &LossSpec, scores: &Scores, tol: f64) -> bool {
    (0..scores.len()).any(|b| {
        kink_args(spec, scores.pos(b), scores.negs(b))
            .iter()
            .any(|a| a.abs() < tol)
    })
}

pub fn random_scores(rng: &mut impl Rng, batch: usize, n: usize, lo: f64, hi: f64) -> Scores {
    let pos = (0..batch).map(|_| rng.random_range(lo..hi)).collect();
    let neg = (0..batch * n).map(|_| rng.random_range(lo..hi)).collect();
    Scores::new(pos, neg, n).unwrap()
}

/// Random scores in [-0.99, 0.99], redrawn until no score sits within `1e-3`
/// of a kink of `spec`.
pub fn smooth_scores(rng: &mut impl Rng, spec: &LossSpec, batch: usize, n: usize) -> Scores {
    loop {
        let s = random_scores(rng, batch, n, -0.99, 0.99);
        if !near_kink(spec, &s, 1e-3) {
            return s;
        }
    }
}

fn with_score(scores: &Scores, idx: usize, value: f64) -> Scores {
    let b = scores.len();
    let mut pos = scores.pos_scores().to_vec();
    let mut neg = scores.neg_scores().to_vec();
    if idx < b {
        pos[idx] = value;
    } else {
        neg[idx - b] = value;
    }
    Scores::new(pos, neg, scores.num_negatives()).unwrap()
}

/// Central-difference `dL/ds` for every score, positives first.
pub fn numeric_score_grad(spec: &LossSpec, scores: &Scores, h: f64) -> Vec<f64> {
    let all: Vec<f64> = scores
        .pos_scores()
        .iter()
        .chain(scores.neg_scores())
        .copied()
        .collect();
    (0..all.len())
        .map(|idx| {
            central_diff(
                |x| spec.evaluate(&with_score(scores, idx, x)).unwrap().loss,
                all[idx],
                h,
            )
        })
        .collect()
}

/// Table with N(0, 1) entries, larger than the trainer's init so finite
/// differences at `h = 1e-5` stay well conditioned.
pub fn unit_normal_table(users: usize, items: usize, dim: usize, seed: u64) -> EmbeddingTable {
    let mut tbl = EmbeddingTable::zeros(users, items, dim).unwrap();
    let mut r = rng(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for u in 0..users {
        for x in tbl.row_mut(RowId::User(u)) {
            *x = normal.sample(&mut r);
        }
    }
    for i in 0..items {
        for x in tbl.row_mut(RowId::Item(i)) {
            *x = normal.sample(&mut r);
        }
    }
    tbl
}

/// Random dataset with arbitrary (non-clustered) positives, for metric tests.
pub fn random_dataset(users: usize, items: usize, seed: u64) -> InteractionDataset {
    let mut r = rng(seed);
    let mut train = Vec::with_capacity(users);
    let mut test = Vec::with_capacity(users);
    for _ in 0..users {
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for i in 0..items {
            let x: f64 = r.random();
            if x < 0.15 {
                tr.push(i);
            } else if x < 0.22 {
                te.push(i);
            }
        }
        train.push(tr);
        test.push(te);
    }
    InteractionDataset::from_parts(users, items, train, test).unwrap()
}

fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Full sort of all non-train items by (score desc, id asc).
pub fn brute_force_ranking(tbl: &EmbeddingTable, ds: &InteractionDataset, user: usize) -> Vec<usize> {
    let train: HashSet<usize> = ds.train_positives(user).iter().copied().collect();
    let mut cands: Vec<(f64, usize)> = (0..ds.num_items())
        .filter(|i| !train.contains(i))
        .map(|i| (naive_cosine(tbl.user(user), tbl.item(i)), i))
        .collect();
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    cands.into_iter().map(|(_, i)| i).collect()
}

/// Textbook Recall@K / NDCG@K averaged over users with test items (MF scoring).
pub fn brute_force_evaluate(tbl: &EmbeddingTable, ds: &InteractionDataset, k: usize) -> (f64, f64, usize) {
    let mut recall = 0.0;
    let mut ndcg = 0.0;
    let mut users = 0;
    for u in 0..ds.num_users() {
        let test: HashSet<usize> = ds.test_positives(u).iter().copied().collect();
        if test.is_empty() {
            continue;
        }
        let ranked = brute_force_ranking(tbl, ds, u);
        let top: Vec<usize> = ranked.into_iter().take(k).collect();
        let top_set: HashSet<usize> = top.iter().copied().collect();
        recall += top_set.intersection(&test).count() as f64 / test.len() as f64;
        let mut dcg = 0.0;
        for (p, item) in top.iter().enumerate() {
            let rank = (p + 1) as f64;
            if test.contains(item) {
                dcg += 1.0 / (rank + 1.0).log2();
            }
        }
        let mut idcg = 0.0;
        for p in 1..=k.min(test.len()) {
            idcg += 1.0 / (p as f64 + 1.0).log2();
        }
        ndcg += dcg / idcg;
        users += 1;
    }
    (recall / users as f64, ndcg / users as f64, users)
}
