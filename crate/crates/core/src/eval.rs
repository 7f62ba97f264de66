//! Full-ranking top-K evaluation: every item outside the user's train
//! positives is a candidate.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::encoder::{cosine_with_norms, norm, user_vector, EmbeddingTable, EncoderConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub users_evaluated: usize,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Recall@{k} = {:.4}  NDCG@{k} = {:.4}  ({} users)",
            self.recall,
            self.ndcg,
            self.users_evaluated,
            k = self.k
        )
    }
}

/// Ordered so that `a > b` means `a` ranks ahead of `b`: higher score first,
/// ties to the lower item id.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    item: usize,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.item.cmp(&self.item))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

/// Top-`k` item ids by descending score, skipping `excluded` (sorted). Fewer
/// than `k` ids come back when there are fewer candidates.
pub fn top_k_from_scores(scores: &[f64], excluded: &[usize], k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Reverse<Candidate>> = BinaryHeap::with_capacity(k + 1);
    let mut skip = excluded.iter().peekable();
    for (item, &score) in scores.iter().enumerate() {
        while skip.peek().is_some_and(|&&x| x < item) {
            skip.next();
        }
        if skip.peek() == Some(&&item) {
            continue;
        }
        let cand = Candidate { score, item };
        if heap.len() < k {
            heap.push(Reverse(cand));
        } else if heap.peek().is_some_and(|Reverse(worst)| cand > *worst) {
            heap.pop();
            heap.push(Reverse(cand));
        }
    }
    let mut ranked: Vec<Candidate> = heap.into_iter().map(|Reverse(c)| c).collect();
    ranked.sort_unstable_by(|a, b| b.cmp(a));
    ranked.into_iter().map(|c| c.item).collect()
}

fn score_all_items(
    enc: &EncoderConfig,
    tbl: &EmbeddingTable,
    ds: &InteractionDataset,
    item_norms: &[f64],
    user: usize,
) -> Vec<f64> {
    let v = user_vector(enc, tbl, ds, user);
    let nv = norm(&v);
    (0..tbl.num_items())
        .map(|i| cosine_with_norms(&v, tbl.item(i), nv, item_norms[i]))
        .collect()
}

fn item_norms(tbl: &EmbeddingTable) -> Vec<f64> {
    (0..tbl.num_items()).map(|i| norm(tbl.item(i))).collect()
}

pub fn rank_topk(
    enc: &EncoderConfig,
    tbl: &EmbeddingTable,
    ds: &InteractionDataset,
    user: usize,
    k: usize,
) -> Vec<usize> {
    let scores = score_all_items(enc, tbl, ds, &item_norms(tbl), user);
    top_k_from_scores(&scores, ds.train_positives(user), k)
}

/// `|ranked ∩ test| / |test|`. `test` must be non-empty.
pub fn recall_at_k(ranked: &[usize], test: &[usize]) -> f64 {
    debug_assert!(!test.is_empty());
    let hits = ranked.iter().filter(|i| test.contains(i)).count();
    hits as f64 / test.len() as f64
}

/// Binary-relevance NDCG with a `log2(p + 1)` discount and the ideal DCG
/// truncated at `min(k, |test|)`.
pub fn ndcg_at_k(ranked: &[usize], test: &[usize], k: usize) -> f64 {
    debug_assert!(!test.is_empty());
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| test.contains(i))
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(test.len()))
        .map(|p| 1.0 / ((p + 2) as f64).log2())
        .sum();
    dcg / idcg
}

/// Mean Recall@K and NDCG@K over users with a non-empty test set. Users are
/// scored in parallel and reduced in user-id order.
pub fn evaluate(
    enc: &EncoderConfig,
    tbl: &EmbeddingTable,
    ds: &InteractionDataset,
    k: usize,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if tbl.num_users() != ds.num_users() || tbl.num_items() != ds.num_items() {
        return Err(Error::invalid(format!(
            "table is {}x{} but dataset has {} users, {} items",
            tbl.num_users(),
            tbl.num_items(),
            ds.num_users(),
            ds.num_items()
        )));
    }
    let norms = item_norms(tbl);
    let users: Vec<usize> = (0..ds.num_users())
        .filter(|&u| !ds.test_positives(u).is_empty())
        .collect();
    if users.is_empty() {
        return Err(Error::NothingToEvaluate);
    }
    let per_user: Vec<(f64, f64)> = users
        .par_iter()
        .map(|&u| {
            let scores = score_all_items(enc, tbl, ds, &norms, u);
            let ranked = top_k_from_scores(&scores, ds.train_positives(u), k);
            let test = ds.test_positives(u);
            (recall_at_k(&ranked, test), ndcg_at_k(&ranked, test, k))
        })
        .collect();
    let (r, n) = per_user
        .iter()
        .fold((0.0, 0.0), |(r, n), (ru, nu)| (r + ru, n + nu));
    let count = per_user.len() as f64;
    Ok(EvalReport {
        k,
        recall: r / count,
        ndcg: n / count,
        users_evaluated: per_user.len(),
    })
}
