//! Embedding tables, user encoders, cosine scoring and the backward pass from
//! score gradients to embedding-row gradients.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::losses::{LossGrad, Scores};

/// Lower bound applied to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 8] = b"MRECEMB1";
const CHECKPOINT_HEADER_LEN: usize = 8 + 3 * 8;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with zero-vector guard, clamped to [-1, 1].
#[inline]
pub fn cosine(u: &[f64], i: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), i.len());
    cosine_with_norms(u, i, norm(u), norm(i))
}

/// Same as [`cosine`] with precomputed norms; the two agree bit for bit.
#[inline]
pub fn cosine_with_norms(u: &[f64], i: &[f64], u_norm: f64, i_norm: f64) -> f64 {
    (dot(u, i) / (u_norm.max(NORM_EPS) * i_norm.max(NORM_EPS))).clamp(-1.0, 1.0)
}

/// Euclidean distance between the unit-normalized vectors whose cosine is `s`.
#[inline]
pub fn distance_from_score(s: f64) -> f64 {
    (2.0 - 2.0 * s).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RowId {
    User(usize),
    Item(usize),
}

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowId::User(u) => write!(f, "user row {u}"),
            RowId::Item(i) => write!(f, "item row {i}"),
        }
    }
}

/// Dense row-major user and item matrices sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    num_users: usize,
    num_items: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        Ok(Self {
            dim,
            num_users,
            num_items,
            users: vec![0.0; num_users * dim],
            items: vec![0.0; num_items * dim],
        })
    }

    /// Entries drawn i.i.d. from N(0, 0.01²), users first, from a seeded stream.
    pub fn init(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut tbl = Self::zeros(num_users, num_items, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        for x in tbl.users.iter_mut().chain(tbl.items.iter_mut()) {
            *x = normal.sample(&mut rng);
        }
        Ok(tbl)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row(&self, row: RowId) -> &[f64] {
        match row {
            RowId::User(u) => self.user(u),
            RowId::Item(i) => self.item(i),
        }
    }

    pub fn row_mut(&mut self, row: RowId) -> &mut [f64] {
        let d = self.dim;
        match row {
            RowId::User(u) => &mut self.users[u * d..(u + 1) * d],
            RowId::Item(i) => &mut self.items[i * d..(i + 1) * d],
        }
    }

    pub fn contains(&self, row: RowId) -> bool {
        match row {
            RowId::User(u) => u < self.num_users,
            RowId::Item(i) => i < self.num_items,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|x| x.is_finite())
    }

    /// Iterates every entry, users then items, row-major.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.users.iter().chain(&self.items).copied()
    }

    /// Rounds every entry to the nearest `f32`, the precision checkpoints
    /// store. Evaluating the rounded table gives the same metrics as
    /// evaluating a reloaded checkpoint.
    pub fn round_to_f32(&self) -> Self {
        let round = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect();
        Self {
            users: round(&self.users),
            items: round(&self.items),
            ..*self
        }
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 4 * (self.users.len() + self.items.len()));
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for n in [self.num_users, self.num_items, self.dim] {
            buf.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for &x in self.users.iter().chain(&self.items) {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(Error::Checkpoint(format!(
                "truncated header ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let read_u64 = |off: usize| {
            let v = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            usize::try_from(v).map_err(|_| Error::Checkpoint(format!("header field {v} too large")))
        };
        let (num_users, num_items, dim) = (read_u64(8)?, read_u64(16)?, read_u64(24)?);
        if dim == 0 {
            return Err(Error::Checkpoint("zero embedding dimension".into()));
        }
        let n_values = num_users
            .checked_add(num_items)
            .and_then(|r| r.checked_mul(dim))
            .ok_or_else(|| Error::Checkpoint("header dimensions overflow".into()))?;
        let expected = n_values
            .checked_mul(4)
            .and_then(|b| b.checked_add(CHECKPOINT_HEADER_LEN))
            .ok_or_else(|| Error::Checkpoint("header dimensions overflow".into()))?;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} bytes for {num_users}x{num_items}x{dim}, found {}",
                bytes.len()
            )));
        }
        let mut values = bytes[CHECKPOINT_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
        let users: Vec<f64> = values.by_ref().take(num_users * dim).collect();
        let items: Vec<f64> = values.collect();
        Ok(Self {
            dim,
            num_users,
            num_items,
            users,
            items,
        })
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Plain matrix factorization: the user vector is the user row.
    Mf,
    /// Gated blend of the user row and the average of the user's train items.
    BehaviorAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub gate: f64,
    pub history_cap: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Mf,
            gate: 0.5,
            history_cap: 100,
        }
    }
}

impl EncoderConfig {
    pub fn mf() -> Self {
        Self::default()
    }

    pub fn behavior_avg(gate: f64) -> Self {
        Self {
            kind: EncoderKind::BehaviorAvg,
            gate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gate) {
            return Err(Error::config(
                "encoder.gate",
                format!("must be in [0, 1], got {}", self.gate),
            ));
        }
        Ok(())
    }

    /// History items pooled for `user`: the last `history_cap` in file order.
    pub fn history<'a>(&self, ds: &'a InteractionDataset, user: usize) -> &'a [usize] {
        match self.kind {
            EncoderKind::Mf => &[],
            EncoderKind::BehaviorAvg => {
                let h = ds.train_history(user);
                &h[h.len().saturating_sub(self.history_cap)..]
            }
        }
    }
}

pub fn user_vector(
    enc: &EncoderConfig,
    tbl: &EmbeddingTable,
    ds: &InteractionDataset,
    user: usize,
) -> Vec<f64> {
    let own = tbl.user(user);
    let history = enc.history(ds, user);
    if history.is_empty() {
        return own.to_vec();
    }
    let mut pooled = vec![0.0; tbl.dim()];
    for &i in history {
        for (p, x) in pooled.iter_mut().zip(tbl.item(i)) {
            *p += x;
        }
    }
    let g = enc.gate;
    let w = (1.0 - g) / history.len() as f64;
    own.iter().zip(&pooled).map(|(e, p)| g * e + w * p).collect()
}

/// One training example: a user, one positive item and its sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: usize,
    pub pos_item: usize,
    pub neg_items: Vec<usize>,
}

/// Scores for a batch plus the user vectors needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ScoredBatch {
    pub scores: Scores,
    user_vecs: Vec<Vec<f64>>,
}

impl ScoredBatch {
    pub fn user_vector(&self, example: usize) -> &[f64] {
        &self.user_vecs[example]
    }
}

pub fn score_batch(
    enc: &EncoderConfig,
    tbl: &EmbeddingTable,
    ds: &InteractionDataset,
    batch: &[Example],
) -> Result<ScoredBatch> {
    let n = batch.first().map_or(0, |e| e.neg_items.len());
    if let Some(bad) = batch.iter().position(|e| e.neg_items.len() != n) {
        return Err(Error::invalid(format!(
            "ragged negatives: example {bad} has {} negatives, expected {n}",
            batch[bad].neg_items.len()
        )));
    }
    for e in batch {
        let in_range = e.user < tbl.num_users()
            && e.pos_item < tbl.num_items()
            && e.neg_items.iter().all(|&j| j < tbl.num_items());
        if !in_range {
            return Err(Error::invalid(format!("example ids out of range: {e:?}")));
        }
    }

    let per_example: Vec<(Vec<f64>, f64, Vec<f64>)> = batch
        .par_iter()
        .map(|e| {
            let v = user_vector(enc, tbl, ds, e.user);
            let nv = norm(&v);
            let item = tbl.item(e.pos_item);
            let pos = cosine_with_norms(&v, item, nv, norm(item));
            let negs = e
                .neg_items
                .iter()
                .map(|&j| {
                    let item = tbl.item(j);
                    cosine_with_norms(&v, item, nv, norm(item))
                })
                .collect();
            (v, pos, negs)
        })
        .collect();

    let mut pos = Vec::with_capacity(batch.len());
    let mut neg = Vec::with_capacity(batch.len() * n);
    let mut user_vecs = Vec::with_capacity(batch.len());
    for (v, p, ns) in per_example {
        user_vecs.push(v);
        pos.push(p);
        neg.extend(ns);
    }
    Ok(ScoredBatch {
        scores: Scores::new(pos, neg, n)?,
        user_vecs,
    })
}

/// Sparse per-row gradient sums. Iteration order is by row id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradAccumulator {
    rows: BTreeMap<RowId, Vec<f64>>,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `scale * grad` into `row`.
    pub fn add_scaled(&mut self, row: RowId, scale: f64, grad: &[f64]) {
        let acc = self.rows.entry(row).or_insert_with(|| vec![0.0; grad.len()]);
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += scale * g;
        }
    }

    pub fn get(&self, row: RowId) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (RowId, &[f64])> {
        self.rows.iter().map(|(r, g)| (*r, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.rows.values_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// d cos(a, b) / d a, treating the clamp as identity.
fn cosine_grad_wrt_first(a: &[f64], b: &[f64], na: f64, nb: f64, out: &mut [f64], scale: f64) {
    let na_e = na.max(NORM_EPS);
    let nb_e = nb.max(NORM_EPS);
    let inv = 1.0 / (na_e * nb_e);
    if na > NORM_EPS {
        let raw = dot(a, b) * inv;
        let k = raw / (na * na);
        for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
            *o += scale * (y * inv - k * x);
        }
    } else {
        for (o, y) in out.iter_mut().zip(b) {
            *o += scale * y * inv;
        }
    }
}

struct ExampleGrad {
    user: usize,
    user_vec_grad: Vec<f64>,
    items: Vec<(usize, Vec<f64>)>,
}

/// Chains `dL/ds` through the cosine scores into the user and item rows that
/// produced them. Rows hit by several examples are summed in batch order.
pub fn backward_scores(
    enc: &EncoderConfig,
    tbl: &EmbeddingTable,
    ds: &InteractionDataset,
    batch: &[Example],
    scored: &ScoredBatch,
    grad: &LossGrad,
) -> GradAccumulator {
    let n = scored.scores.num_negatives();
    let d = tbl.dim();
    let per_example: Vec<Option<ExampleGrad>> = batch
        .par_iter()
        .enumerate()
        .map(|(b, e)| {
            let g_pos = grad.d_pos[b];
            let g_neg = &grad.d_neg[b * n..(b + 1) * n];
            if g_pos == 0.0 && g_neg.iter().all(|&g| g == 0.0) {
                return None;
            }
            let v = scored.user_vector(b);
            let nv = norm(v);
            let mut dv = vec![0.0; d];
            let mut items = Vec::with_capacity(1 + n);
            for (item, g) in std::iter::once((e.pos_item, g_pos))
                .chain(e.neg_items.iter().copied().zip(g_neg.iter().copied()))
            {
                if g == 0.0 {
                    continue;
                }
                let row = tbl.item(item);
                let ni = norm(row);
                cosine_grad_wrt_first(v, row, nv, ni, &mut dv, g);
                let mut di = vec![0.0; d];
                cosine_grad_wrt_first(row, v, ni, nv, &mut di, g);
                items.push((item, di));
            }
            Some(ExampleGrad {
                user: e.user,
                user_vec_grad: dv,
                items,
            })
        })
        .collect();

    let mut acc = GradAccumulator::new();
    for eg in per_example.into_iter().flatten() {
        let history = enc.history(ds, eg.user);
        if history.is_empty() {
            acc.add_scaled(RowId::User(eg.user), 1.0, &eg.user_vec_grad);
        } else {
            acc.add_scaled(RowId::User(eg.user), enc.gate, &eg.user_vec_grad);
            let w = (1.0 - enc.gate) / history.len() as f64;
            for &h in history {
                acc.add_scaled(RowId::Item(h), w, &eg.user_vec_grad);
            }
        }
        for (item, g) in &eg.items {
            acc.add_scaled(RowId::Item(*item), 1.0, g);
        }
    }
    acc
}
