//! User-item interaction data: adjacency-text loading, validation, the
//! synthetic cluster fixture, and per-user train/test positive sets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sparse positive sets for the train and test split.
///
/// Ids are dense from 0: `num_users` and `num_items` are one past the largest
/// id observed. Per-user lists are sorted and duplicate-free. The train
/// history additionally keeps each user's items in first-seen file order,
/// which behavior-pooling encoders use.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    train_positives: Vec<Vec<usize>>,
    test_positives: Vec<Vec<usize>>,
    train_history: Vec<Vec<usize>>,
    train_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub density: f64,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "users:        {}", self.num_users)?;
        writeln!(f, "items:        {}", self.num_items)?;
        writeln!(f, "interactions: {}", self.num_train + self.num_test)?;
        writeln!(f, "train:        {}", self.num_train)?;
        writeln!(f, "test:         {}", self.num_test)?;
        write!(f, "density:      {:.5}", self.density)
    }
}

fn dedup_in_order(items: &[usize]) -> Vec<usize> {
    let mut seen = std::collections::HashSet::with_capacity(items.len());
    items.iter().copied().filter(|i| seen.insert(*i)).collect()
}

fn sorted_unique(items: &[usize]) -> Vec<usize> {
    let mut v = items.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

impl InteractionDataset {
    /// Builds a dataset from per-user item lists. `train` lists are taken in
    /// history order and may contain duplicates; only the first occurrence is
    /// kept.
    pub fn from_parts(
        num_users: usize,
        num_items: usize,
        train: Vec<Vec<usize>>,
        test: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if train.len() != num_users || test.len() != num_users {
            return Err(Error::invalid(format!(
                "expected {num_users} per-user lists, got {} train / {} test",
                train.len(),
                test.len()
            )));
        }
        let mut train_history = Vec::with_capacity(num_users);
        let mut train_positives = Vec::with_capacity(num_users);
        let mut test_positives = Vec::with_capacity(num_users);
        for (user, (tr, te)) in train.iter().zip(&test).enumerate() {
            if let Some(&bad) = tr.iter().chain(te).find(|&&i| i >= num_items) {
                return Err(Error::invalid(format!(
                    "user {user}: item {bad} out of range (num_items = {num_items})"
                )));
            }
            let hist = dedup_in_order(tr);
            let tr_sorted = sorted_unique(&hist);
            let te_sorted = sorted_unique(te);
            if let Some(&item) = te_sorted.iter().find(|i| tr_sorted.binary_search(i).is_ok()) {
                return Err(Error::SplitOverlap { user, item });
            }
            train_history.push(hist);
            train_positives.push(tr_sorted);
            test_positives.push(te_sorted);
        }
        let train_pairs = train_history
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
            .collect();
        Ok(Self {
            num_users,
            num_items,
            train_positives,
            test_positives,
            train_history,
            train_pairs,
        })
    }

    /// Loads the whitespace-separated adjacency split files: each line is a
    /// user id followed by that user's item ids.
    pub fn load_adjacency_text(train_path: &Path, test_path: &Path) -> Result<Self> {
        let train_lines = parse_adjacency_file(train_path)?;
        let test_lines = parse_adjacency_file(test_path)?;

        let max_user = train_lines
            .iter()
            .chain(&test_lines)
            .map(|(u, _)| *u)
            .max()
            .expect("non-empty files");
        let max_item = train_lines
            .iter()
            .chain(&test_lines)
            .flat_map(|(_, items)| items.iter().copied())
            .max();
        let num_users = max_user + 1;
        let num_items = max_item.map_or(0, |m| m + 1);

        let mut train = vec![Vec::new(); num_users];
        for (u, items) in train_lines {
            train[u].extend(items);
        }
        let mut test = vec![Vec::new(); num_users];
        for (u, items) in test_lines {
            test[u].extend(items);
        }
        Self::from_parts(num_users, num_items, train, test)
    }

    /// Writes the dataset back to adjacency text. Every user gets a train line
    /// (possibly just the id) so the user count survives a reload; test lines
    /// are written only for users with held-out items.
    pub fn write_adjacency_text(&self, train_path: &Path, test_path: &Path) -> Result<()> {
        let mut out = String::new();
        for (u, items) in self.train_history.iter().enumerate() {
            write_line(&mut out, u, items);
        }
        fs::write(train_path, &out)?;

        out.clear();
        for (u, items) in self.test_positives.iter().enumerate() {
            if !items.is_empty() {
                write_line(&mut out, u, items);
            }
        }
        fs::write(test_path, &out)?;
        Ok(())
    }

    /// Clustered fixture: users and items are dealt round-robin into
    /// `num_clusters` groups. Each cluster draws a random 40% of its items as
    /// its interaction core, and every user of the cluster interacts with that
    /// core plus `round(noise * core_len)` random items from other clusters.
    /// Each user's items are then split 80/20 into train and test.
    pub fn make_synthetic(
        num_users: usize,
        num_items: usize,
        num_clusters: usize,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_clusters == 0 {
            return Err(Error::invalid("num_clusters must be at least 1"));
        }
        if num_clusters > num_users.min(num_items) {
            return Err(Error::invalid(format!(
                "num_clusters ({num_clusters}) exceeds min(num_users, num_items) = {}",
                num_users.min(num_items)
            )));
        }
        if !(0.0..1.0).contains(&noise) {
            return Err(Error::invalid(format!("noise must be in [0, 1), got {noise}")));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cluster_items: Vec<Vec<usize>> = (0..num_clusters)
            .map(|c| (c..num_items).step_by(num_clusters).collect())
            .collect();
        let cores: Vec<Vec<usize>> = cluster_items
            .iter()
            .map(|items| {
                let take = ((items.len() as f64 * 0.4).round() as usize).clamp(1, items.len());
                let mut shuffled = items.clone();
                shuffled.shuffle(&mut rng);
                shuffled.truncate(take);
                shuffled
            })
            .collect();

        let mut train = Vec::with_capacity(num_users);
        let mut test = Vec::with_capacity(num_users);
        for u in 0..num_users {
            let c = u % num_clusters;
            let mut items = cores[c].clone();
            let n_noise = (noise * items.len() as f64).round() as usize;
            if n_noise > 0 {
                let mut outside: Vec<usize> = (0..num_items).filter(|i| i % num_clusters != c).collect();
                outside.shuffle(&mut rng);
                items.extend(outside.into_iter().take(n_noise));
            }
            items.shuffle(&mut rng);
            let n = items.len();
            let n_test = if n >= 2 {
                ((n as f64 * 0.2).round() as usize).max(1)
            } else {
                0
            };
            let held = items.split_off(n - n_test);
            train.push(items);
            test.push(held);
        }
        Self::from_parts(num_users, num_items, train, test)
    }

    /// Moves a seeded `fraction` of every user's train items into the test
    /// slot, producing a train/validation dataset. Users with fewer than two
    /// train items keep all of them.
    pub fn carve_validation(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!(
                "validation fraction must be in [0, 1), got {fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::with_capacity(self.num_users);
        let mut valid = Vec::with_capacity(self.num_users);
        for hist in &self.train_history {
            let n = hist.len();
            let n_hold = if n >= 2 && fraction > 0.0 {
                ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
            } else {
                0
            };
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut held: Vec<usize> = idx[..n_hold].to_vec();
            held.sort_unstable();
            let held_items: Vec<usize> = held.iter().map(|&k| hist[k]).collect();
            let kept: Vec<usize> = hist
                .iter()
                .enumerate()
                .filter(|(k, _)| held.binary_search(k).is_err())
                .map(|(_, &i)| i)
                .collect();
            train.push(kept);
            valid.push(held_items);
        }
        Self::from_parts(self.num_users, self.num_items, train, valid)
    }

    pub fn stats(&self) -> DatasetStats {
        let num_train = self.train_pairs.len();
        let num_test: usize = self.test_positives.iter().map(Vec::len).sum();
        let cells = self.num_users as f64 * self.num_items as f64;
        DatasetStats {
            num_users: self.num_users,
            num_items: self.num_items,
            num_train,
            num_test,
            density: if cells > 0.0 {
                (num_train + num_test) as f64 / cells
            } else {
                0.0
            },
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn train_positives(&self, user: usize) -> &[usize] {
        &self.train_positives[user]
    }

    pub fn test_positives(&self, user: usize) -> &[usize] {
        &self.test_positives[user]
    }

    /// Deduplicated train items in the order they first appeared.
    pub fn train_history(&self, user: usize) -> &[usize] {
        &self.train_history[user]
    }

    pub fn train_pairs(&self) -> &[(usize, usize)] {
        &self.train_pairs
    }

    pub fn is_train_positive(&self, user: usize, item: usize) -> bool {
        self.train_positives[user].binary_search(&item).is_ok()
    }
}

fn write_line(out: &mut String, user: usize, items: &[usize]) {
    let _ = write!(out, "{user}");
    for i in items {
        let _ = write!(out, " {i}");
    }
    out.push('\n');
}

fn parse_adjacency_file(path: &Path) -> Result<Vec<(usize, Vec<usize>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut tokens = line.split_ascii_whitespace();
        let Some(first) = tokens.next() else {
            continue;
        };
        let parse = |tok: &str| {
            tok.parse::<usize>().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                line: lineno + 1,
                msg: format!("expected a non-negative integer, found `{tok}`"),
            })
        };
        let user = parse(first)?;
        let items = tokens.map(parse).collect::<Result<Vec<_>>>()?;
        rows.push((user, items));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset {
            file: path.to_path_buf(),
        });
    }
    Ok(rows)
}
