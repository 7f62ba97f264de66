//! Uniform negative sampling over items outside a user's train positives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_negatives: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 {
            return Err(Error::invalid("num_negatives must be at least 1"));
        }
        Ok(())
    }
}

/// A seeded stream of negatives. Draws are with replacement; test positives
/// are valid candidates. Each worker owns its own sampler.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    num_negatives: usize,
    rng: ChaCha8Rng,
}

impl NegativeSampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            num_negatives: cfg.num_negatives,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    /// Sampler for worker `worker` of a pool sharing `cfg.seed`.
    pub fn for_worker(cfg: SamplerConfig, worker: u64) -> Result<Self> {
        Self::new(SamplerConfig {
            seed: cfg.seed.wrapping_add(worker),
            ..cfg
        })
    }

    pub fn num_negatives(&self) -> usize {
        self.num_negatives
    }

    pub fn sample(&mut self, ds: &InteractionDataset, user: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.num_negatives);
        self.sample_into(ds, user, &mut out)?;
        Ok(out)
    }

    pub fn sample_into(&mut self, ds: &InteractionDataset, user: usize, out: &mut Vec<usize>) -> Result<()> {
        if user >= ds.num_users() {
            return Err(Error::invalid(format!(
                "user {user} out of range (num_users = {})",
                ds.num_users()
            )));
        }
        let n_items = ds.num_items();
        let positives = ds.train_positives(user);
        if positives.len() >= n_items {
            return Err(Error::UnsatisfiableSampler { user });
        }
        out.clear();
        if positives.len() * 2 <= n_items {
            // Rejection against the sorted positive list; accepts with
            // probability >= 1/2 per draw.
            while out.len() < self.num_negatives {
                let item = self.rng.random_range(0..n_items);
                if positives.binary_search(&item).is_err() {
                    out.push(item);
                }
            }
        } else {
            let candidates = complement(positives, n_items);
            for _ in 0..self.num_negatives {
                out.push(candidates[self.rng.random_range(0..candidates.len())]);
            }
        }
        Ok(())
    }
}

fn complement(sorted: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut it = sorted.iter().peekable();
    for i in 0..n {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            num_negatives: n,
            seed,
        }
    }

    #[test]
    fn single_candidate_is_always_drawn() {
        let train: Vec<usize> = (0..10).filter(|&i| i != 7).collect();
        let ds = InteractionDataset::from_parts(1, 10, vec![train], vec![vec![]]).unwrap();
        let mut s = NegativeSampler::new(cfg(3, 1)).unwrap();
        assert_eq!(s.sample(&ds, 0).unwrap(), vec![7, 7, 7]);
    }

    #[test]
    fn full_user_is_unsatisfiable() {
        let ds = InteractionDataset::from_parts(1, 4, vec![vec![0, 1, 2, 3]], vec![vec![]]).unwrap();
        let mut s = NegativeSampler::new(cfg(2, 1)).unwrap();
        assert!(matches!(
            s.sample(&ds, 0),
            Err(Error::UnsatisfiableSampler { user: 0 })
        ));
    }

    #[test]
    fn zero_negatives_rejected() {
        assert!(NegativeSampler::new(cfg(0, 1)).is_err());
    }

    #[test]
    fn draws_exclude_positives_and_include_test_items() {
        let ds = InteractionDataset::from_parts(1, 6, vec![vec![0, 2, 4]], vec![vec![5]]).unwrap();
        let mut s = NegativeSampler::new(cfg(500, 3)).unwrap();
        let draws = s.sample(&ds, 0).unwrap();
        assert!(draws.iter().all(|i| [1, 3, 5].contains(i)));
        assert!(draws.contains(&5));
    }

    #[test]
    fn worker_streams_differ() {
        let ds = InteractionDataset::make_synthetic(10, 100, 2, 0.0, 1).unwrap();
        let mut a = NegativeSampler::for_worker(cfg(20, 5), 0).unwrap();
        let mut b = NegativeSampler::for_worker(cfg(20, 5), 1).unwrap();
        assert_ne!(a.sample(&ds, 0).unwrap(), b.sample(&ds, 0).unwrap());
    }

    #[test]
    fn complement_matches_filter() {
        let pos = vec![1, 2, 5, 9];
        let expected: Vec<usize> = (0..10).filter(|i| !pos.contains(i)).collect();
        assert_eq!(complement(&pos, 10), expected);
    }
}
