//! Negative samplers: uniform over the catalog, in-batch (popularity
//! weighted by construction) and mixtures of the two, each returning the
//! log sampling probability of every draw.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    InBatch,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Negatives per instance.
    pub k: usize,
    /// In-batch share of a mixed draw.
    pub ratio: f64,
    /// Subtract `log q` from negative logits (sampled softmax only).
    pub logq: bool,
    pub with_replacement: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Uniform,
            k: 256,
            ratio: 0.6,
            logq: false,
            with_replacement: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("negatives.k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("negatives.ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// Number of in-batch draws per instance.
    pub fn n_in_batch(&self) -> usize {
        match self.kind {
            SamplerKind::Uniform => 0,
            SamplerKind::InBatch => self.k,
            SamplerKind::Mixed => (self.ratio * self.k as f64).round() as usize,
        }
    }

    /// Draws this instance's negatives.
    pub fn draw(
        &self,
        n_items: usize,
        pool: &BatchPool,
        positives: &BTreeSet<u32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<NegativeDraw> {
        let n_in = self.n_in_batch();
        let mut ids = Vec::with_capacity(self.k);
        let mut log_q = Vec::with_capacity(self.k);
        let mut fallback = false;
        if n_in > 0 {
            match pool.sample(n_in, positives, rng) {
                Some(d) => {
                    ids.extend(d.ids);
                    log_q.extend(d.log_q);
                }
                None => fallback = true,
            }
        }
        let rest = self.k - ids.len();
        if rest > 0 {
            let d = sample_uniform(n_items, rest, positives, self.with_replacement, rng)?;
            ids.extend(d.ids);
            log_q.extend(d.log_q);
        }
        Ok(NegativeDraw {
            ids,
            log_q,
            fallback,
        })
    }
}

/// Negatives of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeDraw {
    pub ids: Vec<u32>,
    /// Natural log of each draw's sampling probability under its sampler.
    pub log_q: Vec<f64>,
    /// In-batch draws were replaced by uniform ones because the eligible
    /// pool was empty.
    pub fallback: bool,
}

/// `k` items uniformly from the catalog minus `exclude`.
pub fn sample_uniform(
    n_items: usize,
    k: usize,
    exclude: &BTreeSet<u32>,
    with_replacement: bool,
    rng: &mut ChaCha8Rng,
) -> Result<NegativeDraw> {
    let excluded = exclude.iter().filter(|&&i| (i as usize) < n_items).count();
    let available = n_items - excluded;
    if available == 0 {
        return contract_err("every catalog item is excluded; nothing to sample");
    }
    let log_q = -(available as f64).ln();
    let ids = if !with_replacement {
        if k > available {
            return contract_err(format!("cannot draw {k} distinct negatives from {available} items"));
        }
        let eligible: Vec<u32> = (0..n_items as u32).filter(|i| !exclude.contains(i)).collect();
        index::sample(rng, available, k).into_iter().map(|j| eligible[j]).collect()
    } else if excluded * 2 <= n_items {
        (0..k)
            .map(|_| loop {
                let i = rng.random_range(0..n_items as u32);
                if !exclude.contains(&i) {
                    break i;
                }
            })
            .collect()
    } else {
        let eligible: Vec<u32> = (0..n_items as u32).filter(|i| !exclude.contains(i)).collect();
        (0..k).map(|_| eligible[rng.random_range(0..available)]).collect()
    };
    Ok(NegativeDraw {
        ids,
        log_q: vec![log_q; k],
        fallback: false,
    })
}

/// Multiset of every positive item in the current batch.
#[derive(Debug, Clone, Default)]
pub struct BatchPool {
    items: Vec<u32>,
    counts: HashMap<u32, usize>,
}

impl BatchPool {
    pub fn new(items: Vec<u32>) -> Self {
        let mut counts = HashMap::new();
        for &i in &items {
            *counts.entry(i).or_insert(0) += 1;
        }
        Self { items, counts }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, item: u32) -> usize {
        self.counts.get(&item).copied().unwrap_or(0)
    }

    /// Size of the pool once `exclude` is removed.
    pub fn eligible_len(&self, exclude: &BTreeSet<u32>) -> usize {
        self.items.len() - exclude.iter().map(|&i| self.count(i)).sum::<usize>()
    }

    /// `k` draws with replacement from the pool minus `exclude`; `None` if
    /// nothing is eligible. `log_q` is each item's share of the eligible
    /// pool.
    pub fn sample(&self, k: usize, exclude: &BTreeSet<u32>, rng: &mut ChaCha8Rng) -> Option<NegativeDraw> {
        let eligible = self.eligible_len(exclude);
        if eligible == 0 {
            return None;
        }
        let ids: Vec<u32> = if eligible * 2 >= self.items.len() {
            (0..k)
                .map(|_| loop {
                    let i = self.items[rng.random_range(0..self.items.len())];
                    if !exclude.contains(&i) {
                        break i;
                    }
                })
                .collect()
        } else {
            let kept: Vec<u32> = self.items.iter().copied().filter(|i| !exclude.contains(i)).collect();
            (0..k).map(|_| kept[rng.random_range(0..kept.len())]).collect()
        };
        let denom = (eligible as f64).ln();
        let log_q = ids.iter().map(|&i| (self.count(i) as f64).ln() - denom).collect();
        Some(NegativeDraw {
            ids,
            log_q,
            fallback: false,
        })
    }
}

/// In-batch draws; falls back to uniform when the eligible pool is empty.
pub fn sample_in_batch(
    pool: &BatchPool,
    k: usize,
    positives: &BTreeSet<u32>,
    n_items: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NegativeDraw> {
    match pool.sample(k, positives, rng) {
        Some(d) => Ok(d),
        None => {
            let mut d = sample_uniform(n_items, k, positives, true, rng)?;
            d.fallback = true;
            Ok(d)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::oracles::tol;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn set(items: &[u32]) -> BTreeSet<u32> {
        items.iter().copied().collect()
    }

    fn frequencies(ids: &[u32], n: usize) -> Vec<f64> {
        let mut c = vec![0.0; n];
        for &i in ids {
            c[i as usize] += 1.0;
        }
        c.iter().map(|v| v / ids.len() as f64).collect()
    }

    #[test]
    fn uniform_excludes_and_is_flat() {
        let d = sample_uniform(10, 100_000, &set(&[3]), true, &mut rng(1)).unwrap();
        assert!(d.ids.iter().all(|&i| i != 3));
        for (i, f) in frequencies(&d.ids, 10).into_iter().enumerate() {
            let want = if i == 3 { 0.0 } else { 1.0 / 9.0 };
            assert!((f - want).abs() < tol::FREQUENCY_ABS, "item {i}: {f}");
        }
        assert!(d.log_q.iter().all(|&q| q == (1.0f64 / 9.0).ln()));
    }

    #[test]
    fn uniform_dense_exclusion_path() {
        let d = sample_uniform(10, 1000, &set(&[0, 1, 2, 3, 4, 5, 6, 7]), true, &mut rng(2)).unwrap();
        assert!(d.ids.iter().all(|&i| i >= 8));
        assert!(sample_uniform(2, 1, &set(&[0, 1]), true, &mut rng(2)).is_err());
    }

    #[test]
    fn uniform_without_replacement() {
        let d = sample_uniform(10, 9, &set(&[3]), false, &mut rng(3)).unwrap();
        let distinct: BTreeSet<u32> = d.ids.iter().copied().collect();
        assert_eq!(distinct.len(), 9);
        assert!(!distinct.contains(&3));
        assert!(matches!(
            sample_uniform(10, 10, &set(&[3]), false, &mut rng(3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn in_batch_is_popularity_weighted() {
        let pool = BatchPool::new(vec![0, 0, 1]);
        let d = sample_in_batch(&pool, 100_000, &set(&[]), 5, &mut rng(4)).unwrap();
        let f = frequencies(&d.ids, 5);
        assert!((f[0] - 2.0 / 3.0).abs() < tol::FREQUENCY_ABS);
        assert!((f[1] - 1.0 / 3.0).abs() < tol::FREQUENCY_ABS);
        let i = d.ids.iter().position(|&x| x == 0).unwrap();
        assert!((d.log_q[i] - (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!(!d.fallback);
    }

    #[test]
    fn in_batch_excludes_positives_and_falls_back() {
        let pool = BatchPool::new(vec![0, 0, 1, 2, 2, 2]);
        let d = sample_in_batch(&pool, 1000, &set(&[2]), 5, &mut rng(5)).unwrap();
        assert!(d.ids.iter().all(|&i| i != 2));
        let i = d.ids.iter().position(|&x| x == 0).unwrap();
        assert!((d.log_q[i] - (2.0f64 / 3.0).ln()).abs() < 1e-12);

        let d = sample_in_batch(&pool, 10, &set(&[0, 1, 2]), 5, &mut rng(5)).unwrap();
        assert!(d.fallback);
        assert!(d.ids.iter().all(|&i| i >= 3));
    }

    #[test]
    fn log_q_normalizes_over_support() {
        let pool = BatchPool::new(vec![4, 4, 1, 7, 7, 7, 2]);
        let exclude = set(&[7]);
        let mut support: Vec<u32> = pool.items.iter().copied().filter(|i| !exclude.contains(i)).collect();
        support.sort();
        support.dedup();
        let d = pool.sample(2000, &exclude, &mut rng(6)).unwrap();
        let mut total = 0.0;
        for item in support {
            let j = d.ids.iter().position(|&x| x == item).unwrap();
            total += d.log_q[j].exp();
        }
        assert!((total - 1.0).abs() < 1e-9);

        let u = sample_uniform(12, 1, &set(&[1, 5]), true, &mut rng(6)).unwrap();
        assert!((10.0 * u.log_q[0].exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_counts() {
        let cfg = SamplerConfig {
            kind: SamplerKind::Mixed,
            k: 10,
            ratio: 0.6,
            ..SamplerConfig::default()
        };
        assert_eq!(cfg.n_in_batch(), 6);
        // pool items are >= 100, catalog draws below that are uniform
        let pool = BatchPool::new((100..110).collect());
        let d = cfg.draw(100, &pool, &set(&[]), &mut rng(7)).unwrap();
        assert_eq!(d.ids.iter().filter(|&&i| i >= 100).count(), 6);
        assert_eq!(d.ids.len(), 10);
        assert!((d.log_q[0] - (0.1f64).ln()).abs() < 1e-12);
        assert!((d.log_q[9] - (0.01f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mixed_degenerate_ratios() {
        let pool = BatchPool::new(vec![1, 1, 2]);
        let zero = SamplerConfig {
            kind: SamplerKind::Mixed,
            k: 5,
            ratio: 0.0,
            ..SamplerConfig::default()
        };
        let uniform = SamplerConfig {
            kind: SamplerKind::Uniform,
            ..zero.clone()
        };
        assert_eq!(
            zero.draw(10, &pool, &set(&[]), &mut rng(8)).unwrap(),
            uniform.draw(10, &pool, &set(&[]), &mut rng(8)).unwrap()
        );
        let one = SamplerConfig { ratio: 1.0, ..zero.clone() };
        let in_batch = SamplerConfig {
            kind: SamplerKind::InBatch,
            ..zero
        };
        assert_eq!(
            one.draw(10, &pool, &set(&[]), &mut rng(9)).unwrap(),
            in_batch.draw(10, &pool, &set(&[]), &mut rng(9)).unwrap()
        );
    }

    #[test]
    fn fixed_seed_fixed_draws() {
        let cfg = SamplerConfig::default();
        let pool = BatchPool::default();
        let a = cfg.draw(50, &pool, &set(&[1]), &mut rng(10)).unwrap();
        let b = cfg.draw(50, &pool, &set(&[1]), &mut rng(10)).unwrap();
        assert_eq!(a, b);
    }
}
