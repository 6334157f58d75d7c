use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{InteractionLog, DAY};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// First-order Markov interaction generator: each item has a few fixed
/// successors that are followed with probability `follow_prob`; otherwise
/// the next item is drawn from a Zipf popularity prior. Successor sets
/// form a regular graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarkovConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub successors: usize,
    pub follow_prob: f64,
    pub zipf_exponent: f64,
    pub span_days: u32,
    pub seed: u64,
}

impl Default for MarkovConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 100,
            min_len: 10,
            max_len: 40,
            successors: 2,
            follow_prob: 0.9,
            zipf_exponent: 1.0,
            span_days: 240,
            seed: 7,
        }
    }
}

impl MarkovConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users == 0 || self.n_items < 2 {
            return bad("synthetic data needs users and at least two items");
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad("need 2 <= min_len <= max_len");
        }
        if self.successors == 0 || self.successors >= self.n_items {
            return bad("successors must be in [1, n_items)");
        }
        if !(0.0..=1.0).contains(&self.follow_prob) {
            return bad("follow_prob outside [0, 1]");
        }
        if self.span_days < 2 {
            return bad("span_days must be >= 2");
        }
        Ok(())
    }

    /// Generates the log with external IDs `u<n>` / `i<n>`. Each user is
    /// active over a contiguous stretch of 10..90 days inside the span.
    pub fn generate(&self) -> Result<InteractionLog> {
        self.validate()?;
        let mut rng = rng_for(self.seed, &[0]);
        let n = self.n_items;
        // Every item is the successor of exactly `successors` items, so the
        // transition matrix is doubly stochastic.
        let mut successors: Vec<Vec<usize>> = vec![Vec::new(); n];
        while successors[0].len() < self.successors {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            if (0..n).all(|i| perm[i] != i && !successors[i].contains(&perm[i])) {
                for (i, s) in successors.iter_mut().enumerate() {
                    s.push(perm[i]);
                }
            }
        }
        let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-self.zipf_exponent)).collect();
        let popular = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;

        let span = i64::from(self.span_days) * DAY;
        let mut rows = Vec::new();
        for u in 0..self.n_users {
            let len = rng.random_range(self.min_len..=self.max_len);
            let active = rng.random_range(10 * DAY..=90 * DAY).min(span - 1);
            let start = rng.random_range(0..span - active);
            let step = active / len as i64;
            let mut item = popular.sample(&mut rng);
            for j in 0..len {
                let ts = start + j as i64 * step + rng.random_range(0..step.max(1));
                rows.push((format!("u{u}"), format!("i{item}"), ts));
                item = if rng.random_bool(self.follow_prob) {
                    successors[item][rng.random_range(0..self.successors)]
                } else {
                    popular.sample(&mut rng)
                };
            }
        }
        rows.sort_by_key(|r| r.2);
        Ok(InteractionLog::from_external(rows.iter().map(|(u, i, t)| (u.as_str(), i.as_str(), *t))))
    }
}
