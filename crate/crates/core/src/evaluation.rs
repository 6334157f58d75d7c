//! Top-K recommendation, accuracy and coverage metrics, the recent
//! popularity baseline and Pareto flags.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionLog, DAY};
use crate::error::{contract_err, Result};
use crate::model::{encode_last, score_full, ModelParams};

/// One user's ranked recommendations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecList {
    pub user: u32,
    pub items: Vec<u32>,
    pub scores: Vec<f64>,
    /// Fewer than K unseen items were available.
    pub short: bool,
}

fn by_score_then_id(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Best `k` items by score, ties to the smaller ID, skipping `seen`.
pub fn top_k(scores: &[f64], seen: &HashSet<u32>, k: usize) -> Vec<(u32, f64)> {
    let mut cands: Vec<(u32, f64)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !seen.contains(&(*i as u32)))
        .map(|(i, &s)| (i as u32, s))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, by_score_then_id);
        cands.truncate(k);
    }
    cands.sort_by(by_score_then_id);
    cands
}

fn rec_list(user: u32, ranked: Vec<(u32, f64)>, k: usize) -> RecList {
    RecList {
        user,
        short: ranked.len() < k,
        items: ranked.iter().map(|r| r.0).collect(),
        scores: ranked.iter().map(|r| r.1).collect(),
    }
}

/// Scores the whole catalog from each user's last hidden state and keeps
/// the top `k` items the user has not interacted with in `sequences`.
pub fn recommend(
    params: &ModelParams<f32>,
    sequences: &[Vec<(u32, i64)>],
    users: &[u32],
    k: usize,
    batch_size: usize,
) -> Result<Vec<RecList>> {
    let vocab = params.vocab();
    let len = params.config().max_len;
    let batches: Vec<&[u32]> = users.chunks(batch_size.max(1)).collect();
    let out: Result<Vec<Vec<RecList>>> = batches
        .par_iter()
        .map(|chunk| {
            let inputs: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&u| {
                    let seq = &sequences[u as usize];
                    match vocab.mask() {
                        Some(mask) => {
                            let keep = &seq[seq.len().saturating_sub(len - 1)..];
                            let mut t: Vec<usize> = keep.iter().map(|s| vocab.token(s.0)).collect();
                            t.push(mask);
                            t
                        }
                        None => seq.iter().map(|s| vocab.token(s.0)).collect(),
                    }
                })
                .collect();
            let hidden = encode_last(params, &inputs)?;
            let scores = score_full(params, &hidden)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(r, &u)| {
                    let seen: HashSet<u32> = sequences[u as usize].iter().map(|s| s.0).collect();
                    let row: Vec<f64> = scores.row(r).iter().map(|&v| f64::from(v)).collect();
                    rec_list(u, top_k(&row, &seen, k), k)
                })
                .collect())
        })
        .collect();
    Ok(out?.into_iter().flatten().collect())
}

/// `DCG / IDCG` with binary relevance; `None` when nothing is relevant.
pub fn ndcg_at_k(recs: &[u32], relevant: &HashSet<u32>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = recs
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| discount(r))
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(discount).sum();
    Some(dcg / idcg)
}

/// Hits in the top `k` over `|relevant|` (or `min(|relevant|, k)` when
/// capped).
pub fn recall_at_k(recs: &[u32], relevant: &HashSet<u32>, k: usize, capped: bool) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = recs.iter().take(k).filter(|i| relevant.contains(i)).count();
    let denom = if capped { relevant.len().min(k) } else { relevant.len() };
    Some(hits as f64 / denom as f64)
}

/// Share of the catalog appearing in at least one list.
pub fn coverage_at_k<'a>(lists: impl IntoIterator<Item = &'a [u32]>, k: usize, catalog_size: usize) -> f64 {
    let distinct: HashSet<u32> = lists.into_iter().flat_map(|l| l.iter().take(k).copied()).collect();
    distinct.len() as f64 / catalog_size as f64
}

/// Items ranked by interaction count in `[max_ts − window, max_ts]`, ties
/// to the smaller ID. Falls back to all-time counts (flag set) when the
/// window is empty.
pub fn popular_items(train: &InteractionLog, window_days: u32) -> (Vec<u32>, bool) {
    let Some(max) = train.max_ts() else {
        return (Vec::new(), true);
    };
    let from = max - i64::from(window_days) * DAY;
    let count = |recent: bool| {
        let mut c = vec![0usize; train.n_items()];
        for r in &train.records {
            if !recent || r.ts >= from {
                c[r.item as usize] += 1;
            }
        }
        c
    };
    let mut counts = count(true);
    let fallback = counts.iter().all(|&c| c == 0);
    if fallback {
        warn!("no interactions in the last {window_days} days; using all-time popularity");
        counts = count(false);
    }
    let mut ranked: Vec<u32> = (0..train.n_items() as u32).filter(|&i| counts[i as usize] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    (ranked, fallback)
}

/// Recent-popularity recommendations with seen-item filtering.
pub fn popular_baseline(
    train: &InteractionLog,
    sequences: &[Vec<(u32, i64)>],
    users: &[u32],
    window_days: u32,
    k: usize,
) -> Vec<RecList> {
    let (ranked, _) = popular_items(train, window_days);
    let n = ranked.len() as f64;
    users
        .iter()
        .map(|&u| {
            let seen: HashSet<u32> = sequences[u as usize].iter().map(|s| s.0).collect();
            let list: Vec<(u32, f64)> = ranked
                .iter()
                .enumerate()
                .filter(|(_, i)| !seen.contains(i))
                .take(k)
                .map(|(r, &i)| (i, n - r as f64))
                .collect();
            rec_list(u, list, k)
        })
        .collect()
}

/// Flags points not dominated by any other (both axes maximized).
pub fn pareto_front(points: &[(f64, f64)]) -> Result<Vec<bool>> {
    if points.iter().any(|p| p.0.is_nan() || p.1.is_nan()) {
        return contract_err("pareto_front points must not be NaN");
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].0.total_cmp(&points[a].0).then(points[b].1.total_cmp(&points[a].1)));
    let mut flags = vec![false; points.len()];
    let mut best_y = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let x = points[order[i]].0;
        let group_max = points[order[i]].1;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == x {
            let y = points[order[j]].1;
            flags[order[j]] = y == group_max && y > best_y;
            j += 1;
        }
        best_y = best_y.max(group_max);
        i = j;
    }
    Ok(flags)
}

/// Accuracy averages over users with relevant items; coverage over every
/// list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub k: usize,
    pub ndcg: f64,
    pub recall: f64,
    pub coverage: f64,
    pub n_users: usize,
    pub n_evaluated: usize,
    pub short_lists: usize,
}

/// Deduplicated test items per user.
pub fn relevant_sets(test: &InteractionLog) -> HashMap<u32, HashSet<u32>> {
    let mut rel: HashMap<u32, HashSet<u32>> = HashMap::new();
    for r in &test.records {
        rel.entry(r.user).or_default().insert(r.item);
    }
    rel
}

pub fn evaluate_lists(
    lists: &[RecList],
    relevant: &HashMap<u32, HashSet<u32>>,
    k: usize,
    catalog_size: usize,
    recall_capped: bool,
) -> Metrics {
    let empty = HashSet::new();
    let mut ndcg = 0.0;
    let mut recall = 0.0;
    let mut n = 0usize;
    for l in lists {
        let rel = relevant.get(&l.user).unwrap_or(&empty);
        if let (Some(a), Some(b)) = (ndcg_at_k(&l.items, rel, k), recall_at_k(&l.items, rel, k, recall_capped)) {
            ndcg += a;
            recall += b;
            n += 1;
        }
    }
    let denom = n.max(1) as f64;
    Metrics {
        k,
        ndcg: ndcg / denom,
        recall: recall / denom,
        coverage: coverage_at_k(lists.iter().map(|l| l.items.as_slice()), k, catalog_size),
        n_users: lists.len(),
        n_evaluated: n,
        short_lists: lists.iter().filter(|l| l.short).count(),
    }
}

/// Per-model entry of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub config_hash: Option<String>,
    pub metrics: Metrics,
    pub pareto: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_hash: String,
    pub models: Vec<ModelEntry>,
}

impl EvalReport {
    /// Builds the report and fills in Pareto flags on (NDCG, coverage).
    pub fn new(split_hash: String, mut models: Vec<ModelEntry>) -> Result<Self> {
        let points: Vec<(f64, f64)> = models.iter().map(|m| (m.metrics.ndcg, m.metrics.coverage)).collect();
        for (m, f) in models.iter_mut().zip(pareto_front(&points)?) {
            m.pareto = f;
        }
        Ok(Self { split_hash, models })
    }

    pub fn model(&self, name: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.name == name)
    }
}

/// Writes `user,rank,item,score` rows with external IDs.
pub fn write_recs_csv(path: &Path, lists: &[RecList], log: &InteractionLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["user", "rank", "item", "score"])?;
    for l in lists {
        let user = log.users.external(l.user).unwrap_or_default();
        for (r, (&item, &score)) in l.items.iter().zip(&l.scores).enumerate() {
            let item = log.items.external(item).unwrap_or_default();
            w.write_record([user, &(r + 1).to_string(), item, &format!("{score:.6}")])?;
        }
    }
    w.flush()?;
    Ok(())
}
