//! Slow, straight-line reference implementations used to check the
//! production code paths. Everything here works on plain `f64` slices and
//! shares nothing with the tensor engine.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::Serialize;

use crate::error::{contract_err, Result};

/// Tolerances used when comparing production values against oracles.
pub mod tol {
    /// Relative error allowed between analytic and finite-difference gradients.
    pub const GRAD_REL: f64 = 1e-4;
    /// Floor for the relative-error denominator.
    pub const GRAD_FLOOR: f64 = 1e-8;
    /// Default central-difference step.
    pub const FD_STEP: f64 = 1e-3;
    pub const LOSS_ABS: f64 = 1e-6;
    pub const LIGR_ABS: f64 = 1e-5;
    pub const MATMUL_ABS: f64 = 1e-6;
    pub const SOFTMAX_SUM: f64 = 1e-6;
    pub const METRIC_ABS: f64 = 1e-9;
    pub const FREQUENCY_ABS: f64 = 0.01;
}

/// Largest instance the exhaustive oracles accept.
pub const MAX_ORACLE_CATALOG: usize = 1000;
pub const MAX_ORACLE_POINTS: usize = 10_000;
pub const MAX_ORACLE_RECORDS: usize = 100_000;

/// One production-vs-oracle comparison; dumped as JSON when a check fails.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub case_id: String,
    pub production: f64,
    pub oracle: f64,
    pub abs_dev: f64,
    pub rel_dev: f64,
}

impl OracleReport {
    pub fn new(case_id: impl Into<String>, production: f64, oracle: f64) -> Self {
        let abs_dev = (production - oracle).abs();
        Self {
            case_id: case_id.into(),
            production,
            oracle,
            abs_dev,
            rel_dev: abs_dev / oracle.abs().max(tol::GRAD_FLOOR),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

/// Relative error of two vectors: `‖a − b‖ / max(‖b‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm.max(tol::GRAD_FLOOR)
}

/// Triple-loop matrix product of row-major `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Exact softmax cross-entropy over a full catalog of item embeddings.
pub fn full_softmax_ce(hidden: &[f64], item_embeddings: &[Vec<f64>], target: usize) -> Result<f64> {
    if item_embeddings.len() > MAX_ORACLE_CATALOG {
        return contract_err(format!(
            "full_softmax_ce oracle limited to {MAX_ORACLE_CATALOG} items"
        ));
    }
    let logits: Vec<f64> = item_embeddings
        .iter()
        .map(|e| e.iter().zip(hidden).map(|(a, b)| a * b).sum())
        .collect();
    Ok(full_softmax_ce_logits(&logits, target))
}

pub fn full_softmax_ce_logits(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    -(logits[target] - max - z.ln())
}

/// Central finite differences of a scalar function.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Top-k by full sort (score descending, then id ascending), skipping
/// excluded ids.
pub fn brute_topk(scores: &[f64], exclude: &HashSet<usize>, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

pub fn brute_ndcg(recs: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let mut dcg = 0.0;
    for (r, item) in recs.iter().take(k).enumerate() {
        if relevant.contains(item) {
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let mut idcg = 0.0;
    for r in 0..k.min(relevant.len()) {
        idcg += 1.0 / ((r + 2) as f64).log2();
    }
    Some(dcg / idcg)
}

pub fn brute_recall(recs: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let top: HashSet<usize> = recs.iter().take(k).copied().collect();
    Some(top.intersection(relevant).count() as f64 / relevant.len() as f64)
}

pub fn brute_coverage(lists: &[Vec<usize>], catalog_size: usize) -> f64 {
    let distinct: BTreeSet<usize> = lists.iter().flatten().copied().collect();
    distinct.len() as f64 / catalog_size as f64
}

/// Mean over users with a non-empty relevant set.
pub fn brute_mean(values: impl IntoIterator<Item = Option<f64>>) -> f64 {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Pairwise-dominance Pareto flags for maximized `(x, y)` points.
pub fn brute_pareto(points: &[(f64, f64)]) -> Result<Vec<bool>> {
    if points.len() > MAX_ORACLE_POINTS {
        return contract_err("brute_pareto instance too large");
    }
    Ok((0..points.len())
        .map(|i| {
            !(0..points.len()).any(|j| {
                let (a, b) = (points[j], points[i]);
                j != i && a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
            })
        })
        .collect())
}

/// k-core filtering by repeated full passes until nothing changes.
pub fn brute_kcore(
    records: &[(String, String, i64)],
    user_core: usize,
    item_core: usize,
) -> Result<Vec<(String, String, i64)>> {
    if records.len() > MAX_ORACLE_RECORDS {
        return contract_err("brute_kcore instance too large");
    }
    let mut cur = records.to_vec();
    loop {
        let before = cur.len();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for r in &cur {
            *item_counts.entry(r.1.as_str()).or_default() += 1;
        }
        let next: Vec<_> = cur
            .iter()
            .filter(|r| item_counts[r.1.as_str()] >= item_core)
            .cloned()
            .collect();
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        for r in &next {
            *user_counts.entry(r.0.as_str()).or_default() += 1;
        }
        let next: Vec<_> = next
            .iter()
            .filter(|r| user_counts[r.0.as_str()] >= user_core)
            .cloned()
            .collect();
        cur = next;
        if cur.len() == before {
            return Ok(cur);
        }
    }
}

/// Temporal split by direct timestamp filtering. Returns `(train, test)`
/// with test records of users/items unseen in train removed.
#[allow(clippy::type_complexity)]
pub fn brute_split(
    records: &[(String, String, i64)],
    boundary: i64,
) -> (Vec<(String, String, i64)>, Vec<(String, String, i64)>) {
    let train: Vec<_> = records.iter().filter(|r| r.2 < boundary).cloned().collect();
    let users: HashSet<&String> = train.iter().map(|r| &r.0).collect();
    let items: HashSet<&String> = train.iter().map(|r| &r.1).collect();
    let test: Vec<_> = records
        .iter()
        .filter(|r| r.2 >= boundary && users.contains(&r.0) && items.contains(&r.1))
        .cloned()
        .collect();
    (train, test)
}

/// Per-user holdout: the max-timestamp record, last one in input order on
/// ties; users with fewer than two records get none.
pub fn brute_loo(records: &[(String, String, i64)]) -> BTreeMap<String, (String, i64)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.0.as_str()).or_default() += 1;
    }
    let mut best: BTreeMap<String, (String, i64)> = BTreeMap::new();
    for r in records {
        if counts[r.0.as_str()] < 2 {
            continue;
        }
        match best.get(&r.0) {
            Some((_, ts)) if *ts > r.2 => {}
            _ => {
                best.insert(r.0.clone(), (r.1.clone(), r.2));
            }
        }
    }
    best
}

/// Items whose timestamps fall in `(t, t + window]`, deduplicated.
pub fn brute_interval_positives(seq: &[(u32, i64)], anchor: usize, window_secs: i64) -> BTreeSet<u32> {
    let t = seq[anchor].1;
    seq.iter()
        .filter(|(_, ts)| *ts > t && *ts <= t + window_secs)
        .map(|(i, _)| *i)
        .collect()
}

/// Logistic function evaluated directly.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary cross-entropy written out term by term without stabilization.
pub fn naive_bce(s_pos: f64, s_negs: &[f64]) -> f64 {
    -sigmoid(s_pos).ln() - s_negs.iter().map(|&s| (1.0 - sigmoid(s)).ln()).sum::<f64>()
}

/// Sampled-softmax loss written as `−ln(e^{s⁺} / (e^{s⁺} + Σ e^{s̃}))`.
pub fn naive_sampled_softmax(s_pos: f64, s_negs: &[f64], log_q: Option<&[f64]>) -> f64 {
    let adj: Vec<f64> = match log_q {
        Some(q) => s_negs.iter().zip(q).map(|(s, q)| s - q).collect(),
        None => s_negs.to_vec(),
    };
    let mut all = vec![s_pos];
    all.extend(adj);
    full_softmax_ce_logits(&all, 0)
}

/// Weights of one LiGR block as plain row-major matrices (`x · W`).
#[derive(Debug, Clone)]
pub struct LigrBlockWeights {
    pub norm1: (Vec<f64>, Vec<f64>),
    pub q: (Vec<f64>, Vec<f64>),
    pub k: (Vec<f64>, Vec<f64>),
    pub v: (Vec<f64>, Vec<f64>),
    pub o: (Vec<f64>, Vec<f64>),
    pub norm2: (Vec<f64>, Vec<f64>),
    pub ffn_gate: Vec<f64>,
    pub ffn_up: Vec<f64>,
    pub ffn_down: Vec<f64>,
    /// Gate weights, `d × width` with width 1 or d.
    pub gate_attn: Vec<f64>,
    pub gate_ffn: Vec<f64>,
    pub gate_width: usize,
    pub inner: usize,
}

fn oracle_layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * gain[i] + bias[i])
        .collect()
}

fn oracle_affine(x: &[f64], w: &[f64], b: Option<&[f64]>, n: usize) -> Vec<f64> {
    let mut y = matmul(x, w, 1, x.len(), n);
    if let Some(b) = b {
        for (y, b) in y.iter_mut().zip(b) {
            *y += b;
        }
    }
    y
}

/// One LiGR block over a single sequence `h: [len × d]`, one token at a
/// time, in inference mode. `pad[j]` marks padded key positions.
pub fn ligr_block(
    h: &[Vec<f64>],
    w: &LigrBlockWeights,
    n_heads: usize,
    causal: bool,
    pad: &[bool],
    eps: f64,
) -> Vec<Vec<f64>> {
    let l = h.len();
    let d = h[0].len();
    let dh = d / n_heads;
    let normed: Vec<Vec<f64>> = h.iter().map(|x| oracle_layer_norm(x, &w.norm1.0, &w.norm1.1, eps)).collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|x| oracle_affine(x, &w.q.0, Some(&w.q.1), d)).collect();
    let k: Vec<Vec<f64>> = normed.iter().map(|x| oracle_affine(x, &w.k.0, Some(&w.k.1), d)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|x| oracle_affine(x, &w.v.0, Some(&w.v.1), d)).collect();

    let mut out = Vec::with_capacity(l);
    for i in 0..l {
        let mut concat = vec![0.0; d];
        for head in 0..n_heads {
            let r = head * dh..(head + 1) * dh;
            let allowed: Vec<usize> = (0..l).filter(|&j| !pad[j] && (!causal || j <= i)).collect();
            if allowed.is_empty() {
                continue;
            }
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| {
                    q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (s, &j) in scores.iter().zip(&allowed) {
                let p = (s - m).exp() / z;
                for c in r.clone() {
                    concat[c] += p * v[j][c];
                }
            }
        }
        let attn = oracle_affine(&concat, &w.o.0, Some(&w.o.1), d);
        let g1 = oracle_affine(&h[i], &w.gate_attn, None, w.gate_width);
        let h1: Vec<f64> = (0..d)
            .map(|c| h[i][c] + attn[c] * sigmoid(g1[if w.gate_width == 1 { 0 } else { c }]))
            .collect();

        let n2 = oracle_layer_norm(&h1, &w.norm2.0, &w.norm2.1, eps);
        let a = oracle_affine(&n2, &w.ffn_gate, None, w.inner);
        let b = oracle_affine(&n2, &w.ffn_up, None, w.inner);
        let inner: Vec<f64> = a.iter().zip(&b).map(|(a, b)| a * sigmoid(*a) * b).collect();
        let f = oracle_affine(&inner, &w.ffn_down, None, d);
        let g2 = oracle_affine(&h1, &w.gate_ffn, None, w.gate_width);
        out.push(
            (0..d)
                .map(|c| h1[c] + f[c] * sigmoid(g2[if w.gate_width == 1 { 0 } else { c }]))
                .collect(),
        );
    }
    out
}
