//! BCE, gBCE and sampled-softmax losses on (positive, negatives) logits, and
//! the batched graph loss used for training and validation.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::model::Encoder;
use crate::negatives::NegativeDraw;
use crate::objectives::TrainingInstance;
use crate::tensor::kernels::{sigmoid_scalar, softplus};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Gbce,
    SampledSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// gBCE calibration temperature.
    pub gbce_t: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::SampledSoftmax,
            gbce_t: 0.75,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gbce_t) {
            return Err(Error::Config(format!("loss.gbce_t {} outside [0, 1]", self.gbce_t)));
        }
        Ok(())
    }

    /// Fixes the run-dependent constants: `k` negatives per instance over a
    /// catalog of `n_items`.
    pub fn resolve(&self, k: usize, n_items: usize, logq: bool) -> Result<Loss> {
        self.validate()?;
        let beta = match self.kind {
            LossKind::Gbce => {
                let (beta, clamped) = gbce_beta(k, n_items, self.gbce_t)?;
                if clamped {
                    warn!("gBCE sampling rate clamped to 1 ({k} negatives, {n_items} items)");
                }
                beta
            }
            _ => 1.0,
        };
        Ok(Loss {
            kind: self.kind,
            beta,
            logq: logq && self.kind == LossKind::SampledSoftmax,
        })
    }
}

/// gBCE positive-term exponent `β = α(t(1 − 1/α) + 1/α)` with sampling rate
/// `α = k / (n_items − 1)`, clamped to 1. Returns whether clamping happened.
pub fn gbce_beta(k: usize, n_items: usize, t: f64) -> Result<(f64, bool)> {
    if n_items < 2 || k == 0 {
        return contract_err("gBCE needs k >= 1 and at least two items");
    }
    let raw = k as f64 / (n_items - 1) as f64;
    let alpha = raw.min(1.0);
    Ok((t * (alpha - 1.0) + 1.0, raw > 1.0))
}

/// `−ln σ(s⁺) − Σ ln(1 − σ(s⁻))`.
pub fn bce_loss<F: Float>(s_pos: F, s_negs: &[F]) -> F {
    gbce_loss(s_pos, s_negs, F::one())
}

/// `−β ln σ(s⁺) − Σ ln(1 − σ(s⁻))`.
pub fn gbce_loss<F: Float>(s_pos: F, s_negs: &[F], beta: F) -> F {
    s_negs.iter().fold(beta * softplus(-s_pos), |acc, &s| acc + softplus(s))
}

/// `−s⁺ + logsumexp(s⁺, s⁻ − log q)`.
pub fn sampled_softmax_loss<F: Float>(s_pos: F, s_negs: &[F], log_q: Option<&[F]>) -> F {
    let adj = |j: usize| match log_q {
        Some(q) => s_negs[j] - q[j],
        None => s_negs[j],
    };
    let m = (0..s_negs.len()).fold(s_pos, |m, j| m.max(adj(j)));
    let z = (0..s_negs.len()).fold((s_pos - m).exp(), |z, j| z + (adj(j) - m).exp());
    m + z.ln() - s_pos
}

/// A loss with its run constants fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub kind: LossKind,
    /// gBCE exponent (1 for other kinds).
    pub beta: f64,
    /// Whether negatives are corrected by `log q`.
    pub logq: bool,
}

impl Loss {
    pub fn value<F: Float>(&self, s_pos: F, s_negs: &[F], log_q: &[F]) -> F {
        match self.kind {
            LossKind::Bce => bce_loss(s_pos, s_negs),
            LossKind::Gbce => gbce_loss(s_pos, s_negs, F::of(self.beta)),
            LossKind::SampledSoftmax => sampled_softmax_loss(s_pos, s_negs, self.logq.then_some(log_q)),
        }
    }

    /// Loss value and its gradient; `d_negs` receives `∂ℓ/∂s⁻` scaled by
    /// `weight` (accumulated), the return is `(ℓ, ∂ℓ/∂s⁺)` unscaled.
    pub fn value_and_grad<F: Float>(&self, s_pos: F, s_negs: &[F], log_q: &[F], weight: F, d_negs: &mut [F]) -> (F, F) {
        match self.kind {
            LossKind::Bce | LossKind::Gbce => {
                let beta = F::of(self.beta);
                for (d, &s) in d_negs.iter_mut().zip(s_negs) {
                    *d += weight * sigmoid_scalar(s);
                }
                (gbce_loss(s_pos, s_negs, beta), -beta * sigmoid_scalar(-s_pos))
            }
            LossKind::SampledSoftmax => {
                let adj = |j: usize| if self.logq { s_negs[j] - log_q[j] } else { s_negs[j] };
                let m = (0..s_negs.len()).fold(s_pos, |m, j| m.max(adj(j)));
                let e_pos = (s_pos - m).exp();
                let z = (0..s_negs.len()).fold(e_pos, |z, j| z + (adj(j) - m).exp());
                for (j, d) in d_negs.iter_mut().enumerate() {
                    *d += weight * (adj(j) - m).exp() / z;
                }
                (m + z.ln() - s_pos, e_pos / z - F::one())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBatchResult {
    pub loss: f64,
    pub n_targets: usize,
}

/// Nested mean of per-positive losses: over each position's positives, then
/// over an instance's positions, then over instances. Instances without
/// targets are ignored.
pub fn aggregate(per_instance: &[Vec<Vec<f64>>]) -> Result<LossBatchResult> {
    let mut total = 0.0;
    let mut instances = 0usize;
    let mut n_targets = 0usize;
    for positions in per_instance {
        let non_empty: Vec<&Vec<f64>> = positions.iter().filter(|p| !p.is_empty()).collect();
        if non_empty.is_empty() {
            continue;
        }
        let inst: f64 = non_empty
            .iter()
            .map(|p| p.iter().sum::<f64>() / p.len() as f64)
            .sum::<f64>()
            / non_empty.len() as f64;
        total += inst;
        instances += 1;
        n_targets += non_empty.len();
    }
    if instances == 0 {
        return contract_err("batch has no targets");
    }
    Ok(LossBatchResult {
        loss: total / instances as f64,
        n_targets,
    })
}

/// Per-positive logits of one batch, kept for inspection.
#[derive(Debug, Clone)]
pub struct BatchLogits<F: Float> {
    /// `(instance, target index, positive item)` in the order of `s_pos`.
    pub entries: Vec<(usize, usize, u32)>,
    pub s_pos: Vec<F>,
    /// `[instances, max targets, k]` negative logits.
    pub s_neg: Tensor<F>,
}

/// Builds the batch loss on top of encoder outputs `hidden: [B*L, d]`.
/// Negatives are shared by all target positions of an instance. Returns the
/// scalar loss node and the number of target positions.
pub fn batch_loss<F: Float>(
    g: &mut Graph<F>,
    enc: &Encoder<'_, F>,
    hidden: Var,
    instances: &[TrainingInstance],
    draws: &[NegativeDraw],
    loss: &Loss,
) -> Result<(Var, usize)> {
    let (var, n, _) = batch_loss_with_logits(g, enc, hidden, instances, draws, loss)?;
    Ok((var, n))
}

pub fn batch_loss_with_logits<F: Float>(
    g: &mut Graph<F>,
    enc: &Encoder<'_, F>,
    hidden: Var,
    instances: &[TrainingInstance],
    draws: &[NegativeDraw],
    loss: &Loss,
) -> Result<(Var, usize, BatchLogits<F>)> {
    let b = instances.len();
    if b == 0 || draws.len() != b {
        return contract_err("batch loss needs one negative draw per instance");
    }
    let k = draws[0].ids.len();
    if k == 0 || draws.iter().any(|d| d.ids.len() != k || d.log_q.len() != k) {
        return contract_err("every instance needs the same non-zero number of negatives");
    }
    let len = instances[0].input.len();
    let d = enc.params().config().emb_dim;
    if g.shape(hidden) != [b * len, d] {
        return contract_err(format!(
            "hidden shape {:?} does not match {b} instances of length {len}",
            g.shape(hidden)
        ));
    }
    let r = instances.iter().map(|i| i.targets.len()).max().unwrap_or(0);
    let n_targets: usize = instances.iter().map(|i| i.targets.len()).sum();
    if n_targets == 0 {
        return contract_err("batch has no targets");
    }
    let active = instances.iter().filter(|i| !i.targets.is_empty()).count();

    // hidden rows of every target slot, padded per instance by repeating row 0
    let mut slot_rows = Vec::with_capacity(b * r);
    for (bi, inst) in instances.iter().enumerate() {
        for s in 0..r {
            let pos = inst.targets.get(s).map_or(0, |t| t.position);
            slot_rows.push(bi * len + pos);
        }
    }
    let h_sel = g.gather_rows(hidden, &slot_rows, None)?;
    let h_sel = g.reshape(h_sel, &[b, r, d])?;
    let neg_ids: Vec<u32> = draws.iter().flat_map(|dr| dr.ids.iter().copied()).collect();
    let negs = enc.item_rows(g, &neg_ids)?;
    let negs = g.reshape(negs, &[b, k, d])?;
    let s_neg = g.bmm_nt(h_sel, negs)?;

    let mut entries = Vec::new();
    let mut weights = Vec::new();
    for (bi, inst) in instances.iter().enumerate() {
        let n_pos = inst.targets.len() as f64;
        for (s, t) in inst.targets.iter().enumerate() {
            if t.positives.is_empty() {
                return contract_err("target with an empty positive set");
            }
            let w = 1.0 / (t.positives.len() as f64 * n_pos * active as f64);
            for &item in &t.positives {
                entries.push((bi, s, item));
                weights.push(F::of(w));
            }
        }
    }
    let pos_items: Vec<u32> = entries.iter().map(|e| e.2).collect();
    let pos_rows: Vec<usize> = entries.iter().map(|&(bi, s, _)| bi * r + s).collect();
    let h_flat = g.reshape(h_sel, &[b * r, d])?;
    let h_pos = g.gather_rows(h_flat, &pos_rows, None)?;
    let e_pos = enc.item_rows(g, &pos_items)?;
    let prod = g.mul(h_pos, e_pos)?;
    let s_pos = g.sum_last(prod);

    let log_q: Vec<Vec<F>> = draws.iter().map(|dr| dr.log_q.iter().map(|&q| F::of(q)).collect()).collect();
    let neg_vals = g.value(s_neg).data().to_vec();
    let pos_vals = g.value(s_pos).data().to_vec();
    let mut d_pos = vec![F::zero(); entries.len()];
    let mut d_neg = vec![F::zero(); b * r * k];
    let mut total = F::zero();
    for (e, &(bi, s, _)) in entries.iter().enumerate() {
        let off = (bi * r + s) * k;
        let (v, dp) = loss.value_and_grad(
            pos_vals[e],
            &neg_vals[off..off + k],
            &log_q[bi],
            weights[e],
            &mut d_neg[off..off + k],
        );
        total += weights[e] * v;
        d_pos[e] = weights[e] * dp;
    }
    let local = vec![
        Tensor::new(vec![entries.len()], d_pos)?,
        Tensor::new(vec![b, r, k], d_neg)?,
    ];
    let out = g.fused_scalar(&[s_pos, s_neg], total, local)?;
    let logits = BatchLogits {
        entries,
        s_pos: pos_vals,
        s_neg: g.value(s_neg).clone(),
    };
    Ok((out, n_targets, logits))
}

#[cfg(test)]
mod tests;
