//! Training objectives: turn a user's time-ordered interactions into one
//! left-padded input sequence plus the positions that carry targets.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DAY;
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Vocab};
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    ShiftedSequence,
    Mlm,
    NextAction,
    AllAction,
    DenseAllAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub mask_prob: f64,
    pub window_days: u32,
    pub n_anchors: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::ShiftedSequence,
            mask_prob: 0.2,
            window_days: 7,
            n_anchors: 8,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return Err(Error::Config(format!("mask_prob {} outside (0, 1)", self.mask_prob)));
        }
        if self.window_days < 1 {
            return Err(Error::Config("window_days must be >= 1".into()));
        }
        if self.n_anchors < 1 {
            return Err(Error::Config("n_anchors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionMode {
        match self.kind {
            ObjectiveKind::Mlm => AttentionMode::Bidirectional,
            _ => AttentionMode::Causal,
        }
    }

    /// Whether the vocabulary needs a mask token.
    pub fn uses_mask(&self) -> bool {
        self.kind == ObjectiveKind::Mlm
    }

    /// Builds this objective's instance for one user; `None` when the user
    /// cannot produce any target.
    pub fn build(&self, seq: &[(u32, i64)], max_len: usize, vocab: Vocab, seed: u64) -> Option<TrainingInstance> {
        match self.kind {
            ObjectiveKind::ShiftedSequence => build_shifted_sequence(seq, max_len, vocab),
            ObjectiveKind::Mlm => build_mlm(seq, max_len, vocab, self.mask_prob, seed),
            ObjectiveKind::NextAction => build_next_action(seq, max_len, vocab),
            ObjectiveKind::AllAction => build_all_action(seq, max_len, vocab, self.window_days),
            ObjectiveKind::DenseAllAction => {
                build_dense_all_action(seq, max_len, vocab, self.window_days, self.n_anchors, seed)
            }
        }
    }

    /// Validation instance: the whole training sequence as input and the
    /// held-out item as the single target at the last position. Under MLM
    /// the last slot is the mask token.
    pub fn validation_instance(&self, seq: &[u32], holdout: u32, max_len: usize, vocab: Vocab) -> TrainingInstance {
        let target = Target {
            position: max_len - 1,
            positives: vec![holdout],
        };
        match vocab.mask().filter(|_| self.uses_mask()) {
            Some(mask) => {
                let keep = &seq[seq.len().saturating_sub(max_len - 1)..];
                let mut tokens: Vec<usize> = keep.iter().map(|&i| vocab.token(i)).collect();
                tokens.push(mask);
                TrainingInstance {
                    input: left_pad(tokens, max_len),
                    targets: vec![target],
                    attention: AttentionMode::Bidirectional,
                }
            }
            None => TrainingInstance {
                input: pad_items(seq, max_len, vocab),
                targets: vec![target],
                attention: AttentionMode::Causal,
            },
        }
    }
}

/// A target position with its positive items (sorted, deduplicated).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Target {
    pub position: usize,
    pub positives: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingInstance {
    /// `max_len` model tokens, left-padded.
    pub input: Vec<usize>,
    /// Sorted by position.
    pub targets: Vec<Target>,
    pub attention: AttentionMode,
}

impl TrainingInstance {
    /// Union of all positive sets.
    pub fn positives(&self) -> BTreeSet<u32> {
        self.targets.iter().flat_map(|t| t.positives.iter().copied()).collect()
    }

    pub fn n_padding(&self) -> usize {
        self.input.iter().take_while(|&&t| t == Vocab::PAD).count()
    }
}

fn left_pad(mut tokens: Vec<usize>, len: usize) -> Vec<usize> {
    debug_assert!(tokens.len() <= len);
    let mut out = vec![Vocab::PAD; len - tokens.len()];
    out.append(&mut tokens);
    out
}

/// Last `len` items as left-padded tokens.
fn pad_items(items: &[u32], len: usize, vocab: Vocab) -> Vec<usize> {
    let tail = &items[items.len().saturating_sub(len)..];
    left_pad(tail.iter().map(|&i| vocab.token(i)).collect(), len)
}

/// Input = all but the last item, target at every position = the next item.
pub fn build_shifted_sequence(seq: &[(u32, i64)], max_len: usize, vocab: Vocab) -> Option<TrainingInstance> {
    if seq.len() < 2 {
        return None;
    }
    let n = seq.len();
    let m = (n - 1).min(max_len);
    let start = n - 1 - m;
    let items: Vec<u32> = seq[start..n - 1].iter().map(|s| s.0).collect();
    let offset = max_len - m;
    let targets = (0..m)
        .map(|i| Target {
            position: offset + i,
            positives: vec![seq[start + i + 1].0],
        })
        .collect();
    Some(TrainingInstance {
        input: pad_items(&items, max_len, vocab),
        targets,
        attention: AttentionMode::Causal,
    })
}

/// Random masking of the last `max_len` items; at least one position is
/// always masked.
pub fn build_mlm(seq: &[(u32, i64)], max_len: usize, vocab: Vocab, mask_prob: f64, seed: u64) -> Option<TrainingInstance> {
    let mask = vocab.mask()?;
    if seq.is_empty() {
        return None;
    }
    let tail = &seq[seq.len().saturating_sub(max_len)..];
    let mut rng = rng_for(seed, &[]);
    let mut masked: Vec<bool> = tail.iter().map(|_| rng.random_bool(mask_prob)).collect();
    if !masked.iter().any(|&m| m) {
        let forced = rng.random_range(0..tail.len());
        masked[forced] = true;
    }
    let offset = max_len - tail.len();
    let mut tokens = Vec::with_capacity(tail.len());
    let mut targets = Vec::new();
    for (i, (&(item, _), &m)) in tail.iter().zip(&masked).enumerate() {
        if m {
            tokens.push(mask);
            targets.push(Target {
                position: offset + i,
                positives: vec![item],
            });
        } else {
            tokens.push(vocab.token(item));
        }
    }
    Some(TrainingInstance {
        input: left_pad(tokens, max_len),
        targets,
        attention: AttentionMode::Bidirectional,
    })
}

/// Input = all but the last item, single target = the last item.
pub fn build_next_action(seq: &[(u32, i64)], max_len: usize, vocab: Vocab) -> Option<TrainingInstance> {
    if seq.len() < 2 {
        return None;
    }
    let items: Vec<u32> = seq[..seq.len() - 1].iter().map(|s| s.0).collect();
    Some(TrainingInstance {
        input: pad_items(&items, max_len, vocab),
        targets: vec![Target {
            position: max_len - 1,
            positives: vec![seq[seq.len() - 1].0],
        }],
        attention: AttentionMode::Causal,
    })
}

/// Everything in the user's trailing window is predicted from the last
/// position before it.
pub fn build_all_action(seq: &[(u32, i64)], max_len: usize, vocab: Vocab, window_days: u32) -> Option<TrainingInstance> {
    let last = seq.last()?.1;
    let boundary = last - i64::from(window_days) * DAY;
    let split = seq.partition_point(|s| s.1 < boundary);
    if split == 0 || split == seq.len() {
        return None;
    }
    let items: Vec<u32> = seq[..split].iter().map(|s| s.0).collect();
    let positives: BTreeSet<u32> = seq[split..].iter().map(|s| s.0).collect();
    Some(TrainingInstance {
        input: pad_items(&items, max_len, vocab),
        targets: vec![Target {
            position: max_len - 1,
            positives: positives.into_iter().collect(),
        }],
        attention: AttentionMode::Causal,
    })
}

/// Sampled anchor positions, each predicting the items that follow it
/// within `(t, t + window]`.
pub fn build_dense_all_action(
    seq: &[(u32, i64)],
    max_len: usize,
    vocab: Vocab,
    window_days: u32,
    n_anchors: usize,
    seed: u64,
) -> Option<TrainingInstance> {
    if seq.len() < 2 {
        return None;
    }
    let n = seq.len();
    let m = (n - 1).min(max_len);
    let start = n - 1 - m;
    let window = i64::from(window_days) * DAY;
    let mut rng = rng_for(seed, &[]);
    let mut anchors = index::sample(&mut rng, m, n_anchors.min(m)).into_vec();
    anchors.sort_unstable();
    let offset = max_len - m;
    let targets: Vec<Target> = anchors
        .into_iter()
        .filter_map(|a| {
            let t = seq[start + a].1;
            let positives: BTreeSet<u32> = seq[start + a + 1..]
                .iter()
                .take_while(|s| s.1 <= t + window)
                .filter(|s| s.1 > t)
                .map(|s| s.0)
                .collect();
            (!positives.is_empty()).then(|| Target {
                position: offset + a,
                positives: positives.into_iter().collect(),
            })
        })
        .collect();
    if targets.is_empty() {
        return None;
    }
    let items: Vec<u32> = seq[start..n - 1].iter().map(|s| s.0).collect();
    Some(TrainingInstance {
        input: pad_items(&items, max_len, vocab),
        targets,
        attention: AttentionMode::Causal,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::oracles;

    const V: Vocab = Vocab { n_items: 20, with_mask: true };

    fn seq(items: &[u32]) -> Vec<(u32, i64)> {
        items.iter().enumerate().map(|(t, &i)| (i, t as i64)).collect()
    }

    fn tok(items: &[u32]) -> Vec<usize> {
        items.iter().map(|&i| V.token(i)).collect()
    }

    fn target(position: usize, positives: &[u32]) -> Target {
        Target {
            position,
            positives: positives.to_vec(),
        }
    }

    #[test]
    fn shifted_sequence_unrolled() {
        let inst = build_shifted_sequence(&seq(&[10, 11, 12]), 4, V).unwrap();
        assert_eq!(inst.input, [vec![0, 0], tok(&[10, 11])].concat());
        assert_eq!(inst.targets, vec![target(2, &[11]), target(3, &[12])]);
        assert_eq!(inst.attention, AttentionMode::Causal);
        assert!(build_shifted_sequence(&seq(&[1]), 4, V).is_none());
    }

    #[test]
    fn shifted_sequence_truncates_to_most_recent() {
        let items: Vec<u32> = (0..9).collect();
        let inst = build_shifted_sequence(&seq(&items), 4, V).unwrap();
        assert_eq!(inst.input, tok(&[4, 5, 6, 7]));
        let want: Vec<Target> = (0..4).map(|p| target(p, &[p as u32 + 5])).collect();
        assert_eq!(inst.targets, want);
    }

    #[test]
    fn next_action_is_last_shifted_target() {
        let s = seq(&[3, 1, 4, 1, 5]);
        let next = build_next_action(&s, 3, V).unwrap();
        let shifted = build_shifted_sequence(&s, 3, V).unwrap();
        assert_eq!(next.input, shifted.input);
        assert_eq!(next.targets, vec![shifted.targets.last().unwrap().clone()]);
        let two = build_next_action(&seq(&[7, 8]), 3, V).unwrap();
        assert_eq!(two.input, [vec![0, 0], tok(&[7])].concat());
        assert_eq!(two.targets, vec![target(2, &[8])]);
    }

    #[test]
    fn mlm_masks_and_never_leaks() {
        let s = seq(&[1, 2, 3, 4, 5, 6]);
        let a = build_mlm(&s, 8, V, 0.5, 7).unwrap();
        assert_eq!(a, build_mlm(&s, 8, V, 0.5, 7).unwrap());
        assert_eq!(a.attention, AttentionMode::Bidirectional);
        assert!(!a.targets.is_empty());
        for t in &a.targets {
            assert_eq!(a.input[t.position], V.mask().unwrap());
        }
        let unmasked = a.input.iter().filter(|&&t| t != 0 && t != V.mask().unwrap()).count();
        assert_eq!(unmasked + a.targets.len(), 6);

        let one = build_mlm(&seq(&[9]), 4, V, 0.01, 1).unwrap();
        assert_eq!(one.targets, vec![target(3, &[9])]);
        let all = build_mlm(&s, 6, V, 0.999_999, 1).unwrap();
        assert_eq!(all.targets.len(), 6);
        assert!(build_mlm(&s, 6, Vocab::new(20, false), 0.2, 1).is_none());
    }

    #[test]
    fn all_action_boundary_arithmetic() {
        let s: Vec<(u32, i64)> = [(1, 0), (2, 1), (3, 9), (4, 10)].iter().map(|&(i, d)| (i, d * DAY)).collect();
        let inst = build_all_action(&s, 4, V, 2).unwrap();
        assert_eq!(inst.input, [vec![0, 0], tok(&[1, 2])].concat());
        assert_eq!(inst.targets, vec![target(3, &[3, 4])]);

        let same_day: Vec<(u32, i64)> = (0..4).map(|i| (i, 100 + i as i64)).collect();
        assert!(build_all_action(&same_day, 4, V, 7).is_none());

        let dup: Vec<(u32, i64)> = [(1, 0), (5, 9), (5, 10)].iter().map(|&(i, d)| (i, d * DAY)).collect();
        assert_eq!(build_all_action(&dup, 4, V, 2).unwrap().targets, vec![target(3, &[5])]);
    }

    #[test]
    fn dense_all_action_matches_interval_scan() {
        let days = [0, 1, 2, 4, 5, 9];
        let s: Vec<(u32, i64)> = days.iter().enumerate().map(|(i, &d)| (i as u32 + 1, d * DAY)).collect();
        let inst = build_dense_all_action(&s, 8, V, 3, 100, 5).unwrap();
        let offset = 8 - 5;
        let mut want = Vec::new();
        for a in 0..5 {
            let pos = oracles::brute_interval_positives(&s, a, 3 * DAY);
            if !pos.is_empty() {
                want.push(target(offset + a, &pos.into_iter().collect::<Vec<_>>()));
            }
        }
        assert_eq!(inst.targets, want);
        assert_eq!(inst.input, [vec![0; 3], tok(&[1, 2, 3, 4, 5])].concat());
    }

    #[test]
    fn dense_all_action_wide_window_and_sampling() {
        let s = seq(&[1, 2, 3, 4, 5]);
        let inst = build_dense_all_action(&s, 8, V, 365, 100, 1).unwrap();
        assert_eq!(inst.targets.len(), 4);
        for (a, t) in inst.targets.iter().enumerate() {
            let rest: BTreeSet<u32> = s[a + 1..].iter().map(|x| x.0).collect();
            assert_eq!(t.positives, rest.into_iter().collect::<Vec<_>>());
        }
        let few = build_dense_all_action(&s, 8, V, 365, 2, 1).unwrap();
        assert_eq!(few.targets.len(), 2);
        assert_eq!(few, build_dense_all_action(&s, 8, V, 365, 2, 1).unwrap());

        let same: Vec<(u32, i64)> = vec![(1, 5), (2, 5)];
        assert!(build_dense_all_action(&same, 8, V, 7, 4, 1).is_none());
    }

    #[test]
    fn validation_instances() {
        let cfg = ObjectiveConfig::default();
        let v = cfg.validation_instance(&[1, 2, 3], 9, 4, V);
        assert_eq!(v.input, [vec![0], tok(&[1, 2, 3])].concat());
        assert_eq!(v.targets, vec![target(3, &[9])]);
        let mlm = ObjectiveConfig {
            kind: ObjectiveKind::Mlm,
            ..cfg
        };
        let v = mlm.validation_instance(&[1, 2, 3, 4, 5], 9, 4, V);
        assert_eq!(v.input, [tok(&[3, 4, 5]), vec![V.mask().unwrap()]].concat());
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        let bad = ObjectiveConfig {
            mask_prob: 1.0,
            ..ObjectiveConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn instance_invariants(
            gaps in proptest::collection::vec(0i64..3 * DAY, 1..30),
            items in proptest::collection::vec(0u32..20, 30),
            kind in 0usize..5,
            seed in 0u64..1000,
        ) {
            let mut ts = 0;
            let s: Vec<(u32, i64)> = gaps.iter().zip(&items).map(|(g, &i)| { ts += g; (i, ts) }).collect();
            let kinds = [ObjectiveKind::ShiftedSequence, ObjectiveKind::Mlm, ObjectiveKind::NextAction, ObjectiveKind::AllAction, ObjectiveKind::DenseAllAction];
            let cfg = ObjectiveConfig { kind: kinds[kind], window_days: 2, n_anchors: 4, ..ObjectiveConfig::default() };
            let len = 12;
            if let Some(inst) = cfg.build(&s, len, V, seed) {
                prop_assert_eq!(inst.input.len(), len);
                prop_assert!(!inst.targets.is_empty());
                let pad = inst.n_padding();
                for w in inst.targets.windows(2) {
                    prop_assert!(w[0].position < w[1].position);
                }
                for t in &inst.targets {
                    prop_assert!(t.position >= pad && t.position < len);
                    prop_assert!(!t.positives.is_empty());
                }
                match cfg.kind {
                    ObjectiveKind::ShiftedSequence => prop_assert_eq!(inst.targets.len(), len - pad),
                    ObjectiveKind::NextAction | ObjectiveKind::AllAction => prop_assert_eq!(inst.targets.len(), 1),
                    _ => {}
                }
            }
        }
    }
}
