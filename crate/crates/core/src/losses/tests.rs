use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ArchConfig, AttentionMode, BlockStyle, Encoder, ModelParams, SeqBatch, Vocab};
use crate::objectives::Target;
use crate::oracles::{self, tol, OracleReport};

const SS: Loss = Loss {
    kind: LossKind::SampledSoftmax,
    beta: 1.0,
    logq: false,
};

fn all_losses() -> Vec<Loss> {
    vec![
        Loss {
            kind: LossKind::Bce,
            beta: 1.0,
            logq: false,
        },
        Loss {
            kind: LossKind::Gbce,
            beta: 0.625,
            logq: false,
        },
        SS,
        Loss { logq: true, ..SS },
    ]
}

#[test]
fn worked_values() {
    assert!((bce_loss(0.0, &[0.0]) - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!(bce_loss(40.0, &[-40.0]) < 1e-12);
    assert!((sampled_softmax_loss(0.0, &[0.0, 0.0], None) - 3f64.ln()).abs() < 1e-12);
    let (beta, clamped) = gbce_beta(128, 257, 0.75).unwrap();
    assert_eq!(beta, 0.625);
    assert!(!clamped);
    let l = gbce_loss(0.0, &[0.3], beta);
    assert!((l - (0.625 * 2f64.ln() + softplus(0.3))).abs() < 1e-12);
}

#[test]
fn gbce_degenerate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let s: f64 = rng.random_range(-20.0..20.0);
        let negs: Vec<f64> = (0..5).map(|_| rng.random_range(-20.0..20.0)).collect();
        let (beta, _) = gbce_beta(5, 100, 0.0).unwrap();
        assert_eq!(gbce_loss(s, &negs, beta).to_bits(), bce_loss(s, &negs).to_bits());
        let s32 = s as f32;
        let negs32: Vec<f32> = negs.iter().map(|&v| v as f32).collect();
        assert_eq!(gbce_loss(s32, &negs32, beta as f32).to_bits(), bce_loss(s32, &negs32).to_bits());
    }
    for t in [0.0, 0.3, 0.75, 1.0] {
        assert_eq!(gbce_beta(99, 100, t).unwrap(), (1.0, false));
    }
    assert_eq!(gbce_beta(500, 100, 0.75).unwrap(), (1.0, true));
    assert!(gbce_beta(1, 1, 0.5).is_err());
}

#[test]
fn losses_match_naive_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let s: f64 = rng.random_range(-20.0..20.0);
        let negs: Vec<f64> = (0..rng.random_range(1..6)).map(|_| rng.random_range(-20.0..20.0)).collect();
        let q: Vec<f64> = negs.iter().map(|_| rng.random_range(-8.0..-0.1)).collect();
        let pairs = [
            (bce_loss(s, &negs), oracles::naive_bce(s, &negs)),
            (sampled_softmax_loss(s, &negs, None), oracles::naive_sampled_softmax(s, &negs, None)),
            (sampled_softmax_loss(s, &negs, Some(&q)), oracles::naive_sampled_softmax(s, &negs, Some(&q))),
        ];
        for (i, (got, want)) in pairs.into_iter().enumerate() {
            let r = OracleReport::new(format!("naive/{case}/{i}"), got, want);
            assert!(r.abs_dev < tol::LOSS_ABS * want.abs().max(1.0), "{}", r.to_json());
        }
    }
}

#[test]
fn exhaustive_sampled_softmax_is_full_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let d = 6;
        let hidden: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let emb: Vec<Vec<f64>> = (0..20).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let target = rng.random_range(0..20);
        let dot = |e: &Vec<f64>| hidden.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
        let negs: Vec<f64> = (0..20).filter(|&i| i != target).map(|i| dot(&emb[i])).collect();
        let got = sampled_softmax_loss(dot(&emb[target]), &negs, None);
        let want = oracles::full_softmax_ce(&hidden, &emb, target).unwrap();
        let r = OracleReport::new(format!("exhaustive/{case}"), got, want);
        assert!(r.abs_dev < tol::LOSS_ABS, "{}", r.to_json());
    }
}

#[test]
fn constant_log_q_is_a_logit_shift() {
    let negs = [0.3, -1.2, 2.0];
    let m = 50.0f64;
    let q = [-(m.ln()); 3];
    let got = sampled_softmax_loss(0.5, &negs, Some(&q));
    let shifted: Vec<f64> = negs.iter().map(|s| s + m.ln()).collect();
    let want = oracles::full_softmax_ce_logits(&[&[0.5][..], &shifted[..]].concat(), 0);
    assert!((got - want).abs() < 1e-12);
    assert!(got > sampled_softmax_loss(0.5, &negs, None));
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for loss in all_losses() {
        for _ in 0..100 {
            let k = rng.random_range(1..5);
            let point: Vec<f64> = (0..=k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let q: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..-0.1)).collect();
            let mut d_neg = vec![0.0; k];
            let (_, d_pos) = loss.value_and_grad(point[0], &point[1..], &q, 1.0, &mut d_neg);
            let analytic = [vec![d_pos], d_neg].concat();
            let numeric = oracles::finite_diff_grad(|x| loss.value(x[0], &x[1..], &q), &point, tol::FD_STEP);
            let err = oracles::relative_error(&analytic, &numeric);
            assert!(err < tol::GRAD_REL, "{loss:?}: {err}");
            // monotone: decreasing in the positive, non-decreasing in negatives
            assert!(analytic[0] <= 0.0 && analytic[1..].iter().all(|&g| g >= 0.0));
        }
    }
}

#[test]
fn stable_over_wide_logit_range() {
    for loss in all_losses() {
        for s in [-80.0f32, -30.0, 0.0, 30.0, 80.0] {
            for n in [-80.0f32, 0.0, 80.0] {
                let mut d = [0.0f32; 2];
                let (v, dp) = loss.value_and_grad(s, &[n, -n], &[-3.0, -4.0], 1.0, &mut d);
                assert!(v.is_finite() && dp.is_finite() && d.iter().all(|x| x.is_finite()), "{loss:?} {s} {n}");
                assert!(v >= 0.0 || loss.kind == LossKind::SampledSoftmax && loss.logq);
            }
        }
    }
}

#[test]
fn aggregate_nested_mean() {
    assert_eq!(aggregate(&[vec![vec![2.5]]]).unwrap().loss, 2.5);
    assert_eq!(aggregate(&[vec![vec![1.0], vec![1.0]]]).unwrap().loss, 1.0);
    // instance A: positions {1,3} and {2} → (2 + 2)/2 = 2; instance B: {6} → 6
    let r = aggregate(&[vec![vec![1.0, 3.0], vec![2.0]], vec![vec![6.0]]]).unwrap();
    assert_eq!(r.loss, 4.0);
    assert_eq!(r.n_targets, 3);
    assert!(matches!(aggregate(&[vec![]]), Err(Error::Contract(_))));
}

fn tiny_params(style: BlockStyle, seed: u64) -> ModelParams<f64> {
    let cfg = ArchConfig {
        emb_dim: 4,
        n_blocks: 1,
        n_heads: 2,
        dropout_rate: 0.0,
        ff_emb_mult: 2,
        max_len: 4,
        block_style: style,
        ..ArchConfig::default()
    };
    ModelParams::init(&cfg, Vocab::new(8, false), seed).unwrap()
}

fn fixture() -> (Vec<TrainingInstance>, Vec<NegativeDraw>) {
    let tok = |v: &[usize]| v.to_vec();
    let instances = vec![
        TrainingInstance {
            input: tok(&[0, 1, 2, 3]),
            targets: vec![
                Target { position: 1, positives: vec![1] },
                Target { position: 3, positives: vec![3, 4, 5] },
            ],
            attention: AttentionMode::Causal,
        },
        TrainingInstance {
            input: tok(&[5, 6, 7, 8]),
            targets: vec![Target { position: 3, positives: vec![0] }],
            attention: AttentionMode::Causal,
        },
    ];
    let draws = vec![
        NegativeDraw { ids: vec![6, 7, 0], log_q: vec![-1.0, -2.0, -0.5], fallback: false },
        NegativeDraw { ids: vec![2, 2, 3], log_q: vec![-1.5, -1.5, -2.5], fallback: false },
    ];
    (instances, draws)
}

fn run_batch(params: &ModelParams<f64>, loss: &Loss) -> (f64, BatchLogits<f64>) {
    let (instances, draws) = fixture();
    let seqs: Vec<Vec<usize>> = instances.iter().map(|i| i.input.clone()).collect();
    let mut g = Graph::new(false);
    let enc = Encoder::bind(&mut g, params, 0);
    let out = enc.encode(&mut g, &SeqBatch::left_padded(&seqs, 4)).unwrap();
    let (v, n, logits) = batch_loss_with_logits(&mut g, &enc, out.hidden, &instances, &draws, loss).unwrap();
    assert_eq!(n, 3);
    (g.value(v).item(), logits)
}

#[test]
fn batch_loss_equals_recomputation_from_dumped_logits() {
    let params = tiny_params(BlockStyle::Ligr, 1);
    for loss in all_losses() {
        let (value, logits) = run_batch(&params, &loss);
        let (instances, draws) = fixture();
        let mut per: Vec<Vec<Vec<f64>>> = instances.iter().map(|i| vec![Vec::new(); i.targets.len()]).collect();
        for (e, &(b, s, _)) in logits.entries.iter().enumerate() {
            let r = logits.s_neg.shape()[1];
            let off = (b * r + s) * 3;
            let negs = &logits.s_neg.data()[off..off + 3];
            per[b][s].push(loss.value(logits.s_pos[e], negs, &draws[b].log_q));
        }
        let want = aggregate(&per).unwrap().loss;
        assert!((value - want).abs() < 1e-12, "{loss:?}");
    }
}

#[test]
fn batch_loss_single_target_exhaustive_is_full_softmax() {
    let params = tiny_params(BlockStyle::PostlnSasrec, 2);
    let seq = vec![1usize, 4, 2];
    let target = 5u32;
    let inst = TrainingInstance {
        input: vec![0, 1, 4, 2],
        targets: vec![Target { position: 3, positives: vec![target] }],
        attention: AttentionMode::Causal,
    };
    let negs: Vec<u32> = (0..8).filter(|&i| i != target).collect();
    let draw = NegativeDraw { log_q: vec![0.0; negs.len()], ids: negs, fallback: false };
    let mut g = Graph::new(false);
    let enc = Encoder::bind(&mut g, &params, 0);
    let out = enc.encode(&mut g, &SeqBatch::left_padded(std::slice::from_ref(&inst.input), 4)).unwrap();
    let (v, _) = batch_loss(&mut g, &enc, out.hidden, &[inst], &[draw], &SS).unwrap();

    let hidden = crate::model::encode_last(&params, &[seq]).unwrap();
    let e = params.item_embeddings();
    let emb: Vec<Vec<f64>> = (0..8).map(|i| e.row(i + 1).to_vec()).collect();
    let want = oracles::full_softmax_ce(hidden.row(0), &emb, target as usize).unwrap();
    assert!((g.value(v).item() - want).abs() < tol::LOSS_ABS);
}

#[test]
fn batch_loss_gradients_match_finite_differences() {
    for (style, loss) in [(BlockStyle::Ligr, SS), (BlockStyle::PostlnSasrec, all_losses()[1])] {
        let params = tiny_params(style, 3);
        let (instances, draws) = fixture();
        let seqs: Vec<Vec<usize>> = instances.iter().map(|i| i.input.clone()).collect();
        let build = |p: &ModelParams<f64>| {
            let mut g = Graph::new(true);
            let enc = Encoder::bind(&mut g, p, 0);
            let out = enc.encode(&mut g, &SeqBatch::left_padded(&seqs, 4)).unwrap();
            let (v, _) = batch_loss(&mut g, &enc, out.hidden, &instances, &draws, &loss).unwrap();
            let vars = enc.vars().to_vec();
            (g, vars, v)
        };
        let (g, vars, v) = build(&params);
        let grads = g.backward(v).unwrap();
        for (i, name) in params.names().iter().enumerate() {
            let analytic = grads.get(vars[i]).unwrap().data().to_vec();
            let numeric = oracles::finite_diff_grad(
                |x| {
                    let mut p = params.clone();
                    p.tensors_mut()[i].data_mut().copy_from_slice(x);
                    let (g, _, v) = build(&p);
                    g.value(v).item()
                },
                params.tensors()[i].data(),
                tol::FD_STEP,
            );
            let skip = if name == "item_emb" { 4 } else { 0 };
            let err = oracles::relative_error(&analytic[skip..], &numeric[skip..]);
            assert!(err < tol::GRAD_REL, "{style:?} {name}: {err}");
        }
    }
}

#[test]
fn batch_loss_contract_errors() {
    let params = tiny_params(BlockStyle::Ligr, 1);
    let (instances, mut draws) = fixture();
    draws[1].ids.pop();
    draws[1].log_q.pop();
    let mut g = Graph::new(false);
    let enc = Encoder::bind(&mut g, &params, 0);
    let seqs: Vec<Vec<usize>> = instances.iter().map(|i| i.input.clone()).collect();
    let out = enc.encode(&mut g, &SeqBatch::left_padded(&seqs, 4)).unwrap();
    assert!(matches!(
        batch_loss(&mut g, &enc, out.hidden, &instances, &draws, &SS),
        Err(Error::Contract(_))
    ));
}

proptest! {
    #[test]
    fn losses_non_negative_and_finite(s in -80.0f64..80.0, negs in proptest::collection::vec(-80.0f64..80.0, 1..8)) {
        for loss in &all_losses()[..3] {
            let v = loss.value(s, &negs, &vec![0.0; negs.len()]);
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}
