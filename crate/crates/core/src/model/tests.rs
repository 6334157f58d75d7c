use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::oracles::{self, tol, LigrBlockWeights};

fn arch(style: BlockStyle) -> ArchConfig {
    ArchConfig {
        emb_dim: 8,
        n_blocks: 2,
        n_heads: 2,
        dropout_rate: 0.0,
        ff_emb_mult: 2,
        max_len: 6,
        block_style: style,
        ..ArchConfig::default()
    }
}

fn hidden_of<F: Float>(params: &ModelParams<F>, batch: &SeqBatch) -> Tensor<F> {
    let mut g = Graph::new(false);
    let enc = Encoder::bind(&mut g, params, 0);
    let out = enc.encode(&mut g, batch).unwrap();
    g.value(out.hidden).clone()
}

#[test]
fn left_padding_and_truncation() {
    let b = SeqBatch::left_padded(&[vec![3, 4], vec![1, 2, 3, 4, 5]], 3);
    assert_eq!(b.tokens, vec![0, 3, 4, 3, 4, 5]);
    assert_eq!(b.padding(), vec![true, false, false, false, false, false]);
    assert_eq!(b.row(1, 2), 5);
}

#[test]
fn vocab_tokens() {
    let v = Vocab::new(5, true);
    assert_eq!(v.token(0), 1);
    assert_eq!(v.item(5), Some(4));
    assert_eq!(v.item(0), None);
    assert_eq!(v.item(6), None);
    assert_eq!(v.mask(), Some(6));
    assert_eq!(v.size(), 7);
    assert_eq!(Vocab::new(5, false).size(), 6);
}

#[test]
fn embedding_is_item_plus_position() {
    let params = ModelParams::<f64>::init(&arch(BlockStyle::Ligr), Vocab::new(5, false), 1).unwrap();
    let batch = SeqBatch::left_padded(&[vec![2, 5]], 3);
    let mut g = Graph::new(false);
    let enc = Encoder::bind(&mut g, &params, 0);
    let h = enc.embed(&mut g, &batch).unwrap();
    let h = g.value(h);
    let e = params.get("item_emb").unwrap();
    let p = params.get("pos_emb").unwrap();
    for (pos, &tok) in batch.tokens.iter().enumerate() {
        for c in 0..8 {
            let want = e.row(tok)[c] + p.row(pos)[c];
            assert_eq!(h.row(pos)[c], want);
        }
    }
    assert!(e.row(0).iter().all(|&v| v == 0.0));
}

#[test]
fn rejects_overlong_and_unknown_tokens() {
    let params = ModelParams::<f32>::init(&arch(BlockStyle::Ligr), Vocab::new(5, false), 1).unwrap();
    let mut g = Graph::new(false);
    let enc = Encoder::bind(&mut g, &params, 0);
    let long = SeqBatch::left_padded(&[vec![1; 7]], 7);
    assert!(matches!(enc.encode(&mut g, &long), Err(Error::Contract(_))));
    let bad = SeqBatch::left_padded(&[vec![6]], 3);
    assert!(matches!(enc.encode(&mut g, &bad), Err(Error::Index { .. })));
}

#[test]
fn causal_outputs_ignore_future_tokens() {
    for style in [BlockStyle::Ligr, BlockStyle::PostlnSasrec] {
        let params = ModelParams::<f32>::init(&arch(style), Vocab::new(9, false), 3).unwrap();
        let a = hidden_of(&params, &SeqBatch::left_padded(&[vec![1, 2, 3, 4, 5, 6]], 6));
        let b = hidden_of(&params, &SeqBatch::left_padded(&[vec![1, 2, 3, 9, 8, 7]], 6));
        for pos in 0..3 {
            assert_eq!(a.row(pos), b.row(pos), "{style:?} position {pos}");
        }
        assert_ne!(a.row(4), b.row(4));
    }
}

#[test]
fn bidirectional_outputs_see_future_tokens() {
    let cfg = ArchConfig {
        attention: AttentionMode::Bidirectional,
        ..arch(BlockStyle::Ligr)
    };
    let params = ModelParams::<f32>::init(&cfg, Vocab::new(9, true), 3).unwrap();
    let a = hidden_of(&params, &SeqBatch::left_padded(&[vec![1, 2, 3, 4, 5, 6]], 6));
    let b = hidden_of(&params, &SeqBatch::left_padded(&[vec![1, 2, 3, 4, 5, 7]], 6));
    assert_ne!(a.row(0), b.row(0));
}

#[test]
fn padded_keys_do_not_affect_real_positions() {
    let params = ModelParams::<f32>::init(&arch(BlockStyle::Ligr), Vocab::new(9, false), 3).unwrap();
    let mut batch = SeqBatch::left_padded(&[vec![1, 2, 3]], 6);
    let a = hidden_of(&params, &batch);
    // corrupt the embedding of padding positions through the position table
    let mut p2 = params.clone();
    p2.get_mut("pos_emb").unwrap().data_mut()[..8].fill(5.0);
    let b = hidden_of(&p2, &batch);
    for pos in 3..6 {
        assert_eq!(a.row(pos), b.row(pos));
    }
    batch.tokens[0] = 0;
    assert_eq!(hidden_of(&params, &batch).row(5), a.row(5));
}

#[test]
fn closed_gates_make_ligr_block_the_identity() {
    let cfg = ArchConfig {
        gate_bias: true,
        ..arch(BlockStyle::Ligr)
    };
    let mut params = ModelParams::<f32>::init(&cfg, Vocab::new(9, false), 5).unwrap();
    for name in ["blocks.0.gate_attn.bias", "blocks.0.gate_ffn.bias"] {
        params.get_mut(name).unwrap().data_mut().fill(-1e4);
    }
    let batch = SeqBatch::left_padded(&[vec![1, 2, 3, 4]], 6);
    let mut g = Graph::new(false);
    let enc = Encoder::bind(&mut g, &params, 0);
    let h = enc.embed(&mut g, &batch).unwrap();
    let mask = enc.attention_mask(&batch);
    let out = enc.block_forward(&mut g, 0, h, &mask, &batch).unwrap();
    assert_eq!(g.value(out).data(), g.value(h).data());
}

fn block_weights(params: &ModelParams<f64>, j: usize) -> LigrBlockWeights {
    let get = |n: &str| params.get(&format!("blocks.{j}.{n}")).unwrap().data().to_vec();
    let cfg = params.config();
    LigrBlockWeights {
        norm1: (get("norm1.gain"), get("norm1.bias")),
        q: (get("attn.q.weight"), get("attn.q.bias")),
        k: (get("attn.k.weight"), get("attn.k.bias")),
        v: (get("attn.v.weight"), get("attn.v.bias")),
        o: (get("attn.o.weight"), get("attn.o.bias")),
        norm2: (get("norm2.gain"), get("norm2.bias")),
        ffn_gate: get("ffn.gate.weight"),
        ffn_up: get("ffn.up.weight"),
        ffn_down: get("ffn.down.weight"),
        gate_attn: get("gate_attn.weight"),
        gate_ffn: get("gate_ffn.weight"),
        gate_width: match cfg.gate {
            GateMode::PerToken => 1,
            GateMode::PerChannel => cfg.emb_dim,
        },
        inner: cfg.ff_emb_mult * cfg.emb_dim,
    }
}

#[test]
fn ligr_block_matches_straight_line_oracle() {
    for (gate, seed) in [(GateMode::PerToken, 11), (GateMode::PerChannel, 12)] {
        let cfg = ArchConfig {
            gate,
            ..arch(BlockStyle::Ligr)
        };
        let mut params = ModelParams::<f64>::init(&cfg, Vocab::new(9, false), seed).unwrap();
        // perturb norms so gain/bias are exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in params.tensors_mut() {
            if t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let batch = SeqBatch::left_padded(&[vec![4, 1, 7, 2], vec![9, 3, 3, 5, 6, 8]], 6);
        let mut g = Graph::new(false);
        let enc = Encoder::bind(&mut g, &params, 0);
        let h = enc.embed(&mut g, &batch).unwrap();
        let mask = enc.attention_mask(&batch);
        let out = enc.block_forward(&mut g, 0, h, &mask, &batch).unwrap();
        let pad = batch.padding();
        for b in 0..2 {
            let rows: Vec<Vec<f64>> = (0..6).map(|p| g.value(h).row(b * 6 + p).to_vec()).collect();
            let want = oracles::ligr_block(
                &rows,
                &block_weights(&params, 0),
                cfg.n_heads,
                true,
                &pad[b * 6..(b + 1) * 6],
                cfg.layer_norm_eps,
            );
            for p in 0..6 {
                for c in 0..8 {
                    let got = g.value(out).row(b * 6 + p)[c];
                    let report = oracles::OracleReport::new(format!("ligr/{gate:?}/{b}/{p}/{c}"), got, want[p][c]);
                    assert!(report.abs_dev < tol::LIGR_ABS, "{}", report.to_json());
                }
            }
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for style in [BlockStyle::Ligr, BlockStyle::PostlnSasrec] {
        let cfg = ArchConfig {
            emb_dim: 4,
            n_blocks: 1,
            max_len: 4,
            ..arch(style)
        };
        let params = ModelParams::<f64>::init(&cfg, Vocab::new(5, false), 21).unwrap();
        let batch = SeqBatch::left_padded(&[vec![1, 3, 5], vec![2, 4, 1, 5]], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let weights = Tensor::<f64>::from_fn(&[8, 4], |_| rng.random_range(-1.0..1.0));
        let loss_of = |p: &ModelParams<f64>| {
            let mut g = Graph::new(true);
            let enc = Encoder::bind(&mut g, p, 0);
            let out = enc.encode(&mut g, &batch).unwrap();
            let w = g.constant(weights.clone());
            let prod = g.mul(out.hidden, w).unwrap();
            let loss = g.sum_all(prod);
            (g, enc.vars().to_vec(), loss)
        };
        let (g, vars, loss) = loss_of(&params);
        let grads = g.backward(loss).unwrap();
        for (i, name) in params.names().iter().enumerate() {
            let analytic = grads.get(vars[i]).unwrap().data().to_vec();
            let numeric = oracles::finite_diff_grad(
                |x| {
                    let mut p = params.clone();
                    p.tensors_mut()[i].data_mut().copy_from_slice(x);
                    let (g, _, l) = loss_of(&p);
                    g.value(l).item()
                },
                params.tensors()[i].data(),
                tol::FD_STEP,
            );
            // the padding row is frozen, so only the catalog rows are compared
            let skip = if name == "item_emb" { 4 } else { 0 };
            assert!(analytic[..skip].iter().all(|&v| v == 0.0));
            let err = oracles::relative_error(&analytic[skip..], &numeric[skip..]);
            assert!(err < tol::GRAD_REL, "{style:?} {name}: {err}");
        }
    }
}

#[test]
fn scoring_uses_tied_embeddings() {
    let params = ModelParams::<f64>::init(&arch(BlockStyle::Ligr), Vocab::new(5, false), 2).unwrap();
    let hidden = encode_last(&params, &[vec![1, 2], vec![3]]).unwrap();
    assert_eq!(hidden.shape(), &[2, 8]);
    let full = score_full(&params, &hidden).unwrap();
    assert_eq!(full.shape(), &[2, 5]);
    let e = params.item_embeddings();
    for r in 0..2 {
        for item in 0..5u32 {
            let want: f64 = hidden.row(r).iter().zip(e.row(item as usize + 1)).map(|(a, b)| a * b).sum();
            assert!((full.row(r)[item as usize] - want).abs() < 1e-12);
        }
    }
    let some = score_gathered(&params, &hidden, &[vec![4, 0], vec![2]]).unwrap();
    assert!((some[0][0] - full.row(0)[4]).abs() < 1e-12);
    assert!((some[1][0] - full.row(1)[2]).abs() < 1e-12);
    assert!(matches!(
        score_gathered(&params, &hidden, &[vec![5], vec![]]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let params = ModelParams::<f32>::init(&arch(BlockStyle::PostlnSasrec), Vocab::new(7, true), 8).unwrap();
    params.save(&path, serde_json::json!({"epoch": 3})).unwrap();
    let (back, extra) = ModelParams::<f32>::load(&path).unwrap();
    assert_eq!(extra["epoch"], 3);
    assert_eq!(back.names(), params.names());
    for (a, b) in back.tensors().iter().zip(params.tensors()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(back.vocab(), params.vocab());
}

#[test]
fn invalid_arch_is_a_config_error() {
    let cfg = ArchConfig {
        emb_dim: 10,
        n_heads: 3,
        ..ArchConfig::default()
    };
    assert!(matches!(ModelParams::<f32>::init(&cfg, Vocab::new(3, false), 0), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_output_shape(b in 1usize..4, l in 1usize..7, ligr in any::<bool>(), seed in 0u64..1000) {
        let style = if ligr { BlockStyle::Ligr } else { BlockStyle::PostlnSasrec };
        let params = ModelParams::<f32>::init(&arch(style), Vocab::new(9, false), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seqs: Vec<Vec<usize>> = (0..b)
            .map(|_| (0..rng.random_range(1..=l)).map(|_| rng.random_range(1..=9)).collect())
            .collect();
        let h = hidden_of(&params, &SeqBatch::left_padded(&seqs, l));
        prop_assert_eq!(h.shape(), &[b * l, 8]);
        prop_assert!(h.all_finite());
    }
}
