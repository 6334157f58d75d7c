use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqrec_core::losses::{batch_loss, LossConfig, LossKind};
use seqrec_core::model::{ArchConfig, BlockStyle, Encoder, ModelParams, SeqBatch, Vocab};
use seqrec_core::negatives::{BatchPool, SamplerConfig, SamplerKind};
use seqrec_core::objectives::{build_shifted_sequence, TrainingInstance};
use seqrec_core::Graph;

const ITEMS: usize = 1000;
const LEN: usize = 50;
const BATCH: usize = 32;

fn instances() -> Vec<TrainingInstance> {
    (0..BATCH)
        .map(|u| {
            let seq: Vec<(u32, i64)> = (0..LEN + 1).map(|t| (((u * 31 + t * 17) % ITEMS) as u32, t as i64)).collect();
            build_shifted_sequence(&seq, LEN, Vocab::new(ITEMS, false)).unwrap()
        })
        .collect()
}

fn params(style: BlockStyle) -> ModelParams<f32> {
    let cfg = ArchConfig {
        emb_dim: 64,
        n_blocks: 2,
        n_heads: 2,
        max_len: LEN,
        block_style: style,
        ..ArchConfig::default()
    };
    ModelParams::init(&cfg, Vocab::new(ITEMS, false), 1).unwrap()
}

fn bench_forward(c: &mut Criterion) {
    let inst = instances();
    let inputs: Vec<Vec<usize>> = inst.iter().map(|i| i.input.clone()).collect();
    let batch = SeqBatch::left_padded(&inputs, LEN);
    let mut group = c.benchmark_group("encoder forward");
    for style in [BlockStyle::PostlnSasrec, BlockStyle::Ligr] {
        let p = params(style);
        group.bench_function(BenchmarkId::from_parameter(format!("{style:?}")), |b| {
            b.iter(|| {
                let mut g = Graph::new(false);
                let enc = Encoder::bind(&mut g, &p, 0);
                let out = enc.encode(&mut g, black_box(&batch)).unwrap();
                black_box(g.value(out.hidden).data()[0])
            })
        });
    }
    group.finish();
}

fn bench_step(c: &mut Criterion) {
    let inst = instances();
    let inputs: Vec<Vec<usize>> = inst.iter().map(|i| i.input.clone()).collect();
    let batch = SeqBatch::left_padded(&inputs, LEN);
    let mut group = c.benchmark_group("forward and backward");
    group.sample_size(20);
    for (kind, k) in [(LossKind::Bce, 1), (LossKind::SampledSoftmax, 256), (LossKind::Gbce, 256)] {
        let sampler = SamplerConfig {
            kind: SamplerKind::Uniform,
            k,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<_> = inst
            .iter()
            .map(|i| sampler.draw(ITEMS, &BatchPool::default(), &i.positives(), &mut rng).unwrap())
            .collect();
        let loss = LossConfig { kind, gbce_t: 0.75 }.resolve(k, ITEMS, false).unwrap();
        let p = params(BlockStyle::Ligr);
        group.bench_function(BenchmarkId::new(format!("{kind:?}"), k), |b| {
            b.iter(|| {
                let mut g = Graph::new(true);
                let enc = Encoder::bind(&mut g, &p, 0);
                let out = enc.encode(&mut g, &batch).unwrap();
                let (v, _) = batch_loss(&mut g, &enc, out.hidden, &inst, &draws, &loss).unwrap();
                g.backward(v).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forward, bench_step);
criterion_main!(benches);
