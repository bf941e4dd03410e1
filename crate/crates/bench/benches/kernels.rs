use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdforge::encoders::{encode_batch, init_encoder, ForwardCtx};
use rdforge::metrics::rank_scores;
use rdforge::tokenizers::train;
use rdforge::{EncoderConfig, EncoderKind, ParamStore, SeqBatch, Tape, TokenizerKind, TokenizerSpec};
use rdforge_bench::{gloss_word_counts, random_batch, random_tensor, random_vectors, synthetic_glosses};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        g.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.leaf(&a.clone().with_grad());
                let y = tape.leaf(&b.clone().with_grad());
                let p = tape.matmul(x, y).unwrap();
                let s = tape.sum(p).unwrap();
                tape.backward(s).unwrap()
            })
        });
    }
    g.finish();
}

fn encoders(c: &mut Criterion) {
    let mut g = c.benchmark_group("encoder_step");
    g.sample_size(10);
    let seqs = random_batch(32, 24, 2000, 3);
    let batch = SeqBatch::new(&seqs, 64).unwrap();
    for kind in EncoderKind::ALL {
        let config = EncoderConfig {
            num_layers: 2,
            hidden_size: 128,
            input_size: 128,
            dropout: 0.0,
            ..EncoderConfig::new(kind, 2000)
        };
        let mut store = ParamStore::new();
        init_encoder(&config, &mut ChaCha8Rng::seed_from_u64(4), &mut store).unwrap();
        g.bench_function(BenchmarkId::new("forward_backward", kind.name()), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let params = store.bind(&mut tape);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut ctx = ForwardCtx {
                    tape: &mut tape,
                    params: &params,
                    train: true,
                    rng: &mut rng,
                };
                let out = encode_batch(&config, &mut ctx, &batch).unwrap();
                let s = tape.sum(out).unwrap();
                tape.backward(s).unwrap()
            })
        });
    }
    g.finish();
}

fn tokenizers(c: &mut Criterion) {
    let mut g = c.benchmark_group("tokenizer_train");
    g.sample_size(10);
    let counts = gloss_word_counts(&synthetic_glosses(2000));
    for kind in [TokenizerKind::Bpe, TokenizerKind::WordPiece, TokenizerKind::Ulm] {
        let spec = TokenizerSpec::new(kind, 500);
        g.bench_function(BenchmarkId::from_parameter(kind), |bench| bench.iter(|| train(&counts, &spec).unwrap()));
    }
    g.finish();
}

fn rank(c: &mut Criterion) {
    let preds = random_vectors(1000, 300, 5);
    let refs = random_vectors(1000, 300, 6);
    c.bench_function("rank_scores/1000x300", |bench| bench.iter(|| rank_scores(&preds, &refs).unwrap()));
}

criterion_group!(benches, matmul, encoders, tokenizers, rank);
criterion_main!(benches);
