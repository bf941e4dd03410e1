//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdforge::synth::synthesize;
use rdforge::tokenizers::{word_counts, WordCounts};
use rdforge::{GlossEntry, SynthConfig, Tensor, TokenId};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

pub fn random_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// `batch` rows of random ids with lengths spread over `[len / 2, len]`.
pub fn random_batch(batch: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            let n = rng.random_range(len.div_ceil(2)..=len);
            (0..n).map(|_| rng.random_range(4..vocab)).collect()
        })
        .collect()
}

pub fn synthetic_glosses(entries: usize) -> Vec<GlossEntry> {
    synthesize(&SynthConfig {
        entries_per_language: entries,
        dims: 8,
        ..SynthConfig::default()
    })
    .expect("valid synth config")
}

pub fn gloss_word_counts(entries: &[GlossEntry]) -> WordCounts {
    word_counts(entries.iter().map(|e| e.gloss.as_str()))
}
