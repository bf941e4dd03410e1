//! Seeded synthetic gloss datasets.
//!
//! Glosses come from a small template grammar over a per-language lexicon.
//! Each task's target is a fixed random linear map of the gloss's
//! bag-of-words counts, scaled by `1/sqrt(words)`, so the gloss fully
//! determines its targets.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::GlossEntry;
use crate::error::{Error, Result};
use crate::multitask::Task;
use crate::tokenizers::pretokenize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub languages: Vec<String>,
    pub entries_per_language: usize,
    pub dims: usize,
    pub seed: u64,
    /// Content words per language.
    pub lexicon_size: usize,
    pub tasks: Vec<Task>,
    /// Standard deviation of the target map's entries.
    pub target_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            languages: vec!["en".into()],
            entries_per_language: 256,
            dims: 32,
            seed: 7,
            lexicon_size: 24,
            tasks: Task::ALL.to_vec(),
            target_scale: 0.5,
        }
    }
}

const ONSETS: [&[&str]; 4] = [
    &["b", "d", "k", "l", "m", "n", "p", "r", "s", "t"],
    &["f", "g", "j", "l", "m", "n", "r", "s", "v", "z"],
    &["ch", "d", "k", "l", "n", "p", "r", "sh", "t", "y"],
    &["b", "g", "h", "k", "m", "n", "r", "s", "t", "w"],
];
const VOWELS: [&[&str]; 4] = [
    &["a", "e", "i", "o", "u"],
    &["a", "e", "o", "ou", "ai"],
    &["a", "i", "o", "u", "y"],
    &["a", "e", "i", "o", "ei"],
];
const FUNCTION_WORDS: [&str; 5] = ["a", "of", "that", "the", "to"];

struct Lexicon {
    nouns: Vec<String>,
    adjectives: Vec<String>,
    verbs: Vec<String>,
}

fn make_word<R: Rng>(rng: &mut R, style: usize) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| {
            let on = ONSETS[style].choose(rng).expect("non-empty");
            let v = VOWELS[style].choose(rng).expect("non-empty");
            format!("{on}{v}")
        })
        .collect()
}

fn make_lexicon<R: Rng>(rng: &mut R, style: usize, size: usize) -> Lexicon {
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let w = make_word(rng, style);
        if !words.contains(&w) && !FUNCTION_WORDS.contains(&w.as_str()) {
            words.push(w);
        }
    }
    let third = size.div_ceil(3);
    let verbs = words.split_off(2 * third.min(words.len() / 2));
    let adjectives = words.split_off(third.min(words.len() / 2));
    Lexicon {
        nouns: words,
        adjectives,
        verbs,
    }
}

fn make_gloss<R: Rng>(rng: &mut R, lex: &Lexicon) -> String {
    let pick = |rng: &mut R, v: &[String]| v.choose(rng).expect("non-empty").clone();
    let det = |rng: &mut R| if rng.random_bool(0.5) { "a" } else { "the" };
    let mut words: Vec<String> = Vec::new();
    match rng.random_range(0..4) {
        0 => {
            words.push(det(rng).into());
            words.push(pick(rng, &lex.adjectives));
            words.push(pick(rng, &lex.nouns));
        }
        1 => {
            words.push(det(rng).into());
            words.push(pick(rng, &lex.nouns));
            words.push("that".into());
            words.push(pick(rng, &lex.verbs));
            words.push(det(rng).into());
            words.push(pick(rng, &lex.nouns));
        }
        2 => {
            words.push("to".into());
            words.push(pick(rng, &lex.verbs));
            words.push(det(rng).into());
            words.push(pick(rng, &lex.adjectives));
            words.push(pick(rng, &lex.nouns));
        }
        _ => {
            words.push(det(rng).into());
            words.push(pick(rng, &lex.nouns));
            words.push("of".into());
            words.push(det(rng).into());
            words.push(pick(rng, &lex.adjectives));
            words.push(pick(rng, &lex.nouns));
        }
    }
    if rng.random_bool(0.3) {
        words.push(pick(rng, &lex.adjectives));
    }
    words.join(" ")
}

/// Generates `entries_per_language` entries for every language.
pub fn synthesize(config: &SynthConfig) -> Result<Vec<GlossEntry>> {
    if config.languages.is_empty() || config.entries_per_language == 0 || config.dims == 0 {
        return Err(Error::Config("synth needs languages, entries_per_language > 0 and dims > 0".into()));
    }
    if config.lexicon_size < 3 {
        return Err(Error::Config("lexicon_size must be at least 3".into()));
    }
    if config.tasks.is_empty() {
        return Err(Error::Config("synth needs at least one task".into()));
    }
    if !(config.target_scale.is_finite() && config.target_scale > 0.0) {
        return Err(Error::Config("target_scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.target_scale).expect("positive std");
    // one column of the target map per word type, drawn on first use
    let mut maps: BTreeMap<(Task, String), Vec<f64>> = BTreeMap::new();
    let mut map_rng = ChaCha8Rng::seed_from_u64(config.seed);
    map_rng.set_stream(1);

    let mut entries = Vec::new();
    for (li, lang) in config.languages.iter().enumerate() {
        let lex = make_lexicon(&mut rng, li % ONSETS.len(), config.lexicon_size);
        for i in 0..config.entries_per_language {
            let gloss = make_gloss(&mut rng, &lex);
            let words = pretokenize(&gloss);
            let norm = (words.len() as f64).sqrt();
            let mut e = GlossEntry::new(format!("{lang}-{i:05}"), gloss, lang.clone());
            for &task in &config.tasks {
                let mut v = vec![0.0; config.dims];
                for w in &words {
                    let col = maps
                        .entry((task, w.clone()))
                        .or_insert_with(|| (0..config.dims).map(|_| normal.sample(&mut map_rng)).collect());
                    for (a, b) in v.iter_mut().zip(col.iter()) {
                        *a += b;
                    }
                }
                v.iter_mut().for_each(|x| *x /= norm);
                e.set_target(task, Some(v));
            }
            entries.push(e);
        }
    }
    Ok(entries)
}
