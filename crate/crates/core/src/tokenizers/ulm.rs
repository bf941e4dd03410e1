//! Unigram language-model tokenizer training.
//!
//! Each word is segmented into independent pieces; a segmentation's
//! probability is the product of its piece probabilities. Training starts
//! from an oversized seed vocabulary of frequent substrings and alternates
//! hard EM (Viterbi segmentation, then re-estimation from piece counts)
//! with pruning of the pieces whose removal costs the least likelihood.
//!
//! Single characters are never removed and keep probability at least
//! [`CHAR_FLOOR`], so every word stays segmentable. The M-step is the exact
//! maximum-likelihood solution under that floor, which keeps the Viterbi
//! corpus likelihood non-decreasing across EM iterations.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::pretokenize::WordCounts;
use crate::error::{Error, Result};

/// Minimum probability of a single-character piece.
pub const CHAR_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UlmOptions {
    /// Seed vocabulary size as a multiple of the target size.
    pub seed_multiplier: usize,
    /// Fraction of removable pieces dropped per pruning round.
    pub prune_fraction: f64,
    /// EM iterations between pruning rounds.
    pub em_iterations: usize,
    /// Longest seed piece, in characters.
    pub max_piece_len: usize,
}

impl Default for UlmOptions {
    fn default() -> Self {
        UlmOptions {
            seed_multiplier: 4,
            prune_fraction: 0.2,
            em_iterations: 2,
            max_piece_len: 16,
        }
    }
}

impl UlmOptions {
    pub fn validate(&self) -> Result<()> {
        if self.seed_multiplier < 2 {
            return Err(Error::Tokenizer(format!(
                "seed_multiplier must be >= 2, got {}",
                self.seed_multiplier
            )));
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            return Err(Error::Tokenizer(format!(
                "prune_fraction must be in (0, 1), got {}",
                self.prune_fraction
            )));
        }
        if self.max_piece_len == 0 || self.em_iterations == 0 {
            return Err(Error::Tokenizer("max_piece_len and em_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Best segmentation of `word` under `logp`, with its log-probability.
/// Returns `None` when some character is not covered by any piece.
pub fn viterbi(
    word: &str,
    logp: &HashMap<String, f64>,
    max_piece_len: usize,
) -> Option<(Vec<String>, f64)> {
    viterbi_with(word, max_piece_len, |s| logp.get(s).copied())
}

pub(crate) fn viterbi_with<F>(word: &str, max_piece_len: usize, score: F) -> Option<(Vec<String>, f64)>
where
    F: Fn(&str) -> Option<f64>,
{
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    let mut best = vec![f64::NEG_INFINITY; n + 1];
    let mut back = vec![0usize; n + 1];
    best[0] = 0.0;
    let mut buf = String::new();
    for end in 1..=n {
        for start in end.saturating_sub(max_piece_len)..end {
            if best[start] == f64::NEG_INFINITY {
                continue;
            }
            buf.clear();
            buf.extend(&chars[start..end]);
            if let Some(lp) = score(&buf) {
                let cand = best[start] + lp;
                if cand > best[end] {
                    best[end] = cand;
                    back[end] = start;
                }
            }
        }
    }
    if best[n] == f64::NEG_INFINITY {
        return None;
    }
    let mut pieces = Vec::new();
    let mut end = n;
    while end > 0 {
        let start = back[end];
        pieces.push(chars[start..end].iter().collect());
        end = start;
    }
    pieces.reverse();
    Some((pieces, best[n]))
}

/// Exact maximum of `sum c_i log p_i` subject to `sum p_i = 1` and
/// `p_i >= CHAR_FLOOR` for single characters. Non-character pieces with
/// zero count are dropped.
fn normalize_with_floor(counts: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let is_char = |s: &str| s.chars().count() == 1;
    let live: Vec<(&String, f64)> = counts
        .iter()
        .filter(|(s, &c)| c > 0.0 || is_char(s))
        .map(|(s, &c)| (s, c))
        .collect();
    let mut clipped: Vec<bool> = live.iter().map(|(s, c)| is_char(s) && *c <= 0.0).collect();
    loop {
        let n_clipped = clipped.iter().filter(|&&c| c).count();
        let mass: f64 = live
            .iter()
            .zip(&clipped)
            .filter(|(_, &c)| !c)
            .map(|((_, c), _)| c)
            .sum();
        let lambda = mass / (1.0 - n_clipped as f64 * CHAR_FLOOR);
        let mut changed = false;
        for (i, (s, c)) in live.iter().enumerate() {
            if !clipped[i] && is_char(s) && c / lambda < CHAR_FLOOR {
                clipped[i] = true;
                changed = true;
            }
        }
        if !changed {
            return live
                .iter()
                .zip(&clipped)
                .map(|((s, c), &cl)| ((*s).clone(), if cl { CHAR_FLOOR } else { c / lambda }))
                .collect();
        }
    }
}

/// Step-by-step unigram trainer; [`train_pieces`] drives it to completion.
pub struct UlmTrainer {
    words: Vec<(String, u64)>,
    probs: BTreeMap<String, f64>,
    max_piece_len: usize,
}

impl UlmTrainer {
    /// Seeds the piece inventory with every character plus the
    /// `seed_size` most frequent multi-character substrings.
    pub fn seed(corpus: &WordCounts, seed_size: usize, max_piece_len: usize) -> Result<Self> {
        let words: Vec<(String, u64)> = corpus
            .iter()
            .filter(|(w, &f)| !w.is_empty() && f > 0)
            .map(|(w, &f)| (w.clone(), f))
            .collect();
        if words.is_empty() {
            return Err(Error::Tokenizer("empty training corpus".into()));
        }
        let mut chars = BTreeMap::<String, f64>::new();
        let mut subs = HashMap::<String, u64>::new();
        for (w, f) in &words {
            let cs: Vec<char> = w.chars().collect();
            for (i, c) in cs.iter().enumerate() {
                *chars.entry(c.to_string()).or_default() += *f as f64;
                for j in i + 2..=(i + max_piece_len).min(cs.len()) {
                    *subs.entry(cs[i..j].iter().collect()).or_default() += f;
                }
            }
        }
        let mut ranked: Vec<(String, u64)> = subs.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut counts = chars;
        for (s, c) in ranked.into_iter().take(seed_size) {
            counts.insert(s, c as f64);
        }
        Ok(UlmTrainer {
            words,
            probs: normalize_with_floor(&counts),
            max_piece_len,
        })
    }

    pub fn pieces(&self) -> &BTreeMap<String, f64> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    fn log_probs(&self) -> HashMap<String, f64> {
        self.probs.iter().map(|(s, p)| (s.clone(), p.ln())).collect()
    }

    /// Sum over words of `freq * log P(best segmentation)`.
    pub fn likelihood(&self) -> f64 {
        let lp = self.log_probs();
        self.words
            .iter()
            .map(|(w, f)| {
                let (_, score) = viterbi(w, &lp, self.max_piece_len).expect("characters always present");
                *f as f64 * score
            })
            .sum()
    }

    fn piece_counts(&self, lp: &HashMap<String, f64>) -> BTreeMap<String, f64> {
        let mut counts: BTreeMap<String, f64> = self.probs.keys().map(|k| (k.clone(), 0.0)).collect();
        for (w, f) in &self.words {
            let (pieces, _) = viterbi(w, lp, self.max_piece_len).expect("characters always present");
            for p in pieces {
                *counts.get_mut(&p).expect("piece from vocabulary") += *f as f64;
            }
        }
        counts
    }

    /// One hard-EM iteration.
    pub fn em_step(&mut self) {
        let lp = self.log_probs();
        let counts = self.piece_counts(&lp);
        self.probs = normalize_with_floor(&counts);
    }

    /// Removes up to `max_remove` multi-character pieces (at least one if
    /// any is removable), least likelihood loss first.
    pub fn prune(&mut self, fraction: f64, max_remove: usize) -> usize {
        let lp = self.log_probs();
        let counts = self.piece_counts(&lp);
        let mut losses: Vec<(f64, String)> = Vec::new();
        for (piece, &count) in &counts {
            if piece.chars().count() == 1 {
                continue;
            }
            let loss = if count == 0.0 {
                0.0
            } else {
                let (_, alt) = viterbi_with(piece, self.max_piece_len, |s| {
                    if s == piece {
                        None
                    } else {
                        lp.get(s).copied()
                    }
                })
                .expect("characters always present");
                count * (lp[piece] - alt)
            };
            losses.push((loss, piece.clone()));
        }
        losses.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let k = ((losses.len() as f64 * fraction).floor() as usize)
            .max(1)
            .min(max_remove)
            .min(losses.len());
        for (_, piece) in &losses[..k] {
            self.probs.remove(piece);
        }
        let remaining: BTreeMap<String, f64> = counts
            .into_iter()
            .filter(|(s, _)| self.probs.contains_key(s))
            .collect();
        self.probs = normalize_with_floor(&remaining);
        k
    }
}

/// Full training loop; returns pieces with their log-probabilities.
pub(crate) fn train_pieces(
    corpus: &WordCounts,
    piece_budget: usize,
    opts: &UlmOptions,
) -> Result<BTreeMap<String, f64>> {
    opts.validate()?;
    let mut trainer = UlmTrainer::seed(corpus, piece_budget * opts.seed_multiplier, opts.max_piece_len)?;
    let alphabet = trainer.pieces().keys().filter(|s| s.chars().count() == 1).count();
    if piece_budget < alphabet {
        return Err(Error::Tokenizer(format!(
            "piece budget {piece_budget} is below the alphabet size {alphabet}"
        )));
    }
    loop {
        for _ in 0..opts.em_iterations {
            trainer.em_step();
        }
        if trainer.len() <= piece_budget {
            break;
        }
        let excess = trainer.len() - piece_budget;
        trainer.prune(opts.prune_fraction, excess);
    }
    Ok(trainer.probs.into_iter().map(|(s, p)| (s, p.ln())).collect())
}
