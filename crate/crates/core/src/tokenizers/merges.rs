//! Greedy pair-merging vocabulary induction shared by BPE and WordPiece.
//!
//! BPE picks the most frequent adjacent pair. WordPiece picks the pair
//! maximizing `freq(ab) / (freq(a) * freq(b))` and writes word-internal
//! symbols with a `##` prefix. Ties go to the lexicographically smallest
//! merged string, then the smallest left symbol.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use super::pretokenize::WordCounts;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const CONTINUATION: &str = "##";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum MergeRule {
    Bpe,
    WordPiece,
}

impl MergeRule {
    pub(crate) fn initial_symbols(self, word: &str) -> Vec<String> {
        word.chars()
            .enumerate()
            .map(|(i, c)| match self {
                MergeRule::WordPiece if i > 0 => format!("{CONTINUATION}{c}"),
                _ => c.to_string(),
            })
            .collect()
    }

    pub(crate) fn merged(self, a: &str, b: &str) -> String {
        match self {
            MergeRule::Bpe => format!("{a}{b}"),
            MergeRule::WordPiece => format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b)),
        }
    }

    fn min_pair_count(self) -> u64 {
        match self {
            // merging pairs seen once only spends vocabulary on hapaxes
            MergeRule::Bpe => 2,
            MergeRule::WordPiece => 1,
        }
    }
}

pub(crate) struct MergeOutput {
    pub vocab: Vocabulary,
    pub merges: Vec<(String, String)>,
    /// Final symbol sequence of every training word.
    pub segmentations: BTreeMap<String, Vec<String>>,
}

type Pair = (u32, u32);

struct State {
    rule: MergeRule,
    names: Vec<String>,
    ids: HashMap<String, u32>,
    words: Vec<Vec<u32>>,
    freqs: Vec<u64>,
    pair_counts: HashMap<Pair, u64>,
    pair_words: HashMap<Pair, HashSet<usize>>,
    symbol_counts: Vec<u64>,
}

impl State {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(s.to_string());
        self.ids.insert(s.to_string(), id);
        self.symbol_counts.push(0);
        id
    }

    fn add_word_stats(&mut self, w: usize, sign: i64) {
        let f = self.freqs[w];
        let word = &self.words[w];
        for &s in word {
            let c = &mut self.symbol_counts[s as usize];
            *c = c.checked_add_signed(sign * f as i64).expect("symbol count underflow");
        }
        for pair in word.windows(2).map(|p| (p[0], p[1])) {
            let c = self.pair_counts.entry(pair).or_insert(0);
            *c = c.checked_add_signed(sign * f as i64).expect("pair count underflow");
            if *c == 0 {
                self.pair_counts.remove(&pair);
            }
            if sign > 0 {
                self.pair_words.entry(pair).or_default().insert(w);
            }
        }
    }

    fn score(&self, pair: Pair, count: u64) -> f64 {
        match self.rule {
            MergeRule::Bpe => count as f64,
            MergeRule::WordPiece => {
                let a = self.symbol_counts[pair.0 as usize] as f64;
                let b = self.symbol_counts[pair.1 as usize] as f64;
                count as f64 / (a * b)
            }
        }
    }

    fn best_pair(&self) -> Option<(Pair, String)> {
        let mut best: Option<(Pair, f64, String)> = None;
        for (&pair, &count) in &self.pair_counts {
            if count < self.rule.min_pair_count() {
                continue;
            }
            let score = self.score(pair, count);
            let better = match &best {
                None => true,
                Some((bp, bs, bm)) => match score.partial_cmp(bs).expect("finite score") {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => {
                        let m = self.rule.merged(&self.names[pair.0 as usize], &self.names[pair.1 as usize]);
                        (m.as_str(), &self.names[pair.0 as usize])
                            < (bm.as_str(), &self.names[bp.0 as usize])
                    }
                },
            };
            if better {
                let m = self.rule.merged(&self.names[pair.0 as usize], &self.names[pair.1 as usize]);
                best = Some((pair, score, m));
            }
        }
        best.map(|(p, _, m)| (p, m))
    }

    fn apply(&mut self, pair: Pair, new: u32) {
        let mut affected: Vec<usize> = self
            .pair_words
            .remove(&pair)
            .unwrap_or_default()
            .into_iter()
            .collect();
        affected.sort_unstable();
        for w in affected {
            if !self.words[w].windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            self.add_word_stats(w, -1);
            let old = std::mem::take(&mut self.words[w]);
            self.words[w] = merge_sequence(&old, pair, new);
            self.add_word_stats(w, 1);
        }
    }
}

/// Left-to-right, non-overlapping replacement of `pair` by `new`.
fn merge_sequence(seq: &[u32], pair: Pair, new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(new);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Runs the merge loop until the vocabulary reaches `target_size` or no
/// eligible pair remains.
pub(crate) fn train_merges(
    rule: MergeRule,
    corpus: &WordCounts,
    target_size: usize,
    languages: &[String],
) -> Result<MergeOutput> {
    if corpus.is_empty() || corpus.values().all(|&f| f == 0) {
        return Err(Error::Tokenizer("empty training corpus".into()));
    }
    let mut vocab = Vocabulary::new(languages)?;
    let mut state = State {
        rule,
        names: Vec::new(),
        ids: HashMap::new(),
        words: Vec::new(),
        freqs: Vec::new(),
        pair_counts: HashMap::new(),
        pair_words: HashMap::new(),
        symbol_counts: Vec::new(),
    };

    let mut alphabet = BTreeSet::new();
    let mut word_keys = Vec::new();
    for (word, &freq) in corpus.iter().filter(|(w, f)| !w.is_empty() && **f > 0) {
        let symbols = rule.initial_symbols(word);
        alphabet.extend(symbols.iter().cloned());
        word_keys.push(word.clone());
        state.freqs.push(freq);
        state.words.push(Vec::new());
        let ids: Vec<u32> = symbols.iter().map(|s| state.intern(s)).collect();
        *state.words.last_mut().expect("just pushed") = ids;
    }
    let base = vocab.reserved_count() + alphabet.len();
    if target_size < base {
        return Err(Error::Tokenizer(format!(
            "target vocabulary size {target_size} is below reserved tokens plus base alphabet ({base})"
        )));
    }
    for s in &alphabet {
        vocab.push(s);
    }
    for w in 0..state.words.len() {
        state.add_word_stats(w, 1);
    }

    let mut merges = Vec::new();
    while vocab.len() < target_size {
        let Some((pair, merged)) = state.best_pair() else { break };
        let new = state.intern(&merged);
        vocab.push(&merged);
        merges.push((
            state.names[pair.0 as usize].clone(),
            state.names[pair.1 as usize].clone(),
        ));
        state.apply(pair, new);
    }

    let segmentations = word_keys
        .into_iter()
        .zip(&state.words)
        .map(|(k, w)| (k, w.iter().map(|&s| state.names[s as usize].clone()).collect()))
        .collect();
    Ok(MergeOutput {
        vocab,
        merges,
        segmentations,
    })
}

/// WordPiece pair scores `freq(ab) / (freq(a) * freq(b))` over the
/// initial (unmerged) segmentation of `corpus`, keyed by symbol pair.
pub fn wordpiece_initial_scores(corpus: &WordCounts) -> BTreeMap<(String, String), f64> {
    let mut symbol = HashMap::<String, u64>::new();
    let mut pairs = HashMap::<(String, String), u64>::new();
    for (word, &f) in corpus {
        let s = MergeRule::WordPiece.initial_symbols(word);
        for x in &s {
            *symbol.entry(x.clone()).or_default() += f;
        }
        for p in s.windows(2) {
            *pairs.entry((p[0].clone(), p[1].clone())).or_default() += f;
        }
    }
    pairs
        .into_iter()
        .map(|((a, b), c)| {
            let score = c as f64 / (symbol[&a] as f64 * symbol[&b] as f64);
            ((a, b), score)
        })
        .collect()
}
