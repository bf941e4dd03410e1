//! Subword tokenizers: BPE, WordPiece and unigram LM (ULM).
//!
//! All three share one [`Vocabulary`] layout and one pre-tokenizer
//! (lowercase, whitespace split, punctuation isolated). Encoded glosses are
//! `[LANG:xx]? [CLS]? pieces...`.

mod merges;
mod pretokenize;
pub mod ulm;
mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use merges::{wordpiece_initial_scores, CONTINUATION};
pub use pretokenize::{pretokenize, word_counts, WordCounts};
pub use ulm::{UlmOptions, UlmTrainer};
pub use vocab::{
    lang_token, TokenId, Vocabulary, CLS, CLS_TOKEN, PAD, PAD_TOKEN, SEP, SEP_TOKEN, UNK, UNK_TOKEN,
};

use crate::error::{Error, Result};
use merges::{train_merges, MergeRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Bpe,
    WordPiece,
    Ulm,
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerKind::Bpe => "bpe",
            TokenizerKind::WordPiece => "wordpiece",
            TokenizerKind::Ulm => "ulm",
        })
    }
}

impl FromStr for TokenizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpe" => Ok(TokenizerKind::Bpe),
            "wordpiece" => Ok(TokenizerKind::WordPiece),
            "ulm" | "unigram" => Ok(TokenizerKind::Ulm),
            other => Err(Error::Tokenizer(format!("unknown tokenizer kind {other:?}"))),
        }
    }
}

/// Everything needed to train any of the three tokenizer kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    pub kind: TokenizerKind,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default)]
    pub languages: Vec<String>,
    #[serde(default)]
    pub ulm: UlmOptions,
}

fn default_vocab_size() -> usize {
    8000
}

impl TokenizerSpec {
    pub fn new(kind: TokenizerKind, vocab_size: usize) -> Self {
        TokenizerSpec {
            kind,
            vocab_size,
            languages: Vec::new(),
            ulm: UlmOptions::default(),
        }
    }
}

/// A trained subword model.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerModel {
    kind: TokenizerKind,
    vocab: Vocabulary,
    merges: Vec<(String, String)>,
    /// Log-probabilities aligned with vocabulary ids (ULM only; reserved
    /// entries are 0 and unused).
    scores: Vec<f64>,
    merge_ranks: HashMap<(String, String), usize>,
    max_piece_len: usize,
}

pub fn train(corpus: &WordCounts, spec: &TokenizerSpec) -> Result<TokenizerModel> {
    match spec.kind {
        TokenizerKind::Bpe | TokenizerKind::WordPiece => {
            let rule = if spec.kind == TokenizerKind::Bpe {
                MergeRule::Bpe
            } else {
                MergeRule::WordPiece
            };
            let out = train_merges(rule, corpus, spec.vocab_size, &spec.languages)?;
            let merges = if spec.kind == TokenizerKind::Bpe { out.merges } else { Vec::new() };
            TokenizerModel::assemble(spec.kind, out.vocab, merges, Vec::new())
        }
        TokenizerKind::Ulm => {
            let mut vocab = Vocabulary::new(&spec.languages)?;
            let budget = spec.vocab_size.checked_sub(vocab.reserved_count()).ok_or_else(|| {
                Error::Tokenizer(format!(
                    "target vocabulary size {} is below the reserved token count",
                    spec.vocab_size
                ))
            })?;
            let pieces = ulm::train_pieces(corpus, budget, &spec.ulm)?;
            let mut scores = vec![0.0; vocab.reserved_count()];
            let mut ordered: Vec<(String, f64)> = pieces.into_iter().collect();
            // characters first, then by descending probability
            ordered.sort_by(|a, b| {
                let (ca, cb) = (a.0.chars().count() == 1, b.0.chars().count() == 1);
                cb.cmp(&ca)
                    .then_with(|| b.1.total_cmp(&a.1))
                    .then_with(|| a.0.cmp(&b.0))
            });
            for (piece, lp) in ordered {
                vocab.push(&piece);
                scores.push(lp);
            }
            TokenizerModel::assemble(TokenizerKind::Ulm, vocab, Vec::new(), scores)
        }
    }
}

pub fn train_bpe(corpus: &WordCounts, target_vocab_size: usize) -> Result<TokenizerModel> {
    train(corpus, &TokenizerSpec::new(TokenizerKind::Bpe, target_vocab_size))
}

/// BPE training that also returns each training word's final segmentation.
pub fn train_bpe_with_segmentations(
    corpus: &WordCounts,
    target_vocab_size: usize,
) -> Result<(TokenizerModel, BTreeMap<String, Vec<String>>)> {
    let out = train_merges(MergeRule::Bpe, corpus, target_vocab_size, &[])?;
    let model = TokenizerModel::assemble(TokenizerKind::Bpe, out.vocab, out.merges, Vec::new())?;
    Ok((model, out.segmentations))
}

pub fn train_wordpiece(corpus: &WordCounts, target_vocab_size: usize) -> Result<TokenizerModel> {
    train(corpus, &TokenizerSpec::new(TokenizerKind::WordPiece, target_vocab_size))
}

pub fn train_ulm(
    corpus: &WordCounts,
    target_vocab_size: usize,
    seed_multiplier: usize,
    prune_fraction: f64,
) -> Result<TokenizerModel> {
    let spec = TokenizerSpec {
        ulm: UlmOptions {
            seed_multiplier,
            prune_fraction,
            ..UlmOptions::default()
        },
        ..TokenizerSpec::new(TokenizerKind::Ulm, target_vocab_size)
    };
    train(corpus, &spec)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerFile {
    kind: TokenizerKind,
    vocab: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    merges: Option<Vec<[String; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f64>>,
    languages: Vec<String>,
}

impl TokenizerModel {
    fn assemble(
        kind: TokenizerKind,
        vocab: Vocabulary,
        merges: Vec<(String, String)>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        let merge_ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        let max_piece_len = vocab.tokens()[vocab.reserved_count()..]
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        let model = TokenizerModel {
            kind,
            vocab,
            merges,
            scores,
            merge_ranks,
            max_piece_len,
        };
        model.validate()?;
        Ok(model)
    }

    /// Builds a model directly from an id-ordered token list (after the
    /// reserved block). ULM models take one log-probability per token.
    pub fn from_pieces(
        kind: TokenizerKind,
        pieces: &[&str],
        languages: &[String],
        merges: Vec<(String, String)>,
        log_probs: Option<&[f64]>,
    ) -> Result<Self> {
        let mut vocab = Vocabulary::new(languages)?;
        for p in pieces {
            vocab.push(p);
        }
        let scores = match log_probs {
            Some(lp) => {
                let mut s = vec![0.0; vocab.reserved_count()];
                s.extend_from_slice(lp);
                s
            }
            None => Vec::new(),
        };
        TokenizerModel::assemble(kind, vocab, merges, scores)
    }

    fn validate(&self) -> Result<()> {
        let reserved = self.vocab.reserved_count();
        match self.kind {
            TokenizerKind::Bpe => {
                let mut known: HashSet<String> = self.vocab.tokens()[reserved..]
                    .iter()
                    .filter(|t| t.chars().count() == 1)
                    .cloned()
                    .collect();
                for (a, b) in &self.merges {
                    if !known.contains(a) || !known.contains(b) {
                        return Err(Error::Tokenizer(format!(
                            "merge ({a}, {b}) references a token not derivable from earlier merges"
                        )));
                    }
                    let m = format!("{a}{b}");
                    if self.vocab.id(&m).is_none() {
                        return Err(Error::Tokenizer(format!("merge result {m:?} missing from vocabulary")));
                    }
                    known.insert(m);
                }
                if !self.scores.is_empty() {
                    return Err(Error::Tokenizer("BPE models carry no scores".into()));
                }
            }
            TokenizerKind::WordPiece => {
                if !self.merges.is_empty() || !self.scores.is_empty() {
                    return Err(Error::Tokenizer("WordPiece models carry no merges or scores".into()));
                }
            }
            TokenizerKind::Ulm => {
                if self.scores.len() != self.vocab.len() {
                    return Err(Error::Tokenizer(format!(
                        "ULM model has {} scores for {} tokens",
                        self.scores.len(),
                        self.vocab.len()
                    )));
                }
                let lp = &self.scores[reserved..];
                if lp.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Tokenizer("ULM log-probabilities must be finite".into()));
                }
                let total: f64 = lp.iter().map(|x| x.exp()).sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::Tokenizer(format!(
                        "ULM probabilities sum to {total}, expected 1"
                    )));
                }
                if !self.merges.is_empty() {
                    return Err(Error::Tokenizer("ULM models carry no merges".into()));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn languages(&self) -> &[String] {
        self.vocab.languages()
    }

    /// Log-probability of a ULM piece.
    pub fn log_prob(&self, token: &str) -> Option<f64> {
        if self.kind != TokenizerKind::Ulm {
            return None;
        }
        let id = self.vocab.id(token)?;
        (!self.vocab.is_reserved(id)).then(|| self.scores[id])
    }

    fn piece_id(&self, piece: &str) -> Option<TokenId> {
        self.vocab.id(piece).filter(|&id| !self.vocab.is_reserved(id))
    }

    /// Pieces of one pre-tokenized word.
    pub fn segment_word(&self, word: &str) -> Vec<TokenId> {
        match self.kind {
            TokenizerKind::Bpe => self.segment_bpe(word),
            TokenizerKind::WordPiece => self.segment_wordpiece(word),
            TokenizerKind::Ulm => self.segment_ulm(word),
        }
    }

    fn segment_bpe(&self, word: &str) -> Vec<TokenId> {
        // unknown characters become fixed [UNK] units that never merge
        let mut symbols: Vec<Option<String>> = word
            .chars()
            .map(|c| {
                let s = c.to_string();
                self.piece_id(&s).map(|_| s)
            })
            .collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                if let (Some(a), Some(b)) = (&symbols[i], &symbols[i + 1]) {
                    if let Some(&rank) = self.merge_ranks.get(&(a.clone(), b.clone())) {
                        if best.is_none_or(|(r, _)| rank < r) {
                            best = Some((rank, i));
                        }
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && symbols[i].as_deref() == Some(a.as_str())
                    && symbols[i + 1].as_deref() == Some(b.as_str())
                {
                    out.push(Some(format!("{a}{b}")));
                    i += 2;
                } else {
                    out.push(symbols[i].take());
                    i += 1;
                }
            }
            symbols = out;
        }
        symbols
            .into_iter()
            .map(|s| s.and_then(|s| self.piece_id(&s)).unwrap_or(UNK))
            .collect()
    }

    fn segment_wordpiece(&self, word: &str) -> Vec<TokenId> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        let mut buf = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.extend(&chars[start..end]);
                if let Some(id) = self.piece_id(&buf) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        out
    }

    fn segment_ulm(&self, word: &str) -> Vec<TokenId> {
        let min_lp = self.scores[self.vocab.reserved_count()..]
            .iter()
            .cloned()
            .fold(0.0, f64::min);
        let unk_lp = min_lp - 10.0;
        let score = |s: &str| match self.piece_id(s) {
            Some(id) => Some(self.scores[id]),
            // a lone uncovered character falls back to [UNK]
            None if s.chars().count() == 1 => Some(unk_lp),
            None => None,
        };
        let (pieces, _) = ulm::viterbi_with(word, self.max_piece_len, score).unwrap_or_default();
        pieces
            .iter()
            .map(|p| self.piece_id(p).unwrap_or(UNK))
            .collect()
    }

    /// Encodes a gloss as `[LANG:xx]? [CLS]? pieces...`.
    pub fn encode(&self, text: &str, language: Option<&str>, prepend_cls: bool) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        if let Some(code) = language {
            let id = self
                .vocab
                .lang_id(code)
                .ok_or_else(|| Error::Tokenizer(format!("language {code:?} is not configured")))?;
            ids.push(id);
        }
        if prepend_cls {
            ids.push(CLS);
        }
        for w in pretokenize(text) {
            ids.extend(self.segment_word(&w));
        }
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode) for in-alphabet training words.
    /// Reserved tokens are dropped. WordPiece continuation pieces are fused
    /// onto the previous piece and words are space-separated; BPE and ULM
    /// pieces carry no word-boundary marker and are concatenated.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or_else(|| {
                Error::Tokenizer(format!("token id {id} out of range for vocabulary of {}", self.vocab.len()))
            })?;
            if self.vocab.is_reserved(id) {
                continue;
            }
            match self.kind {
                TokenizerKind::WordPiece => match tok.strip_prefix(CONTINUATION) {
                    Some(rest) => out.push_str(rest),
                    None => {
                        if !out.is_empty() {
                            out.push(' ');
                        }
                        out.push_str(tok);
                    }
                },
                _ => out.push_str(tok),
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile {
            kind: self.kind,
            vocab: self.vocab.tokens().to_vec(),
            merges: (self.kind == TokenizerKind::Bpe)
                .then(|| self.merges.iter().map(|(a, b)| [a.clone(), b.clone()]).collect()),
            scores: (self.kind == TokenizerKind::Ulm).then(|| self.scores.clone()),
            languages: self.vocab.languages().to_vec(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses and validates a tokenizer document.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)
            .map_err(|e| Error::Tokenizer(format!("invalid tokenizer document: {e}")))?;
        let vocab = Vocabulary::from_tokens(file.vocab, &file.languages)?;
        let merges = file
            .merges
            .unwrap_or_default()
            .into_iter()
            .map(|[a, b]| (a, b))
            .collect();
        TokenizerModel::assemble(file.kind, vocab, merges, file.scores.unwrap_or_default())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TokenizerModel::from_json(&std::fs::read_to_string(path)?)
    }
}
