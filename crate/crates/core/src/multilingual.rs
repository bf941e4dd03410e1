//! Shared cross-language vocabulary, the language-token trick (ALT), and
//! multilingual training runs with optional residual cutting (RC).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{languages, GlossEntry};
use crate::encoders::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::multitask::TaskSpec;
use crate::tokenizers::{self, lang_token, word_counts, TokenId, TokenizerModel, TokenizerSpec, Vocabulary, CLS};
use crate::train::{train_model, TrainOptions, TrainReport};

/// Glosses of several languages, each entry tagged with its code.
#[derive(Clone, Debug, PartialEq)]
pub struct MultilingualCorpus {
    languages: Vec<String>,
    entries: Vec<GlossEntry>,
}

impl MultilingualCorpus {
    /// `languages` fixes the configured set and its order; every entry
    /// must use one of them and every language needs at least one entry.
    pub fn new(languages: Vec<String>, entries: Vec<GlossEntry>) -> Result<Self> {
        if languages.is_empty() {
            return Err(Error::Multilingual("no languages configured".into()));
        }
        for e in &entries {
            if !languages.contains(&e.language) {
                return Err(Error::Multilingual(format!(
                    "entry {} uses unconfigured language {:?}",
                    e.id, e.language
                )));
            }
        }
        for l in &languages {
            if !entries.iter().any(|e| &e.language == l) {
                return Err(Error::Multilingual(format!("language {l:?} has an empty corpus")));
            }
        }
        Ok(MultilingualCorpus { languages, entries })
    }

    /// Languages taken from the entries in order of first appearance.
    pub fn from_entries(entries: Vec<GlossEntry>) -> Result<Self> {
        Self::new(languages(&entries), entries)
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn entries(&self) -> &[GlossEntry] {
        &self.entries
    }

    pub fn language_entries(&self, language: &str) -> Vec<GlossEntry> {
        self.entries.iter().filter(|e| e.language == language).cloned().collect()
    }
}

/// One tokenizer trained on every language's glosses together, with a
/// [LANG:xx] token per language.
pub fn build_shared_vocab(corpus: &MultilingualCorpus, spec: &TokenizerSpec) -> Result<TokenizerModel> {
    if corpus.languages().len() < 2 {
        return Err(Error::Multilingual(format!(
            "a shared vocabulary needs at least 2 languages, got {}",
            corpus.languages().len()
        )));
    }
    let counts = word_counts(corpus.entries().iter().map(|e| e.gloss.as_str()));
    let spec = TokenizerSpec {
        languages: corpus.languages().to_vec(),
        ..spec.clone()
    };
    tokenizers::train(&counts, &spec)
}

/// `[LANG:xx] ++ ids`, where `ids` starts with [CLS].
pub fn apply_alt(ids: &[TokenId], language: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let lang = vocab
        .lang_id(language)
        .ok_or_else(|| Error::Multilingual(format!("unknown language {language:?} (no {} token)", lang_token(language))))?;
    match ids.first() {
        Some(&first) if vocab.is_lang_id(first) => Err(Error::Multilingual(
            "sequence already starts with a language token".into(),
        )),
        Some(&CLS) => {
            let mut out = Vec::with_capacity(ids.len() + 1);
            out.push(lang);
            out.extend_from_slice(ids);
            Ok(out)
        }
        _ => Err(Error::Multilingual("sequence must start with [CLS]".into())),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tricks {
    pub alt: bool,
    pub rc: bool,
    /// Cut block for RC; defaults to `num_layers / 2`.
    pub rc_layer: Option<usize>,
}

impl Tricks {
    /// The encoder configuration these tricks produce.
    pub fn apply(&self, config: &EncoderConfig) -> Result<EncoderConfig> {
        let mut c = config.clone();
        if self.rc {
            if c.kind != EncoderKind::Transformer {
                return Err(Error::Config(format!(
                    "residual cutting needs the transformer kind, not {}",
                    c.kind
                )));
            }
            c.residual_cut_layer = Some(self.rc_layer.unwrap_or(c.num_layers / 2));
        } else if self.rc_layer.is_some() {
            return Err(Error::Config("rc_layer is set but rc is off".into()));
        }
        c.validate()?;
        Ok(c)
    }
}

/// Trains one model on the language-interleaved stream of `corpus`.
pub fn train_multilingual(
    config: &EncoderConfig,
    tricks: Tricks,
    corpus: &MultilingualCorpus,
    tasks: &[TaskSpec],
    tokenizer: TokenizerModel,
    dev: Option<&[GlossEntry]>,
    opts: &TrainOptions,
) -> Result<(TrainedModel, TrainReport)> {
    let config = tricks.apply(config)?;
    if tricks.alt {
        for l in corpus.languages() {
            if tokenizer.vocab().lang_id(l).is_none() {
                return Err(Error::Multilingual(format!("tokenizer has no token for language {l:?}")));
            }
        }
    }
    let mut model = TrainedModel::init(config, tasks, tokenizer, tricks.alt, opts.seed)?;
    let report = train_model(&mut model, corpus.entries(), dev, opts)?;
    Ok((model, report))
}

/// Where a multilingual run wrote its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub languages: Vec<String>,
    pub tricks: Tricks,
    pub tokenizer: String,
    pub model: String,
    pub reports: BTreeMap<String, String>,
}
