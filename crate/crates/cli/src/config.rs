//! Run configuration: one JSON document covering every command.
//!
//! All sections are optional and fall back to their defaults; unknown keys
//! are rejected. Command-line flags are merged on top, and the merged
//! result is what gets archived next to each artifact.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rdforge::tokenizers::UlmOptions;
use rdforge::train::DwaOptions;
use rdforge::{
    AdamWConfig, EncoderConfig, EncoderKind, SynthConfig, Task, TaskSpec, TokenizerKind, TokenizerSpec, TrainOptions,
    Tricks,
};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSettings {
    pub kind: EncoderKind,
    pub num_layers: usize,
    pub hidden_size: usize,
    /// Embedding width; defaults to `hidden_size`.
    pub input_size: Option<usize>,
    pub dropout: f64,
    pub num_heads: usize,
    pub residual_cut_layer: Option<usize>,
    pub max_len: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let base = EncoderConfig::new(EncoderKind::Elmo, 1);
        EncoderSettings {
            kind: base.kind,
            num_layers: base.num_layers,
            hidden_size: base.hidden_size,
            input_size: None,
            dropout: base.dropout,
            num_heads: base.num_heads,
            residual_cut_layer: base.residual_cut_layer,
            max_len: base.max_len,
        }
    }
}

impl EncoderSettings {
    pub fn to_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            kind: self.kind,
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            input_size: self.input_size.unwrap_or(self.hidden_size),
            dropout: self.dropout,
            num_heads: self.num_heads,
            residual_cut_layer: self.residual_cut_layer,
            vocab_size,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSettings {
    pub kind: TokenizerKind,
    pub vocab_size: usize,
    /// A trained tokenizer to reuse instead of training one.
    pub path: Option<PathBuf>,
    pub ulm: UlmOptions,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings {
            kind: TokenizerKind::WordPiece,
            vocab_size: 8000,
            path: None,
            ulm: UlmOptions::default(),
        }
    }
}

impl TokenizerSettings {
    pub fn spec(&self, languages: Vec<String>) -> TokenizerSpec {
        TokenizerSpec {
            kind: self.kind,
            vocab_size: self.vocab_size,
            languages,
            ulm: self.ulm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let t = TrainOptions::default();
        OptimizerSettings {
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            eps: t.optimizer.eps,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub languages: Vec<String>,
    pub entries_per_language: usize,
    pub dims: usize,
    pub lexicon_size: usize,
    pub tasks: Vec<Task>,
    pub target_scale: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSettings {
            languages: s.languages,
            entries_per_language: s.entries_per_language,
            dims: s.dims,
            lexicon_size: s.lexicon_size,
            tasks: s.tasks,
            target_scale: s.target_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderSettings,
    pub tokenizer: TokenizerSettings,
    /// Tasks and target dims; empty means every task found in the
    /// training data, at the data's dims.
    pub tasks: Vec<TaskSpec>,
    pub dwa: DwaOptions,
    pub tricks: Tricks,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
    /// Held out from the training file when no dev file is given.
    pub dev_fraction: Option<f64>,
    pub paths: Paths,
    pub synth: SynthSettings,
}

pub const DEFAULT_OUT_DIR: &str = "out";

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderSettings::default(),
            tokenizer: TokenizerSettings::default(),
            tasks: Vec::new(),
            dwa: DwaOptions::default(),
            tricks: Tricks::default(),
            optimizer: OptimizerSettings::default(),
            seed: TrainOptions::default().seed,
            dev_fraction: None,
            paths: Paths::default(),
            synth: SynthSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(vec![format!("config file: {e}")]))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    pub fn train_options(&self) -> TrainOptions {
        let o = &self.optimizer;
        TrainOptions {
            optimizer: AdamWConfig {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
            batch_size: o.batch_size,
            epochs: o.epochs,
            patience: o.patience,
            clip_norm: o.clip_norm,
            dwa: self.dwa,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            languages: s.languages.clone(),
            entries_per_language: s.entries_per_language,
            dims: s.dims,
            seed: self.seed,
            lexicon_size: s.lexicon_size,
            tasks: s.tasks.clone(),
            target_scale: s.target_scale,
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        // the vocabulary is only known after tokenizer training
        let enc = self.encoder.to_config(self.tokenizer.vocab_size.max(1));
        v.extend(enc.violations().into_iter().map(|m| format!("encoder: {m}")));
        let t = &self.tricks;
        if t.rc && enc.kind != EncoderKind::Transformer {
            v.push(format!("tricks.rc needs the transformer encoder, not {}", enc.kind));
        }
        if t.rc_layer.is_some() && !t.rc {
            v.push("tricks.rc_layer is set but tricks.rc is off".into());
        }
        if let Some(l) = t.rc_layer.filter(|&l| l >= enc.num_layers) {
            v.push(format!("tricks.rc_layer {l} is out of range for {} layers", enc.num_layers));
        }
        if self.tricks.rc && self.encoder.residual_cut_layer.is_some() {
            v.push("tricks.rc and encoder.residual_cut_layer are both set; use one".into());
        }
        if self.tokenizer.vocab_size == 0 {
            v.push("tokenizer.vocab_size must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.task) {
                v.push(format!("tasks: {} listed twice", t.task));
            }
            if t.dim == 0 {
                v.push(format!("tasks: {} has dim 0", t.task));
            }
        }
        // core names its own sections; the rest live under `optimizer` here
        v.extend(self.train_options().violations().into_iter().map(|m| {
            if m.starts_with("optimizer") || m.starts_with("dwa.") {
                m
            } else {
                format!("optimizer.{m}")
            }
        }));
        if let Some(f) = self.dev_fraction {
            if !(f > 0.0 && f < 1.0) {
                v.push(format!("dev_fraction must be in (0, 1), got {f}"));
            }
            if self.paths.dev.is_some() {
                v.push("dev_fraction and paths.dev are both set; use one".into());
            }
        }
        let s = &self.synth;
        if s.languages.is_empty() {
            v.push("synth.languages is empty".into());
        }
        if s.entries_per_language == 0 || s.dims == 0 {
            v.push("synth.entries_per_language and synth.dims must be positive".into());
        }
        if s.lexicon_size < 3 {
            v.push("synth.lexicon_size must be at least 3".into());
        }
        if s.tasks.is_empty() {
            v.push("synth.tasks is empty".into());
        }
        if !(s.target_scale.is_finite() && s.target_scale > 0.0) {
            v.push(format!("synth.target_scale must be positive, got {}", s.target_scale));
        }
        v
    }

    pub fn validate(&self) -> CliResult<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(v))
        }
    }

    /// The encoder as the trained model will see it, tricks applied.
    pub fn encoder_config(&self, vocab_size: usize) -> CliResult<EncoderConfig> {
        Ok(self.tricks.apply(&self.encoder.to_config(vocab_size))?)
    }
}
