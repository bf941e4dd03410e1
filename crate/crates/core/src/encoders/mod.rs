//! Gloss encoders: a token-id sequence in, one pooled vector out.
//!
//! All five kinds read the final-layer state at position 0. Unidirectional
//! recurrent stacks run right to left so that position 0 has seen the whole
//! gloss.

mod checkpoint;
mod elmo;
mod recurrent;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{init_embedding, Binding, ParamStore, Tape, Tensor, Var};
use crate::tokenizers::{TokenId, PAD};

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_checkpoint_bytes, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use elmo::{scalar_mix, scalar_mix_weights};
pub use recurrent::{lstm_layer, rnn_layer, Direction, RecurrentWeights};

pub const EMBED_PARAM: &str = "enc.embed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Rnn,
    Lstm,
    BiRnn,
    Elmo,
    Transformer,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 5] = [
        EncoderKind::Rnn,
        EncoderKind::Lstm,
        EncoderKind::BiRnn,
        EncoderKind::Elmo,
        EncoderKind::Transformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Rnn => "rnn",
            EncoderKind::Lstm => "lstm",
            EncoderKind::BiRnn => "birnn",
            EncoderKind::Elmo => "elmo",
            EncoderKind::Transformer => "transformer",
        }
    }

    pub fn is_bidirectional(self) -> bool {
        matches!(self, EncoderKind::BiRnn | EncoderKind::Elmo)
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncoderKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown encoder kind {s:?}")))
    }
}

fn default_layers() -> usize {
    4
}
fn default_size() -> usize {
    256
}
fn default_dropout() -> f64 {
    0.3
}
fn default_heads() -> usize {
    4
}
fn default_max_len() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    #[serde(default = "default_layers")]
    pub num_layers: usize,
    #[serde(default = "default_size")]
    pub hidden_size: usize,
    #[serde(default = "default_size")]
    pub input_size: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default)]
    pub residual_cut_layer: Option<usize>,
    pub vocab_size: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, vocab_size: usize) -> Self {
        EncoderConfig {
            kind,
            num_layers: default_layers(),
            hidden_size: default_size(),
            input_size: default_size(),
            dropout: default_dropout(),
            num_heads: default_heads(),
            residual_cut_layer: None,
            vocab_size,
            max_len: default_max_len(),
        }
    }

    /// Every rule the configuration breaks, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_layers == 0 {
            v.push("num_layers must be at least 1".to_string());
        }
        if self.hidden_size == 0 {
            v.push("hidden_size must be at least 1".to_string());
        }
        if self.input_size == 0 {
            v.push("input_size must be at least 1".to_string());
        }
        if self.vocab_size == 0 {
            v.push("vocab_size must be at least 1".to_string());
        }
        if self.max_len == 0 {
            v.push("max_len must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.kind.is_bidirectional() && self.hidden_size % 2 != 0 {
            v.push(format!(
                "{} splits hidden_size across two directions; {} is odd",
                self.kind, self.hidden_size
            ));
        }
        if matches!(self.kind, EncoderKind::Elmo | EncoderKind::Transformer)
            && self.input_size != self.hidden_size
        {
            v.push(format!(
                "{} needs input_size == hidden_size, got {} and {}",
                self.kind, self.input_size, self.hidden_size
            ));
        }
        if self.kind == EncoderKind::Transformer {
            if self.num_heads == 0 || self.hidden_size % self.num_heads != 0 {
                v.push(format!(
                    "hidden_size {} is not divisible by num_heads {}",
                    self.hidden_size, self.num_heads
                ));
            }
            if let Some(k) = self.residual_cut_layer {
                if k >= self.num_layers {
                    v.push(format!(
                        "residual_cut_layer {k} outside [0, {})",
                        self.num_layers
                    ));
                }
            }
        } else if self.residual_cut_layer.is_some() {
            v.push(format!("residual cutting needs the transformer kind, not {}", self.kind));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    /// Hidden size of one recurrent direction.
    pub fn direction_size(&self) -> usize {
        if self.kind.is_bidirectional() {
            self.hidden_size / 2
        } else {
            self.hidden_size
        }
    }

    /// Parameters of the layer stack, excluding token and position tables.
    pub fn layer_parameter_count(&self) -> usize {
        let (l, h, i) = (self.num_layers, self.hidden_size, self.input_size);
        let cell = |gates: usize, d: usize, h: usize| gates * (d * h + h * h + h);
        let layer_in = |layer: usize| if layer == 0 { i } else { h };
        match self.kind {
            EncoderKind::Rnn => (0..l).map(|k| cell(1, layer_in(k), h)).sum(),
            EncoderKind::Lstm => (0..l).map(|k| cell(4, layer_in(k), h)).sum(),
            EncoderKind::BiRnn => (0..l).map(|k| 2 * cell(1, layer_in(k), h / 2)).sum(),
            EncoderKind::Elmo => {
                (0..l).map(|k| 2 * cell(4, layer_in(k), h / 2)).sum::<usize>() + (l + 1) + 1
            }
            EncoderKind::Transformer => l * (12 * h * h + 13 * h) + 2 * h,
        }
    }

    /// Closed-form total encoder parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut n = self.vocab_size * self.input_size + self.layer_parameter_count();
        if self.kind == EncoderKind::Transformer {
            n += self.max_len * self.hidden_size;
        }
        n
    }

    /// The residual-cut block, if any.
    pub fn cut_layer(&self) -> Option<usize> {
        match self.kind {
            EncoderKind::Transformer => self.residual_cut_layer,
            _ => None,
        }
    }
}

/// Size of the parity-matched model: the `kind` config whose layer-stack
/// parameter count is closest to `reference`'s. Only `hidden_size` changes.
pub fn parity_config(reference: &EncoderConfig, kind: EncoderKind) -> Result<EncoderConfig> {
    reference.validate()?;
    if !matches!(kind, EncoderKind::Rnn | EncoderKind::BiRnn) {
        return Err(Error::Config(format!("parity sizing supports rnn and birnn, not {kind}")));
    }
    let target = reference.layer_parameter_count() as f64;
    let (l, i) = (reference.num_layers as f64, reference.input_size as f64);
    // count(x) = a x^2 + b x with x the per-direction size
    let (a, b) = match kind {
        EncoderKind::Rnn => (2.0 * l - 1.0, i + l),
        _ => (6.0 * l - 4.0, 2.0 * i + 2.0 * l),
    };
    let root = (-b + (b * b + 4.0 * a * target).sqrt()) / (2.0 * a);
    let per_dir = if kind == EncoderKind::BiRnn { 2 } else { 1 };
    let mut best: Option<(f64, EncoderConfig)> = None;
    let centre = root.round() as i64;
    for x in (centre - 2).max(1)..=centre + 2 {
        let cand = EncoderConfig {
            kind,
            hidden_size: x as usize * per_dir,
            residual_cut_layer: None,
            ..reference.clone()
        };
        let gap = (cand.layer_parameter_count() as f64 - target).abs();
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, cand));
        }
    }
    let (_, cfg) = best.expect("at least one candidate");
    cfg.validate()?;
    Ok(cfg)
}

/// Relative gap between two layer-stack parameter counts.
pub fn parameter_gap(a: &EncoderConfig, b: &EncoderConfig) -> f64 {
    let (x, y) = (a.layer_parameter_count() as f64, b.layer_parameter_count() as f64);
    (x - y).abs() / y
}

/// Padded batch of token sequences, row-major `[batch, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    ids: Vec<TokenId>,
    lengths: Vec<usize>,
    width: usize,
}

impl SeqBatch {
    /// Pads with [PAD] to the longest row after truncating every row to
    /// `max_len` (position 0 is always kept).
    pub fn new(seqs: &[Vec<TokenId>], max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        if max_len == 0 {
            return Err(Error::Data("max_len must be at least 1".into()));
        }
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Data("empty token sequence".into()));
            }
            lengths.push(s.len().min(max_len));
        }
        let width = *lengths.iter().max().expect("non-empty");
        let mut ids = vec![PAD; seqs.len() * width];
        for (r, (s, &n)) in seqs.iter().zip(&lengths).enumerate() {
            ids[r * width..r * width + n].copy_from_slice(&s[..n]);
        }
        Ok(SeqBatch { ids, lengths, width })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn row(&self, r: usize) -> &[TokenId] {
        &self.ids[r * self.width..(r + 1) * self.width]
    }
}

/// Everything a forward pass needs besides the configuration.
pub struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Binding,
    pub train: bool,
    pub rng: &'a mut dyn RngCore,
}

impl ForwardCtx<'_> {
    pub fn param(&self, name: &str) -> Result<Var> {
        self.params.get(name)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, 1.0 - rate, self.train, &mut *self.rng)
    }
}

/// Adds freshly initialized encoder parameters to `store`.
pub fn init_encoder<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R, store: &mut ParamStore) -> Result<()> {
    config.validate()?;
    store.insert(EMBED_PARAM, init_embedding(rng, config.vocab_size, config.input_size));
    let h = config.direction_size();
    for l in 0..config.num_layers {
        let d = if l == 0 { config.input_size } else { config.hidden_size };
        match config.kind {
            EncoderKind::Rnn => recurrent::init(store, &format!("enc.l{l}"), false, d, h, rng),
            EncoderKind::Lstm => recurrent::init(store, &format!("enc.l{l}"), true, d, h, rng),
            EncoderKind::BiRnn | EncoderKind::Elmo => {
                let lstm = config.kind == EncoderKind::Elmo;
                recurrent::init(store, &format!("enc.l{l}.fwd"), lstm, d, h, rng);
                recurrent::init(store, &format!("enc.l{l}.bwd"), lstm, d, h, rng);
            }
            EncoderKind::Transformer => transformer::init_block(store, l, config.hidden_size, rng),
        }
    }
    match config.kind {
        EncoderKind::Elmo => elmo::init(store, config.num_layers),
        EncoderKind::Transformer => transformer::init_globals(store, config, rng),
        _ => {}
    }
    Ok(())
}

/// Names and shapes of every encoder parameter for `config`.
pub fn encoder_param_shapes(config: &EncoderConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let mut store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    init_encoder(config, &mut rng, &mut store)?;
    Ok(store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect())
}

/// Gloss vectors `[batch, hidden_size]` for a padded batch.
pub fn encode_batch(config: &EncoderConfig, ctx: &mut ForwardCtx<'_>, batch: &SeqBatch) -> Result<Var> {
    if batch.width() > config.max_len {
        return Err(Error::Data(format!(
            "batch width {} exceeds max_len {}",
            batch.width(),
            config.max_len
        )));
    }
    let table = ctx.param(EMBED_PARAM)?;
    let emb = ctx.tape.embedding_lookup(table, batch.ids())?;
    let heads: Vec<usize> = (0..batch.batch()).map(|r| r * batch.width()).collect();
    match config.kind {
        EncoderKind::Rnn | EncoderKind::Lstm | EncoderKind::BiRnn => {
            let lstm = config.kind == EncoderKind::Lstm;
            let mut x = emb;
            for l in 0..config.num_layers {
                let input = ctx.dropout(x, config.dropout)?;
                x = if config.kind == EncoderKind::BiRnn {
                    recurrent::bidirectional(ctx, &format!("enc.l{l}"), false, input, batch)?
                } else {
                    let w = RecurrentWeights::bind(ctx, &format!("enc.l{l}"))?;
                    recurrent::run(ctx.tape, &w, lstm, input, batch.lengths(), batch.width(), Direction::Backward)?
                };
            }
            ctx.tape.gather_rows(x, &heads)
        }
        EncoderKind::Elmo => elmo::forward(config, ctx, emb, batch, &heads),
        EncoderKind::Transformer => {
            let x = transformer::forward(config, ctx, emb, batch)?;
            ctx.tape.gather_rows(x, &heads)
        }
    }
}

/// Encodes one sequence with the parameters in `store`.
pub fn encode_gloss(
    config: &EncoderConfig,
    store: &ParamStore,
    ids: &[TokenId],
    train: bool,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let batch = SeqBatch::new(&[ids.to_vec()], config.max_len)?;
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let mut ctx = ForwardCtx {
        tape: &mut tape,
        params: &params,
        train,
        rng,
    };
    let out = encode_batch(config, &mut ctx, &batch)?;
    Ok(tape.value(out).data().to_vec())
}

pub(crate) fn zeros_const(tape: &mut Tape, shape: &[usize]) -> Var {
    tape.constant(Tensor::zeros(shape))
}
