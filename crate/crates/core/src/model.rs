//! Encoder, task heads and tokenizer bundled as one trainable model.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{encode_batch, encoder_param_shapes, init_encoder, EncoderConfig, ForwardCtx, SeqBatch};
use crate::error::{Error, Result};
use crate::multilingual::apply_alt;
use crate::multitask::{Task, TaskHead, TaskSpec};
use crate::tensor::{Binding, ParamStore, Tape, Var};
use crate::tokenizers::{TokenId, TokenizerModel};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: EncoderConfig,
    pub heads: Vec<TaskHead>,
    pub params: ParamStore,
    pub tokenizer: TokenizerModel,
    /// Prepend the entry's language token before [CLS].
    pub alt: bool,
}

impl TrainedModel {
    /// Fresh model with parameters drawn from `seed`.
    pub fn init(
        config: EncoderConfig,
        tasks: &[TaskSpec],
        tokenizer: TokenizerModel,
        alt: bool,
        seed: u64,
    ) -> Result<Self> {
        let heads = Self::check_parts(&config, tasks, &tokenizer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_encoder(&config, &mut rng, &mut params)?;
        for h in &heads {
            h.init(&mut rng, &mut params);
        }
        Ok(TrainedModel {
            config,
            heads,
            params,
            tokenizer,
            alt,
        })
    }

    fn check_parts(config: &EncoderConfig, tasks: &[TaskSpec], tokenizer: &TokenizerModel) -> Result<Vec<TaskHead>> {
        config.validate()?;
        if config.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} differs from the tokenizer's {}",
                config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        if tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        let mut heads: Vec<TaskHead> = Vec::with_capacity(tasks.len());
        for t in tasks {
            if t.dim == 0 {
                return Err(Error::Config(format!("task {} has target dim 0", t.task)));
            }
            if heads.iter().any(|h| h.task == t.task) {
                return Err(Error::Config(format!("task {} configured twice", t.task)));
            }
            heads.push(TaskHead::new(t.task, config.hidden_size, t.dim));
        }
        Ok(heads)
    }

    /// Rebuilds a model from stored parameters, checking names, shapes and
    /// finiteness against the configuration.
    pub fn from_parts(
        config: EncoderConfig,
        tasks: &[TaskSpec],
        tokenizer: TokenizerModel,
        alt: bool,
        params: ParamStore,
    ) -> Result<Self> {
        let heads = Self::check_parts(&config, tasks, &tokenizer)?;
        let model = TrainedModel {
            config,
            heads,
            params,
            tokenizer,
            alt,
        };
        let expected = model.param_shapes()?;
        if expected.len() != model.params.len() {
            let missing: Vec<&str> = expected
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| !model.params.contains(n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {} (missing {missing:?})",
                expected.len(),
                model.params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = model
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(model)
    }

    /// Every parameter name with its shape, sorted by name.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shapes = encoder_param_shapes(&self.config)?;
        for h in &self.heads {
            shapes.push((h.weight_name(), vec![h.input_dim, h.target_dim]));
            shapes.push((h.bias_name(), vec![h.target_dim]));
        }
        shapes.sort();
        Ok(shapes)
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.heads.iter().map(|h| h.task).collect()
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.heads
            .iter()
            .map(|h| TaskSpec {
                task: h.task,
                dim: h.target_dim,
            })
            .collect()
    }

    /// `[CLS] gloss...`, with the language token in front under ALT.
    pub fn token_ids(&self, gloss: &str, language: &str) -> Result<Vec<TokenId>> {
        let ids = self.tokenizer.encode(gloss, None, true)?;
        if self.alt {
            apply_alt(&ids, language, self.tokenizer.vocab())
        } else {
            Ok(ids)
        }
    }

    /// Gloss vectors and one prediction per head.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, batch: &SeqBatch) -> Result<(Var, Vec<Var>)> {
        let gloss = encode_batch(&self.config, ctx, batch)?;
        let preds = self
            .heads
            .iter()
            .map(|h| h.forward(ctx.tape, ctx.params, gloss))
            .collect::<Result<Vec<_>>>()?;
        Ok((gloss, preds))
    }

    pub fn encode_gloss(&self, ids: &[TokenId], train: bool, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        crate::encoders::encode_gloss(&self.config, &self.params, ids, train, rng)
    }

    /// Eval-mode predictions, `[entry][head] -> vector`.
    pub fn predict(&self, seqs: &[Vec<TokenId>], batch_size: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(batch_size) {
            let batch = SeqBatch::new(chunk, self.config.max_len)?;
            let mut tape = Tape::new();
            let params: Binding = self.params.bind(&mut tape);
            let mut ctx = ForwardCtx {
                tape: &mut tape,
                params: &params,
                train: false,
                rng: &mut rng,
            };
            let (_, preds) = self.forward(&mut ctx, &batch)?;
            for r in 0..chunk.len() {
                out.push(preds.iter().map(|&p| tape.value(p).row(r).to_vec()).collect());
            }
        }
        Ok(out)
    }
}
