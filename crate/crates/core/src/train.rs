//! Minibatch training with weighted multitask MSE, optional DWA, gradient
//! clipping, AdamW and dev-set early stopping.

use std::fmt::Write as _;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{assemble_batches, epoch_order, tokenize_entries, GlossEntry};
use crate::encoders::ForwardCtx;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::TrainedModel;
use crate::multitask::{multitask_loss, DwaState, DEFAULT_TEMPERATURE};
use crate::tensor::{clip_grad_norm, AdamW, AdamWConfig, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DwaOptions {
    pub enabled: bool,
    pub temperature: f64,
}

impl Default for DwaOptions {
    fn default() -> Self {
        DwaOptions {
            enabled: true,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without dev improvement before stopping; 0 disables.
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub dwa: DwaOptions,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            epochs: 50,
            patience: 5,
            clip_norm: Some(5.0),
            dwa: DwaOptions::default(),
            seed: 42,
        }
    }
}

impl TrainOptions {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let o = &self.optimizer;
        if !(o.lr.is_finite() && o.lr > 0.0) {
            v.push(format!("optimizer.lr must be positive, got {}", o.lr));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            v.push(format!("optimizer.weight_decay must be >= 0, got {}", o.weight_decay));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            v.push("optimizer betas must be in [0, 1)".into());
        }
        if !(o.eps.is_finite() && o.eps > 0.0) {
            v.push(format!("optimizer.eps must be positive, got {}", o.eps));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            v.push("epochs must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                v.push(format!("clip_norm must be positive, got {c}"));
            }
        }
        if !(self.dwa.temperature.is_finite() && self.dwa.temperature > 0.0) {
            v.push(format!("dwa.temperature must be positive, got {}", self.dwa.temperature));
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
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: String,
    pub mean_loss: f64,
    pub dwa_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    /// Row-weighted mean of the weighted total loss, per epoch.
    pub epoch_losses: Vec<f64>,
    pub dev_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().expect("at least one epoch")
    }
}

pub fn log_to_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,task,mean_loss,dwa_weight\n");
    for r in log {
        writeln!(s, "{},{},{},{}", r.epoch, r.task, r.mean_loss, r.dwa_weight).expect("string write");
    }
    s
}

pub fn log_from_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("epoch,task,mean_loss,dwa_weight") {
        return Err(Error::Data("training log must start with epoch,task,mean_loss,dwa_weight".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Data(format!("bad training log row {}: {l:?}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                task: f[1].to_string(),
                mean_loss: f[2].parse().map_err(|_| bad())?,
                dwa_weight: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Mean over tasks of the per-task MSE on `entries`.
pub fn dev_loss(model: &TrainedModel, entries: &[GlossEntry], batch_size: usize) -> Result<f64> {
    let ids = tokenize_entries(entries, &model.tokenizer, model.alt)?;
    let preds = model.predict(&ids, batch_size)?;
    let mut per_task = Vec::new();
    for (k, head) in model.heads.iter().enumerate() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (e, p) in entries.iter().zip(&preds) {
            if let Some(t) = e.target(head.task) {
                sum += metrics::mse(&p[k], t)?;
                n += 1;
            }
        }
        if n > 0 {
            per_task.push(sum / n as f64);
        }
    }
    if per_task.is_empty() {
        return Err(Error::Data("dev set has no targets for any model task".into()));
    }
    Ok(per_task.iter().sum::<f64>() / per_task.len() as f64)
}

/// Trains `model` in place. With a dev set, the best-scoring parameters
/// are kept.
pub fn train_model(
    model: &mut TrainedModel,
    train: &[GlossEntry],
    dev: Option<&[GlossEntry]>,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    opts.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let tasks = model.task_specs();
    for spec in &tasks {
        if !train.iter().any(|e| e.target(spec.task).is_some()) {
            return Err(Error::Data(format!("no training entry has a {} target", spec.task)));
        }
    }
    let ids = tokenize_entries(train, &model.tokenizer, model.alt)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    dropout_rng.set_stream(1);
    let mut optimizer = AdamW::new(opts.optimizer);
    let mut dwa = DwaState::new(tasks.len(), opts.dwa.temperature)?;
    let mut report = TrainReport {
        log: Vec::new(),
        epoch_losses: Vec::new(),
        dev_losses: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0usize;

    for epoch in 1..=opts.epochs {
        let weights: Vec<f64> = if opts.dwa.enabled {
            dwa.weights().to_vec()
        } else {
            vec![1.0; tasks.len()]
        };
        let order = epoch_order(train, &mut order_rng);
        let batches = assemble_batches(train, &ids, &order, &tasks, opts.batch_size, model.config.max_len)?;
        let mut task_sum = vec![0.0; tasks.len()];
        let mut task_rows = vec![0usize; tasks.len()];
        let (mut total, mut rows) = (0.0, 0usize);
        for batch in &batches {
            let mut tape = Tape::new();
            let binding = model.params.bind(&mut tape);
            let preds = {
                let mut ctx = ForwardCtx {
                    tape: &mut tape,
                    params: &binding,
                    train: true,
                    rng: &mut dropout_rng,
                };
                model.forward(&mut ctx, &batch.seqs)?.1
            };
            let loss = multitask_loss(&mut tape, &preds, &batch.targets, &weights)?;
            let grads = tape.backward(loss.total)?;
            model.params.zero_grad();
            model.params.accumulate(&binding, &grads)?;
            let mut tensors = model.params.tensors_mut();
            if let Some(c) = opts.clip_norm {
                clip_grad_norm(&mut tensors, c);
            }
            optimizer.step(&mut tensors)?;

            let n = batch.entries.len();
            total += tape.value(loss.total).item()? * n as f64;
            rows += n;
            for (k, t) in loss.per_task.iter().enumerate() {
                if let Some((mse, cnt)) = t {
                    task_sum[k] += mse * *cnt as f64;
                    task_rows[k] += cnt;
                }
            }
        }
        let means: Vec<f64> = task_sum
            .iter()
            .zip(&task_rows)
            .map(|(s, &n)| s / n as f64)
            .collect();
        for ((spec, &m), &w) in tasks.iter().zip(&means).zip(&weights) {
            report.log.push(EpochRecord {
                epoch,
                task: spec.task.to_string(),
                mean_loss: m,
                dwa_weight: w,
            });
        }
        let epoch_loss = total / rows as f64;
        report.epoch_losses.push(epoch_loss);
        if opts.dwa.enabled {
            dwa.update(&means)?;
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite("parameters after optimizer step"));
        }

        match dev {
            Some(dev) => {
                let d = dev_loss(model, dev, opts.batch_size)?;
                report.dev_losses.push(d);
                info!("epoch {epoch}: train loss {epoch_loss:.6}, dev mse {d:.6}");
                if best.as_ref().is_none_or(|(b, _)| d < *b) {
                    best = Some((d, model.params.clone()));
                    report.best_epoch = Some(epoch);
                    stale = 0;
                } else {
                    stale += 1;
                    if opts.patience > 0 && stale >= opts.patience {
                        report.stopped_early = true;
                        info!("early stop after epoch {epoch}");
                        break;
                    }
                }
            }
            None => {
                if epoch % 10 == 0 || epoch == opts.epochs {
                    info!("epoch {epoch}: train loss {epoch_loss:.6}");
                } else {
                    debug!("epoch {epoch}: train loss {epoch_loss:.6}");
                }
            }
        }
    }
    if let Some((_, params)) = best {
        let mut params = params;
        params.zero_grad();
        model.params = params;
    }
    Ok(report)
}
