//! MSE, cosine similarity and cosine rank between predicted and reference
//! embeddings, aggregated per (language, task).

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataio::{languages, tokenize_entries, GlossEntry};
use crate::error::{Error, Result};
use crate::model::TrainedModel;

fn same_dims(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Metrics(format!("{op}: dimension mismatch {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse(pred: &[f64], reference: &[f64]) -> Result<f64> {
    same_dims("mse", pred, reference)?;
    let s: f64 = pred.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

fn raw_cos(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

/// Cosine similarity, or `None` when either vector is zero.
pub fn cos_checked(pred: &[f64], reference: &[f64]) -> Result<Option<f64>> {
    same_dims("cos", pred, reference)?;
    Ok(raw_cos(pred, reference).map(|c| c.clamp(-1.0, 1.0)))
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cos(pred: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(cos_checked(pred, reference)?.unwrap_or(0.0))
}

/// For each item, the share of other references that are strictly closer
/// (by cosine) to its prediction than its own reference is.
pub fn rank_scores(preds: &[Vec<f64>], refs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = preds.len();
    if n != refs.len() {
        return Err(Error::Metrics(format!("{n} predictions but {} references", refs.len())));
    }
    if n < 2 {
        return Err(Error::Metrics(format!("rank needs at least 2 items, got {n}")));
    }
    for (p, r) in preds.iter().zip(refs) {
        same_dims("rank_scores", p, r)?;
        same_dims("rank_scores", p, &refs[0])?;
    }
    let mut out = Vec::with_capacity(n);
    for (i, p) in preds.iter().enumerate() {
        let own = raw_cos(p, &refs[i]).unwrap_or(0.0);
        let mut beaten = 0usize;
        for (j, r) in refs.iter().enumerate() {
            if j != i && raw_cos(p, r).unwrap_or(0.0) > own {
                beaten += 1;
            }
        }
        out.push(beaten as f64 / (n - 1) as f64);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub language: String,
    pub task: String,
    pub count: usize,
    pub mse: f64,
    pub cos: f64,
    /// Undefined for a single item.
    pub rank: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Cosines skipped as 0 because a vector was zero.
    pub zero_norm_warnings: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let header = ["language", "task", "count", "MSE", "COS", "RANK"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.language.clone(),
                    r.task.clone(),
                    r.count.to_string(),
                    format!("{:.4}", r.mse),
                    format!("{:.4}", r.cos),
                    r.rank.map_or_else(|| "-".to_string(), |v| format!("{v:.4}")),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, row: &[String]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(k, (c, w))| if k < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            writeln!(s, "{}", parts.join("  ").trim_end()).expect("string write");
        };
        line(&mut s, &header.map(String::from));
        for row in &cells {
            line(&mut s, row);
        }
        if self.zero_norm_warnings > 0 {
            writeln!(s, "zero-norm cosine warnings: {}", self.zero_norm_warnings).expect("string write");
        }
        s
    }

    /// One line per (language, task, metric).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("language,task,metric,value\n");
        for r in &self.rows {
            writeln!(s, "{},{},count,{}", r.language, r.task, r.count).expect("string write");
            writeln!(s, "{},{},mse,{}", r.language, r.task, r.mse).expect("string write");
            writeln!(s, "{},{},cos,{}", r.language, r.task, r.cos).expect("string write");
            if let Some(v) = r.rank {
                writeln!(s, "{},{},rank,{v}", r.language, r.task).expect("string write");
            }
        }
        s
    }

    pub fn total_count(&self, task: &str) -> usize {
        self.rows.iter().filter(|r| r.task == task).map(|r| r.count).sum()
    }
}

/// Scores `predictions[i][k]` (head `k` of entry `i`) against the targets.
pub fn score_predictions(
    entries: &[GlossEntry],
    predictions: &[Vec<Vec<f64>>],
    tasks: &[crate::multitask::Task],
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::Metrics("empty test set".into()));
    }
    let mut rows = Vec::new();
    let mut warnings = 0usize;
    for lang in languages(entries) {
        for (k, &task) in tasks.iter().enumerate() {
            let mut preds = Vec::new();
            let mut refs = Vec::new();
            for (e, p) in entries.iter().zip(predictions) {
                if e.language != lang {
                    continue;
                }
                if let Some(t) = e.target(task) {
                    if t.len() != p[k].len() {
                        return Err(Error::Metrics(format!(
                            "entry {} has {task} dim {}, model predicts {}",
                            e.id,
                            t.len(),
                            p[k].len()
                        )));
                    }
                    preds.push(p[k].clone());
                    refs.push(t.to_vec());
                }
            }
            if preds.is_empty() {
                continue;
            }
            let n = preds.len() as f64;
            let mut mse_sum = 0.0;
            let mut cos_sum = 0.0;
            for (p, r) in preds.iter().zip(&refs) {
                mse_sum += mse(p, r)?;
                match cos_checked(p, r)? {
                    Some(c) => cos_sum += c,
                    None => warnings += 1,
                }
            }
            let rank = if preds.len() >= 2 {
                Some(rank_scores(&preds, &refs)?.iter().sum::<f64>() / n)
            } else {
                None
            };
            rows.push(ReportRow {
                language: lang.clone(),
                task: task.to_string(),
                count: preds.len(),
                mse: mse_sum / n,
                cos: cos_sum / n,
                rank,
            });
        }
    }
    if warnings > 0 {
        warn!("{warnings} cosine similarities involved a zero vector and were scored 0");
    }
    Ok(EvalReport {
        rows,
        zero_norm_warnings: warnings,
    })
}

/// Batched prediction on `testset`, scored per (language, task).
pub fn evaluate(model: &TrainedModel, testset: &[GlossEntry], batch_size: usize) -> Result<EvalReport> {
    if testset.is_empty() {
        return Err(Error::Metrics("empty test set".into()));
    }
    let ids = tokenize_entries(testset, &model.tokenizer, model.alt)?;
    let preds = model.predict(&ids, batch_size)?;
    score_predictions(testset, &preds, &model.tasks())
}
