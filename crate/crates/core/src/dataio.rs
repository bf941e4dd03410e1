//! Gloss datasets: loading, splitting, batching and corpus statistics.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoders::SeqBatch;
use crate::error::{Error, Result};
use crate::multilingual::apply_alt;
use crate::multitask::{Task, TaskSpec, TaskTargets};
use crate::tokenizers::{pretokenize, TokenId, TokenizerModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlossEntry {
    pub id: String,
    pub gloss: String,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgns: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub char: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub electra: Option<Vec<f64>>,
}

impl GlossEntry {
    pub fn new(id: impl Into<String>, gloss: impl Into<String>, language: impl Into<String>) -> Self {
        GlossEntry {
            id: id.into(),
            gloss: gloss.into(),
            language: language.into(),
            sgns: None,
            char: None,
            electra: None,
        }
    }

    pub fn target(&self, task: Task) -> Option<&[f64]> {
        match task {
            Task::Sgns => self.sgns.as_deref(),
            Task::Char => self.char.as_deref(),
            Task::Electra => self.electra.as_deref(),
        }
    }

    pub fn set_target(&mut self, task: Task, v: Option<Vec<f64>>) {
        match task {
            Task::Sgns => self.sgns = v,
            Task::Char => self.char = v,
            Task::Electra => self.electra = v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Every entry needs at least one target vector.
    Train,
    Predict,
}

#[derive(Deserialize)]
struct RawEntry {
    id: Option<String>,
    gloss: Option<String>,
    language: Option<String>,
    sgns: Option<Vec<f64>>,
    char: Option<Vec<f64>>,
    electra: Option<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    language: Option<String>,
    entries: Vec<RawEntry>,
}

/// Parses a dataset: either a JSON array of entries or an object
/// `{"language": .., "entries": [..]}` whose language fills in entries that
/// lack one.
pub fn parse_dataset(text: &str, mode: LoadMode) -> Result<Vec<GlossEntry>> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Data(format!("malformed JSON: {e}")))?;
    let raw = match value {
        Value::Array(_) => RawFile {
            language: None,
            entries: serde_json::from_value(value).map_err(|e| Error::Data(format!("bad entry: {e}")))?,
        },
        Value::Object(_) => serde_json::from_value(value).map_err(|e| Error::Data(format!("bad dataset object: {e}")))?,
        _ => return Err(Error::Data("dataset must be a JSON array or object".into())),
    };
    let mut entries = Vec::with_capacity(raw.entries.len());
    for (i, r) in raw.entries.into_iter().enumerate() {
        let id = r.id.ok_or_else(|| Error::Data(format!("entry #{i} has no id")))?;
        let gloss = r.gloss.ok_or_else(|| Error::Data(format!("entry {id} has no gloss")))?;
        let language = r
            .language
            .or_else(|| raw.language.clone())
            .ok_or_else(|| Error::Data(format!("entry {id} has no language and the file sets none")))?;
        entries.push(GlossEntry {
            id,
            gloss,
            language,
            sgns: r.sgns,
            char: r.char,
            electra: r.electra,
        });
    }
    validate_entries(&entries, mode)?;
    Ok(entries)
}

/// Checks ids, glosses, finiteness and per-task dimension consistency.
pub fn validate_entries(entries: &[GlossEntry], mode: LoadMode) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut ids = HashSet::new();
    let mut dims: BTreeMap<Task, (usize, &str)> = BTreeMap::new();
    for e in entries {
        if !ids.insert(e.id.as_str()) {
            return Err(Error::Data(format!("duplicate id {}", e.id)));
        }
        if e.gloss.trim().is_empty() {
            return Err(Error::Data(format!("entry {} has an empty gloss", e.id)));
        }
        if e.language.is_empty() {
            return Err(Error::Data(format!("entry {} has an empty language code", e.id)));
        }
        let mut any = false;
        for task in Task::ALL {
            let Some(v) = e.target(task) else { continue };
            any = true;
            if v.is_empty() {
                return Err(Error::Data(format!("entry {} has an empty {task} vector", e.id)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("entry {} has non-finite {task} values", e.id)));
            }
            match dims.get(&task) {
                Some(&(d, first)) if d != v.len() => {
                    return Err(Error::Data(format!(
                        "{task} dim mismatch: {first} has {d}, {} has {}",
                        e.id,
                        v.len()
                    )));
                }
                Some(_) => {}
                None => {
                    dims.insert(task, (v.len(), e.id.as_str()));
                }
            }
        }
        if !any && mode == LoadMode::Train {
            return Err(Error::Data(format!("entry {} has no target vectors", e.id)));
        }
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, mode: LoadMode) -> Result<Vec<GlossEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_dataset(&text, mode)
}

pub fn dataset_to_json(entries: &[GlossEntry]) -> Result<String> {
    Ok(serde_json::to_string_pretty(entries)?)
}

pub fn save_dataset(entries: &[GlossEntry], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset_to_json(entries)?)?;
    Ok(())
}

/// Target dimension of each task present anywhere in `entries`.
pub fn task_dims(entries: &[GlossEntry]) -> BTreeMap<Task, usize> {
    let mut dims = BTreeMap::new();
    for e in entries {
        for task in Task::ALL {
            if let Some(v) = e.target(task) {
                dims.entry(task).or_insert(v.len());
            }
        }
    }
    dims
}

/// Languages in order of first appearance.
pub fn languages(entries: &[GlossEntry]) -> Vec<String> {
    let mut seen = Vec::<String>::new();
    for e in entries {
        if !seen.contains(&e.language) {
            seen.push(e.language.clone());
        }
    }
    seen
}

/// Seeded split stratified by language; both parts keep input order.
pub fn split(entries: &[GlossEntry], dev_fraction: f64, seed: u64) -> Result<(Vec<GlossEntry>, Vec<GlossEntry>)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::Data(format!("dev_fraction must be in (0, 1), got {dev_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_dev = vec![false; entries.len()];
    for lang in languages(entries) {
        let mut idx: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].language == lang).collect();
        idx.shuffle(&mut rng);
        let n_dev = (idx.len() as f64 * dev_fraction).round() as usize;
        for &i in &idx[..n_dev] {
            is_dev[i] = true;
        }
    }
    let (mut train, mut dev) = (Vec::new(), Vec::new());
    for (e, d) in entries.iter().zip(is_dev) {
        if d { dev.push(e.clone()) } else { train.push(e.clone()) }
    }
    Ok((train, dev))
}

/// One epoch's visiting order: each language's entries shuffled, then
/// interleaved round-robin in order of first appearance.
pub fn epoch_order<R: Rng + ?Sized>(entries: &[GlossEntry], rng: &mut R) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = languages(entries)
        .iter()
        .map(|l| (0..entries.len()).filter(|&i| &entries[i].language == l).collect())
        .collect();
    for g in &mut groups {
        g.shuffle(rng);
    }
    let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(entries.len());
    for k in 0..longest {
        for g in &groups {
            if let Some(&i) = g.get(k) {
                order.push(i);
            }
        }
    }
    order
}

/// `[CLS] gloss...` per entry, with the language token first under ALT.
pub fn tokenize_entries(entries: &[GlossEntry], tokenizer: &TokenizerModel, alt: bool) -> Result<Vec<Vec<TokenId>>> {
    entries
        .iter()
        .map(|e| {
            let ids = tokenizer.encode(&e.gloss, None, true)?;
            assert!(!ids.is_empty(), "[CLS] guarantees a non-empty sequence");
            if alt {
                apply_alt(&ids, &e.language, tokenizer.vocab())
            } else {
                Ok(ids)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub seqs: SeqBatch,
    /// Aligned with the task list the batch was built for.
    pub targets: Vec<TaskTargets>,
    /// Dataset index of every row.
    pub entries: Vec<usize>,
}

/// Cuts `order` into padded batches with per-task targets and masks.
pub fn assemble_batches(
    entries: &[GlossEntry],
    ids: &[Vec<TokenId>],
    order: &[usize],
    tasks: &[TaskSpec],
    batch_size: usize,
    max_len: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Data("batch_size must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let seqs: Vec<Vec<TokenId>> = chunk.iter().map(|&i| ids[i].clone()).collect();
        let mut targets = Vec::with_capacity(tasks.len());
        for spec in tasks {
            let mut values = vec![0.0; chunk.len() * spec.dim];
            let mut present = vec![false; chunk.len()];
            for (r, &i) in chunk.iter().enumerate() {
                if let Some(v) = entries[i].target(spec.task) {
                    if v.len() != spec.dim {
                        return Err(Error::Data(format!(
                            "entry {} has {} dim {}, model expects {}",
                            entries[i].id,
                            spec.task,
                            v.len(),
                            spec.dim
                        )));
                    }
                    values[r * spec.dim..(r + 1) * spec.dim].copy_from_slice(v);
                    present[r] = true;
                }
            }
            targets.push(TaskTargets {
                dim: spec.dim,
                values,
                present,
            });
        }
        out.push(Batch {
            seqs: SeqBatch::new(&seqs, max_len)?,
            targets,
            entries: chunk.to_vec(),
        });
    }
    Ok(out)
}

/// Shuffles by `seed`, tokenizes and batches `entries` in one call.
pub fn make_batches(
    entries: &[GlossEntry],
    tokenizer: &TokenizerModel,
    tasks: &[TaskSpec],
    batch_size: usize,
    alt: bool,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let ids = tokenize_entries(entries, tokenizer, alt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = epoch_order(entries, &mut rng);
    assemble_batches(entries, &ids, &order, tasks, batch_size, max_len)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub gloss_num: usize,
    pub dict_size: usize,
    pub avg_gloss_len: f64,
}

/// Entry count, distinct token count and mean tokens per gloss. Without a
/// tokenizer, tokens are the lowercased pre-tokens; with one, subword ids
/// other than reserved ones.
pub fn corpus_stats(entries: &[GlossEntry], tokenizer: Option<&TokenizerModel>) -> Result<CorpusStats> {
    if entries.is_empty() {
        return Err(Error::Data("cannot compute statistics of an empty dataset".into()));
    }
    let mut total = 0usize;
    let dict_size = match tokenizer {
        None => {
            let mut types = BTreeSet::new();
            for e in entries {
                let toks = pretokenize(&e.gloss);
                total += toks.len();
                types.extend(toks);
            }
            types.len()
        }
        Some(tok) => {
            let mut types = BTreeSet::new();
            for e in entries {
                let ids: Vec<TokenId> = tok
                    .encode(&e.gloss, None, false)?
                    .into_iter()
                    .filter(|&i| !tok.vocab().is_reserved(i))
                    .collect();
                total += ids.len();
                types.extend(ids);
            }
            types.len()
        }
    };
    Ok(CorpusStats {
        gloss_num: entries.len(),
        dict_size,
        avg_gloss_len: total as f64 / entries.len() as f64,
    })
}

/// Statistics per language (first-appearance order).
pub fn corpus_stats_by_language(
    entries: &[GlossEntry],
    tokenizer: Option<&TokenizerModel>,
) -> Result<Vec<(String, CorpusStats)>> {
    languages(entries)
        .into_iter()
        .map(|l| {
            let part: Vec<GlossEntry> = entries.iter().filter(|e| e.language == l).cloned().collect();
            corpus_stats(&part, tokenizer).map(|s| (l, s))
        })
        .collect()
}
