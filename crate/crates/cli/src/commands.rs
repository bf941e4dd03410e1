use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use rdforge::dataio::{
    corpus_stats, corpus_stats_by_language, languages, load_dataset, save_dataset, split, task_dims, tokenize_entries,
};
use rdforge::encoders::{load_checkpoint, save_checkpoint};
use rdforge::metrics::evaluate;
use rdforge::multilingual::{build_shared_vocab, train_multilingual};
use rdforge::synth::synthesize;
use rdforge::tokenizers::{self, word_counts};
use rdforge::train::{log_from_csv, log_to_csv};
use rdforge::{
    CorpusStats, EvalReport, GlossEntry, LoadMode, MultilingualCorpus, RunManifest, TaskSpec, TokenizerModel,
    TrainReport,
};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Write-once artifact set of one command inside the output directory.
pub struct Outputs {
    dir: PathBuf,
    force: bool,
}

impl Outputs {
    /// Fails before any work is done if an artifact would be overwritten.
    pub fn prepare(dir: PathBuf, force: bool, names: &[&str]) -> CliResult<Self> {
        if !force {
            for n in names {
                let p = dir.join(n);
                if p.exists() {
                    return Err(CliError::Exists(p));
                }
            }
        }
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Outputs { dir, force })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(name);
        if !self.force && p.exists() {
            return Err(CliError::Exists(p));
        }
        std::fs::write(&p, contents).map_err(|source| CliError::Io { path: p.clone(), source })?;
        Ok(p)
    }
}

pub fn resolved_config_name(command: &str) -> String {
    format!("resolved_config.{command}.json")
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Config(vec![format!("{what} is not set (flag or config paths)")]))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

/// Trains a tokenizer with a language token for every language present;
/// several languages share one vocabulary.
pub fn train_tokenizer(config: &RunConfig, entries: &[GlossEntry]) -> CliResult<TokenizerModel> {
    let langs = languages(entries);
    let spec = config.tokenizer.spec(langs.clone());
    let tok = if langs.len() >= 2 {
        build_shared_vocab(&MultilingualCorpus::new(langs, entries.to_vec())?, &spec)?
    } else {
        tokenizers::train(&word_counts(entries.iter().map(|e| e.gloss.as_str())), &spec)?
    };
    Ok(tok)
}

pub fn cmd_synth(config: &RunConfig, force: bool) -> CliResult<Vec<PathBuf>> {
    let cfg_name = resolved_config_name("synth");
    let out = Outputs::prepare(config.out_dir(), force, &["synth.json", &cfg_name])?;
    let entries = synthesize(&config.synth_config())?;
    save_dataset(&entries, out.path("synth.json"))?;
    info!("synthesized {} entries", entries.len());
    Ok(vec![out.path("synth.json"), out.write(&cfg_name, config.to_json())?])
}

pub fn cmd_tokenizer_train(config: &RunConfig, force: bool) -> CliResult<Vec<PathBuf>> {
    let cfg_name = resolved_config_name("tokenizer-train");
    let out = Outputs::prepare(config.out_dir(), force, &["tokenizer.json", &cfg_name])?;
    let entries = load_dataset(required(&config.paths.train, "paths.train")?, LoadMode::Predict)?;
    let tok = train_tokenizer(config, &entries)?;
    tok.save(out.path("tokenizer.json"))?;
    info!("tokenizer vocabulary: {} entries", tok.vocab_size());
    Ok(vec![out.path("tokenizer.json"), out.write(&cfg_name, config.to_json())?])
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    encoder: &'a rdforge::EncoderConfig,
    tasks: &'a [TaskSpec],
    parameter_count: usize,
    epoch_losses: &'a [f64],
    dev_losses: &'a [f64],
    best_epoch: Option<usize>,
    stopped_early: bool,
    final_loss: f64,
}

fn report_files(out: &Outputs, report: &EvalReport) -> CliResult<Vec<PathBuf>> {
    Ok(vec![
        out.write("report.json", report.to_json()?)?,
        out.write("report.txt", report.to_text())?,
        out.write("report.csv", report.to_csv())?,
    ])
}

pub fn cmd_train(config: &RunConfig, force: bool) -> CliResult<Vec<PathBuf>> {
    let cfg_name = resolved_config_name("train");
    let mut names = vec!["model.ckpt", "train_log.csv", "train_summary.json", "run_manifest.json", &cfg_name];
    if config.tokenizer.path.is_none() {
        names.push("tokenizer.json");
    }
    if config.paths.test.is_some() {
        names.extend(["report.json", "report.txt", "report.csv"]);
    }
    let out = Outputs::prepare(config.out_dir(), force, &names)?;

    let all = load_dataset(required(&config.paths.train, "paths.train")?, LoadMode::Train)?;
    let (train, dev) = match (&config.paths.dev, config.dev_fraction) {
        (Some(p), _) => (all, Some(load_dataset(p, LoadMode::Train)?)),
        (None, Some(f)) => {
            let (t, d) = split(&all, f, config.seed)?;
            (t, Some(d))
        }
        (None, None) => (all, None),
    };
    let test = match &config.paths.test {
        Some(p) => Some(load_dataset(p, LoadMode::Train)?),
        None => None,
    };
    let mut written = Vec::new();
    let tok = match &config.tokenizer.path {
        Some(p) => TokenizerModel::load(p)?,
        None => {
            let tok = train_tokenizer(config, &train)?;
            tok.save(out.path("tokenizer.json"))?;
            written.push(out.path("tokenizer.json"));
            tok
        }
    };
    let tasks: Vec<TaskSpec> = if config.tasks.is_empty() {
        task_dims(&train).into_iter().map(|(task, dim)| TaskSpec { task, dim }).collect()
    } else {
        config.tasks.clone()
    };
    let encoder = config.encoder.to_config(tok.vocab_size());
    let corpus = MultilingualCorpus::from_entries(train)?;
    info!(
        "training {} on {} entries ({} languages), {} parameters",
        encoder.kind,
        corpus.entries().len(),
        corpus.languages().len(),
        encoder.parameter_count()
    );
    let opts = config.train_options();
    let (model, report): (_, TrainReport) =
        train_multilingual(&encoder, config.tricks, &corpus, &tasks, tok, dev.as_deref(), &opts)?;

    save_checkpoint(&model, out.path("model.ckpt"))?;
    written.push(out.path("model.ckpt"));
    written.push(out.write("train_log.csv", log_to_csv(&report.log))?);
    let summary = TrainSummary {
        encoder: &model.config,
        tasks: &tasks,
        parameter_count: model.params.num_values(),
        epoch_losses: &report.epoch_losses,
        dev_losses: &report.dev_losses,
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        final_loss: report.final_loss(),
    };
    written.push(out.write("train_summary.json", to_json(&summary))?);

    let mut reports = BTreeMap::new();
    if let Some(test) = &test {
        let eval = evaluate(&model, test, opts.batch_size)?;
        written.extend(report_files(&out, &eval)?);
        reports.insert("test".to_string(), "report.json".to_string());
    }
    let manifest = RunManifest {
        languages: corpus.languages().to_vec(),
        tricks: config.tricks,
        tokenizer: match &config.tokenizer.path {
            Some(p) => p.display().to_string(),
            None => "tokenizer.json".into(),
        },
        model: "model.ckpt".into(),
        reports,
    };
    written.push(out.write("run_manifest.json", to_json(&manifest))?);
    written.push(out.write(&cfg_name, config.to_json())?);
    Ok(written)
}

/// Returns the rendered report (text or CSV) and the written files.
pub fn cmd_eval(config: &RunConfig, force: bool, csv: bool) -> CliResult<(String, Vec<PathBuf>)> {
    let cfg_name = resolved_config_name("eval");
    let out = Outputs::prepare(
        config.out_dir(),
        force,
        &["report.json", "report.txt", "report.csv", &cfg_name],
    )?;
    let model = load_checkpoint(required(&config.paths.model, "paths.model")?)?;
    let test = load_dataset(required(&config.paths.test, "paths.test")?, LoadMode::Train)?;
    let report = evaluate(&model, &test, config.optimizer.batch_size)?;
    let mut written = report_files(&out, &report)?;
    written.push(out.write(&cfg_name, config.to_json())?);
    let shown = if csv { report.to_csv() } else { report.to_text() };
    Ok((shown, written))
}

pub fn cmd_predict(config: &RunConfig, force: bool) -> CliResult<Vec<PathBuf>> {
    let cfg_name = resolved_config_name("predict");
    let out = Outputs::prepare(config.out_dir(), force, &["predictions.json", &cfg_name])?;
    let model = load_checkpoint(required(&config.paths.model, "paths.model")?)?;
    let mut entries = load_dataset(required(&config.paths.test, "paths.test")?, LoadMode::Predict)?;
    let ids = tokenize_entries(&entries, &model.tokenizer, model.alt)?;
    let preds = model.predict(&ids, config.optimizer.batch_size)?;
    for (e, p) in entries.iter_mut().zip(preds) {
        for (task, v) in model.tasks().into_iter().zip(p) {
            e.set_target(task, Some(v));
        }
    }
    save_dataset(&entries, out.path("predictions.json"))?;
    Ok(vec![out.path("predictions.json"), out.write(&cfg_name, config.to_json())?])
}

pub fn stats_table(rows: &[(String, CorpusStats)]) -> String {
    let mut s = String::new();
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("language".len());
    writeln!(s, "{:<w$}  {:>9}  {:>9}  {:>13}", "language", "gloss_num", "dict_size", "avg_gloss_len").unwrap();
    for (l, st) in rows {
        writeln!(
            s,
            "{:<w$}  {:>9}  {:>9}  {:>13.1}",
            l, st.gloss_num, st.dict_size, st.avg_gloss_len
        )
        .unwrap();
    }
    s
}

/// Per-language rows, plus an "all" row when there are several languages.
pub fn cmd_stats(config: &RunConfig, force: bool) -> CliResult<(String, Vec<PathBuf>)> {
    let cfg_name = resolved_config_name("stats");
    let out = Outputs::prepare(config.out_dir(), force, &["stats.json", "stats.txt", &cfg_name])?;
    let entries = load_dataset(required(&config.paths.train, "the dataset path")?, LoadMode::Predict)?;
    let tok = match &config.tokenizer.path {
        Some(p) => Some(TokenizerModel::load(p)?),
        None => None,
    };
    let mut rows = corpus_stats_by_language(&entries, tok.as_ref())?;
    if rows.len() > 1 {
        rows.push(("all".into(), corpus_stats(&entries, tok.as_ref())?));
    }
    let table = stats_table(&rows);
    let json: BTreeMap<&str, &CorpusStats> = rows.iter().map(|(l, s)| (l.as_str(), s)).collect();
    let written = vec![
        out.write("stats.json", to_json(&json))?,
        out.write("stats.txt", &table)?,
        out.write(&cfg_name, config.to_json())?,
    ];
    Ok((table, written))
}

/// Renders a training log as one row per epoch, or an evaluation report.
pub fn cmd_report(path: &Path, csv: bool) -> CliResult<String> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "csv") {
        let log = log_from_csv(&text)?;
        if csv {
            return Ok(text);
        }
        let mut tasks: Vec<&str> = Vec::new();
        for r in &log {
            if !tasks.contains(&r.task.as_str()) {
                tasks.push(&r.task);
            }
        }
        let mut s = String::from("epoch");
        for t in &tasks {
            write!(s, "  {:>12}  {:>8}", format!("{t}_loss"), format!("{t}_w")).unwrap();
        }
        s.push('\n');
        let mut epochs: Vec<usize> = log.iter().map(|r| r.epoch).collect();
        epochs.dedup();
        for e in epochs {
            write!(s, "{e:>5}").unwrap();
            for t in &tasks {
                match log.iter().find(|r| r.epoch == e && r.task == *t) {
                    Some(r) => write!(s, "  {:>12.6}  {:>8.4}", r.mean_loss, r.dwa_weight).unwrap(),
                    None => write!(s, "  {:>12}  {:>8}", "-", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        Ok(s)
    } else {
        let report: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{} is not an evaluation report: {e}", path.display())))?;
        Ok(if csv { report.to_csv() } else { report.to_text() })
    }
}
