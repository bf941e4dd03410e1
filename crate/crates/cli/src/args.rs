use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use rdforge::{EncoderKind, TokenizerKind};

use crate::config::RunConfig;
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "rdforge", version, about = "Train and evaluate gloss-to-embedding encoders")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact of the command.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a subword tokenizer on a dataset's glosses.
    TokenizerTrain(TokenizerTrainArgs),
    /// Train an encoder with task heads.
    Train(TrainArgs),
    /// Score a model on a dataset with targets.
    Eval(EvalArgs),
    /// Fill in predicted vectors for a dataset.
    Predict(PredictArgs),
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Corpus statistics per language.
    Stats(StatsArgs),
    /// Render a training log (.csv) or evaluation report (.json).
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<TokenizerKind>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub train: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub dev: Option<PathBuf>,
    /// Evaluated after training; the report lands beside the model.
    #[arg(long, value_name = "PATH")]
    pub test: Option<PathBuf>,
    /// Reuse a trained tokenizer instead of training one.
    #[arg(long, value_name = "PATH")]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub dev_fraction: Option<f64>,
    /// Prepend a language token to every gloss.
    #[arg(long)]
    pub alt: bool,
    /// Cut the residual connections of one transformer block.
    #[arg(long)]
    pub rc: bool,
    #[arg(long)]
    pub rc_layer: Option<usize>,
    #[arg(long)]
    pub no_dwa: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Print one CSV row per (language, task, metric).
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Comma-separated language codes.
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    #[arg(long)]
    pub entries: Option<usize>,
    #[arg(long)]
    pub dims: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Count subword tokens instead of words.
    #[arg(long, value_name = "PATH")]
    pub tokenizer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub path: PathBuf,
    #[arg(long)]
    pub csv: bool,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

impl Cli {
    /// Config file (or defaults) with this invocation's flags merged in.
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        set_opt(&mut c.paths.out_dir, self.out.clone());
        match &self.command {
            Command::TokenizerTrain(a) => {
                set_opt(&mut c.paths.train, a.train.clone());
                set(&mut c.tokenizer.kind, a.kind);
                set(&mut c.tokenizer.vocab_size, a.vocab_size);
            }
            Command::Train(a) => {
                set_opt(&mut c.paths.train, a.train.clone());
                set_opt(&mut c.paths.dev, a.dev.clone());
                set_opt(&mut c.paths.test, a.test.clone());
                set_opt(&mut c.tokenizer.path, a.tokenizer.clone());
                set(&mut c.encoder.kind, a.encoder);
                set(&mut c.encoder.num_layers, a.layers);
                set(&mut c.encoder.hidden_size, a.hidden);
                set(&mut c.encoder.dropout, a.dropout);
                set(&mut c.optimizer.epochs, a.epochs);
                set(&mut c.optimizer.batch_size, a.batch_size);
                set(&mut c.optimizer.lr, a.lr);
                set(&mut c.optimizer.patience, a.patience);
                set_opt(&mut c.dev_fraction, a.dev_fraction);
                set_opt(&mut c.tricks.rc_layer, a.rc_layer);
                c.tricks.alt |= a.alt;
                c.tricks.rc |= a.rc;
                if a.no_dwa {
                    c.dwa.enabled = false;
                }
            }
            Command::Eval(a) => {
                set_opt(&mut c.paths.model, a.model.clone());
                set_opt(&mut c.paths.test, a.data.clone());
            }
            Command::Predict(a) => {
                set_opt(&mut c.paths.model, a.model.clone());
                set_opt(&mut c.paths.test, a.data.clone());
            }
            Command::Synth(a) => {
                set(&mut c.synth.languages, a.languages.clone());
                set(&mut c.synth.entries_per_language, a.entries);
                set(&mut c.synth.dims, a.dims);
            }
            Command::Stats(a) => {
                set_opt(&mut c.paths.train, a.data.clone());
                set_opt(&mut c.tokenizer.path, a.tokenizer.clone());
            }
            Command::Report(_) => {}
        }
        c.validate()?;
        Ok(c)
    }
}
