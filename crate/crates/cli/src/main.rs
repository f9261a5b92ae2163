//! `avdialog`: audio-visual spoken dialogue pipeline from features to chat.

mod chat;
mod config;
mod evaluate;
mod prep;
mod train;
mod work;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{RunConfig, CONFIG_ENV};

#[derive(Parser, Debug)]
#[command(name = "avdialog", version, about = "Audio-visual spoken dialogue pipeline")]
struct Cli {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Work directory holding all artifacts; overrides the config.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training and sweeps; overrides the config.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print corpus statistics as a table and JSON.
    Stats(prep::StatsArgs),
    /// Keep dialogues whose speakers all pass an emotion-accuracy threshold.
    GoldFilter(prep::GoldFilterArgs),
    /// Voice a dialogue manifest with synthetic audio-visual features.
    Synth(prep::SynthArgs),
    /// Fit a k-means codebook on audio or fused features.
    TrainQuantizer(prep::QuantizerArgs),
    /// Quantize every turn into frame tokens and deduplicated units.
    Tokenize(prep::TokenizeArgs),
    /// Build the fused text and unit vocabulary.
    BuildVocab(prep::VocabArgs),
    /// Run one language-model training stage (resumable).
    Train(train::TrainArgs),
    /// Train the length predictor and fit the stand-in unit decoder.
    TrainLength(train::LengthArgs),
    /// Generate and score responses for every turn.
    Eval(evaluate::EvalArgs),
    /// Measure tokenization (and optionally generation) under audio noise.
    NoiseEval(evaluate::NoiseEvalArgs),
    /// Chat with the model in the terminal.
    Chat(chat::ChatArgs),
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(w) = cli.work_dir {
        cfg.work_dir = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.train.threads = t;
        cfg.sweep.threads = t;
    }
    match &cli.command {
        Command::Stats(a) => prep::stats(a, &cfg),
        Command::GoldFilter(a) => prep::gold_filter(a),
        Command::Synth(a) => prep::synth(a, &cfg),
        Command::TrainQuantizer(a) => prep::train_quantizer(a, &cfg),
        Command::Tokenize(a) => prep::tokenize(a, &cfg),
        Command::BuildVocab(a) => prep::build_vocab(a, &cfg),
        Command::Train(a) => train::train(a, &cfg),
        Command::TrainLength(a) => train::train_length(a, &cfg),
        Command::Eval(a) => evaluate::eval(a, &cfg),
        Command::NoiseEval(a) => evaluate::noise_eval(a, &cfg),
        Command::Chat(a) => chat::chat(a, &cfg),
    }
}
