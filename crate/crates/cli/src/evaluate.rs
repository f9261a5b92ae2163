use std::path::PathBuf;

use anyhow::{Context, Result};
use avdialog::avtoken::{Codebook, Snr};
use avdialog::dialogue_lm::{DecodeConfig, DialogueLm};
use avdialog::evalharness::{
    evaluate_testset, run_noise_sweep, EvalPair, MetricReport, NoiseSweepReport, SweepLm, Tokenizers,
};
use avdialog::seed::derive_seed;
use clap::Args;
use serde::Serialize;

use crate::config::{Component, RunConfig};
use crate::work::{
    load_gold, load_lexicon, load_manifest_at, load_streams, load_units, load_vocab, observed_dialogues,
    reference_dialogues, require, turn_features, write_atomic, write_json, QuantModality, WorkDir,
};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model checkpoint; defaults to the stage-3 checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Report name under `reports/`.
    #[arg(long, default_value = "eval")]
    pub name: String,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    seed: u64,
    decode: &'a DecodeConfig,
    report: &'a MetricReport,
    pairs: &'a [EvalPair],
    ppls: &'a [f64],
}

fn decode_config(cfg: &RunConfig) -> DecodeConfig {
    DecodeConfig { seed: cfg.seed_for(Component::Decoding), ..cfg.decode.clone() }
}

fn load_model(work: &WorkDir, path: &Option<PathBuf>) -> Result<(PathBuf, DialogueLm)> {
    let path = path.clone().unwrap_or_else(|| work.stage(3));
    require(&path, "model checkpoint", "train --stage 3")?;
    let model = DialogueLm::load(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((path, model))
}

/// Generates a response for every turn after the first from the quantized
/// context, transcribes it through the oracle lexicon and scores it against
/// the turn's text.
pub fn eval(args: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let work = WorkDir::new(&cfg.work_dir);
    let manifest = load_manifest_at(&work.manifest())?;
    let vocab = load_vocab(&work.vocab())?;
    let channel = load_lexicon(&work.lexicon())?;
    let units = load_units(&work.units(), &manifest)?;
    let (_, model) = load_model(&work, &args.model)?;
    let reference = reference_dialogues(&manifest, &vocab, &channel)?;
    let observed = observed_dialogues(&manifest, &vocab, &units)?;
    let decode = decode_config(cfg);
    let result = evaluate_testset(&model, &vocab, &reference, Some(&observed), &channel, &decode)?;
    let report = EvalReport {
        seed: cfg.seed,
        decode: &decode,
        report: &result.report,
        pairs: &result.pairs,
        ppls: &result.ppls,
    };
    write_json(&work.report(&format!("{}.json", args.name)), &report)?;
    let table = result.report.table();
    write_atomic(&work.report(&format!("{}.txt", args.name)), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct NoiseEvalArgs {
    /// Also generate and score responses with this model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// SNR levels in dB or `clean`; overrides the config.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr: Option<Vec<Snr>>,
    /// Number of noise seeds; overrides the config.
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Serialize)]
struct NoiseReportFile<'a> {
    seed: u64,
    snrs: &'a [Snr],
    noise_seeds: &'a [u64],
    #[serde(flatten)]
    report: &'a NoiseSweepReport,
}

/// Corrupts the audio at each SNR, re-tokenizes through the audio-only and
/// fused codebooks and reports frame accuracy (and generation metrics when
/// a model is given) per cell.
pub fn noise_eval(args: &NoiseEvalArgs, cfg: &RunConfig) -> Result<()> {
    let work = WorkDir::new(&cfg.work_dir);
    let manifest = load_manifest_at(&work.manifest())?;
    let vocab = load_vocab(&work.vocab())?;
    let mut tokenizers = Tokenizers::default();
    for m in [QuantModality::Audio, QuantModality::Fused] {
        let p = work.codebook(m);
        require(&p, &format!("{} codebook", m.as_str()), &format!("train-quantizer --modality {}", m.as_str()))?;
        let cb = Codebook::load(&p)?;
        match m {
            QuantModality::Audio => tokenizers.audio_only = Some(cb),
            QuantModality::Fused => tokenizers.audio_visual = Some(cb),
        }
    }
    let gold = load_gold(&work, &manifest)?
        .context("noise evaluation needs gold frame units for every turn (written by `synth`)")?;
    let features = turn_features(load_streams(&manifest)?, gold)?;
    let lexicon = work.lexicon().exists().then(|| load_lexicon(&work.lexicon())).transpose()?;
    let dialogues = match &lexicon {
        Some(ch) => reference_dialogues(&manifest, &vocab, ch)?,
        None => observed_dialogues(&manifest, &vocab, &load_units(&work.units(), &manifest)?)?,
    };
    let model = args.model.as_ref().map(|p| load_model(&work, &Some(p.clone()))).transpose()?;
    let lm = match (&model, &lexicon) {
        (Some((_, m)), Some(ch)) => Some(SweepLm { model: m, vocab: &vocab, channel: ch, decode: decode_config(cfg) }),
        (Some(_), None) => anyhow::bail!("scoring generated responses needs the oracle lexicon (run `synth`)"),
        _ => None,
    };
    let mut sweep = cfg.sweep.clone();
    if let Some(s) = &args.snr {
        sweep.snrs = s.clone();
    }
    if let Some(n) = args.seeds {
        sweep.seeds = (0..n).collect();
    }
    let root = cfg.seed_for(Component::Sweep);
    sweep.seeds = sweep.seeds.iter().map(|&s| derive_seed(root, &[s])).collect();
    let report = run_noise_sweep(&dialogues, &features, &tokenizers, lm.as_ref(), &sweep)?;
    let file = NoiseReportFile { seed: cfg.seed, snrs: &sweep.snrs, noise_seeds: &sweep.seeds, report: &report };
    write_json(&work.report("noise.json"), &file)?;
    write_atomic(&work.report("noise.csv"), report.to_csv().as_bytes())?;
    let table = report.table();
    write_atomic(&work.report("noise.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
