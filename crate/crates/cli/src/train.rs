use anyhow::{bail, Context, Result};
use avdialog::avtoken::{read_tokens, FeatureStream};
use avdialog::dialogue_lm::{train_stage_with, DialogueLm, StageData, StageProgress, TrainConfig};
use avdialog::generator::{train_length_predictor, unit_codebook, LengthPredictorConfig, SpeakerTable};
use avdialog::numerics::Checkpoint;
use clap::Args;
use serde::Serialize;

use crate::config::{Component, RunConfig};
use crate::work::{
    load_manifest_at, load_streams, load_units, load_vocab, observed_dialogues, require, write_json, QuantModality,
    WorkDir,
};

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    /// Step count for this stage; overrides the config schedule.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Ignore a partial checkpoint of this stage and start over.
    #[arg(long)]
    pub restart: bool,
}

#[derive(Serialize)]
struct TrainReport {
    seed: u64,
    stage: u8,
    steps: u64,
    final_loss: f64,
    losses: Vec<f64>,
}

/// Partial progress of `stage` stored at `path`, if any.
fn partial_progress(path: &std::path::Path, stage: u8, total: u64) -> Result<Option<(DialogueLm, StageProgress)>> {
    if !path.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(path)?;
    let model = DialogueLm::from_checkpoint(&ck, path)?;
    match StageProgress::from_checkpoint(&ck, &model)? {
        Some(p) if p.stage == stage && p.step < total => Ok(Some((model, p))),
        _ => Ok(None),
    }
}

/// Runs one training stage. Stage 1 starts from a fresh model, later stages
/// from the previous stage's checkpoint. A partial checkpoint of the same
/// stage is resumed.
pub fn train(args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let work = WorkDir::new(&cfg.work_dir);
    let manifest = load_manifest_at(&work.manifest())?;
    let vocab = load_vocab(&work.vocab())?;
    let units = load_units(&work.units(), &manifest)?;
    let dialogues = observed_dialogues(&manifest, &vocab, &units)?;
    let stage = args.stage;
    let mut schedule = cfg.schedule.clone();
    if let Some(n) = args.steps {
        match stage {
            1 => schedule.stage1_steps = n,
            2 => schedule.stage2_steps = n,
            _ => schedule.stage3_steps = n,
        }
    }
    let total = schedule.steps(stage)?;
    let out = work.stage(stage);
    let resumed = if args.restart { None } else { partial_progress(&out, stage, total)? };
    let tcfg = TrainConfig { seed: cfg.seed_for(Component::Training), ..cfg.train.clone() };
    let (mut model, mut progress) = match resumed {
        Some((m, p)) => {
            log::info!("resuming stage {stage} at step {}/{total} from {}", p.step, out.display());
            (m, p)
        }
        None => {
            let model = if stage == 1 {
                DialogueLm::for_vocab(&vocab, cfg.model.clone(), cfg.seed_for(Component::ModelInit))?
            } else {
                let prev = work.stage(stage - 1);
                require(&prev, &format!("stage {} checkpoint", stage - 1), &format!("train --stage {}", stage - 1))?;
                DialogueLm::load(&prev)?
            };
            let progress = StageProgress::new(&model, stage, tcfg.adam.clone());
            (model, progress)
        }
    };
    model.check_vocab(&vocab).context("the model and vocabulary disagree; rebuild one of them")?;
    let data = match stage {
        1 => StageData::Pairs(dialogues.iter().flat_map(|d| d.turns.iter().cloned()).collect()),
        2 => StageData::MixedDialogues(dialogues),
        _ => StageData::SpeechDialogues(dialogues),
    };
    let seed = cfg.seed;
    let mut save = |m: &DialogueLm, p: &StageProgress| -> avdialog::error::Result<()> {
        let tmp = out.with_extension("tmp");
        p.checkpoint(m, seed).save(&tmp)?;
        std::fs::rename(&tmp, &out).map_err(|source| avdialog::error::Error::Io { path: out.clone(), source })?;
        log::info!("checkpoint at stage {stage} step {} -> {}", p.step, out.display());
        Ok(())
    };
    let report = train_stage_with(&mut model, &vocab, &schedule, stage, &data, &tcfg, &mut progress, &mut save)?;
    let r = TrainReport { seed, stage, steps: report.steps, final_loss: report.final_loss, losses: report.losses };
    write_json(&work.report(&format!("train_stage{stage}.json")), &r)?;
    println!("stage {stage}: {} steps, final loss {:.4} -> {}", r.steps, r.final_loss, out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct LengthArgs {
    /// Step count; overrides the config.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Serialize)]
struct LengthReport {
    seed: u64,
    steps: u64,
    final_loss: f64,
    clipped: usize,
    /// Share of training units whose predicted duration is exact.
    duration_accuracy: f64,
    n_speakers: usize,
}

/// Trains the length predictor on the tokenized corpus, and fits the
/// stand-in decoder's unit codebook and speaker table on the fused features.
pub fn train_length(args: &LengthArgs, cfg: &RunConfig) -> Result<()> {
    let work = WorkDir::new(&cfg.work_dir);
    let manifest = load_manifest_at(&work.manifest())?;
    let units = load_units(&work.units(), &manifest)?;
    if units.modality != QuantModality::Fused {
        bail!("the decoder is fitted on fused features; re-run `tokenize --modality fused`");
    }
    let streams = load_streams(&manifest)?;
    let n_units = units.n_units;
    let lcfg = LengthPredictorConfig {
        n_units: Some(n_units),
        seed: cfg.seed_for(Component::Length),
        steps: args.steps.unwrap_or(cfg.length.steps),
        ..cfg.length.clone()
    };
    let data: Vec<_> = units.dialogues.iter().flatten().cloned().collect();
    let (model, report) = train_length_predictor(&data, &lcfg)?;
    let (mut hit, mut n) = (0usize, 0usize);
    for d in data.iter().filter(|d| !d.units.0.is_empty()) {
        let pred = model.predict_durations(&d.units.0)?;
        hit += pred.iter().zip(&d.durations).filter(|(p, t)| **p == (**t).min(lcfg.d_max)).count();
        n += pred.len();
    }

    let fused: Vec<Vec<FeatureStream>> = streams
        .iter()
        .map(|ts| ts.iter().map(|(a, v)| avdialog::avtoken::fuse(a, v)).collect())
        .collect::<avdialog::error::Result<_>>()?;
    let tokens: Vec<Vec<Vec<usize>>> = manifest
        .dialogues
        .iter()
        .enumerate()
        .map(|(di, d)| {
            (0..d.turns.len())
                .map(|ti| {
                    let p = work.tokens(di, ti);
                    require(&p, "frame token file", "tokenize")?;
                    Ok(read_tokens(&p)?.0)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut by_speaker = Vec::new();
    for (di, d) in manifest.dialogues.iter().enumerate() {
        for (ti, t) in d.turns.iter().enumerate() {
            samples.push((&fused[di][ti], tokens[di][ti].as_slice()));
            by_speaker.push((t.speaker_id.as_str(), &fused[di][ti], tokens[di][ti].as_slice()));
        }
    }
    let decoder = unit_codebook(&samples, n_units)?;
    let speakers = SpeakerTable::fit(&decoder, &by_speaker)?;

    model.save(&work.length())?;
    decoder.save(&work.decoder())?;
    speakers.save(&work.speakers())?;
    let r = LengthReport {
        seed: cfg.seed,
        steps: report.steps,
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        clipped: report.clipped,
        duration_accuracy: if n == 0 { 0.0 } else { hit as f64 / n as f64 },
        n_speakers: speakers.rows.len(),
    };
    write_json(&work.report("length.json"), &r)?;
    println!(
        "length predictor: {} steps, final loss {:.4}, duration accuracy {:.3}; decoder for {} speakers",
        r.steps, r.final_loss, r.duration_accuracy, r.n_speakers
    );
    Ok(())
}
