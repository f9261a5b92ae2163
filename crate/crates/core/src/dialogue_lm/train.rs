use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::{
    adam_step, clip_global_norm, forward_on_graph, AdamConfig, AdamState, Checkpoint, DropoutRng, Graph, ParamGroup,
    Tensor,
};
use crate::seed::derive_seed;

use super::examples::{
    all_speech_plan, coin_plan, make_dialogue_example, make_recognition_synthesis_pair, DialogueExample,
    TokenizedDialogue, TurnTokens,
};
use super::model::DialogueLm;
use super::vocab::FusedVocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub stage3_steps: u64,
    /// Probability that a stage-2 turn is presented as speech.
    pub stage2_speech_prob: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { stage1_steps: 20_000, stage2_steps: 2_000, stage3_steps: 1_000, stage2_speech_prob: 0.5 }
    }
}

impl StageSchedule {
    pub fn steps(&self, stage: u8) -> Result<u64> {
        match stage {
            1 => Ok(self.stage1_steps),
            2 => Ok(self.stage2_steps),
            3 => Ok(self.stage3_steps),
            s => Err(Error::Config(format!("stage must be 1, 2 or 3, got {s}"))),
        }
    }

    pub fn trainable_groups(stage: u8) -> &'static [ParamGroup] {
        if stage == 1 {
            &[ParamGroup::Embedding, ParamGroup::Projection]
        } else {
            &[ParamGroup::Embedding, ParamGroup::Body, ParamGroup::Projection]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub log_every: u64,
    /// Interval for intermediate checkpoints; `None` writes only the last.
    pub checkpoint_every: Option<u64>,
    /// Worker threads for per-example gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            seed: 0,
            log_every: 100,
            checkpoint_every: Some(500),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Training material for one stage.
#[derive(Clone, Debug, PartialEq)]
pub enum StageData {
    /// Utterances for the paired speech-to-text / text-to-speech tasks.
    Pairs(Vec<TurnTokens>),
    /// Dialogues shown with a per-turn modality coin.
    MixedDialogues(Vec<TokenizedDialogue>),
    /// Dialogues shown entirely as AV units.
    SpeechDialogues(Vec<TokenizedDialogue>),
}

impl StageData {
    fn expected_stage(&self) -> u8 {
        match self {
            StageData::Pairs(_) => 1,
            StageData::MixedDialogues(_) => 2,
            StageData::SpeechDialogues(_) => 3,
        }
    }

    fn name(&self) -> &'static str {
        ["paired utterances", "mixed-modality dialogues", "speech-only dialogues"][self.expected_stage() as usize - 1]
    }

    fn epoch_len(&self) -> usize {
        match self {
            StageData::Pairs(t) => 2 * t.len(),
            StageData::MixedDialogues(d) | StageData::SpeechDialogues(d) => d.len(),
        }
    }
}

/// Optimizer progress within one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageProgress {
    pub stage: u8,
    pub step: u64,
    pub adam: AdamState,
    /// Mean batch loss per completed step.
    pub losses: Vec<f64>,
}

impl StageProgress {
    pub fn new(model: &DialogueLm, stage: u8, adam: AdamConfig) -> Self {
        Self { stage, step: 0, adam: AdamState::new(&model.params.tensors, adam), losses: Vec::new() }
    }

    /// Model checkpoint carrying this progress, so training can resume.
    pub fn checkpoint(&self, model: &DialogueLm, seed: u64) -> Checkpoint {
        let mut extra = Vec::new();
        for (i, name) in model.params.names.iter().enumerate() {
            let shape = model.params.tensors[i].shape().to_vec();
            extra.push((format!("adam.m.{name}"), Tensor::new(shape.clone(), self.adam.m[i].clone()).expect("shape")));
            extra.push((format!("adam.v.{name}"), Tensor::new(shape, self.adam.v[i].clone()).expect("shape")));
        }
        let meta = json!({
            "seed": seed,
            "training": {
                "stage": self.stage,
                "step": self.step,
                "adam": self.adam.config,
                "losses": self.losses,
            }
        });
        model.to_checkpoint(meta, extra)
    }

    /// Progress stored in a checkpoint written by [`StageProgress::checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint, model: &DialogueLm) -> Result<Option<Self>> {
        let Some(t) = ck.config.get("training") else { return Ok(None) };
        let stage = t["stage"].as_u64().ok_or_else(|| Error::Config("checkpoint training.stage".into()))? as u8;
        let step = t["step"].as_u64().ok_or_else(|| Error::Config("checkpoint training.step".into()))?;
        let config: AdamConfig = serde_json::from_value(t["adam"].clone())?;
        let losses: Vec<f64> = serde_json::from_value(t["losses"].clone())?;
        let mut adam = AdamState::new(&model.params.tensors, config);
        adam.step = step;
        for (i, name) in model.params.names.iter().enumerate() {
            let get = |k: &str| {
                ck.tensor(&format!("adam.{k}.{name}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state for `{name}`")))
            };
            adam.m[i] = get("m")?;
            adam.v[i] = get("v")?;
        }
        Ok(Some(Self { stage, step, adam, losses }))
    }
}

/// Builds the examples of one epoch, in presentation order.
pub fn epoch_examples(
    vocab: &FusedVocabulary,
    schedule: &StageSchedule,
    data: &StageData,
    max_seq_len: usize,
    seed: u64,
    stage: u8,
    epoch: u64,
) -> Result<Vec<DialogueExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::from(stage), 1, epoch]));
    let mut out = Vec::with_capacity(data.epoch_len());
    match data {
        StageData::Pairs(turns) => {
            for t in turns {
                let (a, b) = make_recognition_synthesis_pair(t, vocab)?;
                out.extend([a, b]);
            }
        }
        StageData::MixedDialogues(ds) | StageData::SpeechDialogues(ds) => {
            for d in ds {
                let speakers = d.speakers();
                let ai = speakers
                    .choose(&mut rng)
                    .ok_or_else(|| Error::Invalid(format!("dialogue `{}` has no turns", d.id)))?;
                let plan = match data {
                    StageData::MixedDialogues(_) => coin_plan(d.turns.len(), schedule.stage2_speech_prob, &mut rng),
                    _ => all_speech_plan(d.turns.len()),
                };
                out.push(make_dialogue_example(d, vocab, ai, &plan)?);
            }
        }
    }
    for ex in out.iter_mut() {
        ex.truncate_left(max_seq_len)?;
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: u64,
    pub losses: Vec<f64>,
    pub final_loss: f64,
}

/// Loss and gradients of one example; frozen params enter as constants.
fn example_grads(
    model: &DialogueLm,
    trainable: &[bool],
    ex: &DialogueExample,
    dropout_seed: u64,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::<f32>::new();
    let vars: Vec<_> = model
        .params
        .tensors
        .iter()
        .zip(trainable)
        .map(|(t, &tr)| if tr { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let (inputs, targets, mask) = ex.shifted();
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let logits = forward_on_graph(&mut g, &vars, inputs, &model.config, Some(DropoutRng { rng: &mut rng }))?;
    let loss = g.masked_cross_entropy(logits, targets, mask)?;
    let value = g.value(loss).item() as f64;
    g.backward(loss)?;
    let grads = vars.iter().zip(trainable).map(|(&v, &tr)| if tr { g.grad(v) } else { None }).collect();
    Ok((value, grads))
}

/// Runs (or resumes) one training stage. `on_checkpoint` receives the
/// progress at every checkpoint interval and once at the end.
#[allow(clippy::too_many_arguments)]
pub fn train_stage_with(
    model: &mut DialogueLm,
    vocab: &FusedVocabulary,
    schedule: &StageSchedule,
    stage: u8,
    data: &StageData,
    cfg: &TrainConfig,
    progress: &mut StageProgress,
    on_checkpoint: &mut dyn FnMut(&DialogueLm, &StageProgress) -> Result<()>,
) -> Result<StageReport> {
    let total = schedule.steps(stage)?;
    if data.expected_stage() != stage {
        return Err(Error::Config(format!(
            "stage {stage} cannot train on {} (they belong to stage {})",
            data.name(),
            data.expected_stage()
        )));
    }
    if progress.stage != stage {
        return Err(Error::Config(format!("progress belongs to stage {}, not {stage}", progress.stage)));
    }
    model.check_vocab(vocab)?;
    let n = data.epoch_len();
    if n == 0 {
        return Err(Error::Invalid(format!("stage {stage} dataset is empty")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let groups = StageSchedule::trainable_groups(stage);
    let trainable: Vec<bool> = model.params.groups.iter().map(|g| groups.contains(g)).collect();
    let mut epoch_cache: Option<(u64, Vec<DialogueExample>)> = None;

    while progress.step < total {
        let step = progress.step;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size as u64 {
            let idx = step * cfg.batch_size as u64 + b;
            let (epoch, pos) = (idx / n as u64, (idx % n as u64) as usize);
            if epoch_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let ex = epoch_examples(vocab, schedule, data, model.config.max_seq_len, cfg.seed, stage, epoch)?;
                epoch_cache = Some((epoch, ex));
            }
            let ex = &epoch_cache.as_ref().expect("epoch cached").1[pos];
            batch.push((ex.clone(), derive_seed(cfg.seed, &[u64::from(stage), 2, idx])));
        }

        let threads = cfg.threads.clamp(1, batch.len());
        let per = batch.len().div_ceil(threads);
        let frozen: &DialogueLm = model;
        let trainable = &trainable;
        let run_chunk = |chunk: &[(DialogueExample, u64)]| {
            chunk.iter().map(|(ex, ds)| example_grads(frozen, trainable, ex, *ds)).collect::<Vec<_>>()
        };
        let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = if threads == 1 {
            run_chunk(&batch)
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = batch.chunks(per).map(|chunk| s.spawn(move || run_chunk(chunk))).collect();
                handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
            })
        };

        let mut grads: Vec<Tensor> = model.params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0;
        for r in results {
            let (loss, gs) = r.map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("stage {stage} step {step}: {what}")),
                other => other,
            })?;
            loss_sum += loss;
            for (acc, g) in grads.iter_mut().zip(gs) {
                if let Some(g) = g {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
        let scale = 1.0 / batch.len() as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= scale));
        let loss = loss_sum / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("stage {stage} step {step}: batch loss {loss}")));
        }
        if let Some(max) = progress.adam.config.clip_norm {
            clip_global_norm(&mut grads, max, Some(trainable));
        }
        progress.adam.lr = progress.adam.config.lr_at(step + 1);
        adam_step(&mut model.params.tensors, &grads, &mut progress.adam, Some(trainable))?;
        progress.step += 1;
        progress.losses.push(loss);
        if cfg.log_every > 0 && progress.step.is_multiple_of(cfg.log_every) {
            log::info!("stage {stage} step {}/{total} loss {loss:.4}", progress.step);
        }
        let at_interval = cfg.checkpoint_every.is_some_and(|k| k > 0 && progress.step.is_multiple_of(k));
        if at_interval && progress.step < total {
            on_checkpoint(model, progress)?;
        }
    }
    on_checkpoint(model, progress)?;
    Ok(StageReport {
        stage,
        steps: progress.step,
        losses: progress.losses.clone(),
        final_loss: progress.losses.last().copied().unwrap_or(f64::NAN),
    })
}

/// Runs one stage from scratch without intermediate checkpoints.
pub fn train_stage(
    model: &mut DialogueLm,
    vocab: &FusedVocabulary,
    schedule: &StageSchedule,
    stage: u8,
    data: &StageData,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    let mut progress = StageProgress::new(model, stage, cfg.adam.clone());
    train_stage_with(model, vocab, schedule, stage, data, cfg, &mut progress, &mut |_, _| Ok(()))
}

/// Mean masked NLL of `examples` under `model` in inference mode.
pub fn mean_masked_nll(model: &DialogueLm, examples: &[DialogueExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("no examples to score".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let (inputs, targets, mask) = ex.shifted();
        let logits = model.logits(inputs)?;
        total += crate::numerics::masked_nll(&logits, targets, mask)?;
    }
    Ok(total / examples.len() as f64)
}
