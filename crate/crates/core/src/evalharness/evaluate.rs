use serde::{Deserialize, Serialize};

use crate::dialogue_lm::{
    all_speech_plan, build_prompt, generate_response, score_ppl, DecodeConfig, DialogueExample, DialogueLm,
    FusedVocabulary, Special, StageTag, TokenizedDialogue, TurnModality, TurnTokens,
};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

use super::metrics::{tokenize, EvalPair, MetricReport};
use super::oracle::OracleChannel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestsetResult {
    pub report: MetricReport,
    pub pairs: Vec<EvalPair>,
    /// Perplexity of each ground-truth response, in pair order.
    pub ppls: Vec<f64>,
}

fn truncate_prompt(mut prompt: Vec<usize>, keep: usize) -> Vec<usize> {
    if prompt.len() > keep {
        prompt.drain(..prompt.len() - keep);
    }
    prompt
}

/// Prompt lengths leave room for a full response.
fn prompt_budget(max_seq_len: usize, max_new_tokens: usize) -> usize {
    max_seq_len.saturating_sub(max_new_tokens + 1).max(max_seq_len / 2).max(1)
}

/// `prompt` followed by the target's units and `<eot>`, scored on the
/// response only.
fn response_example(
    vocab: &FusedVocabulary,
    prompt: Vec<usize>,
    target: &TurnTokens,
    max_seq_len: usize,
) -> Result<DialogueExample> {
    let mut ids = prompt;
    let start = ids.len();
    for &u in &target.units {
        ids.push(vocab.unit_id(u)?);
    }
    ids.push(vocab.special(Special::Eot));
    let mut loss_mask = vec![false; ids.len()];
    loss_mask[start..].iter_mut().for_each(|m| *m = true);
    let mut ex = DialogueExample {
        ids,
        loss_mask,
        stage_tag: StageTag::AvDialogue,
        ai_speaker_id: Some(target.speaker_id.clone()),
    };
    ex.truncate_left(max_seq_len)?;
    Ok(ex)
}

/// One speech-only example per turn after the first: all earlier turns as
/// context, that turn's speaker as the AI, loss on its response.
pub fn response_examples(
    vocab: &FusedVocabulary,
    dialogues: &[TokenizedDialogue],
    max_seq_len: usize,
) -> Result<Vec<DialogueExample>> {
    let mut out = Vec::new();
    for d in dialogues {
        for k in 1..d.turns.len() {
            let target = &d.turns[k];
            let prompt =
                build_prompt(vocab, &d.turns[..k], &target.speaker_id, &all_speech_plan(k), TurnModality::Speech)?;
            out.push(response_example(vocab, prompt, target, max_seq_len)?);
        }
    }
    Ok(out)
}

/// Whether greedy decoding reproduces each dialogue's last turn exactly
/// from the turns before it.
pub fn final_response_matches(
    model: &DialogueLm,
    vocab: &FusedVocabulary,
    dialogues: &[TokenizedDialogue],
    max_new_tokens: usize,
) -> Result<Vec<bool>> {
    let keep = prompt_budget(model.config.max_seq_len, max_new_tokens);
    let cfg = DecodeConfig { temperature: 0.0, max_new_tokens, ..DecodeConfig::default() };
    dialogues
        .iter()
        .map(|d| {
            let k = d.turns.len() - 1;
            if k == 0 {
                return Err(Error::Invalid(format!("dialogue `{}` has a single turn", d.id)));
            }
            let target = &d.turns[k];
            let prompt =
                build_prompt(vocab, &d.turns[..k], &target.speaker_id, &all_speech_plan(k), TurnModality::Speech)?;
            let units = generate_response(model, vocab, &truncate_prompt(prompt, keep), &cfg)?;
            Ok(units == target.units)
        })
        .collect()
}

/// Generates a speech response for every turn after the first, with the
/// speaker of that turn as the AI and all earlier turns as speech context,
/// transcribes it through `channel` and scores it against the turn's text.
///
/// `observed` replaces the context units (e.g. re-quantized noisy input);
/// responses are always scored against `dialogues`.
pub fn evaluate_testset(
    model: &DialogueLm,
    vocab: &FusedVocabulary,
    dialogues: &[TokenizedDialogue],
    observed: Option<&[TokenizedDialogue]>,
    channel: &OracleChannel,
    decode: &DecodeConfig,
) -> Result<TestsetResult> {
    model.check_vocab(vocab)?;
    if vocab.n_units() < channel.n_units() {
        return Err(Error::Config(format!(
            "vocabulary has {} units but the transcription channel uses {}",
            vocab.n_units(),
            channel.n_units()
        )));
    }
    let observed = observed.unwrap_or(dialogues);
    if observed.len() != dialogues.len() {
        return Err(Error::Shape("observed and reference dialogue counts differ".into()));
    }
    let max = model.config.max_seq_len;
    let keep = prompt_budget(max, decode.max_new_tokens);
    let mut pairs = Vec::new();
    let mut ppls = Vec::new();
    for (di, (d, obs)) in dialogues.iter().zip(observed).enumerate() {
        if obs.turns.len() != d.turns.len() {
            return Err(Error::Shape(format!("dialogue `{}`: observed turn count differs", d.id)));
        }
        for k in 1..d.turns.len() {
            let target = &d.turns[k];
            let ai = target.speaker_id.as_str();
            let history = &obs.turns[..k];
            let prompt = build_prompt(vocab, history, ai, &all_speech_plan(k), TurnModality::Speech)?;
            let prompt = truncate_prompt(prompt, keep);
            let cfg = DecodeConfig { seed: derive_seed(decode.seed, &[di as u64, k as u64]), ..decode.clone() };
            let units = generate_response(model, vocab, &prompt, &cfg)?;
            let text = vocab.decode_text(&target.text)?;
            pairs.push(EvalPair {
                dialogue_id: d.id.clone(),
                turn_index: k,
                hypothesis: channel.decode(&units),
                reference: tokenize(&text),
            });

            let ex = response_example(vocab, prompt, target, max)?;
            ppls.push(score_ppl(model, &ex)?);
        }
    }
    if pairs.is_empty() {
        return Err(Error::Invalid("test set has no turns to respond to".into()));
    }
    let ppl = ppls.iter().sum::<f64>() / ppls.len() as f64;
    Ok(TestsetResult { report: MetricReport::from_pairs(&pairs, ppl), pairs, ppls })
}
