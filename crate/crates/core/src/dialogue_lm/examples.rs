use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, Turn};
use crate::error::{Error, Result};

use super::vocab::{FusedVocabulary, Special, TokenKind};

/// One utterance in both views: text tokens (fused ids from the text block)
/// and deduplicated AV units (unit indices, not yet offset).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnTokens {
    pub speaker_id: String,
    pub text: Vec<usize>,
    pub units: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedDialogue {
    pub id: String,
    pub turns: Vec<TurnTokens>,
}

impl TokenizedDialogue {
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for t in &self.turns {
            if !seen.contains(&t.speaker_id.as_str()) {
                seen.push(&t.speaker_id);
            }
        }
        seen
    }
}

/// Tokenizes every dialogue of `manifest`: text through the vocabulary's
/// BPE, units from `units_of(dialogue index, turn index, turn)`.
pub fn tokenize_manifest(
    manifest: &CorpusManifest,
    vocab: &FusedVocabulary,
    mut units_of: impl FnMut(usize, usize, &Turn) -> Result<Vec<usize>>,
) -> Result<Vec<TokenizedDialogue>> {
    manifest
        .dialogues
        .iter()
        .enumerate()
        .map(|(di, d)| {
            let turns = d
                .turns
                .iter()
                .enumerate()
                .map(|(ti, t)| {
                    Ok(TurnTokens {
                        speaker_id: t.speaker_id.clone(),
                        text: vocab.encode_text(&t.text),
                        units: units_of(di, ti, t)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TokenizedDialogue { id: d.id.clone(), turns })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnModality {
    Speech,
    Text,
}

impl TurnModality {
    fn prefix(self) -> Special {
        match self {
            TurnModality::Speech => Special::Speech,
            TurnModality::Text => Special::Text,
        }
    }
}

/// Paired-task direction or dialogue shape an example was built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    /// AV units in, text out.
    SpeechToText,
    /// Text in, AV units out.
    TextToSpeech,
    MixedDialogue,
    AvDialogue,
}

impl StageTag {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [StageTag::SpeechToText, StageTag::TextToSpeech, StageTag::MixedDialogue, StageTag::AvDialogue]
            .get(c as usize)
            .copied()
    }
}

/// `loss_mask[i]` marks `ids[i]` as a prediction target; it is predicted
/// from the logits at position `i - 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub stage_tag: StageTag,
    pub ai_speaker_id: Option<String>,
}

impl DialogueExample {
    pub fn n_targets(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Inputs, next-token targets and mask shifted for teacher forcing.
    pub fn shifted(&self) -> (&[usize], &[usize], &[bool]) {
        (&self.ids[..self.ids.len() - 1], &self.ids[1..], &self.loss_mask[1..])
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.len() != self.loss_mask.len() {
            return Err(Error::Shape(format!("{} ids but {} mask entries", self.ids.len(), self.loss_mask.len())));
        }
        if let Some(&id) = self.ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::Vocabulary { id, vocab_size });
        }
        if self.ids.len() < 2 || !self.loss_mask[1..].iter().any(|&m| m) {
            return Err(Error::DegenerateMask);
        }
        Ok(())
    }

    /// Drops the oldest tokens so at most `max_len` remain.
    pub fn truncate_left(&mut self, max_len: usize) -> Result<()> {
        if self.ids.len() > max_len {
            let cut = self.ids.len() - max_len;
            self.ids.drain(..cut);
            self.loss_mask.drain(..cut);
        }
        if self.ids.len() < 2 || !self.loss_mask[1..].iter().any(|&m| m) {
            return Err(Error::DegenerateMask);
        }
        Ok(())
    }
}

fn check_text(vocab: &FusedVocabulary, ids: &[usize]) -> Result<()> {
    for &id in ids {
        if vocab.kind(id)? != TokenKind::Text {
            return Err(Error::Invalid(format!("id {id} in a text view is not a text token")));
        }
    }
    Ok(())
}

fn unit_ids(vocab: &FusedVocabulary, units: &[usize]) -> Result<Vec<usize>> {
    units.iter().map(|&u| vocab.unit_id(u)).collect()
}

/// Builds the two paired-task examples for one utterance: speech-to-text
/// (`<speech> units <text> text <eot>`, targets over text and `<eot>`) and
/// text-to-speech (`<text> text <speech> units <eot>`, targets over units
/// and `<eot>`).
pub fn make_recognition_synthesis_pair(
    turn: &TurnTokens,
    vocab: &FusedVocabulary,
) -> Result<(DialogueExample, DialogueExample)> {
    if turn.text.is_empty() || turn.units.is_empty() {
        return Err(Error::Invalid(format!(
            "turn of `{}` needs both a text and a unit view ({} text, {} units)",
            turn.speaker_id,
            turn.text.len(),
            turn.units.len()
        )));
    }
    check_text(vocab, &turn.text)?;
    let av = unit_ids(vocab, &turn.units)?;
    let (sp, tx, eot) = (vocab.special(Special::Speech), vocab.special(Special::Text), vocab.special(Special::Eot));

    let build = |first: (usize, &[usize]), second: (usize, &[usize]), tag| {
        let mut ids = vec![first.0];
        ids.extend_from_slice(first.1);
        ids.push(second.0);
        let prompt = ids.len();
        ids.extend_from_slice(second.1);
        ids.push(eot);
        let mut mask = vec![false; ids.len()];
        mask[prompt..].iter_mut().for_each(|m| *m = true);
        DialogueExample { ids, loss_mask: mask, stage_tag: tag, ai_speaker_id: None }
    };
    Ok((
        build((sp, &av), (tx, &turn.text), StageTag::SpeechToText),
        build((tx, &turn.text), (sp, &av), StageTag::TextToSpeech),
    ))
}

/// Per-turn modality choice.
pub fn all_speech_plan(n_turns: usize) -> Vec<TurnModality> {
    vec![TurnModality::Speech; n_turns]
}

/// Independent coin per turn, landing on speech with `speech_prob`.
pub fn coin_plan<R: Rng>(n_turns: usize, speech_prob: f64, rng: &mut R) -> Vec<TurnModality> {
    (0..n_turns)
        .map(|_| if rng.random::<f64>() < speech_prob { TurnModality::Speech } else { TurnModality::Text })
        .collect()
}

fn push_turn(
    ids: &mut Vec<usize>,
    mask: &mut Vec<bool>,
    vocab: &FusedVocabulary,
    turn: &TurnTokens,
    is_ai: bool,
    modality: TurnModality,
) -> Result<()> {
    let role = if is_ai { Special::Ai } else { Special::User };
    ids.extend([vocab.special(role), vocab.special(modality.prefix())]);
    mask.extend([false, false]);
    let content = match modality {
        TurnModality::Speech => unit_ids(vocab, &turn.units)?,
        TurnModality::Text => {
            check_text(vocab, &turn.text)?;
            turn.text.clone()
        }
    };
    mask.extend(std::iter::repeat_n(is_ai, content.len() + 1));
    ids.extend(content);
    ids.push(vocab.special(Special::Eot));
    Ok(())
}

/// `<bos>`, then per turn: role prefix, modality prefix, content, `<eot>`.
/// Targets are the AI turns' content and their `<eot>`.
pub fn make_dialogue_example(
    dialogue: &TokenizedDialogue,
    vocab: &FusedVocabulary,
    ai_speaker_id: &str,
    plan: &[TurnModality],
) -> Result<DialogueExample> {
    if !dialogue.turns.iter().any(|t| t.speaker_id == ai_speaker_id) {
        return Err(Error::UnknownSpeaker(format!("`{ai_speaker_id}` does not speak in dialogue `{}`", dialogue.id)));
    }
    if plan.len() != dialogue.turns.len() {
        return Err(Error::Shape(format!(
            "modality plan has {} entries for {} turns in dialogue `{}`",
            plan.len(),
            dialogue.turns.len(),
            dialogue.id
        )));
    }
    let mut ids = vec![vocab.special(Special::Bos)];
    let mut mask = vec![false];
    for (turn, &m) in dialogue.turns.iter().zip(plan) {
        push_turn(&mut ids, &mut mask, vocab, turn, turn.speaker_id == ai_speaker_id, m)?;
    }
    let tag =
        if plan.iter().all(|&m| m == TurnModality::Speech) { StageTag::AvDialogue } else { StageTag::MixedDialogue };
    Ok(DialogueExample { ids, loss_mask: mask, stage_tag: tag, ai_speaker_id: Some(ai_speaker_id.to_string()) })
}

/// Context for generating the next AI turn: the prior turns laid out as in
/// [`make_dialogue_example`], followed by `<AI>` and the response modality
/// prefix.
pub fn build_prompt(
    vocab: &FusedVocabulary,
    history: &[TurnTokens],
    ai_speaker_id: &str,
    plan: &[TurnModality],
    response: TurnModality,
) -> Result<Vec<usize>> {
    if plan.len() != history.len() {
        return Err(Error::Shape(format!("modality plan has {} entries for {} turns", plan.len(), history.len())));
    }
    let mut ids = vec![vocab.special(Special::Bos)];
    let mut mask = vec![false];
    for (turn, &m) in history.iter().zip(plan) {
        push_turn(&mut ids, &mut mask, vocab, turn, turn.speaker_id == ai_speaker_id, m)?;
    }
    ids.extend([vocab.special(Special::Ai), vocab.special(response.prefix())]);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::super::vocab::build_vocabulary;
    use super::*;

    fn vocab() -> FusedVocabulary {
        build_vocabulary(&["hello there"], 4, 10).unwrap()
    }

    #[test]
    fn pair_layout_and_masks() {
        let v = vocab();
        let turn = TurnTokens { speaker_id: "a".into(), text: vec![104, 105], units: vec![3, 1, 4] };
        let (a, b) = make_recognition_synthesis_pair(&turn, &v).unwrap();
        assert_eq!(a.ids.len(), 8);
        assert_eq!(a.n_targets(), 3);
        assert!(a.loss_mask[..5].iter().all(|&m| !m));
        let targets: Vec<usize> = b.ids.iter().zip(&b.loss_mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
        let units: Vec<usize> = targets[..3].iter().map(|&i| i - v.unit_offset()).collect();
        assert_eq!(units, turn.units);
        assert_eq!(targets[3], v.special(Special::Eot));
    }

    #[test]
    fn empty_view_is_rejected() {
        let turn = TurnTokens { speaker_id: "a".into(), text: vec![], units: vec![1] };
        assert!(make_recognition_synthesis_pair(&turn, &vocab()).is_err());
    }

    #[test]
    fn truncation_keeps_recent_tokens() {
        let v = vocab();
        let turn = TurnTokens { speaker_id: "a".into(), text: vec![104, 105], units: vec![3, 1, 4] };
        let (mut a, _) = make_recognition_synthesis_pair(&turn, &v).unwrap();
        let tail = a.ids[3..].to_vec();
        a.truncate_left(5).unwrap();
        assert_eq!(a.ids, tail);
        assert!(a.truncate_left(1).is_err());
    }
}
