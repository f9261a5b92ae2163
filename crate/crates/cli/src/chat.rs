use std::io::{BufRead, IsTerminal, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use avdialog::avtoken::{dedup, write_features, Codebook, FeatureStream};
use avdialog::dialogue_lm::{build_prompt, generate_response, DialogueLm, FusedVocabulary, TurnModality, TurnTokens};
use avdialog::evalharness::OracleChannel;
use avdialog::generator::{decode_units_to_signal, predict_and_restore, LengthPredictor, SpeakerTable};
use avdialog::seed::derive_seed;
use clap::Args;

use crate::config::{Component, RunConfig};
use crate::work::{load_lexicon, load_manifest_at, load_vocab, require, WorkDir};

#[derive(Args, Debug)]
pub struct ChatArgs {
    /// Model checkpoint; defaults to the stage-3 checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Speaker the model answers as; defaults to the second speaker of the
    /// manifest's first dialogue.
    #[arg(long)]
    pub ai_speaker: Option<String>,
    /// Speaker id given to typed turns.
    #[arg(long, default_value = "user")]
    pub user_speaker: String,
    /// Write each response's decoded frames here.
    #[arg(long)]
    pub save_dir: Option<PathBuf>,
}

struct Session {
    model: DialogueLm,
    vocab: FusedVocabulary,
    length: LengthPredictor,
    decoder: Codebook,
    speakers: SpeakerTable,
    lexicon: Option<OracleChannel>,
    ai: String,
    user: String,
    history: Vec<(TurnTokens, TurnModality)>,
}

impl Session {
    fn respond(&mut self, text: &str, turn: usize, cfg: &RunConfig) -> Result<(Vec<usize>, Option<FeatureStream>)> {
        let user = TurnTokens { speaker_id: self.user.clone(), text: self.vocab.encode_text(text), units: vec![] };
        self.history.push((user, TurnModality::Text));
        let turns: Vec<TurnTokens> = self.history.iter().map(|(t, _)| t.clone()).collect();
        let plan: Vec<TurnModality> = self.history.iter().map(|(_, m)| *m).collect();
        let mut prompt = build_prompt(&self.vocab, &turns, &self.ai, &plan, TurnModality::Speech)?;
        let max = self.model.config.max_seq_len;
        let keep = max.saturating_sub(cfg.decode.max_new_tokens + 1).max(max / 2).max(1);
        if prompt.len() > keep {
            prompt.drain(..prompt.len() - keep);
        }
        let decode = avdialog::dialogue_lm::DecodeConfig {
            seed: derive_seed(cfg.seed_for(Component::Decoding), &[turn as u64]),
            ..cfg.decode.clone()
        };
        let units = generate_response(&self.model, &self.vocab, &prompt, &decode)?;
        let deduped = dedup(&units).units.0;
        let frames = if deduped.is_empty() {
            None
        } else {
            let full = predict_and_restore(&self.length, &deduped)?;
            Some(decode_units_to_signal(&full.0, &self.ai, &self.decoder, &self.speakers)?.frames)
        };
        let ai = TurnTokens { speaker_id: self.ai.clone(), text: vec![], units: deduped.clone() };
        self.history.push((ai, TurnModality::Speech));
        Ok((deduped, frames))
    }
}

/// Terminal dialogue: typed text goes in as a user text turn, the model
/// answers in units, which are length-restored, decoded and echoed through
/// the oracle lexicon when one exists.
pub fn chat(args: &ChatArgs, cfg: &RunConfig) -> Result<()> {
    let work = WorkDir::new(&cfg.work_dir);
    let model_path = args.model.clone().unwrap_or_else(|| work.stage(3));
    require(&model_path, "model checkpoint", "train --stage 3")?;
    require(&work.length(), "length predictor", "train-length")?;
    require(&work.decoder(), "decoder codebook", "train-length")?;
    require(&work.speakers(), "speaker table", "train-length")?;
    let vocab = load_vocab(&work.vocab())?;
    let model = DialogueLm::load(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    model.check_vocab(&vocab)?;
    let ai = match &args.ai_speaker {
        Some(s) => s.clone(),
        None => {
            let m = load_manifest_at(&work.manifest())?;
            match m.dialogues.first().and_then(|d| d.turns.get(1)) {
                Some(t) => t.speaker_id.clone(),
                None => bail!("no dialogue to pick a default AI speaker from; pass --ai-speaker"),
            }
        }
    };
    if ai == args.user_speaker {
        bail!("the AI and user speaker ids must differ");
    }
    let speakers = SpeakerTable::load(&work.speakers())?;
    speakers.embedding(&ai)?;
    let lexicon = work.lexicon().exists().then(|| load_lexicon(&work.lexicon())).transpose()?;
    if let Some(dir) = &args.save_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut session = Session {
        model,
        vocab,
        length: LengthPredictor::load(&work.length())?,
        decoder: Codebook::load(&work.decoder())?,
        speakers,
        lexicon,
        ai,
        user: args.user_speaker.clone(),
        history: Vec::new(),
    };

    let stdin = std::io::stdin();
    let interactive = stdin.is_terminal();
    let mut out = std::io::stdout().lock();
    if interactive {
        eprintln!("chatting with `{}`; /reset clears the history, /quit exits", session.ai);
    }
    let mut turn = 0usize;
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            eprint!("you> ");
            std::io::stderr().flush()?;
        }
        let Some(line) = lines.next() else { break };
        let line = line?;
        let text = line.trim();
        match text {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                session.history.clear();
                writeln!(out, "(history cleared)")?;
                continue;
            }
            _ => {}
        }
        let (units, frames) = session.respond(text, turn, cfg)?;
        let echo = match &session.lexicon {
            Some(l) => l.decode(&units).join(" "),
            None => "(no lexicon to transcribe units)".to_string(),
        };
        let trace: Vec<String> = units.iter().map(usize::to_string).collect();
        writeln!(out, "ai> {echo}")?;
        let n_frames = frames.as_ref().map_or(0, FeatureStream::n_frames);
        writeln!(out, "    units [{}] ({} units, {n_frames} frames)", trace.join(" "), units.len())?;
        if let (Some(dir), Some(stream)) = (&args.save_dir, &frames) {
            write_features(&dir.join(format!("turn{turn:03}.avf")), stream)?;
        }
        out.flush()?;
        turn += 1;
    }
    Ok(())
}
