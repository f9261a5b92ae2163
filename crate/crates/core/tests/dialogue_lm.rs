use std::path::Path;

use avdialog::dialogue_lm::*;
use avdialog::numerics::{masked_nll, Checkpoint, ParamGroup, TransformerConfig, TransformerParams};
use avdialog::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(vocab: &FusedVocabulary) -> TransformerConfig {
    TransformerConfig {
        n_layers: 1,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: vocab.size(),
        output_size: None,
        max_seq_len: 128,
        dropout: 0.1,
        causal: true,
    }
}

fn vocab() -> FusedVocabulary {
    build_vocabulary(&["hello there friend", "how are you today", "fine thanks"], 16, 20).unwrap()
}

fn random_dialogue(rng: &mut ChaCha8Rng, vocab: &FusedVocabulary, id: usize) -> TokenizedDialogue {
    let speakers = ["u", "a", "c"];
    let n_speakers = rng.random_range(2..=3);
    let n_turns = rng.random_range(2..7);
    let mut prev = usize::MAX;
    let turns = (0..n_turns)
        .map(|_| {
            let mut s = rng.random_range(0..n_speakers);
            if s == prev {
                s = (s + 1) % n_speakers;
            }
            prev = s;
            let text_len = rng.random_range(1..6);
            let unit_len = rng.random_range(1..8);
            TurnTokens {
                speaker_id: speakers[s].to_string(),
                text: (0..text_len).map(|_| rng.random_range(0..vocab.n_text())).collect(),
                units: (0..unit_len).map(|_| rng.random_range(0..vocab.n_units())).collect(),
            }
        })
        .collect();
    TokenizedDialogue { id: format!("d{id}"), turns }
}

/// Independent mask oracle: walks the token layout and marks everything
/// after an `<AI>` turn's modality prefix up to and including its `<eot>`.
fn rescan_mask(vocab: &FusedVocabulary, ids: &[usize]) -> Vec<bool> {
    let (ai, user, eot) = (vocab.special(Special::Ai), vocab.special(Special::User), vocab.special(Special::Eot));
    let mut mask = vec![false; ids.len()];
    let mut i = 1;
    while i < ids.len() {
        let is_ai = ids[i] == ai;
        assert!(is_ai || ids[i] == user, "turn must open with a role prefix");
        let mut j = i + 2;
        while ids[j] != eot {
            mask[j] = is_ai;
            j += 1;
        }
        mask[j] = is_ai;
        i = j + 1;
    }
    mask
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn dialogue_mask_matches_rescan(seed in any::<u64>()) {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = random_dialogue(&mut rng, &v, 0);
        let speakers = d.speakers();
        let ai = speakers[rng.random_range(0..speakers.len())];
        let plan = coin_plan(d.turns.len(), 0.5, &mut rng);
        let ex = make_dialogue_example(&d, &v, ai, &plan).unwrap();
        prop_assert_eq!(ex.ids.len(), ex.loss_mask.len());
        prop_assert_eq!(ex.ids[0], v.special(Special::Bos));
        prop_assert_eq!(&ex.loss_mask, &rescan_mask(&v, &ex.ids));
        ex.validate(v.size()).unwrap();
    }

    #[test]
    fn text_round_trips(s in "[ -~\u{e0}-\u{ff}]{0,40}") {
        let v = vocab();
        prop_assert_eq!(v.decode_text(&v.encode_text(&s)).unwrap(), s);
    }
}

#[test]
fn two_turn_dialogue_masks_ai_content_and_eot() {
    let v = vocab();
    let d = TokenizedDialogue {
        id: "x".into(),
        turns: vec![
            TurnTokens { speaker_id: "u".into(), text: vec![1, 2], units: vec![0, 1, 2] },
            TurnTokens { speaker_id: "a".into(), text: vec![3], units: vec![4, 5, 6, 7] },
        ],
    };
    let ex = make_dialogue_example(&d, &v, "a", &all_speech_plan(2)).unwrap();
    assert_eq!(ex.n_targets(), 5);
    assert_eq!(ex.stage_tag, StageTag::AvDialogue);
    assert!(matches!(make_dialogue_example(&d, &v, "zed", &all_speech_plan(2)), Err(Error::UnknownSpeaker(_))));
}

#[test]
fn swapping_ai_complements_targets() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..50 {
        let mut d = random_dialogue(&mut rng, &v, i);
        d.turns.iter_mut().enumerate().for_each(|(k, t)| t.speaker_id = ["p", "q"][k % 2].into());
        let plan = coin_plan(d.turns.len(), 0.5, &mut rng);
        let a = make_dialogue_example(&d, &v, "p", &plan).unwrap();
        let b = make_dialogue_example(&d, &v, "q", &plan).unwrap();
        assert_eq!(a.ids.len(), b.ids.len());
        let roles = [v.special(Special::Ai), v.special(Special::User)];
        for (x, y) in a.ids.iter().zip(&b.ids) {
            assert!(x == y || (roles.contains(x) && roles.contains(y)));
        }
        let prefixes = [Special::Bos, Special::Ai, Special::User, Special::Speech, Special::Text].map(|s| v.special(s));
        for (k, &id) in a.ids.iter().enumerate() {
            let content = !prefixes.contains(&id);
            assert_eq!(a.loss_mask[k] ^ b.loss_mask[k], content, "position {k}");
        }
    }
}

#[test]
fn user_tokens_do_not_change_targets() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..50 {
        let d = random_dialogue(&mut rng, &v, i);
        let ai = d.turns.last().unwrap().speaker_id.clone();
        let plan = all_speech_plan(d.turns.len());
        let base = make_dialogue_example(&d, &v, &ai, &plan).unwrap();
        let mut edited = d.clone();
        for t in edited.turns.iter_mut().filter(|t| t.speaker_id != ai) {
            let n = t.units.len();
            t.units[rng.random_range(0..n)] = rng.random_range(0..v.n_units());
        }
        let ex = make_dialogue_example(&edited, &v, &ai, &plan).unwrap();
        let targets = |e: &DialogueExample| -> Vec<usize> {
            let mut t: Vec<usize> = e.ids.iter().zip(&e.loss_mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
            t.sort();
            t
        };
        assert_eq!(targets(&base), targets(&ex));
        assert_eq!(base.loss_mask, ex.loss_mask);
    }
}

#[test]
fn stage_two_coin_is_balanced() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dialogues: Vec<_> = (0..1000).map(|i| random_dialogue(&mut rng, &v, i)).collect();
    let data = StageData::MixedDialogues(dialogues);
    let ex = epoch_examples(&v, &StageSchedule::default(), &data, 10_000, 7, 2, 0).unwrap();
    let (sp, tx) = (v.special(Special::Speech), v.special(Special::Text));
    let speech = ex.iter().flat_map(|e| &e.ids).filter(|&&i| i == sp).count();
    let text = ex.iter().flat_map(|e| &e.ids).filter(|&&i| i == tx).count();
    let frac = speech as f64 / (speech + text) as f64;
    assert!((0.45..=0.55).contains(&frac), "speech fraction {frac}");
}

#[test]
fn stage_three_examples_are_speech_only() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let dialogues: Vec<_> = (0..40).map(|i| random_dialogue(&mut rng, &v, i)).collect();
    let ex =
        epoch_examples(&v, &StageSchedule::default(), &StageData::SpeechDialogues(dialogues), 10_000, 1, 3, 0).unwrap();
    let tx = v.special(Special::Text);
    assert!(ex.iter().all(|e| e.stage_tag == StageTag::AvDialogue && !e.ids.contains(&tx)));
}

fn toy_pairs(v: &FusedVocabulary, n: usize, seed: u64) -> Vec<TurnTokens> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TurnTokens {
            speaker_id: format!("s{}", i % 3),
            text: (0..rng.random_range(1..6)).map(|_| rng.random_range(0..v.n_text())).collect(),
            units: (0..rng.random_range(1..8)).map(|_| rng.random_range(0..v.n_units())).collect(),
        })
        .collect()
}

fn quick_train() -> TrainConfig {
    TrainConfig { batch_size: 4, log_every: 0, checkpoint_every: None, threads: 2, ..Default::default() }
}

fn group_bytes(model: &DialogueLm, group: ParamGroup) -> Vec<u8> {
    let ck = model.to_checkpoint(serde_json::json!({}), Vec::new());
    let keep: Vec<String> = model.params.group_indices(group).map(|i| model.params.names[i].clone()).collect();
    let sub = Checkpoint {
        config: serde_json::json!({}),
        tensors: ck.tensors.into_iter().filter(|(n, _)| keep.contains(n)).collect(),
    };
    sub.to_bytes()
}

#[test]
fn stage_one_freezes_the_body() {
    let v = vocab();
    let mut model = DialogueLm::for_vocab(&v, tiny(&v), 3).unwrap();
    let before = [ParamGroup::Embedding, ParamGroup::Body, ParamGroup::Projection].map(|g| group_bytes(&model, g));
    let schedule = StageSchedule { stage1_steps: 10, ..Default::default() };
    train_stage(&mut model, &v, &schedule, 1, &StageData::Pairs(toy_pairs(&v, 12, 1)), &quick_train()).unwrap();
    let after = [ParamGroup::Embedding, ParamGroup::Body, ParamGroup::Projection].map(|g| group_bytes(&model, g));
    assert_ne!(before[0], after[0]);
    assert_eq!(before[1], after[1]);
    assert_ne!(before[2], after[2]);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let v = vocab();
    let data = StageData::Pairs(toy_pairs(&v, 12, 2));
    let schedule = StageSchedule { stage1_steps: 6, ..Default::default() };
    let run = |threads| {
        let mut m = DialogueLm::for_vocab(&v, tiny(&v), 4).unwrap();
        let r = train_stage(&mut m, &v, &schedule, 1, &data, &TrainConfig { threads, ..quick_train() }).unwrap();
        (m, r)
    };
    let (m1, r1) = run(1);
    let (m2, r2) = run(1);
    let (m3, r3) = run(3);
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
    assert_eq!(r1, r3);
    assert_eq!(m1, m3);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let data = StageData::MixedDialogues((0..6).map(|i| random_dialogue(&mut rng, &v, i)).collect());
    let schedule = StageSchedule { stage2_steps: 8, ..Default::default() };
    let cfg = TrainConfig { checkpoint_every: Some(4), ..quick_train() };

    let mut full = DialogueLm::for_vocab(&v, tiny(&v), 5).unwrap();
    let start = full.clone();
    let mut saved: Vec<Vec<u8>> = Vec::new();
    let mut progress = StageProgress::new(&full, 2, cfg.adam.clone());
    let report = train_stage_with(&mut full, &v, &schedule, 2, &data, &cfg, &mut progress, &mut |m, p| {
        saved.push(p.checkpoint(m, cfg.seed).to_bytes());
        Ok(())
    })
    .unwrap();
    assert_eq!(saved.len(), 2);

    let ck = Checkpoint::from_bytes(&saved[0], Path::new("mid")).unwrap();
    let mut resumed = DialogueLm::from_checkpoint(&ck, Path::new("mid")).unwrap();
    assert_ne!(resumed, start);
    let mut p = StageProgress::from_checkpoint(&ck, &resumed).unwrap().unwrap();
    assert_eq!(p.step, 4);
    let r2 = train_stage_with(&mut resumed, &v, &schedule, 2, &data, &cfg, &mut p, &mut |_, _| Ok(())).unwrap();
    assert_eq!(resumed, full);
    assert_eq!(r2.losses, report.losses);
}

#[test]
fn stage_and_data_must_agree() {
    let v = vocab();
    let mut m = DialogueLm::for_vocab(&v, tiny(&v), 0).unwrap();
    let err =
        train_stage(&mut m, &v, &StageSchedule::default(), 2, &StageData::Pairs(toy_pairs(&v, 2, 0)), &quick_train());
    assert!(matches!(err, Err(Error::Config(_))));
    let err =
        train_stage(&mut m, &v, &StageSchedule::default(), 4, &StageData::Pairs(toy_pairs(&v, 2, 0)), &quick_train());
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn generation_stays_in_the_unit_block() {
    let v = vocab();
    let model = DialogueLm::for_vocab(&v, tiny(&v), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut emitted = 0;
    for i in 0..1000u64 {
        let d = random_dialogue(&mut rng, &v, i as usize);
        let k = d.turns.len() - 1;
        let ai = d.turns[k].speaker_id.clone();
        let prompt = build_prompt(&v, &d.turns[..k], &ai, &all_speech_plan(k), TurnModality::Speech).unwrap();
        let cfg = DecodeConfig { temperature: 1.0, top_p: 1.0, max_new_tokens: 6, seed: i };
        let units = generate_response(&model, &v, &prompt, &cfg).unwrap();
        assert!(units.len() <= 6);
        for u in units {
            assert_eq!(v.kind(v.unit_id(u).unwrap()).unwrap(), TokenKind::Unit(u));
            emitted += 1;
        }
    }
    assert!(emitted > 1000);
}

#[test]
fn greedy_decoding_is_repeatable_and_long_context_is_refused() {
    let v = vocab();
    let model = DialogueLm::for_vocab(&v, tiny(&v), 7).unwrap();
    let prompt = vec![v.special(Special::Bos), v.special(Special::Ai), v.special(Special::Speech)];
    let cfg = DecodeConfig { max_new_tokens: 20, ..Default::default() };
    let a = generate_response(&model, &v, &prompt, &cfg).unwrap();
    assert_eq!(a, generate_response(&model, &v, &prompt, &cfg).unwrap());
    let long = vec![v.special(Special::Bos); 128];
    assert!(matches!(generate_response(&model, &v, &long, &cfg), Err(Error::SequenceTooLong { .. })));
}

#[test]
fn uniform_model_has_perplexity_v() {
    let v = vocab();
    let cfg = tiny(&v);
    let model = DialogueLm { params: TransformerParams::zeros(&cfg).unwrap(), config: cfg };
    let turn = TurnTokens { speaker_id: "a".into(), text: vec![5, 6, 7], units: vec![1, 2] };
    let (a, b) = make_recognition_synthesis_pair(&turn, &v).unwrap();
    for ex in [a, b] {
        let ppl = score_ppl(&model, &ex).unwrap();
        assert!((ppl - v.size() as f64).abs() < 1e-3 * v.size() as f64, "ppl {ppl}");
    }
}

#[test]
fn perplexity_is_exp_of_masked_nll() {
    let v = vocab();
    let model = DialogueLm::for_vocab(&v, tiny(&v), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..10 {
        let d = random_dialogue(&mut rng, &v, i);
        let ex = make_dialogue_example(&d, &v, &d.turns[1].speaker_id, &all_speech_plan(d.turns.len())).unwrap();
        let (inp, tgt, mask) = ex.shifted();
        let nll = masked_nll(&model.logits(inp).unwrap(), tgt, mask).unwrap();
        assert!((score_ppl(&model, &ex).unwrap() - nll.exp()).abs() < 1e-9);
        assert!((mean_masked_nll(&model, std::slice::from_ref(&ex)).unwrap() - nll).abs() < 1e-12);
    }
    let bad = DialogueExample {
        ids: vec![1, 2],
        loss_mask: vec![true, false],
        stage_tag: StageTag::AvDialogue,
        ai_speaker_id: None,
    };
    assert!(matches!(score_ppl(&model, &bad), Err(Error::DegenerateMask)));
}

#[test]
fn shard_and_checkpoint_files_round_trip() {
    let v = vocab();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let dialogues: Vec<_> = (0..5).map(|i| random_dialogue(&mut rng, &v, i)).collect();
    let ex =
        epoch_examples(&v, &StageSchedule::default(), &StageData::MixedDialogues(dialogues), 512, 0, 2, 0).unwrap();
    let shard = dir.path().join("s.avds");
    write_shard(&shard, &ex).unwrap();
    let back = read_shard(&shard).unwrap();
    assert_eq!(back.len(), ex.len());
    for (a, b) in back.iter().zip(&ex) {
        assert_eq!((&a.ids, &a.loss_mask, a.stage_tag), (&b.ids, &b.loss_mask, b.stage_tag));
    }

    let model = DialogueLm::for_vocab(&v, tiny(&v), 9).unwrap();
    let path = dir.path().join("m.avck");
    model.save(&path).unwrap();
    assert_eq!(DialogueLm::load(&path).unwrap(), model);
    let vpath = dir.path().join("v.txt");
    v.save(&vpath).unwrap();
    assert_eq!(FusedVocabulary::load(&vpath).unwrap(), v);
    std::fs::write(&path, b"nope").unwrap();
    assert!(matches!(DialogueLm::load(&path), Err(Error::Format { .. })));
}
