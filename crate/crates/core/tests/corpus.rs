use std::collections::BTreeMap;

use avdialog::corpus::{
    compute_stats, confusion_matrix, filter_gold_subset, load_manifest, segment_turns, toy_manifest, CorpusManifest,
    Emotion, Interval, RecordingEmotion, GOLD_THRESHOLD,
};
use avdialog::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn toy_manifest_stats_match_hand_counts() {
    let s = compute_stats(&toy_manifest());
    assert_eq!(s.n_dialogues, 4);
    assert_eq!(s.n_turns, 12);
    assert_eq!(s.n_utterances, 24);
    // turn durations: d1 2+2.5+1.5, d2 3+1, d3 1+2+1+2, d4 1+1.5+1.5
    assert_eq!(s.total_hours, 20.0 / 3600.0);
    assert_eq!(s.avg_turns_per_dialogue, 3.0);
    assert_eq!(s.avg_utterances_per_dialogue, 6.0);
    // spans: 6.5, 4, 6.5, 4.5
    assert_eq!(s.avg_dialogue_seconds, 5.375);
}

#[test]
fn manifest_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let m = toy_manifest();
    m.save(&path).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back.dialogues, m.dialogues);
    assert_eq!(back.base_dir, dir.path());
}

#[test]
fn schema_errors_list_every_violation() {
    let mut m = toy_manifest();
    m.dialogues[0].turns[1].end_s = 1.0;
    m.dialogues[2].turns[0].speaker_id = "ghost".into();
    m.dialogues[3].id = "d1".into();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    match load_manifest(&path) {
        Err(Error::Schema(v)) => {
            assert!(v.iter().any(|e| e.contains("dialogue `d1` turn 1") && e.contains("end_s")), "{v:?}");
            assert!(v.iter().any(|e| e.contains("dialogue `d3` turn 0") && e.contains("ghost")), "{v:?}");
            assert!(v.iter().any(|e| e.contains("duplicate id")), "{v:?}");
        }
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn malformed_json_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.json");
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(load_manifest(&path), Err(Error::Json(_))));
}

fn accuracy(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[test]
fn gold_filter_identity_and_removal() {
    let m = toy_manifest();
    let all = accuracy(&[("s1", 1.0), ("s2", 1.0), ("s3", 1.0), ("s4", 1.0), ("s5", 1.0)]);
    assert_eq!(filter_gold_subset(&m, &all, GOLD_THRESHOLD).unwrap(), m);

    let one_low = accuracy(&[("s1", 0.39), ("s2", 1.0), ("s3", 1.0), ("s4", 1.0), ("s5", 1.0)]);
    let out = filter_gold_subset(&m, &one_low, GOLD_THRESHOLD).unwrap();
    let ids: Vec<_> = out.dialogues.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids, ["d2", "d4"]);
}

#[test]
fn gold_filter_matches_hand_list() {
    // s3 sits exactly at the threshold, which does not pass.
    let table = accuracy(&[("s1", 0.55), ("s2", 0.41), ("s3", 0.40), ("s4", 0.9), ("s5", 0.7)]);
    let out = filter_gold_subset(&toy_manifest(), &table, GOLD_THRESHOLD).unwrap();
    let ids: Vec<_> = out.dialogues.iter().map(|d| d.id.as_str()).collect();
    assert_eq!(ids, ["d1", "d3"]);
    out.validate().unwrap();
}

#[test]
fn gold_filter_requires_every_speaker() {
    let table = accuracy(&[("s1", 0.9), ("s2", 0.9), ("s3", 0.9), ("s4", 0.9)]);
    match filter_gold_subset(&toy_manifest(), &table, GOLD_THRESHOLD) {
        Err(Error::MissingAccuracy(s)) => assert_eq!(s, "s5"),
        other => panic!("{other:?}"),
    }
}

fn brute_force_gold(m: &CorpusManifest, table: &BTreeMap<String, f64>, threshold: f64) -> Vec<String> {
    let mut kept = Vec::new();
    for d in &m.dialogues {
        let mut ok = true;
        for t in &d.turns {
            if table[&t.speaker_id] <= threshold {
                ok = false;
            }
        }
        if ok {
            kept.push(d.id.clone());
        }
    }
    kept
}

#[test]
fn gold_filter_agrees_with_brute_force_on_random_tables() {
    let m = toy_manifest();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..500 {
        let table: BTreeMap<String, f64> = m
            .speakers
            .iter()
            .map(|s| {
                let a = [0.39, 0.40, 0.41, rng.random::<f64>()][rng.random_range(0..4)];
                (s.id.clone(), a)
            })
            .collect();
        let got: Vec<_> =
            filter_gold_subset(&m, &table, GOLD_THRESHOLD).unwrap().dialogues.iter().map(|d| d.id.clone()).collect();
        assert_eq!(got, brute_force_gold(&m, &table, GOLD_THRESHOLD));
        let again = filter_gold_subset(&filter_gold_subset(&m, &table, 0.4).unwrap(), &table, 0.4).unwrap();
        assert_eq!(again.dialogues.len(), got.len());
    }
}

#[test]
fn confusion_matrix_matches_hand_tally() {
    use Emotion::*;
    let j = [
        (Neutral, Neutral),
        (Neutral, Neutral),
        (CuriousToDiveDeeper, Neutral),
        (Neutral, Happy),
        (Happy, Happy),
        (Happy, Happy),
        (Happy, Surprised),
        (Sad, Sad),
        (Sad, Neutral),
        (Fearful, Fearful),
        (Fearful, Surprised),
        (Fearful, Sad),
        (Fearful, Fearful),
        (Surprised, Surprised),
        (Surprised, Happy),
        (Disgusted, Angry),
        (Disgusted, Disgusted),
        (Angry, Angry),
        (Angry, Angry),
        (Angry, CuriousToDiveDeeper),
    ];
    let m = confusion_matrix(&j).unwrap();
    assert_eq!(m.total, 20);
    // rows: true label, columns: predicted (Neu Hap Sad Fea Sur Dis Ang)
    let hand = [
        [3, 1, 0, 0, 0, 0, 0],
        [0, 2, 0, 0, 1, 0, 0],
        [1, 0, 1, 0, 0, 0, 0],
        [0, 0, 1, 2, 1, 0, 0],
        [0, 1, 0, 0, 1, 0, 0],
        [0, 0, 0, 0, 0, 1, 1],
        [1, 0, 0, 0, 0, 0, 2],
    ];
    assert_eq!(m.counts, hand);
    let acc = [3.0 / 4.0, 2.0 / 3.0, 0.5, 0.5, 0.5, 0.5, 2.0 / 3.0];
    for (r, &a) in acc.iter().enumerate() {
        assert!((m.accuracy[r].unwrap() - a).abs() < 1e-12);
        assert!((m.rates[r].iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(RecordingEmotion::ALL.len(), 7);
}

/// Connected components of strictly overlapping same-speaker intervals.
fn brute_force_merge(ivs: &[Interval]) -> Vec<(String, f64, f64)> {
    let n = ivs.len();
    let mut comp: Vec<usize> = (0..n).collect();
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..n {
            for j in 0..n {
                let overlap = ivs[i].start_s < ivs[j].end_s && ivs[j].start_s < ivs[i].end_s;
                if ivs[i].speaker == ivs[j].speaker && overlap && comp[j] > comp[i] {
                    comp[j] = comp[i];
                    changed = true;
                }
            }
        }
    }
    let mut out: Vec<(String, f64, f64)> = Vec::new();
    for c in 0..n {
        let members: Vec<&Interval> = (0..n).filter(|&i| comp[i] == c).map(|i| &ivs[i]).collect();
        if let Some(first) = members.first() {
            let s = members.iter().map(|m| m.start_s).fold(f64::INFINITY, f64::min);
            let e = members.iter().map(|m| m.end_s).fold(f64::NEG_INFINITY, f64::max);
            out.push((first.speaker.clone(), s, e));
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
    out
}

#[test]
fn segmentation_agrees_with_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..300 {
        let n = rng.random_range(1..12);
        let ivs: Vec<Interval> = (0..n)
            .map(|_| {
                let s = rng.random_range(0..40) as f64 * 0.5;
                let len = rng.random_range(1..8) as f64 * 0.5;
                Interval { speaker: ["a", "b", "c"][rng.random_range(0..3)].into(), start_s: s, end_s: s + len }
            })
            .collect();
        let seg = segment_turns(&ivs).unwrap();
        let got: Vec<_> = seg.turns.iter().map(|t| (t.speaker_id.clone(), t.start_s, t.end_s)).collect();
        assert_eq!(got, brute_force_merge(&ivs));

        let mut flags = Vec::new();
        for i in 0..got.len() {
            for j in i + 1..got.len() {
                if got[i].0 != got[j].0 && got[i].1 < got[j].2 && got[j].1 < got[i].2 {
                    flags.push((i, j));
                }
            }
        }
        assert_eq!(seg.cross_speaker_overlaps, flags);
    }
}
