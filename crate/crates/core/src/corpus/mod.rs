//! Dialogue corpus data model: manifest ingestion and validation,
//! statistics, the gold-emotion subset rule, emotion confusion matrices and
//! timestamp-based turn segmentation.

mod manifest;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{load_manifest, CorpusManifest, Dialogue, Emotion, RecordingEmotion, SpeakerInfo, Topic, Turn};

const TOY_MANIFEST: &str = include_str!("../../data/toy_manifest.json");

/// The bundled four-dialogue manifest used for statistics fixtures.
pub fn toy_manifest() -> CorpusManifest {
    CorpusManifest::from_json_str(TOY_MANIFEST, std::path::Path::new(".")).expect("bundled manifest is valid")
}

/// Accuracy threshold for the gold-emotion subset; comparison is strict.
pub const GOLD_THRESHOLD: f64 = 0.40;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_dialogues: usize,
    pub n_turns: usize,
    /// Each turn carries the speaker's utterance and the listener channel's.
    pub n_utterances: usize,
    pub total_hours: f64,
    pub avg_turns_per_dialogue: f64,
    pub avg_utterances_per_dialogue: f64,
    /// Mean span from first turn start to last turn end.
    pub avg_dialogue_seconds: f64,
}

impl CorpusStats {
    pub fn table(&self) -> String {
        let rows = [
            ("dialogues", self.n_dialogues.to_string()),
            ("turns", self.n_turns.to_string()),
            ("utterances", self.n_utterances.to_string()),
            ("total hours", format!("{:.2}", self.total_hours)),
            ("avg turns / dialogue", format!("{:.1}", self.avg_turns_per_dialogue)),
            ("avg utterances / dialogue", format!("{:.1}", self.avg_utterances_per_dialogue)),
            ("avg seconds / dialogue", format!("{:.1}", self.avg_dialogue_seconds)),
        ];
        rows.iter().map(|(k, v)| format!("{k:<28}{v:>12}\n")).collect()
    }
}

pub fn compute_stats(manifest: &CorpusManifest) -> CorpusStats {
    let n_dialogues = manifest.dialogues.len();
    let n_turns: usize = manifest.dialogues.iter().map(|d| d.turns.len()).sum();
    let n_utterances = 2 * n_turns;
    let seconds: f64 = manifest.dialogues.iter().flat_map(|d| &d.turns).map(Turn::duration_s).sum();
    let span: f64 = manifest
        .dialogues
        .iter()
        .filter(|d| !d.turns.is_empty())
        .map(|d| {
            let start = d.turns.iter().map(|t| t.start_s).fold(f64::INFINITY, f64::min);
            let end = d.turns.iter().map(|t| t.end_s).fold(f64::NEG_INFINITY, f64::max);
            end - start
        })
        .sum();
    let per = |x: f64| if n_dialogues == 0 { 0.0 } else { x / n_dialogues as f64 };
    CorpusStats {
        n_dialogues,
        n_turns,
        n_utterances,
        total_hours: seconds / 3600.0,
        avg_turns_per_dialogue: per(n_turns as f64),
        avg_utterances_per_dialogue: per(n_utterances as f64),
        avg_dialogue_seconds: per(span),
    }
}

/// Keeps the dialogues whose every participant has accuracy strictly above
/// `threshold`.
pub fn filter_gold_subset(
    manifest: &CorpusManifest,
    actor_accuracy: &BTreeMap<String, f64>,
    threshold: f64,
) -> Result<CorpusManifest> {
    for s in &manifest.speakers {
        if !actor_accuracy.contains_key(&s.id) {
            return Err(Error::MissingAccuracy(s.id.clone()));
        }
    }
    let mut out = manifest.clone();
    out.dialogues.retain(|d| d.speakers().iter().all(|s| actor_accuracy.get(*s).is_some_and(|&a| a > threshold)));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]` in [`RecordingEmotion::ALL`] order.
    pub counts: [[usize; 7]; 7],
    /// Row-normalized counts; rows without samples are all zero.
    pub rates: [[f64; 7]; 7],
    /// Diagonal of `rates`, `None` for labels with no samples.
    pub accuracy: [Option<f64>; 7],
    pub total: usize,
}

pub fn confusion_matrix(judgments: &[(Emotion, Emotion)]) -> Result<ConfusionMatrix> {
    if judgments.is_empty() {
        return Err(Error::Invalid("confusion matrix needs at least one judgment".into()));
    }
    let mut counts = [[0usize; 7]; 7];
    for (t, p) in judgments {
        counts[t.recording_view().index()][p.recording_view().index()] += 1;
    }
    let mut rates = [[0.0; 7]; 7];
    let mut accuracy = [None; 7];
    for r in 0..7 {
        let n: usize = counts[r].iter().sum();
        if n > 0 {
            for c in 0..7 {
                rates[r][c] = counts[r][c] as f64 / n as f64;
            }
            accuracy[r] = Some(rates[r][r]);
        }
    }
    Ok(ConfusionMatrix { counts, rates, accuracy, total: judgments.len() })
}

/// Raw per-speaker interval as recorded by the button-press logger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub turns: Vec<Turn>,
    /// Index pairs `(i, j)`, `i < j`, of output turns from different speakers
    /// whose intervals overlap. These are reported, not repaired.
    pub cross_speaker_overlaps: Vec<(usize, usize)>,
}

/// Orders intervals into turns, merging overlapping intervals of the same
/// speaker and flagging overlaps between different speakers.
pub fn segment_turns(intervals: &[Interval]) -> Result<Segmentation> {
    for iv in intervals {
        if !(iv.start_s.is_finite() && iv.end_s.is_finite()) || iv.end_s <= iv.start_s {
            return Err(Error::Invalid(format!(
                "interval of `{}` from {} to {} has non-positive duration",
                iv.speaker, iv.start_s, iv.end_s
            )));
        }
    }
    let mut by_speaker: HashMap<&str, Vec<(f64, f64)>> = HashMap::new();
    for iv in intervals {
        by_speaker.entry(iv.speaker.as_str()).or_default().push((iv.start_s, iv.end_s));
    }
    let mut merged: Vec<(f64, f64, &str)> = Vec::new();
    for (spk, mut ivs) in by_speaker {
        ivs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut cur = ivs[0];
        for &(s, e) in &ivs[1..] {
            if s < cur.1 {
                cur.1 = cur.1.max(e);
            } else {
                merged.push((cur.0, cur.1, spk));
                cur = (s, e);
            }
        }
        merged.push((cur.0, cur.1, spk));
    }
    merged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(b.2)));

    let mut overlaps = Vec::new();
    for i in 0..merged.len() {
        for j in i + 1..merged.len() {
            if merged[j].0 >= merged[i].1 {
                break;
            }
            if merged[j].2 != merged[i].2 {
                overlaps.push((i, j));
            }
        }
    }
    let turns = merged
        .into_iter()
        .map(|(s, e, spk)| Turn {
            speaker_id: spk.to_string(),
            text: String::new(),
            emotion: Emotion::Neutral,
            start_s: s,
            end_s: e,
            audio_feature_path: None,
            visual_feature_path: None,
        })
        .collect();
    Ok(Segmentation { turns, cross_speaker_overlaps: overlaps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(s: &str, a: f64, b: f64) -> Interval {
        Interval { speaker: s.into(), start_s: a, end_s: b }
    }

    #[test]
    fn empty_manifest_gives_zero_stats() {
        assert_eq!(compute_stats(&CorpusManifest::default()), CorpusStats::default());
    }

    #[test]
    fn clean_alternating_intervals_pass_through() {
        let input = [iv("a", 0.0, 1.0), iv("b", 1.0, 2.5), iv("a", 2.5, 3.0)];
        let seg = segment_turns(&input).unwrap();
        let got: Vec<_> = seg.turns.iter().map(|t| (t.speaker_id.as_str(), t.start_s, t.end_s)).collect();
        assert_eq!(got, vec![("a", 0.0, 1.0), ("b", 1.0, 2.5), ("a", 2.5, 3.0)]);
        assert!(seg.cross_speaker_overlaps.is_empty());
    }

    #[test]
    fn same_speaker_overlap_is_merged() {
        let seg = segment_turns(&[iv("a", 0.0, 2.0), iv("a", 1.5, 3.0)]).unwrap();
        assert_eq!(seg.turns.len(), 1);
        assert_eq!((seg.turns[0].start_s, seg.turns[0].end_s), (0.0, 3.0));
    }

    #[test]
    fn cross_speaker_overlap_is_flagged() {
        let seg = segment_turns(&[iv("a", 0.0, 2.0), iv("b", 1.0, 3.0)]).unwrap();
        assert_eq!(seg.turns.len(), 2);
        assert_eq!(seg.cross_speaker_overlaps, vec![(0, 1)]);
    }

    #[test]
    fn negative_duration_is_an_error() {
        assert!(segment_turns(&[iv("a", 2.0, 1.0)]).is_err());
    }

    #[test]
    fn curious_folds_into_neutral() {
        assert_eq!(Emotion::CuriousToDiveDeeper.recording_view(), RecordingEmotion::Neutral);
        let json = serde_json::to_string(&Emotion::CuriousToDiveDeeper).unwrap();
        assert_eq!(json, "\"Curious to dive deeper\"");
    }

    #[test]
    fn confusion_degenerate_cases() {
        let all: Vec<(Emotion, Emotion)> = RecordingEmotion::ALL.iter().map(|&e| (e.into(), e.into())).collect();
        let m = confusion_matrix(&all).unwrap();
        for r in 0..7 {
            for c in 0..7 {
                assert_eq!(m.rates[r][c], if r == c { 1.0 } else { 0.0 });
            }
        }
        let neutral: Vec<(Emotion, Emotion)> =
            RecordingEmotion::ALL.iter().map(|&e| (e.into(), Emotion::Neutral)).collect();
        let m = confusion_matrix(&neutral).unwrap();
        assert!((0..7).all(|r| m.rates[r][0] == 1.0));
        assert!(confusion_matrix(&[]).is_err());
    }
}
