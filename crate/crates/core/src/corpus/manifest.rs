use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight annotation labels, serialized verbatim.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Emotion {
    Neutral,
    Happy,
    Sad,
    Fearful,
    Surprised,
    Disgusted,
    Angry,
    #[serde(rename = "Curious to dive deeper")]
    CuriousToDiveDeeper,
}

/// Labels actors were asked to perform; "Curious to dive deeper" is folded
/// into Neutral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecordingEmotion {
    Neutral,
    Happy,
    Sad,
    Fearful,
    Surprised,
    Disgusted,
    Angry,
}

impl RecordingEmotion {
    pub const ALL: [RecordingEmotion; 7] = [
        RecordingEmotion::Neutral,
        RecordingEmotion::Happy,
        RecordingEmotion::Sad,
        RecordingEmotion::Fearful,
        RecordingEmotion::Surprised,
        RecordingEmotion::Disgusted,
        RecordingEmotion::Angry,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Emotion {
    pub fn recording_view(self) -> RecordingEmotion {
        match self {
            Emotion::Neutral | Emotion::CuriousToDiveDeeper => RecordingEmotion::Neutral,
            Emotion::Happy => RecordingEmotion::Happy,
            Emotion::Sad => RecordingEmotion::Sad,
            Emotion::Fearful => RecordingEmotion::Fearful,
            Emotion::Surprised => RecordingEmotion::Surprised,
            Emotion::Disgusted => RecordingEmotion::Disgusted,
            Emotion::Angry => RecordingEmotion::Angry,
        }
    }
}

impl From<RecordingEmotion> for Emotion {
    fn from(e: RecordingEmotion) -> Self {
        match e {
            RecordingEmotion::Neutral => Emotion::Neutral,
            RecordingEmotion::Happy => Emotion::Happy,
            RecordingEmotion::Sad => Emotion::Sad,
            RecordingEmotion::Fearful => Emotion::Fearful,
            RecordingEmotion::Surprised => Emotion::Surprised,
            RecordingEmotion::Disgusted => Emotion::Disgusted,
            RecordingEmotion::Angry => Emotion::Angry,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Topic {
    #[serde(rename = "fashion")]
    Fashion,
    #[serde(rename = "politics")]
    Politics,
    #[serde(rename = "books")]
    Books,
    #[serde(rename = "sports")]
    Sports,
    #[serde(rename = "general entertainment", alias = "general_entertainment")]
    GeneralEntertainment,
    #[serde(rename = "music")]
    Music,
    #[serde(rename = "science & technology", alias = "science_and_technology")]
    ScienceAndTechnology,
    #[serde(rename = "movies")]
    Movies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerInfo {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nationality: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker_id: String,
    pub text: String,
    pub emotion: Emotion,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_feature_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_feature_path: Option<String>,
}

impl Turn {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub topic: Topic,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Distinct speakers in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for t in &self.turns {
            if !seen.contains(&t.speaker_id.as_str()) {
                seen.push(t.speaker_id.as_str());
            }
        }
        seen
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub speakers: Vec<SpeakerInfo>,
    pub dialogues: Vec<Dialogue>,
    /// Directory that relative media paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    /// Every invariant violation, each naming the dialogue and field.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let speakers: HashSet<&str> = self.speakers.iter().map(|s| s.id.as_str()).collect();
        let mut seen_speakers = HashSet::new();
        for s in &self.speakers {
            if !seen_speakers.insert(s.id.as_str()) {
                v.push(format!("speaker `{}`: duplicate id", s.id));
            }
        }
        let mut ids = HashSet::new();
        for d in &self.dialogues {
            if !ids.insert(d.id.as_str()) {
                v.push(format!("dialogue `{}`: duplicate id", d.id));
            }
            if d.turns.len() < 2 {
                v.push(format!("dialogue `{}`: has {} turn(s), needs at least 2", d.id, d.turns.len()));
            }
            for (i, t) in d.turns.iter().enumerate() {
                let at = format!("dialogue `{}` turn {i}", d.id);
                if !speakers.contains(t.speaker_id.as_str()) {
                    v.push(format!("{at}: speaker_id `{}` is not a known speaker", t.speaker_id));
                }
                if !(t.start_s.is_finite() && t.end_s.is_finite()) {
                    v.push(format!("{at}: start_s/end_s must be finite"));
                } else {
                    if t.start_s < 0.0 {
                        v.push(format!("{at}: start_s {} is negative", t.start_s));
                    }
                    if t.end_s <= t.start_s {
                        v.push(format!("{at}: end_s {} is not after start_s {}", t.end_s, t.start_s));
                    }
                }
                if i > 0 {
                    let prev = &d.turns[i - 1];
                    if prev.speaker_id == t.speaker_id {
                        v.push(format!("{at}: speaker_id `{}` repeats the previous turn's speaker", t.speaker_id));
                    }
                    if t.start_s < prev.start_s {
                        v.push(format!(
                            "{at}: start_s {} is earlier than the previous turn's {}",
                            t.start_s, prev.start_s
                        ));
                    }
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(v))
        }
    }

    pub fn from_json_str(s: &str, base_dir: &Path) -> Result<Self> {
        let mut m: CorpusManifest = serde_json::from_str(s)?;
        m.base_dir = base_dir.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_pretty() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerInfo> {
        self.speakers.iter().find(|s| s.id == id)
    }
}

/// Reads and validates a manifest; media paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    CorpusManifest::from_json_str(&text, base)
}
