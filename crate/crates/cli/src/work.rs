use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avdialog::avtoken::{read_features, read_tokens, DedupedTokens, FeatureStream, TokenSequence};
use avdialog::corpus::{load_manifest, CorpusManifest};
use avdialog::dialogue_lm::{tokenize_manifest, FusedVocabulary, TokenizedDialogue};
use avdialog::evalharness::{OracleChannel, TurnFeatures};
use serde::{Deserialize, Serialize};

/// Fixed file layout of a work directory.
#[derive(Clone, Debug)]
pub struct WorkDir {
    pub root: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantModality {
    /// Concatenated audio and visual features.
    Fused,
    Audio,
}

impl QuantModality {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantModality::Fused => "fused",
            QuantModality::Audio => "audio",
        }
    }
}

/// Deduplicated units of every turn, `[dialogue][turn]`, as written by `tokenize`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitsFile {
    pub seed: u64,
    pub modality: QuantModality,
    pub n_units: usize,
    pub dialogues: Vec<Vec<DedupedTokens>>,
}

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> PathBuf {
        self.path("manifest.json")
    }

    pub fn lexicon(&self) -> PathBuf {
        self.path("lexicon.json")
    }

    pub fn codebook(&self, m: QuantModality) -> PathBuf {
        self.path(&format!("codebook.{}.avck", m.as_str()))
    }

    pub fn units(&self) -> PathBuf {
        self.path("units.json")
    }

    pub fn vocab(&self) -> PathBuf {
        self.path("vocab.txt")
    }

    pub fn stage(&self, stage: u8) -> PathBuf {
        self.path(&format!("stage{stage}.avck"))
    }

    pub fn length(&self) -> PathBuf {
        self.path("length.avck")
    }

    pub fn decoder(&self) -> PathBuf {
        self.path("decoder.avck")
    }

    pub fn speakers(&self) -> PathBuf {
        self.path("speakers.json")
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.path(&format!("reports/{name}"))
    }

    pub fn feature_rel(di: usize, ti: usize, kind: &str) -> String {
        format!("features/{di:04}_{ti:03}.{kind}.avf")
    }

    pub fn gold(&self, di: usize, ti: usize) -> PathBuf {
        self.path(&format!("gold/{di:04}_{ti:03}.avt"))
    }

    pub fn tokens(&self, di: usize, ti: usize) -> PathBuf {
        self.path(&format!("tokens/{di:04}_{ti:03}.avt"))
    }
}

/// Fails unless `path` exists, naming what it is and which command makes it.
pub fn require(path: &Path, what: &str, made_by: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found at {} (run `{made_by}` first)", path.display());
    }
    Ok(())
}

/// Writes `contents` to `path`, creating parent directories, via a
/// temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming {} to {}", tmp.display(), path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn load_manifest_at(path: &Path) -> Result<CorpusManifest> {
    require(path, "manifest", "synth")?;
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn load_lexicon(path: &Path) -> Result<OracleChannel> {
    require(path, "oracle lexicon", "synth")?;
    read_json(path)
}

pub fn load_units(path: &Path, manifest: &CorpusManifest) -> Result<UnitsFile> {
    require(path, "unit file", "tokenize")?;
    let units: UnitsFile = read_json(path)?;
    let shape_ok = units.dialogues.len() == manifest.dialogues.len()
        && units.dialogues.iter().zip(&manifest.dialogues).all(|(u, d)| u.len() == d.turns.len());
    if !shape_ok {
        bail!("{} does not match the manifest's dialogues and turns", path.display());
    }
    for d in units.dialogues.iter().flatten() {
        d.validate().with_context(|| format!("invalid run-length entry in {}", path.display()))?;
    }
    Ok(units)
}

pub fn load_vocab(path: &Path) -> Result<FusedVocabulary> {
    require(path, "vocabulary", "build-vocab")?;
    FusedVocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

/// Dialogues whose units are the quantized input.
pub fn observed_dialogues(
    manifest: &CorpusManifest,
    vocab: &FusedVocabulary,
    units: &UnitsFile,
) -> Result<Vec<TokenizedDialogue>> {
    Ok(tokenize_manifest(manifest, vocab, |di, ti, _| Ok(units.dialogues[di][ti].units.0.clone()))?)
}

/// Dialogues whose units are the lexicon's codes for each turn's text.
pub fn reference_dialogues(
    manifest: &CorpusManifest,
    vocab: &FusedVocabulary,
    channel: &OracleChannel,
) -> Result<Vec<TokenizedDialogue>> {
    Ok(tokenize_manifest(manifest, vocab, |_, _, t| channel.encode(&t.text))?)
}

/// Audio and visual streams of every turn, `[dialogue][turn]`.
pub fn load_streams(manifest: &CorpusManifest) -> Result<Vec<Vec<(FeatureStream, FeatureStream)>>> {
    let mut missing = Vec::new();
    for (d, t) in manifest.dialogues.iter().flat_map(|d| d.turns.iter().map(move |t| (d, t))) {
        for p in [&t.audio_feature_path, &t.visual_feature_path] {
            match p {
                Some(rel) if manifest.resolve(rel).exists() => {}
                Some(rel) => missing.push(format!("{}: {}", d.id, manifest.resolve(rel).display())),
                None => missing.push(format!("{}: turn without feature path", d.id)),
            }
        }
    }
    if !missing.is_empty() {
        bail!("{} feature file(s) missing, e.g. {}", missing.len(), missing[0]);
    }
    manifest
        .dialogues
        .iter()
        .map(|d| {
            d.turns
                .iter()
                .map(|t| {
                    let load = |rel: &Option<String>| -> Result<FeatureStream> {
                        let path = manifest.resolve(rel.as_deref().expect("checked above"));
                        read_features(&path).with_context(|| format!("reading {}", path.display()))
                    };
                    Ok((load(&t.audio_feature_path)?, load(&t.visual_feature_path)?))
                })
                .collect()
        })
        .collect()
}

/// Gold frame units of every turn when all of them exist.
pub fn load_gold(work: &WorkDir, manifest: &CorpusManifest) -> Result<Option<Vec<Vec<TokenSequence>>>> {
    let all =
        manifest.dialogues.iter().enumerate().all(|(di, d)| (0..d.turns.len()).all(|ti| work.gold(di, ti).exists()));
    if !all {
        return Ok(None);
    }
    let gold = manifest
        .dialogues
        .iter()
        .enumerate()
        .map(|(di, d)| {
            (0..d.turns.len())
                .map(|ti| {
                    let p = work.gold(di, ti);
                    read_tokens(&p).with_context(|| format!("reading {}", p.display()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(Some(gold))
}

/// Streams and gold joined per turn; gold must cover every frame.
pub fn turn_features(
    streams: Vec<Vec<(FeatureStream, FeatureStream)>>,
    gold: Vec<Vec<TokenSequence>>,
) -> Result<Vec<Vec<TurnFeatures>>> {
    streams
        .into_iter()
        .zip(gold)
        .enumerate()
        .map(|(di, (ss, gs))| {
            ss.into_iter()
                .zip(gs)
                .enumerate()
                .map(|(ti, ((audio, visual), gold))| {
                    if gold.0.len() != audio.n_frames() || visual.n_frames() != audio.n_frames() {
                        bail!("dialogue {di} turn {ti}: gold units and feature frames differ in length");
                    }
                    Ok(TurnFeatures { audio, visual, gold })
                })
                .collect()
        })
        .collect()
}

/// Share of frames whose unit equals the gold unit.
pub fn frame_accuracy(pred: &[&[usize]], gold: &[&[usize]]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        hit += p.iter().zip(g.iter()).filter(|(a, b)| a == b).count();
        n += g.len();
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}
