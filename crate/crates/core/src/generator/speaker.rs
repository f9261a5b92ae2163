use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::avtoken::{Codebook, FeatureStream, Modality, TokenSequence};
use crate::error::{Error, Result};

/// One embedding per known speaker, added to every decoded frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTable {
    pub dim: usize,
    pub rows: BTreeMap<String, Vec<f32>>,
}

impl SpeakerTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, rows: BTreeMap::new() }
    }

    /// Zero embeddings for every id.
    pub fn zeros<S: AsRef<str>>(ids: &[S], dim: usize) -> Self {
        Self { dim, rows: ids.iter().map(|s| (s.as_ref().to_string(), vec![0.0; dim])).collect() }
    }

    pub fn insert(&mut self, id: &str, embedding: Vec<f32>) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "speaker `{id}` embedding has {} values, expected {}",
                embedding.len(),
                self.dim
            )));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("speaker `{id}` embedding")));
        }
        self.rows.insert(id.to_string(), embedding);
        Ok(())
    }

    pub fn embedding(&self, id: &str) -> Result<&[f32]> {
        self.rows.get(id).map(Vec::as_slice).ok_or_else(|| Error::UnknownSpeaker(id.to_string()))
    }

    /// Least-squares fit: each speaker's embedding is the mean offset of
    /// their frames from the centroid of the frame's unit.
    pub fn fit(codebook: &Codebook, samples: &[(&str, &FeatureStream, &[usize])]) -> Result<Self> {
        let dim = codebook.dim();
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for &(id, stream, units) in samples {
            if stream.dim() != dim {
                return Err(Error::Shape(format!(
                    "speaker `{id}` frames have dimension {}, expected {dim}",
                    stream.dim()
                )));
            }
            if stream.n_frames() != units.len() {
                return Err(Error::Shape(format!("speaker `{id}`: unit trace does not cover every frame")));
            }
            let entry = sums.entry(id.to_string()).or_insert_with(|| (vec![0.0; dim], 0));
            for (f, &u) in stream.iter_frames().zip(units) {
                if u >= codebook.k() {
                    return Err(Error::Vocabulary { id: u, vocab_size: codebook.k() });
                }
                for ((acc, &x), &c) in entry.0.iter_mut().zip(f).zip(codebook.centroid(u)) {
                    *acc += f64::from(x) - f64::from(c);
                }
                entry.1 += 1;
            }
        }
        let mut table = Self::new(dim);
        for (id, (sum, n)) in sums {
            let n = n.max(1) as f64;
            table.insert(&id, sum.iter().map(|s| (s / n) as f32).collect())?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&s)?;
        if let Some((id, _)) = t.rows.iter().find(|(_, v)| v.len() != t.dim) {
            return Err(Error::format(path, format!("speaker `{id}` embedding has the wrong dimension")));
        }
        Ok(t)
    }
}

/// Codebook whose centroid `u` is the mean frame labelled `u`. Units with no
/// frames get the mean of all frames plus a small unit-specific offset.
pub fn unit_codebook(samples: &[(&FeatureStream, &[usize])], n_units: usize) -> Result<Codebook> {
    let Some(dim) = samples.first().map(|(s, _)| s.dim()) else {
        return Err(Error::Invalid("no frames to build a unit codebook from".into()));
    };
    let mut sums = vec![0.0f64; n_units * dim];
    let mut counts = vec![0usize; n_units];
    let mut total = vec![0.0f64; dim];
    let mut n = 0usize;
    for &(stream, units) in samples {
        if stream.dim() != dim || stream.n_frames() != units.len() {
            return Err(Error::Shape("unit trace does not match its frames".into()));
        }
        for (f, &u) in stream.iter_frames().zip(units) {
            if u >= n_units {
                return Err(Error::Vocabulary { id: u, vocab_size: n_units });
            }
            for j in 0..dim {
                sums[u * dim + j] += f64::from(f[j]);
                total[j] += f64::from(f[j]);
            }
            counts[u] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("no frames to build a unit codebook from".into()));
    }
    let unseen = counts.iter().filter(|&&c| c == 0).count();
    if unseen > 0 {
        log::warn!("{unseen} unit(s) never observed; they decode to near the mean frame");
    }
    let mean: Vec<f64> = total.iter().map(|t| t / n as f64).collect();
    let spread = samples
        .iter()
        .flat_map(|(s, _)| s.iter_frames())
        .flat_map(|f| f.iter().zip(&mean).map(|(&x, m)| (f64::from(x) - m).powi(2)))
        .sum::<f64>()
        / (n * dim) as f64;
    let step = 1e-3 * spread.sqrt().max(1e-3);
    let mut centroids = Vec::with_capacity(n_units * dim);
    for u in 0..n_units {
        for j in 0..dim {
            let v = if counts[u] == 0 {
                // Distinct per unit so the codebook has no duplicate centroids.
                let nudge = if j == u % dim { step * (1 + u / dim) as f64 } else { 0.0 };
                mean[j] + nudge
            } else {
                sums[u * dim + j] / counts[u] as f64
            };
            centroids.push(v as f32);
        }
    }
    Codebook::from_centroids(centroids, dim)
}

/// Decoded frames with the unit that produced each one.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutput {
    pub frames: FeatureStream,
    pub units: TokenSequence,
}

/// Stand-in unit decoder: frame `t` is the centroid of unit `t` plus the
/// speaker's embedding. Unit ids index centroids directly.
pub fn decode_units_to_signal(
    full_rate_units: &[usize],
    speaker_id: &str,
    codebook: &Codebook,
    speakers: &SpeakerTable,
) -> Result<SynthesisOutput> {
    let emb = speakers.embedding(speaker_id)?;
    if speakers.dim != codebook.dim() {
        return Err(Error::Shape(format!(
            "speaker embeddings have dimension {}, codebook {}",
            speakers.dim,
            codebook.dim()
        )));
    }
    TokenSequence(full_rate_units.to_vec()).check_bound(codebook.k())?;
    let mut frames = Vec::with_capacity(full_rate_units.len() * codebook.dim());
    for &u in full_rate_units {
        frames.extend(codebook.centroid(u).iter().zip(emb).map(|(c, e)| c + e));
    }
    Ok(SynthesisOutput {
        frames: FeatureStream::new(frames, codebook.dim(), Modality::Fused)?,
        units: TokenSequence(full_rate_units.to_vec()),
    })
}
