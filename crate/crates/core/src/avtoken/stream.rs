use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RATE_HZ: u32 = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Visual,
    Fused,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Visual => 1,
            Modality::Fused => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Modality::Audio),
            1 => Some(Modality::Visual),
            2 => Some(Modality::Fused),
            _ => None,
        }
    }
}

/// `T x D` feature frames in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    frames: Vec<f32>,
    dim: usize,
    pub rate_hz: u32,
    pub modality: Modality,
    /// Number of leading audio columns. Known for audio, visual and freshly
    /// fused streams; `None` for fused streams read back from disk.
    pub audio_dims: Option<usize>,
}

impl FeatureStream {
    pub fn new(frames: Vec<f32>, dim: usize, modality: Modality) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if !frames.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not split into rows of {dim}", frames.len())));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature frame".into()));
        }
        let audio_dims = match modality {
            Modality::Audio => Some(dim),
            Modality::Visual => Some(0),
            Modality::Fused => None,
        };
        Ok(Self { frames, dim, rate_hz: DEFAULT_RATE_HZ, modality, audio_dims })
    }

    pub fn empty(dim: usize, modality: Modality) -> Self {
        Self::new(Vec::new(), dim, modality).expect("empty stream is valid")
    }

    pub fn with_rate(mut self, rate_hz: u32) -> Self {
        self.rate_hz = rate_hz;
        self
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [f32] {
        &mut self.frames
    }

    pub fn iter_frames(&self) -> std::slice::ChunksExact<'_, f32> {
        self.frames.chunks_exact(self.dim)
    }
}

/// Frame-wise concatenation `[audio | visual]`.
pub fn fuse(audio: &FeatureStream, visual: &FeatureStream) -> Result<FeatureStream> {
    if audio.n_frames() != visual.n_frames() {
        return Err(Error::Shape(format!("audio has {} frames, visual {}", audio.n_frames(), visual.n_frames())));
    }
    let dim = audio.dim() + visual.dim();
    let mut frames = Vec::with_capacity(audio.n_frames() * dim);
    for (a, v) in audio.iter_frames().zip(visual.iter_frames()) {
        frames.extend_from_slice(a);
        frames.extend_from_slice(v);
    }
    let mut s = FeatureStream::new(frames, dim, Modality::Fused)?.with_rate(audio.rate_hz);
    s.audio_dims = Some(audio.dim());
    Ok(s)
}

/// Discrete ids (AV units, text tokens, or fused-vocabulary ids).
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    /// Fails if any id is `>= bound`.
    pub fn check_bound(&self, bound: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id >= bound) {
            Some(&id) => Err(Error::Vocabulary { id, vocab_size: bound }),
            None => Ok(()),
        }
    }
}

impl std::ops::Deref for TokenSequence {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}
