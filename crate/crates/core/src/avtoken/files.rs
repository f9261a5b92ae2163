//! Byte-exact feature and token files (little-endian throughout).
//!
//! Feature file: `"AVF1"`, u32 T, u32 D, u32 rate_hz, u8 modality
//! (0 audio, 1 visual, 2 fused), then `T*D` f32 values row by row.
//!
//! Token file: `"AVT1"`, u32 length, then `length` u16 ids.

use std::path::Path;

use crate::error::{Error, Result};

use super::stream::{FeatureStream, Modality, TokenSequence};

const FEATURE_MAGIC: &[u8; 4] = b"AVF1";
const TOKEN_MAGIC: &[u8; 4] = b"AVT1";

pub fn feature_bytes(s: &FeatureStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + s.frames().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(s.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(s.dim() as u32).to_le_bytes());
    out.extend_from_slice(&s.rate_hz.to_le_bytes());
    out.push(s.modality.code());
    for v in s.frames() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_features(bytes: &[u8], origin: &Path) -> Result<FeatureStream> {
    if bytes.len() < 17 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(origin, "missing AVF1 header"));
    }
    let u = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (t, d, rate) = (u(4), u(8), u(12) as u32);
    let modality = Modality::from_code(bytes[16])
        .ok_or_else(|| Error::format(origin, format!("unknown modality code {}", bytes[16])))?;
    let body = &bytes[17..];
    if body.len() != t * d * 4 {
        return Err(Error::format(origin, format!("expected {} frame bytes, found {}", t * d * 4, body.len())));
    }
    let frames = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    FeatureStream::new(frames, d, modality).map(|s| s.with_rate(rate)).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write_features(path: &Path, s: &FeatureStream) -> Result<()> {
    std::fs::write(path, feature_bytes(s)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureStream> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_features(&bytes, path)
}

pub fn token_bytes(tokens: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + tokens.len() * 2);
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for &t in tokens {
        let id = u16::try_from(t).map_err(|_| Error::Vocabulary { id: t, vocab_size: u16::MAX as usize + 1 })?;
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

pub fn parse_tokens(bytes: &[u8], origin: &Path) -> Result<TokenSequence> {
    if bytes.len() < 8 || &bytes[..4] != TOKEN_MAGIC {
        return Err(Error::format(origin, "missing AVT1 header"));
    }
    let n = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != n * 2 {
        return Err(Error::format(origin, format!("expected {n} ids, found {} bytes", body.len())));
    }
    Ok(TokenSequence(body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as usize).collect()))
}

pub fn write_tokens(path: &Path, tokens: &[usize]) -> Result<()> {
    std::fs::write(path, token_bytes(tokens)?).map_err(|e| Error::io(path, e))
}

pub fn read_tokens(path: &Path) -> Result<TokenSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_tokens(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_layout() {
        let s = FeatureStream::new(vec![1.0, 2.0], 2, Modality::Visual).unwrap();
        let b = feature_bytes(&s);
        let mut want = b"AVF1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(25u32.to_le_bytes());
        want.push(1);
        want.extend(1.0f32.to_le_bytes());
        want.extend(2.0f32.to_le_bytes());
        assert_eq!(b, want);
        assert_eq!(parse_features(&b, Path::new("f")).unwrap(), s);
        assert!(parse_features(&b[..b.len() - 1], Path::new("f")).is_err());
    }

    #[test]
    fn token_layout() {
        let b = token_bytes(&[3, 500]).unwrap();
        assert_eq!(b, [b'A', b'V', b'T', b'1', 2, 0, 0, 0, 3, 0, 0xf4, 0x01]);
        assert_eq!(parse_tokens(&b, Path::new("t")).unwrap().0, vec![3, 500]);
        assert!(token_bytes(&[70_000]).is_err());
    }
}
