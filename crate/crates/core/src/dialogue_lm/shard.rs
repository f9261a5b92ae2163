//! Dataset shard: a sequence of serialized examples.
//!
//! ```text
//! magic      4 bytes  "AVDS"
//! count      u32
//! per example:
//!   tag      u8       stage tag code
//!   len      u32
//!   ids      len x u32
//!   mask     ceil(len / 8) bytes, bit i of byte i/8 (LSB first)
//!   spk_len  u16      0 when there is no AI speaker
//!   speaker  spk_len bytes of UTF-8
//! ```

use std::path::Path;

use crate::error::{Error, Result};

use super::examples::{DialogueExample, StageTag};

const MAGIC: &[u8; 4] = b"AVDS";

pub fn shard_bytes(examples: &[DialogueExample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(examples.len() as u32).to_le_bytes());
    for ex in examples {
        if ex.ids.len() != ex.loss_mask.len() {
            return Err(Error::Shape("example ids and mask differ in length".into()));
        }
        out.push(ex.stage_tag.code());
        out.extend_from_slice(&(ex.ids.len() as u32).to_le_bytes());
        for &id in &ex.ids {
            let id = u32::try_from(id).map_err(|_| Error::Invalid(format!("id {id} does not fit in u32")))?;
            out.extend_from_slice(&id.to_le_bytes());
        }
        let mut bits = vec![0u8; ex.ids.len().div_ceil(8)];
        for (i, &m) in ex.loss_mask.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
        let spk = ex.ai_speaker_id.as_deref().unwrap_or("").as_bytes();
        let n = u16::try_from(spk.len()).map_err(|_| Error::Invalid("speaker id longer than 65535 bytes".into()))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(spk);
    }
    Ok(out)
}

pub fn parse_shard(bytes: &[u8], origin: &Path) -> Result<Vec<DialogueExample>> {
    let bad = |r: &str| Error::format(origin, r.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated shard"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic, expected AVDS"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let tag = StageTag::from_code(take(1)?[0]).ok_or_else(|| bad("unknown stage tag"))?;
        let len = u32_at(take(4)?);
        let ids: Vec<usize> = take(len * 4)?.chunks_exact(4).map(u32_at).collect();
        let bits = take(len.div_ceil(8))?;
        let loss_mask = (0..len).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        let n = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let spk = std::str::from_utf8(take(n)?).map_err(|_| bad("speaker id is not UTF-8"))?;
        let ai_speaker_id = if n == 0 { None } else { Some(spk.to_string()) };
        out.push(DialogueExample { ids, loss_mask, stage_tag: tag, ai_speaker_id });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last example"));
    }
    Ok(out)
}

pub fn write_shard(path: &Path, examples: &[DialogueExample]) -> Result<()> {
    std::fs::write(path, shard_bytes(examples)?).map_err(|e| Error::io(path, e))
}

pub fn read_shard(path: &Path) -> Result<Vec<DialogueExample>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_shard(&bytes, path)
}
