//! Fused vocabulary: byte-level BPE text block, then a block of `K` AV unit
//! tokens, then the special tokens.
//!
//! Vocabulary file (UTF-8 text):
//!
//! ```text
//! avdialog-vocab 1
//! merges <M>
//! <left id> <right id>        M lines, in merge order
//! units <K>
//! specials 7
//! <token> <id>                7 lines
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

const BYTE_TOKENS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Speech,
    Text,
    User,
    Ai,
    Bos,
    Eot,
    Pad,
}

impl Special {
    pub const ALL: [Special; 7] =
        [Special::Speech, Special::Text, Special::User, Special::Ai, Special::Bos, Special::Eot, Special::Pad];

    pub fn as_str(self) -> &'static str {
        match self {
            Special::Speech => "<speech>",
            Special::Text => "<text>",
            Special::User => "<User>",
            Special::Ai => "<AI>",
            Special::Bos => "<bos>",
            Special::Eot => "<eot>",
            Special::Pad => "<pad>",
        }
    }
}

impl fmt::Display for Special {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Unit(usize),
    Special(Special),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedVocabulary {
    merges: Vec<(usize, usize)>,
    n_units: usize,
    token_bytes: Vec<Vec<u8>>,
    ranks: HashMap<(usize, usize), usize>,
}

/// Splits text into pieces that each start at a whitespace boundary, the
/// whitespace staying attached to the following word.
fn pieces(text: &str) -> Vec<&[u8]> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..b.len() {
        if b[i].is_ascii_whitespace() && !b[i - 1].is_ascii_whitespace() {
            out.push(&b[start..i]);
            start = i;
        }
    }
    if start < b.len() {
        out.push(&b[start..]);
    }
    out
}

fn apply_merge(word: &mut Vec<usize>, pair: (usize, usize), id: usize) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

/// Learns up to `n_text_merges` byte-pair merges from `corpus` and appends a
/// `k`-unit block and the specials. Ties in pair frequency go to the
/// smallest pair of ids, so the result depends only on the corpus content.
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[S], n_text_merges: usize, k: usize) -> Result<FusedVocabulary> {
    if corpus.iter().all(|s| s.as_ref().is_empty()) {
        return Err(Error::Invalid("text corpus is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("unit block size must be at least 1".into()));
    }
    let mut freq: BTreeMap<&[u8], usize> = BTreeMap::new();
    for line in corpus {
        for p in pieces(line.as_ref()) {
            *freq.entry(p).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<usize>, usize)> =
        freq.into_iter().map(|(w, c)| (w.iter().map(|&b| b as usize).collect(), c)).collect();
    let mut merges = Vec::new();
    while merges.len() < n_text_merges {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for (w, c) in &words {
            for pair in w.windows(2) {
                *counts.entry((pair[0], pair[1])).or_default() += c;
            }
        }
        let Some((&pair, _)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
            break;
        };
        let id = BYTE_TOKENS + merges.len();
        for (w, _) in words.iter_mut() {
            apply_merge(w, pair, id);
        }
        merges.push(pair);
    }
    FusedVocabulary::from_parts(merges, k)
}

impl FusedVocabulary {
    pub fn from_parts(merges: Vec<(usize, usize)>, n_units: usize) -> Result<Self> {
        if n_units == 0 {
            return Err(Error::Config("unit block size must be at least 1".into()));
        }
        let mut token_bytes: Vec<Vec<u8>> = (0..BYTE_TOKENS).map(|b| vec![b as u8]).collect();
        let mut ranks = HashMap::new();
        for (i, &(a, b)) in merges.iter().enumerate() {
            let id = BYTE_TOKENS + i;
            if a >= id || b >= id {
                return Err(Error::Invalid(format!("merge {i} refers to a later token ({a}, {b})")));
            }
            let mut bytes = token_bytes[a].clone();
            bytes.extend_from_slice(&token_bytes[b]);
            token_bytes.push(bytes);
            if ranks.insert((a, b), i).is_some() {
                return Err(Error::Invalid(format!("merge ({a}, {b}) appears twice")));
            }
        }
        Ok(Self { merges, n_units, token_bytes, ranks })
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    pub fn n_text(&self) -> usize {
        BYTE_TOKENS + self.merges.len()
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn size(&self) -> usize {
        self.n_text() + self.n_units + Special::ALL.len()
    }

    pub fn unit_offset(&self) -> usize {
        self.n_text()
    }

    pub fn unit_id(&self, unit: usize) -> Result<usize> {
        if unit >= self.n_units {
            return Err(Error::Vocabulary { id: unit, vocab_size: self.n_units });
        }
        Ok(self.n_text() + unit)
    }

    pub fn special(&self, s: Special) -> usize {
        self.n_text() + self.n_units + s as usize
    }

    pub fn kind(&self, id: usize) -> Result<TokenKind> {
        let nt = self.n_text();
        if id < nt {
            Ok(TokenKind::Text)
        } else if id < nt + self.n_units {
            Ok(TokenKind::Unit(id - nt))
        } else if id < self.size() {
            Ok(TokenKind::Special(Special::ALL[id - nt - self.n_units]))
        } else {
            Err(Error::Vocabulary { id, vocab_size: self.size() })
        }
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for p in pieces(text) {
            let mut w: Vec<usize> = p.iter().map(|&b| b as usize).collect();
            loop {
                let best = w
                    .windows(2)
                    .filter_map(|pair| self.ranks.get(&(pair[0], pair[1])).map(|&r| (r, (pair[0], pair[1]))))
                    .min();
                match best {
                    Some((r, pair)) => apply_merge(&mut w, pair, BYTE_TOKENS + r),
                    None => break,
                }
            }
            out.extend(w);
        }
        out
    }

    /// Bytes of a run of text tokens.
    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            match self.kind(id)? {
                TokenKind::Text => out.extend_from_slice(&self.token_bytes[id]),
                _ => return Err(Error::Invalid(format!("id {id} is not a text token"))),
            }
        }
        Ok(out)
    }

    pub fn decode_text(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Human-readable rendering of any id.
    pub fn token_repr(&self, id: usize) -> String {
        match self.kind(id) {
            Ok(TokenKind::Text) => format!("{:?}", String::from_utf8_lossy(&self.token_bytes[id])),
            Ok(TokenKind::Unit(u)) => format!("#{u}"),
            Ok(TokenKind::Special(s)) => s.to_string(),
            Err(_) => format!("?{id}"),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("avdialog-vocab 1\n");
        s += &format!("merges {}\n", self.merges.len());
        for (a, b) in &self.merges {
            s += &format!("{a} {b}\n");
        }
        s += &format!("units {}\n", self.n_units);
        s += &format!("specials {}\n", Special::ALL.len());
        for sp in Special::ALL {
            s += &format!("{} {}\n", sp, self.special(sp));
        }
        s
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines.next().map(|(i, l)| (i + 1, l)).ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))
        };
        let (_, header) = next("header")?;
        if header.trim() != "avdialog-vocab 1" {
            return Err(bad(format!("unknown header `{header}`")));
        }
        let count = |line: (usize, &str), key: &str| -> Result<usize> {
            let (n, l) = line;
            l.strip_prefix(key)
                .and_then(|r| r.trim().parse().ok())
                .ok_or_else(|| bad(format!("line {n}: expected `{key} <count>`")))
        };
        let m = count(next("merge count")?, "merges ")?;
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let (n, l) = next("merge")?;
            let ids: Vec<usize> = l.split_whitespace().filter_map(|x| x.parse().ok()).collect();
            if ids.len() != 2 {
                return Err(bad(format!("line {n}: expected two ids")));
            }
            merges.push((ids[0], ids[1]));
        }
        let k = count(next("unit count")?, "units ")?;
        let n_special = count(next("special count")?, "specials ")?;
        let vocab = Self::from_parts(merges, k).map_err(|e| bad(e.to_string()))?;
        if n_special != Special::ALL.len() {
            return Err(bad(format!("expected {} specials, found {n_special}", Special::ALL.len())));
        }
        for sp in Special::ALL {
            let (n, l) = next("special token")?;
            let want = format!("{} {}", sp, vocab.special(sp));
            if l.trim() != want {
                return Err(bad(format!("line {n}: expected `{want}`, found `{l}`")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_merges_gives_byte_block() {
        let v = build_vocabulary(&["hello world"], 0, 5).unwrap();
        assert_eq!(v.n_text(), 256);
        assert_eq!(v.size(), 256 + 5 + 7);
        assert_eq!(v.encode_text("hi"), vec![b'h' as usize, b'i' as usize]);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = build_vocabulary(&["aaaa aaaa"], 1, 1).unwrap();
        assert_eq!(v.merges()[0], (b'a' as usize, b'a' as usize));
    }

    #[test]
    fn blocks_are_disjoint_and_cover_every_id() {
        let v = build_vocabulary(&["the cat sat on the mat"], 10, 4).unwrap();
        let mut units = 0;
        let mut specials = 0;
        for id in 0..v.size() {
            match v.kind(id).unwrap() {
                TokenKind::Text => assert!(id < v.n_text()),
                TokenKind::Unit(u) => {
                    assert_eq!(v.unit_id(u).unwrap(), id);
                    units += 1;
                }
                TokenKind::Special(s) => {
                    assert_eq!(v.special(s), id);
                    specials += 1;
                }
            }
        }
        assert_eq!((units, specials), (4, 7));
        assert!(v.kind(v.size()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = build_vocabulary(&["one two three two one"], 6, 9).unwrap();
        let back = FusedVocabulary::from_text(&v.to_text(), Path::new("v.txt")).unwrap();
        assert_eq!(back, v);
        assert!(FusedVocabulary::from_text("nope", Path::new("v.txt")).is_err());
    }
}
