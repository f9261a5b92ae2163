use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::metrics::tokenize;

pub const UNKNOWN_WORD: &str = "<unk>";

/// Known bijection between words and AV unit codes, standing in for a
/// speech recognizer when transcribing generated units.
///
/// Every word owns a distinct word-initial unit followed by one or two body
/// units drawn from a separate block, so codes never repeat a unit back to
/// back and a unit stream splits into words at the initial units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Lexicon", into = "Lexicon")]
pub struct OracleChannel {
    words: Vec<String>,
    codes: Vec<Vec<usize>>,
    n_body: usize,
    index: HashMap<String, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct Lexicon {
    words: Vec<String>,
    codes: Vec<Vec<usize>>,
    n_body: usize,
}

impl From<Lexicon> for OracleChannel {
    fn from(l: Lexicon) -> Self {
        Self::from_parts(l.words, l.codes, l.n_body)
    }
}

impl From<OracleChannel> for Lexicon {
    fn from(c: OracleChannel) -> Self {
        Self { words: c.words, codes: c.codes, n_body: c.n_body }
    }
}

impl OracleChannel {
    /// Lexicon over the sorted distinct lowercased words of `texts`.
    pub fn build<S: AsRef<str>>(texts: &[S], n_body: usize, seed: u64) -> Result<Self> {
        if n_body < 2 {
            return Err(Error::Config("the oracle channel needs at least 2 body units".into()));
        }
        let words: Vec<String> =
            texts.iter().flat_map(|t| tokenize(t.as_ref())).collect::<BTreeSet<_>>().into_iter().collect();
        if words.is_empty() {
            return Err(Error::Invalid("no words to build a lexicon from".into()));
        }
        let n_words = words.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes = (0..n_words)
            .map(|w| {
                let first = rng.random_range(0..n_body);
                let mut code = vec![w, n_words + first];
                if w % 2 == 1 {
                    let second = (first + 1 + rng.random_range(0..n_body - 1)) % n_body;
                    code.push(n_words + second);
                }
                code
            })
            .collect();
        Ok(Self::from_parts(words, codes, n_body))
    }

    fn from_parts(words: Vec<String>, codes: Vec<Vec<usize>>, n_body: usize) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, codes, n_body, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn n_units(&self) -> usize {
        self.words.len() + self.n_body
    }

    pub fn code(&self, word: &str) -> Option<&[usize]> {
        self.index.get(word).map(|&i| self.codes[i].as_slice())
    }

    /// Unit stream for a sentence; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in tokenize(text) {
            let code =
                self.code(&w).ok_or_else(|| Error::Invalid(format!("word `{w}` is not in the oracle lexicon")))?;
            out.extend_from_slice(code);
        }
        Ok(out)
    }

    /// Words for a unit stream. Segments that are not exactly a known code
    /// come out as [`UNKNOWN_WORD`].
    pub fn decode(&self, units: &[usize]) -> Vec<String> {
        let n_words = self.words.len();
        let mut out = Vec::new();
        let mut start = 0;
        while start < units.len() {
            let mut end = start + 1;
            while end < units.len() && units[end] >= n_words {
                end += 1;
            }
            let seg = &units[start..end];
            let word = match seg.first() {
                Some(&w) if w < n_words && self.codes[w] == seg => self.words[w].clone(),
                _ => UNKNOWN_WORD.to_string(),
            };
            out.push(word);
            start = end;
        }
        out
    }
}
