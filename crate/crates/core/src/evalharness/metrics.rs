use std::collections::{HashMap, HashSet};

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

/// Added to zero n-gram match counts before taking logs.
pub const BLEU_EPSILON: f64 = 1e-9;
const METEOR_ALPHA: f64 = 0.9;

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    m
}

/// Clipped matches and hypothesis n-gram totals for orders `1..=max_n`.
fn bleu_stats<S: AsRef<str>>(hyp: &[S], reference: &[S], max_n: usize) -> Vec<(usize, usize)> {
    (1..=max_n)
        .map(|n| {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
            (matched, hyp.len().saturating_sub(n - 1))
        })
        .collect()
}

fn bleu_from_stats(stats: &[(usize, usize)], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let log_p: f64 = stats
        .iter()
        .map(|&(m, t)| {
            let p = if m == 0 { BLEU_EPSILON / t.max(1) as f64 } else { m as f64 / t as f64 };
            p.ln()
        })
        .sum::<f64>()
        / stats.len() as f64;
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    bp * log_p.exp()
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions times the
/// brevity penalty. Orders without matches use `BLEU_EPSILON / total`.
pub fn bleu<S: AsRef<str>>(hyp: &[S], reference: &[S], max_n: usize) -> f64 {
    bleu_from_stats(&bleu_stats(hyp, reference, max_n), hyp.len(), reference.len())
}

/// Corpus BLEU: match counts and lengths pooled over all pairs first.
pub fn corpus_bleu(pairs: &[EvalPair], max_n: usize) -> f64 {
    let mut stats = vec![(0usize, 0usize); max_n];
    let (mut h, mut r) = (0, 0);
    for p in pairs {
        for (acc, s) in stats.iter_mut().zip(bleu_stats(&p.hypothesis, &p.reference, max_n)) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
        h += p.hypothesis.len();
        r += p.reference.len();
    }
    bleu_from_stats(&stats, h, r)
}

/// Unique n-grams over total n-grams across all hypotheses.
pub fn distinct_n<S: AsRef<str>>(hyps: &[Vec<S>], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut unique: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        if h.len() >= n {
            for w in h.windows(n) {
                unique.insert(w.iter().map(AsRef::as_ref).collect());
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Harmonic mean of multiset-overlap precision and recall.
pub fn f1<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let h = ngram_counts(hyp, 1);
    let r = ngram_counts(reference, 1);
    let common: usize = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / hyp.len() as f64;
    let rc = common as f64 / reference.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Alignment details behind a [`meteor_lite`] score.
#[derive(Clone, Debug, PartialEq)]
pub struct MeteorAlignment {
    /// `(hypothesis index, reference index)`, sorted by hypothesis index.
    pub matches: Vec<(usize, usize)>,
    pub chunks: usize,
}

/// Greedy unigram alignment: exact matches first, then Porter-stem matches
/// among the tokens still unaligned.
pub fn meteor_alignment<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> MeteorAlignment {
    let stemmer = Stemmer::create(Algorithm::English);
    let mut hyp_used = vec![false; hyp.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut matches = Vec::new();
    let stage = |key: &dyn Fn(&str) -> String,
                 hyp_used: &mut Vec<bool>,
                 ref_used: &mut Vec<bool>,
                 matches: &mut Vec<(usize, usize)>| {
        let ref_keys: Vec<String> = reference.iter().map(|r| key(r.as_ref())).collect();
        for (i, h) in hyp.iter().enumerate() {
            if hyp_used[i] {
                continue;
            }
            let k = key(h.as_ref());
            if let Some(j) = (0..reference.len()).find(|&j| !ref_used[j] && ref_keys[j] == k) {
                hyp_used[i] = true;
                ref_used[j] = true;
                matches.push((i, j));
            }
        }
    };
    stage(&|w| w.to_string(), &mut hyp_used, &mut ref_used, &mut matches);
    stage(&|w| stemmer.stem(w).into_owned(), &mut hyp_used, &mut ref_used, &mut matches);
    matches.sort_unstable();
    let chunks = matches
        .iter()
        .enumerate()
        .filter(|&(k, &(i, j))| k == 0 || matches[k - 1] != (i - 1, j.wrapping_sub(1)))
        .count();
    MeteorAlignment { matches, chunks }
}

/// METEOR without synonym or paraphrase tables:
/// `F_mean * (1 - 0.5 * (chunks / matches)^3)` with
/// `F_mean = P R / (0.9 P + 0.1 R)`.
pub fn meteor_lite<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let a = meteor_alignment(hyp, reference);
    let m = a.matches.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = 0.5 * (a.chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_pairs: usize,
    pub ppl: f64,
    /// Mean of sentence-level BLEU-4.
    pub bleu: f64,
    pub corpus_bleu: f64,
    pub meteor_lite: f64,
    pub f1: f64,
    pub d1: f64,
    pub d2: f64,
}

impl MetricReport {
    /// Text metrics over `pairs`; `ppl` is supplied by the caller.
    pub fn from_pairs(pairs: &[EvalPair], ppl: f64) -> Self {
        let n = pairs.len();
        let mean = |f: &dyn Fn(&EvalPair) -> f64| {
            if n == 0 {
                0.0
            } else {
                pairs.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let hyps: Vec<Vec<String>> = pairs.iter().map(|p| p.hypothesis.clone()).collect();
        Self {
            n_pairs: n,
            ppl,
            bleu: mean(&|p| bleu(&p.hypothesis, &p.reference, 4)),
            corpus_bleu: corpus_bleu(pairs, 4),
            meteor_lite: mean(&|p| meteor_lite(&p.hypothesis, &p.reference)),
            f1: mean(&|p| f1(&p.hypothesis, &p.reference)),
            d1: distinct_n(&hyps, 1),
            d2: distinct_n(&hyps, 2),
        }
    }

    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8} {:>9.3} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "pairs", "ppl", "bleu", "c-bleu", "meteor", "f1", "d1", "d2",
            self.n_pairs, self.ppl, self.bleu, self.corpus_bleu, self.meteor_lite, self.f1, self.d1, self.d2
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identity_and_disjoint() {
        let a = t("the quick brown fox jumps");
        assert!((bleu(&a, &a, 4) - 1.0).abs() < 1e-12);
        assert_eq!(f1(&a, &a), 1.0);
        let b = t("lorem ipsum dolor sit amet");
        assert!(bleu(&b, &a, 4) < 1e-6);
        assert_eq!(f1(&b, &a), 0.0);
        assert_eq!(meteor_lite(&b, &a), 0.0);
        assert_eq!(bleu(&Vec::<String>::new(), &a, 4), 0.0);
    }

    #[test]
    fn chunk_count() {
        let a = meteor_alignment(&t("a b x c d"), &t("a b c d"));
        assert_eq!(a.matches.len(), 4);
        assert_eq!(a.chunks, 2);
        let a = meteor_alignment(&t("d c b a"), &t("a b c d"));
        assert_eq!(a.chunks, 4);
    }
}
