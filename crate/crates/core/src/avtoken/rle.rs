use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::stream::TokenSequence;

/// Run-length view of a token sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupedTokens {
    pub units: TokenSequence,
    pub durations: Vec<usize>,
}

impl DedupedTokens {
    pub fn new(units: Vec<usize>, durations: Vec<usize>) -> Result<Self> {
        let d = Self { units: TokenSequence(units), durations };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.len() != self.durations.len() {
            return Err(Error::Invalid(format!("{} units but {} durations", self.units.len(), self.durations.len())));
        }
        if let Some(i) = self.durations.iter().position(|&d| d < 1) {
            return Err(Error::Invalid(format!("duration at position {i} is zero")));
        }
        if let Some(i) = self.units.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::Invalid(format!("adjacent duplicate unit {} at position {}", self.units[i], i + 1)));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

pub fn dedup(tokens: &[usize]) -> DedupedTokens {
    let mut units = Vec::new();
    let mut durations: Vec<usize> = Vec::new();
    for &t in tokens {
        match units.last() {
            Some(&last) if last == t => *durations.last_mut().unwrap() += 1,
            _ => {
                units.push(t);
                durations.push(1);
            }
        }
    }
    DedupedTokens { units: TokenSequence(units), durations }
}

pub fn restore(deduped: &DedupedTokens) -> Result<TokenSequence> {
    deduped.validate()?;
    let mut out = Vec::with_capacity(deduped.total_frames());
    for (&u, &d) in deduped.units.iter().zip(&deduped.durations) {
        out.extend(std::iter::repeat_n(u, d));
    }
    Ok(TokenSequence(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_examples() {
        let d = dedup(&[5, 5, 5, 2, 2, 7]);
        assert_eq!(d.units.0, vec![5, 2, 7]);
        assert_eq!(d.durations, vec![3, 2, 1]);
        assert_eq!(dedup(&[]), DedupedTokens::default());
        let d = dedup(&[1, 2, 1, 2]);
        assert_eq!(d.durations, vec![1, 1, 1, 1]);
    }

    #[test]
    fn restore_examples() {
        let d = DedupedTokens::new(vec![5, 2, 7], vec![3, 2, 1]).unwrap();
        assert_eq!(restore(&d).unwrap().0, vec![5, 5, 5, 2, 2, 7]);
        let bad = DedupedTokens { units: TokenSequence(vec![1]), durations: vec![0] };
        assert!(restore(&bad).is_err());
        let dup = DedupedTokens { units: TokenSequence(vec![1, 1]), durations: vec![1, 1] };
        assert!(restore(&dup).is_err());
    }
}
