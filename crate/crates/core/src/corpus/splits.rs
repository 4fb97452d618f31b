use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusError, CorpusRecord};

pub const BUCKETS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<(), CorpusError> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(CorpusError::Ratios(format!("{all:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<CorpusRecord>,
    pub valid: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

fn bucket(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % BUCKETS
}

/// Split assignment of one id: the first `train·1000` buckets go to train,
/// the next `valid·1000` to valid, the rest to test.
pub fn split_of(id: &str, spec: &SplitSpec) -> Split {
    let b = bucket(id);
    let t = (spec.train * BUCKETS as f64).round() as u64;
    let v = ((spec.train + spec.valid) * BUCKETS as f64).round() as u64;
    if b < t {
        Split::Train
    } else if b < v {
        Split::Valid
    } else {
        Split::Test
    }
}

pub fn make_splits(corpus: &[CorpusRecord], spec: &SplitSpec) -> Result<Splits, CorpusError> {
    spec.validate()?;
    let mut out = Splits::default();
    for r in corpus {
        match split_of(&r.id, spec) {
            Split::Train => out.train.push(r.clone()),
            Split::Valid => out.valid.push(r.clone()),
            Split::Test => out.test.push(r.clone()),
        }
    }
    for (name, part) in [("train", &out.train), ("valid", &out.valid), ("test", &out.test)] {
        if part.is_empty() {
            log::warn!("split {name} is empty");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_toy_corpus;

    #[test]
    fn sizes_near_expectation() {
        let c = generate_toy_corpus(0, 1000);
        let s = make_splits(&c, &SplitSpec::default()).unwrap();
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), 1000);
        assert!((s.train.len() as f64 - 800.0).abs() <= 30.0, "{}", s.train.len());
        assert!((s.valid.len() as f64 - 100.0).abs() <= 30.0);
        assert!((s.test.len() as f64 - 100.0).abs() <= 30.0);
        assert_eq!(make_splits(&c, &SplitSpec::default()).unwrap(), s);
    }

    #[test]
    fn bucket_assignment_is_unbiased() {
        // 20 corpora of 1,000: the binomial sd of the train count is ~12.6,
        // so single corpora may stray by 3 sd; the pooled mean may not.
        let spec = SplitSpec::default();
        let mut train = 0usize;
        let mut within = 0usize;
        for seed in 0..20 {
            let s = make_splits(&generate_toy_corpus(seed, 1000), &spec).unwrap();
            train += s.train.len();
            within += usize::from((s.train.len() as f64 - 800.0).abs() <= 30.0);
        }
        assert!((train as f64 / 20.0 - 800.0).abs() < 8.0);
        assert!(within >= 19);
    }

    #[test]
    fn bad_ratios_rejected() {
        let spec = SplitSpec { train: 0.5, valid: 0.1, test: 0.1 };
        assert!(make_splits(&[], &spec).is_err());
    }
}
