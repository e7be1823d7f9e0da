//! Synthetic stand-in tasks with known labelling rules.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::data::{Instance, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticTask {
    /// Positive iff one of a few trigger tokens occurs somewhere in a long
    /// filler sequence.
    #[serde(alias = "needle")]
    NeedleSentiment,
    /// Label is the majority polarity of the polar tokens.
    #[serde(alias = "bag-of-words")]
    BagOfWordsSentiment,
    /// Positive iff the two sequences share at least [`OVERLAP_THRESHOLD`]
    /// content tokens.
    #[serde(alias = "overlap")]
    OverlapPair,
}

impl std::str::FromStr for SyntheticTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "needle" | "needle-sentiment" => Ok(Self::NeedleSentiment),
            "bag-of-words" | "bag-of-words-sentiment" | "bow" => Ok(Self::BagOfWordsSentiment),
            "overlap" | "overlap-pair" => Ok(Self::OverlapPair),
            _ => Err(format!("unknown synthetic task `{s}` (expected needle, bag-of-words or overlap-pair)")),
        }
    }
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            Self::NeedleSentiment => "needle-sentiment",
            Self::BagOfWordsSentiment => "bag-of-words-sentiment",
            Self::OverlapPair => "overlap-pair",
        }
    }
}

pub const MIN_SIZE: usize = 10;
pub const NEEDLE_TRIGGERS: usize = 4;
pub const OVERLAP_THRESHOLD: usize = 2;
const FILLER: usize = 200;
const NEEDLE_LEN: (usize, usize) = (30, 60);
const POLAR: usize = 12;

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn filler<R: Rng>(rng: &mut R, pool: &[String], len: usize) -> Vec<String> {
    (0..len).map(|_| pool.choose(rng).expect("pool").clone()).collect()
}

fn needle<R: Rng>(rng: &mut R, positive: bool) -> Vec<String> {
    let pool = words("w", FILLER);
    let triggers = words("trigger", NEEDLE_TRIGGERS);
    let len = rng.random_range(NEEDLE_LEN.0..=NEEDLE_LEN.1);
    let mut tokens = filler(rng, &pool, len);
    if positive {
        let at = rng.random_range(0..len);
        tokens[at] = triggers.choose(rng).expect("triggers").clone();
    }
    tokens
}

fn bag_of_words<R: Rng>(rng: &mut R, positive: bool) -> Vec<String> {
    let pool = words("w", FILLER);
    let (good, bad) = (words("good", POLAR), words("bad", POLAR));
    // odd number of polar tokens so the majority is never tied
    let polar = 2 * rng.random_range(2..=5) + 1;
    let majority = rng.random_range(polar / 2 + 1..=polar);
    let (win, lose) = if positive { (&good, &bad) } else { (&bad, &good) };
    let len = rng.random_range(10..=30);
    let mut tokens = filler(rng, &pool, len);
    for k in 0..polar {
        let src = if k < majority { win } else { lose };
        tokens.push(src.choose(rng).expect("polar").clone());
    }
    tokens.shuffle(rng);
    tokens
}

fn overlap<R: Rng>(rng: &mut R, positive: bool) -> (Vec<String>, Vec<String>) {
    let pool = words("w", FILLER);
    let (la, lb) = (rng.random_range(6..=12), rng.random_range(6..=12));
    let shared = if positive {
        rng.random_range(OVERLAP_THRESHOLD..=OVERLAP_THRESHOLD + 2)
    } else {
        rng.random_range(0..OVERLAP_THRESHOLD)
    };
    // distinct words so the overlap is exactly `shared`
    let picked: Vec<&String> = pool.choose_multiple(rng, la + lb - shared).collect();
    let a: Vec<String> = picked[..la].iter().map(|s| s.to_string()).collect();
    let mut b: Vec<String> = a[..shared].to_vec();
    b.extend(picked[la..].iter().map(|s| s.to_string()));
    let (mut a, mut b) = (a, b);
    a.shuffle(rng);
    b.shuffle(rng);
    (a, b)
}

/// Generates `size` instances split 70/15/15 into train, validation and
/// test. Labels alternate before shuffling, so classes are balanced to
/// within one instance overall.
pub fn generate_synthetic(task: SyntheticTask, size: usize, seed: u64) -> Result<Dataset, DataError> {
    if size < MIN_SIZE {
        return Err(DataError::TooSmall { size, min: MIN_SIZE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..size).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let train_end = size * 70 / 100;
    let val_end = train_end + size * 15 / 100;
    let instances = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let split = if i < train_end {
                Split::Train
            } else if i < val_end {
                Split::Validation
            } else {
                Split::Test
            };
            let id = format!("{}-{i}", task.name());
            let positive = label == 1;
            match task {
                SyntheticTask::NeedleSentiment => Instance {
                    id,
                    tokens: needle(&mut rng, positive),
                    tokens2: None,
                    label,
                    split,
                },
                SyntheticTask::BagOfWordsSentiment => Instance {
                    id,
                    tokens: bag_of_words(&mut rng, positive),
                    tokens2: None,
                    label,
                    split,
                },
                SyntheticTask::OverlapPair => {
                    let (a, b) = overlap(&mut rng, positive);
                    Instance {
                        id,
                        tokens: a,
                        tokens2: Some(b),
                        label,
                        split,
                    }
                }
            }
        })
        .collect();
    Dataset::from_instances(task.name(), instances)
}

/// The labelling rule of each task, applied to an instance's tokens.
pub fn oracle_label(task: SyntheticTask, instance: &Instance) -> usize {
    match task {
        SyntheticTask::NeedleSentiment => instance.tokens.iter().any(|t| t.starts_with("trigger")) as usize,
        SyntheticTask::BagOfWordsSentiment => {
            let good = instance.tokens.iter().filter(|t| t.starts_with("good")).count();
            let bad = instance.tokens.iter().filter(|t| t.starts_with("bad")).count();
            (good > bad) as usize
        }
        SyntheticTask::OverlapPair => {
            let b = instance.tokens2.as_deref().unwrap_or_default();
            let shared = instance.tokens.iter().filter(|t| b.contains(t)).count();
            (shared >= OVERLAP_THRESHOLD) as usize
        }
    }
}
