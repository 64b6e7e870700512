use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Number of phase-angle buckets used to stratify the first test split.
pub const PHASE_BUCKETS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitSpec {
    Counts { train: usize, val: usize, test1: usize, test2: usize },
    Fractions { train: f64, val: f64, test1: f64, test2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test1: usize,
    pub test2: usize,
}

impl SplitSpec {
    pub fn resolve(&self, n: usize) -> Result<SplitCounts> {
        match *self {
            SplitSpec::Counts { train, val, test1, test2 } => {
                if train + val + test1 + test2 != n {
                    return Err(Error::Input(alloc::format!(
                        "split counts sum to {}, dataset has {}",
                        train + val + test1 + test2,
                        n
                    )));
                }
                Ok(SplitCounts { train, val, test1, test2 })
            }
            SplitSpec::Fractions { train, val, test1, test2 } => {
                let fr = [train, val, test1, test2];
                if fr.iter().any(|f| !(*f >= 0.0)) || ((fr.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
                    return Err(Error::Input("split fractions must be non-negative and sum to 1".into()));
                }
                let r = |f: f64| crate::math::round(f * n as f64) as usize;
                let (val, test1, test2) = (r(val), r(test1), r(test2));
                let rest = n
                    .checked_sub(val + test1 + test2)
                    .ok_or_else(|| Error::Input("split fractions exceed the dataset".into()))?;
                Ok(SplitCounts { train: rest, val, test1, test2 })
            }
        }
    }
}

/// Index lists of the four disjoint splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test1: Vec<usize>,
    pub test2: Vec<usize>,
}

impl Splits {
    pub fn datasets(&self, ds: &Dataset) -> [Dataset; 4] {
        [ds.subset(&self.train), ds.subset(&self.val), ds.subset(&self.test1), ds.subset(&self.test2)]
    }
}

/// Bucket of `angle` among [`PHASE_BUCKETS`] equal bins over `[lo, hi]`.
pub fn phase_bucket(angle: f64, lo: f64, hi: f64) -> usize {
    if hi <= lo {
        return 0;
    }
    (((angle - lo) / (hi - lo) * PHASE_BUCKETS as f64) as usize).min(PHASE_BUCKETS - 1)
}

/// Seeded split. The first test split is stratified over phase-angle buckets
/// (drawn round-robin); the second test split, validation and training are
/// then taken from a shuffle of the remainder, without stratification.
pub fn split(ds: &Dataset, spec: &SplitSpec, seed: u64) -> Result<Splits> {
    let n = ds.len();
    let counts = spec.resolve(n)?;
    let mut rng = rng_from_seed(seed);
    let angles: Vec<f64> = ds.samples.iter().map(|s| s.meta.phase_angle_deg).collect();
    let lo = angles.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut buckets: Vec<Vec<usize>> = (0..PHASE_BUCKETS).map(|_| Vec::new()).collect();
    for (i, &a) in angles.iter().enumerate() {
        buckets[phase_bucket(a, lo, hi)].push(i);
    }
    for b in buckets.iter_mut() {
        b.shuffle(&mut rng);
        b.reverse();
    }
    let mut taken = alloc::vec![false; n];
    let mut test1 = Vec::with_capacity(counts.test1);
    while test1.len() < counts.test1 {
        let mut progressed = false;
        for b in buckets.iter_mut() {
            if test1.len() == counts.test1 {
                break;
            }
            if let Some(i) = b.pop() {
                taken[i] = true;
                test1.push(i);
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Input("not enough samples for the stratified test split".into()));
        }
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
    rest.shuffle(&mut rng);
    let test2 = rest[..counts.test2].to_vec();
    let val = rest[counts.test2..counts.test2 + counts.val].to_vec();
    let train = rest[counts.test2 + counts.val..].to_vec();
    Ok(Splits { train, val, test1, test2 })
}
