use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::CaseRecord;
use crate::error::{Error, Result};
use crate::types::Subtype;

/// Case ids per fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Folds {
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl Folds {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|c| c == id))
    }

    /// All ids outside fold `k`.
    pub fn train_ids(&self, k: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Stratified-by-label case-level partition into `k` folds. Each class is
/// shuffled and dealt round-robin, continuing the deal across classes so
/// fold totals stay balanced too.
pub fn make_folds(cases: &[CaseRecord], k: usize, seed: u64) -> Result<Folds> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let by_label = group(cases, |c| c.label);
    for (label, ids) in &by_label {
        if ids.len() < k {
            return Err(Error::Config(format!(
                "{} {label} cases cannot fill {k} folds",
                ids.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (_, mut ids) in by_label {
        ids.shuffle(&mut rng);
        for id in ids {
            folds[next % k].push(id);
            next += 1;
        }
    }
    Ok(Folds { seed, folds })
}

/// Held-out test split stratified by (label, paired); each stratum sends
/// `round(fraction · n)` cases to test.
pub fn holdout_split(cases: &[CaseRecord], test_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let strata = group(cases, |c| (c.label, c.is_paired()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x07e5_75e7);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut ids) in strata {
        ids.shuffle(&mut rng);
        let n_test = (test_fraction * ids.len() as f64).round() as usize;
        test.extend(ids.drain(..n_test));
        train.extend(ids);
    }
    Ok((train, test))
}

fn group<K: Ord>(cases: &[CaseRecord], key: impl Fn(&CaseRecord) -> K) -> BTreeMap<K, Vec<String>> {
    let mut m: BTreeMap<K, Vec<String>> = BTreeMap::new();
    for c in cases {
        m.entry(key(c)).or_default().push(c.case_id.clone());
    }
    for ids in m.values_mut() {
        ids.sort();
    }
    m
}

pub fn label_counts(cases: &[CaseRecord]) -> (usize, usize) {
    let lusc = cases.iter().filter(|c| c.label == Subtype::Lusc).count();
    (cases.len() - lusc, lusc)
}
