//! Grouped, stage-stratified k-fold splits: whole datasets move between splits, never frames.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{FlyDataset, Stage};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub round: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl FoldPlan {
    pub fn select<'a>(&self, corpus: &'a [FlyDataset], ids: &[String]) -> Vec<&'a FlyDataset> {
        corpus.iter().filter(|d| ids.contains(&d.id)).collect()
    }
}

/// Split for round `round` of `k`.
///
/// Each stage's datasets are shuffled once with `seed` (the same order every round).
/// With at least `k` datasets in a stage they are dealt into `k` chunks; round `r` tests
/// chunk `r` and validates on chunk `r + 1`, so every dataset is tested exactly once over
/// the `k` rounds. Stages with fewer than `k` (but at least 3) datasets rotate single
/// datasets through test and val instead.
pub fn kfold_split(corpus: &[FlyDataset], k: usize, round: usize, seed: u64) -> Result<FoldPlan> {
    if k < 3 {
        return Err(Error::invalid(format!("k must be at least 3, got {k}")));
    }
    if round >= k {
        return Err(Error::invalid(format!("round {round} out of range for k = {k}")));
    }
    let mut by_stage: BTreeMap<Stage, Vec<&str>> = BTreeMap::new();
    for d in corpus {
        by_stage.entry(d.stage).or_default().push(&d.id);
    }
    let mut plan = FoldPlan { k, round, train: vec![], val: vec![], test: vec![] };
    for (stage, mut ids) in by_stage {
        let n = ids.len();
        if n < 3 {
            return Err(Error::TooFewDatasets { stage: stage.to_string(), count: n });
        }
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stage as u64);
        ids.shuffle(&mut rng);
        for (pos, id) in ids.iter().enumerate() {
            let (is_test, is_val) = if n >= k {
                (pos % k == round, pos % k == (round + 1) % k)
            } else {
                (pos == round % n, pos == (round + 1) % n)
            };
            let slot = if is_test {
                &mut plan.test
            } else if is_val {
                &mut plan.val
            } else {
                &mut plan.train
            };
            slot.push(id.to_string());
        }
    }
    Ok(plan)
}
