//! Cross-validation split plans.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SplitSpec {
    KFold { k: usize, seed: u64 },
    LeaveOneGroupOut,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::KFold { k: 5, seed: 0 }
    }
}

impl SplitSpec {
    pub fn plan(&self, manifest: &Manifest) -> Result<SplitPlan> {
        match *self {
            SplitSpec::KFold { k, seed } => kfold(manifest, k, seed),
            SplitSpec::LeaveOneGroupOut => leave_one_group_out(manifest),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SplitSpec::KFold { k, .. } => format!("{k}-fold"),
            SplitSpec::LeaveOneGroupOut => "leave-one-group-out".into(),
        }
    }
}

/// Fold assignment per clip, in manifest order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub spec: SplitSpec,
    pub num_folds: usize,
    pub folds: Vec<usize>,
}

impl SplitPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Stratified k-fold: each class is shuffled with its own seeded stream and
/// dealt round-robin, continuing the deal across classes so fold sizes
/// differ by at most one.
pub fn kfold(manifest: &Manifest, k: usize, seed: u64) -> Result<SplitPlan> {
    let n = manifest.clips.len();
    if k < 2 || k > n {
        return Err(Error::Argument(format!("cannot split {n} clips into {k} folds")));
    }
    let mut folds = vec![0; n];
    let mut next = 0;
    for class in 0..manifest.num_classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| manifest.clips[i].label == class).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(SplitPlan {
        spec: SplitSpec::KFold { k, seed },
        num_folds: k,
        folds,
    })
}

/// One fold per group, ordered by group id.
pub fn leave_one_group_out(manifest: &Manifest) -> Result<SplitPlan> {
    let groups: Vec<usize> = manifest
        .clips
        .iter()
        .map(|c| c.group)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if groups.len() < 2 {
        return Err(Error::Argument("leave-one-group-out needs at least two groups".into()));
    }
    let folds = manifest
        .clips
        .iter()
        .map(|c| groups.binary_search(&c.group).expect("group listed"))
        .collect();
    Ok(SplitPlan {
        spec: SplitSpec::LeaveOneGroupOut,
        num_folds: groups.len(),
        folds,
    })
}
