use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SubjectRecord;
use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// Fold assignment per subject id, with folds 0..=2 for training, 3 for
/// validation and 4 for testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    folds: HashMap<String, usize>,
}

impl DatasetSplit {
    pub fn role_of_fold(fold: usize) -> Role {
        match fold {
            0..=2 => Role::Train,
            3 => Role::Validation,
            _ => Role::Test,
        }
    }

    pub fn fold(&self, id: &str) -> Option<usize> {
        self.folds.get(id).copied()
    }

    pub fn role(&self, id: &str) -> Option<Role> {
        self.fold(id).map(Self::role_of_fold)
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Ids in a fold, sorted.
    pub fn fold_members(&self, fold: usize) -> Vec<&str> {
        let mut ids: Vec<&str> = self
            .folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Records with the given role, in input order.
    pub fn select<'a>(&self, records: &'a [SubjectRecord], role: Role) -> Vec<&'a SubjectRecord> {
        records.iter().filter(|r| self.role(&r.id) == Some(role)).collect()
    }
}

/// Random 5-way partition into near-equal folds, deterministic in `seed`.
pub fn split_folds(records: &[SubjectRecord], seed: u64) -> Result<DatasetSplit> {
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate subject id {}", r.id)));
        }
    }
    // Sorting first makes the split independent of input order.
    let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let folds = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_owned(), i % NUM_FOLDS))
        .collect();
    Ok(DatasetSplit { folds })
}
