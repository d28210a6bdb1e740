use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CdaError, Result};
use crate::seed::{derive, rng, stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    /// Sorted.
    pub test_ids: Vec<String>,
    /// Sorted.
    pub train_ids: Vec<String>,
    pub repeat_seed: u64,
}

/// Stratified k-fold partition. Each class is shuffled independently and
/// dealt round-robin; the dealing position carries over between classes so
/// fold totals also differ by at most one.
pub fn stratified_kfold(ids_by_class: &[Vec<String>], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(CdaError::InvalidInput(format!("need k >= 2 folds, got {k}")));
    }
    let total: usize = ids_by_class.iter().map(Vec::len).sum();
    if total < k {
        return Err(CdaError::InvalidInput(format!("{total} ids cannot fill {k} folds")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for id in ids_by_class.iter().flatten() {
        if !seen.insert(id) {
            return Err(CdaError::InvalidInput(format!("id {id} appears more than once")));
        }
    }

    let mut tests: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut next = 0usize;
    for (c, ids) in ids_by_class.iter().enumerate() {
        let mut ids = ids.clone();
        ids.sort();
        ids.shuffle(&mut rng(derive(&[seed, stream::CV, c as u64])));
        for id in ids {
            tests[next].push(id);
            next = (next + 1) % k;
        }
    }

    let folds = tests
        .iter()
        .enumerate()
        .map(|(f, test)| {
            let mut test_ids = test.clone();
            test_ids.sort();
            let mut train_ids: Vec<String> = tests
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, t)| t.iter().cloned())
                .collect();
            train_ids.sort();
            FoldSplit {
                fold_index: f,
                test_ids,
                train_ids,
                repeat_seed: seed,
            }
        })
        .collect();
    Ok(folds)
}
