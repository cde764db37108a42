use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ClassId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub seen: BTreeSet<ClassId>,
    pub unseen: BTreeSet<ClassId>,
}

impl FoldSplit {
    pub fn is_seen(&self, class: ClassId) -> bool {
        self.seen.contains(&class)
    }

    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.seen.union(&self.unseen).copied().collect()
    }
}

/// Fold `i` holds out the `i`-th contiguous block of sorted class ids.
pub fn make_folds(taxonomy: &[ClassId], folds: usize) -> Result<Vec<FoldSplit>> {
    let mut sorted: Vec<ClassId> = taxonomy.to_vec();
    sorted.sort();
    sorted.dedup();
    if folds == 0 || sorted.is_empty() || !sorted.len().is_multiple_of(folds) {
        return Err(Error::IndivisibleTaxonomy { classes: sorted.len(), folds });
    }
    let block = sorted.len() / folds;
    Ok((0..folds)
        .map(|i| {
            let unseen: BTreeSet<ClassId> = sorted[i * block..(i + 1) * block].iter().copied().collect();
            let seen = sorted.iter().copied().filter(|c| !unseen.contains(c)).collect();
            FoldSplit { fold: i, seen, unseen }
        })
        .collect())
}
