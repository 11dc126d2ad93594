use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Seeded shuffle of the sorted ids, cut into `k` contiguous validation
/// blocks. The first `n mod k` folds hold one extra id.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::invalid(format!("{} ids cannot fill {k} folds", ids.len())));
    }
    let mut order = ids.to_vec();
    order.sort();
    order.dedup();
    if order.len() != ids.len() {
        return Err(Error::invalid("fold ids must be unique"));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (q, r) = (order.len() / k, order.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold_id in 0..k {
        let len = q + usize::from(fold_id < r);
        let end = start + len;
        let validation = order[start..end].to_vec();
        let train = order[..start].iter().chain(&order[end..]).cloned().collect();
        folds.push(FoldSplit {
            fold_id,
            train,
            validation,
        });
        start = end;
    }
    Ok(folds)
}
