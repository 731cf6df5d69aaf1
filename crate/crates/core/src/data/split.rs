use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Hold out `val_count` ids for validation after a seeded shuffle; the test list is external.
pub fn make_split(ids: &[String], val_count: usize, seed: u64) -> Result<DatasetSplit> {
    make_split_with_test(ids, val_count, 0, seed)
}

/// Seeded shuffle, then `test_count` test ids, `val_count` validation ids, the rest train.
pub fn make_split_with_test(
    ids: &[String],
    val_count: usize,
    test_count: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if val_count + test_count >= ids.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot hold out {val_count} validation + {test_count} test ids from {} ids",
            ids.len()
        )));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order.split_off(val_count + test_count);
    let val = order.split_off(test_count);
    Ok(DatasetSplit {
        train,
        val,
        test: order,
        seed,
    })
}
