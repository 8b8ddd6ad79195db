use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// Largest-remainder apportionment of `n` items by integer `ratios`.
/// Leftover items go to the largest fractional remainders, ties to the
/// earlier share.
pub fn apportion(n: usize, ratios: &[u64]) -> Vec<usize> {
    let total: u64 = ratios.iter().sum();
    if total == 0 {
        return vec![0; ratios.len()];
    }
    let n = n as u64;
    let mut sizes: Vec<u64> = ratios.iter().map(|r| n * r / total).collect();
    let rem: Vec<u64> = ratios.iter().map(|r| n * r % total).collect();
    let mut left = n - sizes.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes.into_iter().map(|s| s as usize).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub image: String,
    pub label: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub ratios: [u64; 3],
    pub items: Vec<DatasetItem>,
}

impl DatasetIndex {
    pub fn of(&self, split: Split) -> Vec<&DatasetItem> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn sizes(&self) -> [usize; 3] {
        Split::ALL.map(|s| self.of(s).len())
    }
}

/// Seeded shuffle, then the first shares go to train, val, test in order.
pub fn split_dataset(items: &[(String, String)], ratios: [u64; 3], seed: u64) -> Result<DatasetIndex> {
    if items.len() < 10 {
        return Err(cfg_err!("splitting needs at least 10 items, got {}", items.len()));
    }
    let sizes = apportion(items.len(), &ratios);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(items.len());
    let mut cursor = 0;
    for (split, &size) in Split::ALL.iter().zip(&sizes) {
        for &i in &order[cursor..cursor + size] {
            out.push(DatasetItem {
                image: items[i].0.clone(),
                label: items[i].1.clone(),
                split: *split,
            });
        }
        cursor += size;
    }
    Ok(DatasetIndex {
        seed,
        ratios,
        items: out,
    })
}

/// `split.json`: stems per split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [u64; 3],
    pub image_size: usize,
    pub classes: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn stems(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}
