use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphDataset, Masks};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            val_fraction: 0.25,
            test_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fractions = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::Validation(format!(
                "split fractions must lie in (0, 1), got {fractions:?}"
            )));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("split fractions sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Seeded split stratified on the four `(sensitive, label)` cells. Every
/// nonempty cell contributes at least one training node.
pub fn make_splits(g: &GraphDataset, spec: &SplitSpec) -> Result<GraphDataset> {
    spec.validate()?;
    let n = g.n();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut masks = Masks::empty(n);
    for s in 0..2u8 {
        for y in 0..2u8 {
            let mut cell: Vec<usize> = (0..n)
                .filter(|&i| g.sensitive()[i] == s && g.labels()[i] == y)
                .collect();
            if cell.is_empty() {
                log::warn!("(sensitive={s}, label={y}) cell is empty; split proceeds without it");
                continue;
            }
            cell.shuffle(&mut rng);
            let size = cell.len();
            let n_train = ((spec.train_fraction * size as f64).round() as usize).clamp(1, size);
            let n_val = ((spec.val_fraction * size as f64).round() as usize).min(size - n_train);
            for (rank, &i) in cell.iter().enumerate() {
                if rank < n_train {
                    masks.train[i] = true;
                } else if rank < n_train + n_val {
                    masks.val[i] = true;
                } else {
                    masks.test[i] = true;
                }
            }
        }
    }
    g.clone().with_masks(masks, Some(spec.seed))
}
