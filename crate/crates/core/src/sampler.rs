//! Strictly nested few-shot training subsets and a leakage-free validation split.
//!
//! Each class gets one seeded permutation of its sample indices. The level-`s`
//! training set is the first `s` entries of every class permutation, so all
//! levels are nested by construction. Validation is everything outside the
//! largest level's pool.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PatchSample, NUM_CLASSES};
use crate::error::{Error, Result};

pub const DEFAULT_SHOT_LEVELS: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotPlan {
    pub seed: u64,
    pub shots_levels: Vec<usize>,
    /// Seeded permutation of each class's sample indices.
    pub per_class_order: Vec<Vec<usize>>,
    /// Sorted ascending.
    pub validation_indices: Vec<usize>,
    /// Classes whose population is smaller than the largest level.
    pub short_classes: Vec<usize>,
}

/// Build the nested plan for `labels` (class index per sample).
pub fn build_shot_plan(labels: &[usize], shots_levels: &[usize], seed: u64) -> Result<ShotPlan> {
    if shots_levels.is_empty() {
        return Err(Error::InvalidArgument("no shot levels".into()));
    }
    if shots_levels.windows(2).any(|w| w[0] >= w[1]) || shots_levels[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "shot levels must be positive and strictly increasing: {shots_levels:?}"
        )));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1).max(NUM_CLASSES);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in labels.iter().enumerate() {
        per_class[y].push(i);
    }
    if let Some(c) = per_class.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("class {c} has no samples")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in &mut per_class {
        idx.shuffle(&mut rng);
    }
    let max_level = *shots_levels.last().expect("non-empty");
    let short_classes: Vec<usize> = per_class
        .iter()
        .enumerate()
        .filter(|(_, idx)| idx.len() < max_level)
        .map(|(c, _)| c)
        .collect();
    let mut validation_indices: Vec<usize> = per_class
        .iter()
        .flat_map(|idx| idx.iter().skip(max_level).copied())
        .collect();
    validation_indices.sort_unstable();

    Ok(ShotPlan {
        seed,
        shots_levels: shots_levels.to_vec(),
        per_class_order: per_class,
        validation_indices,
        short_classes,
    })
}

impl ShotPlan {
    pub fn num_classes(&self) -> usize {
        self.per_class_order.len()
    }

    /// Training indices at `level` (0 → empty), class-major.
    pub fn train_indices(&self, level: usize) -> Result<Vec<usize>> {
        if level != 0 && !self.shots_levels.contains(&level) {
            return Err(Error::InvalidArgument(format!(
                "shot level {level} not in plan {:?}",
                self.shots_levels
            )));
        }
        Ok(self
            .per_class_order
            .iter()
            .flat_map(|idx| idx.iter().take(level).copied())
            .collect())
    }

    pub fn materialize(&self, level: usize, dataset: &[PatchSample]) -> Result<(Vec<PatchSample>, Vec<PatchSample>)> {
        let total: usize = self.per_class_order.iter().map(Vec::len).sum();
        if total != dataset.len() {
            return Err(Error::InvalidArgument(format!(
                "plan covers {total} samples but dataset has {}",
                dataset.len()
            )));
        }
        let train = self.train_indices(level)?.into_iter().map(|i| dataset[i].clone()).collect();
        let val = self.validation_indices.iter().map(|&i| dataset[i].clone()).collect();
        Ok((train, val))
    }

    /// Checks nesting, disjointness and per-class counts; returns the first
    /// violation found.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let val: BTreeSet<usize> = self.validation_indices.iter().copied().collect();
        let mut prev: Option<BTreeSet<usize>> = None;
        for &level in &self.shots_levels {
            let set: BTreeSet<usize> = self.train_indices(level).map_err(|e| e.to_string())?.into_iter().collect();
            if let Some(p) = &prev {
                if !p.is_subset(&set) {
                    return Err(format!("level {level} does not contain the previous level"));
                }
            }
            for (c, idx) in self.per_class_order.iter().enumerate() {
                let count = idx.iter().filter(|i| set.contains(i)).count();
                if count != level.min(idx.len()) {
                    return Err(format!("class {c} has {count} samples at level {level}"));
                }
            }
            if !set.is_disjoint(&val) {
                return Err(format!("level {level} overlaps validation"));
            }
            prev = Some(set);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
