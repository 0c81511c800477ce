use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Subject-level partition of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labelled_subjects: BTreeSet<String>,
    pub unlabelled_subjects: BTreeSet<String>,
    pub validation_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn training_pool(&self) -> BTreeSet<String> {
        self.labelled_subjects
            .union(&self.unlabelled_subjects)
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let sets = [
            &self.labelled_subjects,
            &self.unlabelled_subjects,
            &self.validation_subjects,
            &self.test_subjects,
        ];
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                if let Some(s) = a.intersection(b).next() {
                    return Err(Error::Data(format!("subject {s} appears in two split sets")));
                }
            }
        }
        Ok(())
    }

    /// Subjects of a named split: `labelled`, `unlabelled`, `train`, `val`, `test` or `all`.
    pub fn named(&self, name: &str) -> Result<BTreeSet<String>> {
        Ok(match name {
            "labelled" => self.labelled_subjects.clone(),
            "unlabelled" => self.unlabelled_subjects.clone(),
            "train" => self.training_pool(),
            "val" | "validation" => self.validation_subjects.clone(),
            "test" => self.test_subjects.clone(),
            "all" => {
                let mut all = self.training_pool();
                all.extend(self.validation_subjects.iter().cloned());
                all.extend(self.test_subjects.iter().cloned());
                all
            }
            other => return Err(Error::Config(format!("unknown split name {other:?}"))),
        })
    }
}

fn shuffled(pool: &[String], seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = pool.to_vec();
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids
}

/// Picks `max(1, round(fraction * |pool|))` labelled subjects; the rest of the
/// pool is unlabelled. Validation and test sets are left empty.
pub fn subsample_labels(pool: &[String], fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if pool.is_empty() {
        return Err(Error::Precondition("cannot subsample an empty subject pool".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Precondition(format!(
            "label fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let ids = shuffled(pool, seed);
    let k = ((fraction * ids.len() as f64).round() as usize).clamp(1, ids.len());
    Ok(DatasetSplit {
        labelled_subjects: ids[..k].iter().cloned().collect(),
        unlabelled_subjects: ids[k..].iter().cloned().collect(),
        ..DatasetSplit::default()
    })
}

/// Seeded train/validation/test partition followed by label subsampling of
/// the training pool.
pub fn partition_subjects(
    subjects: &[String],
    n_val: usize,
    n_test: usize,
    labels_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let ids = shuffled(subjects, seed);
    if n_val + n_test >= ids.len() {
        return Err(Error::Data(format!(
            "{} subjects cannot provide {n_val} validation and {n_test} test subjects plus training data",
            ids.len()
        )));
    }
    let validation: BTreeSet<String> = ids[..n_val].iter().cloned().collect();
    let test: BTreeSet<String> = ids[n_val..n_val + n_test].iter().cloned().collect();
    let pool = &ids[n_val + n_test..];
    let mut split = subsample_labels(pool, labels_fraction, seed.wrapping_add(1))?;
    split.validation_subjects = validation;
    split.test_subjects = test;
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("subject_{i:03}")).collect()
    }

    #[test]
    fn full_fraction_labels_everything() {
        let s = subsample_labels(&pool(10), 1.0, 0).unwrap();
        assert_eq!(s.labelled_subjects.len(), 10);
        assert!(s.unlabelled_subjects.is_empty());
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(subsample_labels(&pool(70), 0.03, 1).unwrap().labelled_subjects.len(), 2);
        assert_eq!(subsample_labels(&pool(70), 0.06, 1).unwrap().labelled_subjects.len(), 4);
        assert_eq!(subsample_labels(&pool(60), 0.05, 1).unwrap().labelled_subjects.len(), 3);
        assert_eq!(subsample_labels(&pool(5), 0.01, 1).unwrap().labelled_subjects.len(), 1);
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(subsample_labels(&[], 0.5, 0), Err(Error::Precondition(_))));
        assert!(matches!(subsample_labels(&pool(3), 0.0, 0), Err(Error::Precondition(_))));
        assert!(matches!(subsample_labels(&pool(3), 1.5, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn partition_sizes() {
        let s = partition_subjects(&pool(100), 20, 20, 0.05, 7).unwrap();
        assert_eq!(s.validation_subjects.len(), 20);
        assert_eq!(s.test_subjects.len(), 20);
        assert_eq!(s.labelled_subjects.len(), 3);
        assert_eq!(s.unlabelled_subjects.len(), 57);
        assert_eq!(s, partition_subjects(&pool(100), 20, 20, 0.05, 7).unwrap());
    }

    proptest! {
        #[test]
        fn labelled_and_unlabelled_partition_the_pool(n in 1usize..80, f in 0.001f64..=1.0, seed in any::<u64>()) {
            let p = pool(n);
            let s = subsample_labels(&p, f, seed).unwrap();
            prop_assert!(s.labelled_subjects.is_disjoint(&s.unlabelled_subjects));
            let all: BTreeSet<String> = p.into_iter().collect();
            prop_assert_eq!(s.training_pool(), all);
            prop_assert_eq!(s.clone(), subsample_labels(&pool(n), f, seed).unwrap());
        }
    }
}
