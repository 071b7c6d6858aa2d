use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Patient counts per split. Validation and test take the rounded share of
/// their ratio (at least one patient each); training keeps the remainder.
pub fn split_sizes(n_patients: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::validation("ratios", "every ratio must be positive"));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::validation(
            "ratios",
            format!("ratios sum to {} instead of 1", tr + va + te),
        ));
    }
    if n_patients < 3 {
        return Err(Error::Structure(format!(
            "need at least 3 patients to split three ways, got {n_patients}"
        )));
    }
    let n = n_patients as f64;
    let n_test = ((n * te).round() as usize).max(1);
    let n_val = ((n * va).round() as usize).max(1);
    let n_train = n_patients
        .checked_sub(n_test + n_val)
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Structure("ratios leave no training patients".into()))?;
    Ok((n_train, n_val, n_test))
}

/// Seeded patient-to-split assignment.
pub fn assign_splits(
    patients: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    let unique: BTreeSet<&String> = patients.iter().collect();
    let mut order: Vec<&String> = unique.into_iter().collect();
    let (n_train, n_val, _) = split_sizes(order.len(), ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (p.clone(), split)
        })
        .collect())
}

pub struct SplitManifests {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    /// The full manifest with its `split` field filled in.
    pub annotated: DatasetManifest,
}

/// Divide a manifest by patient so that all visits of a patient land in
/// the same split.
pub fn split_by_patient(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifests> {
    let assignment = assign_splits(&manifest.patients, ratios, seed)?;
    let mut annotated = manifest.clone();
    annotated.split = Some(assignment);
    Ok(SplitManifests {
        train: annotated.split_subset(Split::Train)?,
        val: annotated.split_subset(Split::Val)?,
        test: annotated.split_subset(Split::Test)?,
        annotated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("P{i:03}")).collect()
    }

    #[test]
    fn ten_patients() {
        assert_eq!(split_sizes(10, DEFAULT_RATIOS).unwrap(), (7, 1, 2));
        let a = assign_splits(&ids(10), DEFAULT_RATIOS, 5).unwrap();
        let count = |s| a.values().filter(|v| **v == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (7, 1, 2)
        );
    }

    #[test]
    fn deterministic_for_seed() {
        let a = assign_splits(&ids(40), DEFAULT_RATIOS, 9).unwrap();
        let b = assign_splits(&ids(40), DEFAULT_RATIOS, 9).unwrap();
        let c = assign_splits(&ids(40), DEFAULT_RATIOS, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn clinical_cohort_size_is_ratio_accurate() {
        let (tr, va, te) = split_sizes(344, DEFAULT_RATIOS).unwrap();
        assert_eq!(tr + va + te, 344);
        assert!((tr as f64 - 0.7 * 344.0).abs() <= 1.0);
        assert!((va as f64 - 0.1 * 344.0).abs() <= 1.0);
        assert!((te as f64 - 0.2 * 344.0).abs() <= 1.0);
    }

    #[test]
    fn too_few_patients() {
        assert!(split_sizes(2, DEFAULT_RATIOS).is_err());
        assert_eq!(split_sizes(3, DEFAULT_RATIOS).unwrap(), (1, 1, 1));
    }

    #[test]
    fn bad_ratios() {
        assert!(split_sizes(10, (0.7, 0.2, 0.2)).is_err());
        assert!(split_sizes(10, (1.0, 0.0, 0.0)).is_err());
    }
}
