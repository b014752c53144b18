//! Patient-level K-fold assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

/// Partition case indices into `k` folds so that every patient's cases share
/// a fold. Patients are shuffled by `seed`, ordered by their positive-label
/// fraction (a stable sort, so the shuffle breaks ties) and dealt round-robin,
/// which keeps fold sizes within one patient and roughly stratifies labels.
pub fn kfold_split(patient_ids: &[String], labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k_folds must be at least 2, got {k}")));
    }
    if patient_ids.len() != labels.len() {
        return Err(Error::ShapeMismatch("patient ids and labels differ in length".into()));
    }
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in patient_ids.iter().enumerate() {
        by_patient.entry(p.as_str()).or_default().push(i);
    }
    if by_patient.len() < k {
        return Err(Error::TooFewPatients {
            needed: k,
            found: by_patient.len(),
        });
    }
    let mut groups: Vec<Vec<usize>> = by_patient.into_values().collect();
    groups.shuffle(&mut keyed_rng(seed, 0, "kfold"));
    let positive_fraction = |g: &Vec<usize>| g.iter().filter(|&&i| labels[i] == 1).count() as f64 / g.len() as f64;
    groups.sort_by(|a, b| positive_fraction(a).total_cmp(&positive_fraction(b)));
    let mut folds = vec![Vec::new(); k];
    for (j, g) in groups.into_iter().enumerate() {
        folds[j % k].extend(g);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}
