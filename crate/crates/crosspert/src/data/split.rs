//! Drug-level dataset splitting. Every row of a perturbation follows that
//! perturbation's split, so no drug is ever seen in two splits; control rows
//! are replicated into all splits as the shared reference.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ExpressionDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub train: ExpressionDataset,
    pub val: ExpressionDataset,
    pub test: ExpressionDataset,
    /// Which split each non-control perturbation landed in.
    pub drug_assignment: BTreeMap<String, SplitKind>,
}

fn materialize(ds: &ExpressionDataset, assignment: &BTreeMap<String, SplitKind>) -> SplitResult {
    let mut out = SplitResult {
        train: ExpressionDataset {
            gene_ids: ds.gene_ids.clone(),
            rows: Vec::new(),
        },
        val: ExpressionDataset {
            gene_ids: ds.gene_ids.clone(),
            rows: Vec::new(),
        },
        test: ExpressionDataset {
            gene_ids: ds.gene_ids.clone(),
            rows: Vec::new(),
        },
        drug_assignment: assignment.clone(),
    };
    for row in &ds.rows {
        if row.is_control() {
            out.train.rows.push(row.clone());
            out.val.rows.push(row.clone());
            out.test.rows.push(row.clone());
        } else {
            let split = assignment
                .get(&row.perturbation)
                .expect("every non-control label was assigned");
            match split {
                SplitKind::Train => out.train.rows.push(row.clone()),
                SplitKind::Val => out.val.rows.push(row.clone()),
                SplitKind::Test => out.test.rows.push(row.clone()),
            }
        }
    }
    out
}

/// Shuffles the perturbation labels by `seed` and assigns them to
/// train/val/test in the given proportions. Counts are rounded but every
/// split keeps at least one drug.
pub fn drug_level_split(
    ds: &ExpressionDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitResult> {
    let (rt, rv, rte) = ratios;
    for (name, r) in [("train", rt), ("val", rv), ("test", rte)] {
        if !r.is_finite() || r <= 0.0 {
            return Err(Error::Config(format!(
                "split ratio for {name} must be positive, got {r}"
            )));
        }
    }
    if ((rt + rv + rte) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            rt + rv + rte
        )));
    }
    let mut labels = ds.perturbation_labels();
    let n = labels.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "drug-level split needs at least 3 perturbations, found {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);

    let mut counts = [
        (rt * n as f64).round() as usize,
        (rv * n as f64).round() as usize,
        0,
    ];
    // Test takes the remainder; rounding can overshoot, so walk it back from
    // the largest of the first two.
    while counts[0] + counts[1] > n {
        if counts[0] >= counts[1] {
            counts[0] -= 1;
        } else {
            counts[1] -= 1;
        }
    }
    counts[2] = n - counts[0] - counts[1];
    // Every split keeps at least one drug: steal from the largest.
    loop {
        let Some(zero) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let largest = (0..3)
            .max_by_key(|&i| counts[i])
            .expect("three candidates");
        counts[zero] += 1;
        counts[largest] -= 1;
    }

    let mut assignment = BTreeMap::new();
    for (i, label) in labels.into_iter().enumerate() {
        let kind = if i < counts[0] {
            SplitKind::Train
        } else if i < counts[0] + counts[1] {
            SplitKind::Val
        } else {
            SplitKind::Test
        };
        assignment.insert(label, kind);
    }
    Ok(materialize(ds, &assignment))
}

/// Puts the named perturbations in the test split and divides the remaining
/// drugs between train and val, with `val_fraction` of them (rounded, capped
/// so train keeps at least one) going to val.
pub fn holdout_split(
    ds: &ExpressionDataset,
    test_perturbations: &[String],
    val_fraction: f64,
    seed: u64,
) -> Result<SplitResult> {
    if test_perturbations.is_empty() {
        return Err(Error::Config(
            "holdout split needs at least one test perturbation".into(),
        ));
    }
    if !val_fraction.is_finite() || !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let all = ds.perturbation_labels();
    let mut held = std::collections::BTreeSet::new();
    for name in test_perturbations {
        if name == super::CONTROL_LABEL {
            return Err(Error::Config("cannot hold out the control label".into()));
        }
        if !all.iter().any(|l| l == name) {
            return Err(Error::Config(format!(
                "held-out perturbation {name:?} does not occur in the dataset"
            )));
        }
        if !held.insert(name.clone()) {
            return Err(Error::Config(format!(
                "held-out perturbation {name:?} is listed twice"
            )));
        }
    }
    let mut remaining: Vec<String> = all.into_iter().filter(|l| !held.contains(l)).collect();
    if remaining.is_empty() {
        return Err(Error::Config(
            "holding out every perturbation leaves nothing to train on".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    remaining.shuffle(&mut rng);
    let r = remaining.len();
    let n_val = ((val_fraction * r as f64).round() as usize).min(r - 1);

    let mut assignment = BTreeMap::new();
    for label in held {
        assignment.insert(label, SplitKind::Test);
    }
    for (i, label) in remaining.into_iter().enumerate() {
        let kind = if i < n_val {
            SplitKind::Val
        } else {
            SplitKind::Train
        };
        assignment.insert(label, kind);
    }
    Ok(materialize(ds, &assignment))
}
