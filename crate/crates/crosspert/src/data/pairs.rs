//! Paired-sample construction: within each cell line, drugs are divided into
//! two groups, rows of each group are shuffled, and rows are zipped across
//! groups so that every pair joins two different perturbations over the same
//! basal context.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{control_profile, ExpressionDataset};
use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Two perturbed cells of one cell line plus the line's control profile.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub x_control: Vec<f32>,
    pub x_a: Vec<f32>,
    pub x_b: Vec<f32>,
    pub pert_a: String,
    pub pert_b: String,
    pub cell_line: String,
}

/// Pairing statistics for one cell line.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLinePairing {
    pub cell_line: String,
    pub group_a_rows: usize,
    pub group_b_rows: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct BuiltPairs {
    pub pairs: Vec<PairedSample>,
    /// Cell lines skipped because they carry fewer than two perturbations.
    pub skipped_cell_lines: Vec<String>,
    pub per_line: Vec<CellLinePairing>,
}

/// Builds training pairs from a split. Per sorted cell line: its drugs are
/// shuffled and divided into two near-equal groups, the rows of each group
/// are shuffled independently, and rows are zipped until the shorter group
/// runs out. Cell lines with fewer than two drugs are skipped and reported.
pub fn build_pairs(ds: &ExpressionDataset, seed: u64) -> Result<BuiltPairs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BuiltPairs::default();
    for cell_line in ds.cell_lines() {
        let mut drugs: Vec<&str> = {
            let set: std::collections::BTreeSet<&str> = ds
                .rows
                .iter()
                .filter(|r| r.cell_line == cell_line && !r.is_control())
                .map(|r| r.perturbation.as_str())
                .collect();
            set.into_iter().collect()
        };
        if drugs.len() < 2 {
            // A line of only controls is not a participant at all.
            if !drugs.is_empty() {
                out.skipped_cell_lines.push(cell_line.clone());
            }
            continue;
        }
        let control = control_profile(ds, &cell_line)?;
        drugs.shuffle(&mut rng);
        let (group_a, group_b) = drugs.split_at(drugs.len() / 2);
        let collect_rows = |group: &[&str]| -> Vec<usize> {
            ds.rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.cell_line == cell_line && group.contains(&r.perturbation.as_str()))
                .map(|(i, _)| i)
                .collect()
        };
        let mut rows_a = collect_rows(group_a);
        let mut rows_b = collect_rows(group_b);
        rows_a.shuffle(&mut rng);
        rows_b.shuffle(&mut rng);
        let n_pairs = rows_a.len().min(rows_b.len());
        for (&ia, &ib) in rows_a.iter().zip(&rows_b) {
            let (ra, rb) = (&ds.rows[ia], &ds.rows[ib]);
            out.pairs.push(PairedSample {
                x_control: control.clone(),
                x_a: ra.values.clone(),
                x_b: rb.values.clone(),
                pert_a: ra.perturbation.clone(),
                pert_b: rb.perturbation.clone(),
                cell_line: cell_line.clone(),
            });
        }
        out.per_line.push(CellLinePairing {
            cell_line,
            group_a_rows: rows_a.len(),
            group_b_rows: rows_b.len(),
            pairs: n_pairs,
        });
    }
    Ok(out)
}

/// Splits pair indices into shuffled batches for one epoch. A final batch
/// of a single pair is merged into the previous batch; a short final batch
/// of two or more is kept.
pub fn batch_pairs(
    n_pairs: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n_pairs).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch", &[epoch as u64]));
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < 2) {
        let last = batches.pop().expect("checked non-empty");
        batches.last_mut().expect("len >= 2").extend(last);
    }
    Ok(batches)
}
