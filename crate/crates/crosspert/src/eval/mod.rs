//! Accuracy metrics, differential-gene selection, and per-condition
//! evaluation of predicted expression against measured expression.

pub mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{CellRow, ExpressionDataset};
use crate::error::{Error, Result};
use crate::util::median;

fn check_lengths(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.len() != actual.len() {
        return Err(Error::Shape(format!(
            "vectors have different lengths: {} vs {}",
            pred.len(),
            actual.len()
        )));
    }
    Ok(())
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

fn require_usable(actual: &[f64], what: &str) -> Result<()> {
    if actual.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "{what} needs at least 2 values, got {}",
            actual.len()
        )));
    }
    if is_constant(actual) {
        return Err(Error::UndefinedMetric(format!(
            "{what} is undefined for a constant reference vector"
        )));
    }
    Ok(())
}

/// Coefficient of determination: 1 − Σ(a−p)² / Σ(a−ā)².
pub fn r_squared(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    require_usable(actual, "r_squared")?;
    let a_mean = mean_of(actual);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (&p, &a) in pred.iter().zip(actual) {
        ss_res += (a - p) * (a - p);
        ss_tot += (a - a_mean) * (a - a_mean);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Explained variance: 1 − Var(a−p) / Var(a), population variances. Unlike
/// r_squared it forgives a constant offset in the prediction.
pub fn explained_variance(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    require_usable(actual, "explained_variance")?;
    let n = actual.len() as f64;
    let residual: Vec<f64> = actual.iter().zip(pred).map(|(a, p)| a - p).collect();
    let var = |v: &[f64]| {
        let m = mean_of(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
    };
    Ok(1.0 - var(&residual) / var(actual))
}

/// Sample Pearson correlation. Undefined when either vector is constant.
pub fn pearson(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    require_usable(actual, "pearson")?;
    if is_constant(pred) {
        return Err(Error::UndefinedMetric(
            "pearson is undefined for a constant prediction vector".into(),
        ));
    }
    let (mp, ma) = (mean_of(pred), mean_of(actual));
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut va = 0.0;
    for (&p, &a) in pred.iter().zip(actual) {
        cov += (p - mp) * (a - ma);
        vp += (p - mp) * (p - mp);
        va += (a - ma) * (a - ma);
    }
    Ok(cov / (vp * va).sqrt())
}

/// Ranks with ties averaged: the classic "average rank" convention
/// (ranks are 1-based; a tied run spanning positions i..j all receive
/// (i+⋯+j)/(j−i+1)).
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("rank over NaN"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) hold equal values; their 1-based ranks
        // average to (i + j)/2 + 1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of average ranks.
pub fn spearman(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(pred, actual)?;
    require_usable(actual, "spearman")?;
    if is_constant(pred) {
        return Err(Error::UndefinedMetric(
            "spearman is undefined for a constant prediction vector".into(),
        ));
    }
    pearson(&average_ranks(pred), &average_ranks(actual))
}

/// The differentially expressed genes of one condition: indices into the
/// gene axis with their log2 fold changes, largest magnitude first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegSet {
    pub genes: Vec<usize>,
    pub lfc: Vec<f64>,
}

impl DegSet {
    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }
}

/// Selects genes by fold change between condition means in linear space:
/// lfc = log2((pert+ε)/(ctrl+ε)), keep |lfc| ≥ threshold, sort by |lfc|
/// descending (ties by gene index), truncate to k. Never pads: fewer
/// qualifying genes give a smaller set.
pub fn select_degs(
    ctrl_mean: &[f64],
    pert_mean: &[f64],
    k: usize,
    threshold: f64,
    epsilon: f64,
) -> Result<DegSet> {
    check_lengths(pert_mean, ctrl_mean)?;
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!(
            "DEG pseudocount must be positive and finite, got {epsilon}"
        )));
    }
    if !(threshold >= 0.0) || !threshold.is_finite() {
        return Err(Error::Config(format!(
            "DEG threshold must be non-negative and finite, got {threshold}"
        )));
    }
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (g, (&c, &p)) in ctrl_mean.iter().zip(pert_mean).enumerate() {
        if c < 0.0 || p < 0.0 {
            return Err(Error::Data(format!(
                "fold changes need non-negative expression values; gene {g} has ctrl={c}, pert={p}"
            )));
        }
        let lfc = ((p + epsilon) / (c + epsilon)).log2();
        if lfc.abs() >= threshold {
            scored.push((g, lfc));
        }
    }
    scored.sort_by(|(gi, li), (gj, lj)| {
        lj.abs()
            .partial_cmp(&li.abs())
            .expect("finite lfc")
            .then(gi.cmp(gj))
    });
    scored.truncate(k);
    Ok(DegSet {
        genes: scored.iter().map(|(g, _)| *g).collect(),
        lfc: scored.iter().map(|(_, l)| *l).collect(),
    })
}

/// Elementwise mean across a nonempty group of cells, accumulated in f64.
pub fn per_condition_mean(rows: &[&CellRow]) -> Result<Vec<f64>> {
    condition_mean(rows, false)
}

/// Mean with optional per-value expm1 applied BEFORE averaging, so values
/// stored as log1p(x) are averaged in linear space.
fn condition_mean(rows: &[&CellRow], linearize: bool) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Data("cannot average an empty group of cells".into()))?;
    let g = first.values.len();
    let mut acc = vec![0.0f64; g];
    for row in rows {
        if row.values.len() != g {
            return Err(Error::Shape(format!(
                "cell {} has {} genes, expected {g}",
                row.cell_id,
                row.values.len()
            )));
        }
        for (a, &v) in acc.iter_mut().zip(&row.values) {
            let x = f64::from(v);
            *a += if linearize { x.exp_m1() } else { x };
        }
    }
    let n = rows.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// Evaluation tunables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Maximum number of differential genes per condition.
    pub deg_k: usize,
    /// Minimum |log2 fold change| for a gene to qualify.
    pub deg_threshold: f64,
    /// Pseudocount added to both means before the ratio.
    pub deg_epsilon: f64,
    /// Treat stored values as log1p-transformed: apply expm1 before
    /// computing condition means and fold changes.
    pub linearize_log1p: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            deg_k: 50,
            deg_threshold: 1.0,
            deg_epsilon: 1e-6,
            linearize_log1p: false,
        }
    }
}

/// All metrics of one (perturbation, cell line) condition. `*_deg` fields
/// are absent when no gene passes the fold-change threshold or when the
/// metric is undefined on the selected subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub perturbation: String,
    pub cell_line: String,
    pub n_cells: usize,
    pub r2_all: f64,
    pub r2_deg: Option<f64>,
    pub ev_all: f64,
    pub ev_deg: Option<f64>,
    pub pcc_all: f64,
    pub pcc_deg: Option<f64>,
    pub spearman_all: f64,
    pub spearman_deg: Option<f64>,
    pub baseline_r2_all: f64,
    pub baseline_r2_deg: Option<f64>,
    pub deg_count: usize,
}

/// Mean and median of one metric across conditions (over the conditions
/// where the metric is present).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub median: f64,
    /// Conditions that contributed.
    pub count: usize,
}

/// Per-condition metrics plus per-metric aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub conditions: Vec<ConditionMetrics>,
    /// Keyed by metric column name; absent when no condition carried the
    /// metric.
    pub aggregates: BTreeMap<String, Aggregate>,
}

/// Metric column names in report order.
pub const METRIC_COLUMNS: [&str; 10] = [
    "r2_all",
    "r2_deg",
    "ev_all",
    "ev_deg",
    "pcc_all",
    "pcc_deg",
    "spearman_all",
    "spearman_deg",
    "baseline_r2_all",
    "baseline_r2_deg",
];

fn metric_value(c: &ConditionMetrics, column: &str) -> Option<f64> {
    match column {
        "r2_all" => Some(c.r2_all),
        "r2_deg" => c.r2_deg,
        "ev_all" => Some(c.ev_all),
        "ev_deg" => c.ev_deg,
        "pcc_all" => Some(c.pcc_all),
        "pcc_deg" => c.pcc_deg,
        "spearman_all" => Some(c.spearman_all),
        "spearman_deg" => c.spearman_deg,
        "baseline_r2_all" => Some(c.baseline_r2_all),
        "baseline_r2_deg" => c.baseline_r2_deg,
        _ => None,
    }
}

fn aggregate(conditions: &[ConditionMetrics]) -> BTreeMap<String, Aggregate> {
    let mut out = BTreeMap::new();
    for column in METRIC_COLUMNS {
        let values: Vec<f64> = conditions
            .iter()
            .filter_map(|c| metric_value(c, column))
            .collect();
        if !values.is_empty() {
            out.insert(
                column.to_string(),
                Aggregate {
                    mean: mean_of(&values),
                    median: median(&values),
                    count: values.len(),
                },
            );
        }
    }
    out
}

fn subset(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Rows of a dataset grouped by (cell_line, perturbation), in sorted order.
fn group_by_condition(ds: &ExpressionDataset) -> BTreeMap<(String, String), Vec<&CellRow>> {
    let mut m: BTreeMap<(String, String), Vec<&CellRow>> = BTreeMap::new();
    for row in &ds.rows {
        m.entry((row.cell_line.clone(), row.perturbation.clone()))
            .or_default()
            .push(row);
    }
    m
}

/// A metric on the differential subset: absent (rather than an error) when
/// the subset is degenerate, so one flat condition cannot sink a report.
fn deg_metric(
    f: impl Fn(&[f64], &[f64]) -> Result<f64>,
    pred: &[f64],
    actual: &[f64],
) -> Result<Option<f64>> {
    match f(pred, actual) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Compares predicted profiles against measured ones, condition by
/// condition. Conditions are the non-control (cell line, perturbation)
/// groups of `predictions`, in sorted order; `actual` must provide measured
/// rows for each (its per-condition mean is the target) and must contain
/// control rows for every cell line involved (their mean is both the
/// fold-change reference and the baseline prediction). Extra conditions in
/// `actual` are ignored, so a full measured dataset can serve as the
/// reference for any subset of predictions.
pub fn evaluate(
    predictions: &ExpressionDataset,
    actual: &ExpressionDataset,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if predictions.gene_ids != actual.gene_ids {
        return Err(Error::Data(
            "prediction and reference datasets have different gene headers".into(),
        ));
    }

    let actual_groups = group_by_condition(actual);
    let pred_groups = group_by_condition(predictions);

    // Control profile per cell line, from the reference dataset.
    let mut controls: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for ((line, pert), rows) in &actual_groups {
        if pert == crate::data::CONTROL_LABEL {
            controls.insert(line.clone(), condition_mean(rows, opts.linearize_log1p)?);
        }
    }

    let mut conditions = Vec::new();
    for ((line, pert), pred_rows) in &pred_groups {
        if pert == crate::data::CONTROL_LABEL {
            continue;
        }
        let ctrl = controls.get(line).ok_or_else(|| {
            Error::Data(format!(
                "no control cells for cell line {line:?} in the reference dataset"
            ))
        })?;
        let rows = actual_groups.get(&(line.clone(), pert.clone())).ok_or_else(|| {
            Error::Data(format!(
                "reference dataset has no measured cells for condition ({line:?}, {pert:?})"
            ))
        })?;
        let actual_mean = condition_mean(rows, opts.linearize_log1p)?;
        let pred_mean = condition_mean(pred_rows, opts.linearize_log1p)?;

        // Fold changes need non-negative means; measurement noise can push a
        // near-zero mean slightly below zero, so clamp for selection only.
        let clamp = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| x.max(0.0)).collect() };
        let degs = select_degs(
            &clamp(ctrl),
            &clamp(&actual_mean),
            opts.deg_k,
            opts.deg_threshold,
            opts.deg_epsilon,
        )?;

        let (pred_deg, actual_deg, ctrl_deg) = (
            subset(&pred_mean, &degs.genes),
            subset(&actual_mean, &degs.genes),
            subset(ctrl, &degs.genes),
        );

        conditions.push(ConditionMetrics {
            perturbation: pert.clone(),
            cell_line: line.clone(),
            n_cells: rows.len(),
            r2_all: r_squared(&pred_mean, &actual_mean)?,
            r2_deg: deg_metric(r_squared, &pred_deg, &actual_deg)?,
            ev_all: explained_variance(&pred_mean, &actual_mean)?,
            ev_deg: deg_metric(explained_variance, &pred_deg, &actual_deg)?,
            pcc_all: pearson(&pred_mean, &actual_mean)?,
            pcc_deg: deg_metric(pearson, &pred_deg, &actual_deg)?,
            spearman_all: spearman(&pred_mean, &actual_mean)?,
            spearman_deg: deg_metric(spearman, &pred_deg, &actual_deg)?,
            baseline_r2_all: r_squared(ctrl, &actual_mean)?,
            baseline_r2_deg: deg_metric(r_squared, &ctrl_deg, &actual_deg)?,
            deg_count: degs.len(),
        });
    }

    if conditions.is_empty() {
        return Err(Error::Data(
            "predictions contain no perturbed conditions to evaluate".into(),
        ));
    }

    let aggregates = aggregate(&conditions);
    Ok(MetricsReport {
        conditions,
        aggregates,
    })
}
