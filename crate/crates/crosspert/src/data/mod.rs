//! Dataset ingestion and the row-level operations the pipeline needs:
//! TSV load/save, dose slicing, log1p transformation, and per-cell-line
//! control profiles.
//!
//! The on-disk format is UTF-8, tab-separated, LF line endings:
//! `cell_id\tcell_line\tperturbation\tdose\t<gene_1>...\t<gene_G>`, one row
//! per cell. `perturbation` is `control` for unperturbed rows; dual
//! perturbations are written `NAME1+NAME2` with the names sorted.

pub mod pairs;
pub mod split;

pub use pairs::{batch_pairs, build_pairs, BuiltPairs, CellLinePairing, PairedSample};
pub use split::{drug_level_split, holdout_split, SplitKind, SplitResult};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// The label marking unperturbed rows.
pub const CONTROL_LABEL: &str = "control";

/// One cell's measurement: identity, context, treatment, and expression.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub cell_id: String,
    pub cell_line: String,
    pub perturbation: String,
    pub dose: f32,
    pub values: Vec<f32>,
}

impl CellRow {
    pub fn is_control(&self) -> bool {
        self.perturbation == CONTROL_LABEL
    }
}

/// A gene-expression matrix with per-row metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExpressionDataset {
    pub gene_ids: Vec<String>,
    pub rows: Vec<CellRow>,
}

impl ExpressionDataset {
    pub fn gene_dim(&self) -> usize {
        self.gene_ids.len()
    }

    /// Sorted non-control perturbation labels present in the dataset.
    pub fn perturbation_labels(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .rows
            .iter()
            .filter(|r| !r.is_control())
            .map(|r| r.perturbation.as_str())
            .collect();
        set.into_iter().map(String::from).collect()
    }

    /// Sorted cell lines present in the dataset.
    pub fn cell_lines(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.cell_line.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

const META_COLUMNS: [&str; 4] = ["cell_id", "cell_line", "perturbation", "dose"];

/// Validates a perturbation label: nonempty; dual labels (`A+B`) must have
/// nonempty, distinct, lexicographically sorted parts and must not embed the
/// control label.
fn validate_perturbation(label: &str, line: usize) -> Result<()> {
    if label.is_empty() {
        return Err(Error::Parse {
            line,
            message: "empty perturbation label".into(),
        });
    }
    if label == CONTROL_LABEL {
        return Ok(());
    }
    if label.contains('+') {
        let parts: Vec<&str> = label.split('+').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Parse {
                line,
                message: format!("dual perturbation {label:?} has an empty component"),
            });
        }
        if parts.iter().any(|&p| p == CONTROL_LABEL) {
            return Err(Error::Parse {
                line,
                message: format!("dual perturbation {label:?} embeds the control label"),
            });
        }
        for w in parts.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "dual perturbation {label:?} components must be sorted and distinct"
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Parses the TSV dataset format.
pub fn parse_dataset(text: &str) -> Result<ExpressionDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file, expected a header line".into(),
    })?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < META_COLUMNS.len() + 1 {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header needs the {} metadata columns plus at least one gene",
                META_COLUMNS.len()
            ),
        });
    }
    for (want, got) in META_COLUMNS.iter().zip(&cols) {
        if want != got {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header column {want:?}, found {got:?}"),
            });
        }
    }
    let gene_ids: Vec<String> = cols[META_COLUMNS.len()..]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut seen = BTreeSet::new();
    for g in &gene_ids {
        if g.is_empty() {
            return Err(Error::Data("empty gene id in header".into()));
        }
        if !seen.insert(g.as_str()) {
            return Err(Error::Data(format!("duplicate gene id {g:?} in header")));
        }
    }
    let g = gene_ids.len();

    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1; // 1-based, counting the header as line 1
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != META_COLUMNS.len() + g {
            return Err(Error::Parse {
                line,
                message: format!(
                    "expected {} fields, found {}",
                    META_COLUMNS.len() + g,
                    fields.len()
                ),
            });
        }
        let (cell_id, cell_line, perturbation) = (fields[0], fields[1], fields[2]);
        if cell_id.is_empty() || cell_line.is_empty() {
            return Err(Error::Parse {
                line,
                message: "cell_id and cell_line must be nonempty".into(),
            });
        }
        validate_perturbation(perturbation, line)?;
        let dose: f32 = fields[3].parse().map_err(|_| Error::Parse {
            line,
            message: format!("dose {:?} is not a number", fields[3]),
        })?;
        if !dose.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("dose {dose} is not finite"),
            });
        }
        let mut values = Vec::with_capacity(g);
        for (ci, f) in fields[META_COLUMNS.len()..].iter().enumerate() {
            let v: f32 = f.parse().map_err(|_| Error::Parse {
                line,
                message: format!("value {f:?} in column {} is not a number", gene_ids[ci]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("value {v} in column {} is not finite", gene_ids[ci]),
                });
            }
            values.push(v);
        }
        rows.push(CellRow {
            cell_id: cell_id.to_string(),
            cell_line: cell_line.to_string(),
            perturbation: perturbation.to_string(),
            dose,
            values,
        });
    }
    Ok(ExpressionDataset { gene_ids, rows })
}

pub fn load_dataset(path: &Path) -> Result<ExpressionDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Renders the dataset in the TSV format. Float formatting uses the shortest
/// representation that parses back to the same bits, so save → load is exact.
pub fn render_dataset(ds: &ExpressionDataset) -> Result<String> {
    for g in &ds.gene_ids {
        if g.contains('\t') || g.contains('\n') {
            return Err(Error::Data(format!("gene id {g:?} contains a separator")));
        }
    }
    let mut out = String::new();
    out.push_str(&META_COLUMNS.join("\t"));
    for g in &ds.gene_ids {
        out.push('\t');
        out.push_str(g);
    }
    out.push('\n');
    for (i, row) in ds.rows.iter().enumerate() {
        for field in [&row.cell_id, &row.cell_line, &row.perturbation] {
            if field.contains('\t') || field.contains('\n') {
                return Err(Error::Data(format!(
                    "row {i}: field {field:?} contains a separator"
                )));
            }
        }
        if row.values.len() != ds.gene_dim() {
            return Err(Error::Data(format!(
                "row {i} has {} values but the dataset has {} genes",
                row.values.len(),
                ds.gene_dim()
            )));
        }
        write!(out, "{}\t{}\t{}\t{}", row.cell_id, row.cell_line, row.perturbation, row.dose)
            .expect("string write");
        for v in &row.values {
            write!(out, "\t{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(ds: &ExpressionDataset, path: &Path) -> Result<()> {
    let text = render_dataset(ds)?;
    crate::util::atomic_write(path, text.as_bytes())
}

/// Keeps rows measured at `dose` plus every control row (controls are the
/// shared reference and pass any dose filter).
pub fn filter_dose(ds: &ExpressionDataset, dose: f32) -> ExpressionDataset {
    ExpressionDataset {
        gene_ids: ds.gene_ids.clone(),
        rows: ds
            .rows
            .iter()
            .filter(|r| r.is_control() || r.dose == dose)
            .cloned()
            .collect(),
    }
}

/// Applies ln(1+x) to every value. Values at or below −1 have no finite
/// image and are rejected.
pub fn apply_log1p(ds: &ExpressionDataset) -> Result<ExpressionDataset> {
    let mut out = ds.clone();
    for row in &mut out.rows {
        for v in &mut row.values {
            if *v <= -1.0 {
                return Err(Error::Data(format!(
                    "cannot apply log1p to value {v} in cell {}",
                    row.cell_id
                )));
            }
            *v = v.ln_1p();
        }
    }
    Ok(out)
}

/// Elementwise mean of all control rows of `cell_line`, in f64.
pub fn control_profile(ds: &ExpressionDataset, cell_line: &str) -> Result<Vec<f32>> {
    let g = ds.gene_dim();
    let mut acc = vec![0.0f64; g];
    let mut n = 0usize;
    for row in ds.rows.iter().filter(|r| r.is_control() && r.cell_line == cell_line) {
        for (a, &v) in acc.iter_mut().zip(&row.values) {
            *a += f64::from(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data(format!(
            "no control rows for cell line {cell_line:?}"
        )));
    }
    Ok(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tsv(body: &str) -> String {
        format!("cell_id\tcell_line\tperturbation\tdose\tg1\tg2\n{body}")
    }

    #[test]
    fn parses_a_small_dataset() {
        let text = tsv("c1\tlineA\tcontrol\t0\t1.5\t2\nc2\tlineA\tdrugX\t10\t3\t4e-1\nc3\tlineB\tp1+p2\t1\t0\t-0.5\n");
        let ds = parse_dataset(&text).unwrap();
        assert_eq!(ds.gene_dim(), 2);
        assert_eq!(ds.rows.len(), 3);
        assert_eq!(ds.rows[0].values, vec![1.5, 2.0]);
        assert!(ds.rows[0].is_control());
        assert_eq!(ds.rows[1].dose, 10.0);
        assert_eq!(ds.rows[2].perturbation, "p1+p2");
        assert_eq!(ds.perturbation_labels(), vec!["drugX", "p1+p2"]);
        assert_eq!(ds.cell_lines(), vec!["lineA", "lineB"]);
    }

    #[test]
    fn ragged_row_is_a_parse_error_naming_the_line() {
        let text = tsv("c1\tlineA\tcontrol\t0\t1.5\n");
        let err = parse_dataset(&text).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn non_numeric_value_is_a_parse_error() {
        let text = tsv("c1\tlineA\tcontrol\t0\t1.5\tabc\n");
        let err = parse_dataset(&text).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let text = tsv("c1\tlineA\tcontrol\t0\t1.5\tNaN\n");
        let err = parse_dataset(&text).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_gene_id_is_rejected() {
        let text = "cell_id\tcell_line\tperturbation\tdose\tg1\tg1\n";
        let err = parse_dataset(text).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn wrong_header_is_rejected() {
        let text = "id\tcell_line\tperturbation\tdose\tg1\n";
        assert!(parse_dataset(text).is_err());
    }

    #[test]
    fn malformed_dual_labels_are_rejected() {
        for label in ["b+a", "a+a", "a+", "+a", "control+x", "a+control"] {
            let text = tsv(&format!("c1\tlineA\t{label}\t1\t1\t2\n"));
            let err = parse_dataset(&text).unwrap_err();
            assert!(
                matches!(err, Error::Parse { line: 2, .. }),
                "label {label}: {err}"
            );
        }
        // Sorted distinct parts are fine, including more than two.
        let text = tsv("c1\tlineA\ta+b+c\t1\t1\t2\n");
        assert!(parse_dataset(&text).is_ok());
    }

    #[test]
    fn round_trip_preserves_everything() {
        let text = tsv("c1\tlineA\tcontrol\t0\t1.5\t2\nc2\tlineA\tdrugX\t10\t0.30000001\t-4.7e-12\n");
        let ds = parse_dataset(&text).unwrap();
        let rendered = render_dataset(&ds).unwrap();
        let ds2 = parse_dataset(&rendered).unwrap();
        assert_eq!(ds, ds2);
        // And rendering is a fixed point after one round.
        assert_eq!(render_dataset(&ds2).unwrap(), rendered);
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.tsv");
        let ds = parse_dataset(&tsv("c1\tlineA\tcontrol\t0\t1\t2\n")).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds, loaded);
        let err = load_dataset(&dir.path().join("missing.tsv")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn dose_filter_keeps_controls() {
        let text = tsv(
            "c1\tlineA\tcontrol\t0\t1\t2\nc2\tlineA\tdrugX\t10\t3\t4\nc3\tlineA\tdrugX\t1\t5\t6\n",
        );
        let ds = parse_dataset(&text).unwrap();
        let f = filter_dose(&ds, 10.0);
        assert_eq!(f.rows.len(), 2);
        assert!(f.rows.iter().any(|r| r.is_control()));
        assert!(f.rows.iter().any(|r| r.dose == 10.0 && !r.is_control()));
    }

    #[test]
    fn log1p_transforms_and_guards() {
        let ds = parse_dataset(&tsv("c1\tlineA\tcontrol\t0\t0\t1\n")).unwrap();
        let t = apply_log1p(&ds).unwrap();
        assert_eq!(t.rows[0].values[0], 0.0);
        assert!((t.rows[0].values[1] - 2f32.ln()).abs() < 1e-7);
        let bad = parse_dataset(&tsv("c1\tlineA\tcontrol\t0\t-1\t1\n")).unwrap();
        assert!(apply_log1p(&bad).is_err());
    }

    #[test]
    fn control_profile_is_the_mean_of_controls() {
        let text = tsv(
            "c1\tlineA\tcontrol\t0\t1\t2\nc2\tlineA\tcontrol\t0\t3\t4\nc3\tlineA\tdrugX\t1\t9\t9\n",
        );
        let ds = parse_dataset(&text).unwrap();
        assert_eq!(control_profile(&ds, "lineA").unwrap(), vec![2.0, 3.0]);
        assert!(control_profile(&ds, "lineB").is_err());
    }

    #[test]
    fn single_control_row_is_its_own_profile() {
        let ds = parse_dataset(&tsv("c1\tlineA\tcontrol\t0\t1.25\t-0.5\n")).unwrap();
        assert_eq!(control_profile(&ds, "lineA").unwrap(), vec![1.25, -0.5]);
    }
}
