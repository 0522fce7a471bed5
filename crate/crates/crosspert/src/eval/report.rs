//! Report emission: the full metrics report as JSON, and a flat per-condition
//! CSV for spreadsheets and plotting.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{ConditionMetrics, MetricsReport, METRIC_COLUMNS};
use crate::util::atomic_write;

/// CSV header: identity columns, metric columns, then the DEG count.
fn csv_header() -> String {
    let mut cols = vec!["perturbation", "cell_line", "n_cells"];
    cols.extend(METRIC_COLUMNS);
    cols.push("deg_count");
    cols.join(",")
}

/// Minimal CSV quoting: wrap a field when it contains a comma, quote, or
/// newline, doubling embedded quotes.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') || s.contains('\r') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_float(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn csv_row(c: &ConditionMetrics) -> String {
    let mut fields = vec![
        csv_field(&c.perturbation),
        csv_field(&c.cell_line),
        c.n_cells.to_string(),
    ];
    for column in METRIC_COLUMNS {
        fields.push(csv_float(super::metric_value(c, column)));
    }
    fields.push(c.deg_count.to_string());
    fields.join(",")
}

/// One row per condition, fixed column order, absent metrics as empty cells.
pub fn render_report_csv(report: &MetricsReport) -> String {
    let mut out = csv_header();
    out.push('\n');
    for c in &report.conditions {
        out.push_str(&csv_row(c));
        out.push('\n');
    }
    out
}

/// The full report (conditions plus aggregates) as pretty JSON.
pub fn render_report_json(report: &MetricsReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("could not serialize metrics report: {e}")))
}

pub fn save_report_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    atomic_write(path, render_report_csv(report).as_bytes())
}

pub fn save_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    atomic_write(path, render_report_json(report)?.as_bytes())
}

pub fn load_report_json(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("invalid metrics report file: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Aggregate;
    use std::collections::BTreeMap;

    fn sample_report() -> MetricsReport {
        let c1 = ConditionMetrics {
            perturbation: "drugX".into(),
            cell_line: "lineA".into(),
            n_cells: 12,
            r2_all: 0.75,
            r2_deg: Some(0.5),
            ev_all: 0.8,
            ev_deg: Some(0.6),
            pcc_all: 0.9,
            pcc_deg: Some(0.7),
            spearman_all: 0.85,
            spearman_deg: Some(0.65),
            baseline_r2_all: 0.1,
            baseline_r2_deg: Some(-0.2),
            deg_count: 4,
        };
        let c2 = ConditionMetrics {
            perturbation: "a,b".into(), // comma forces quoting
            cell_line: "lineB".into(),
            n_cells: 3,
            r2_all: 0.25,
            r2_deg: None,
            ev_all: 0.3,
            ev_deg: None,
            pcc_all: 0.4,
            pcc_deg: None,
            spearman_all: 0.35,
            spearman_deg: None,
            baseline_r2_all: 0.0,
            baseline_r2_deg: None,
            deg_count: 0,
        };
        let mut aggregates = BTreeMap::new();
        aggregates.insert(
            "r2_all".to_string(),
            Aggregate {
                mean: 0.5,
                median: 0.5,
                count: 2,
            },
        );
        MetricsReport {
            conditions: vec![c1, c2],
            aggregates,
        }
    }

    #[test]
    fn csv_has_fixed_columns_and_empty_cells_for_absent_metrics() {
        let csv = render_report_csv(&sample_report());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "perturbation,cell_line,n_cells,r2_all,r2_deg,ev_all,ev_deg,pcc_all,pcc_deg,\
             spearman_all,spearman_deg,baseline_r2_all,baseline_r2_deg,deg_count"
        );
        assert_eq!(
            lines[1],
            "drugX,lineA,12,0.75,0.5,0.8,0.6,0.9,0.7,0.85,0.65,0.1,-0.2,4"
        );
        // Absent DEG metrics render as empty cells; the comma in the name is
        // quoted so the column count stays fixed.
        assert_eq!(lines[2], "\"a,b\",lineB,3,0.25,,0.3,,0.4,,0.35,,0,,0");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let report = sample_report();
        save_report_json(&report, &path).unwrap();
        let loaded = load_report_json(&path).unwrap();
        assert_eq!(report, loaded);
    }
}
