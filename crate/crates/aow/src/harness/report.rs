//! Report emission: per-stage CSVs and a human-readable summary table.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

use super::pipeline::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

/// Percentage with two decimals, `-` when absent (e.g. no attack configured).
pub fn pct(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.2}", v * 100.0),
        None => "-".to_string(),
    }
}

fn write_metrics_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let io_err = |e: csv::Error| Error::InvalidArgument(format!("{}: {e}", path.display()));
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    writer
        .write_record(["label", "k", "recall", "ndcg", "num_queries"])
        .map_err(io_err)?;
    for row in report.csv_rows() {
        writer.write_record(&row).map_err(io_err)?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

const SUMMARY_HEADER: [&str; 6] = [
    "dataset",
    "validity_R@1",
    "oracle_R@10",
    "wm_R@10",
    "distill_R@10",
    "finetune_R@10",
];

fn summary_cells(manifest: &RunManifest) -> [String; 6] {
    let s = &manifest.summary;
    [
        s.dataset.clone(),
        pct(s.validity_r1),
        pct(s.oracle_r10),
        pct(s.wm_r10),
        pct(s.distill_r10),
        pct(s.finetune_r10),
    ]
}

/// Emit a manifest's reports under `<out_dir>/reports/`. Returns the written
/// paths. CSV format writes one file per stage report plus `summary.csv`;
/// text format writes the aligned `summary.txt`.
pub fn emit_report(
    manifest: &RunManifest,
    out_dir: &Path,
    format: ReportFormat,
) -> Result<Vec<PathBuf>> {
    let reports_dir = out_dir.join("reports");
    std::fs::create_dir_all(&reports_dir)
        .map_err(|e| Error::io(reports_dir.display().to_string(), e))?;
    let mut written = Vec::new();

    match format {
        ReportFormat::Csv => {
            for report in &manifest.reports {
                let path = reports_dir.join(format!("{}.csv", report.label));
                write_metrics_csv(report, &path)?;
                written.push(path);
            }
            let path = reports_dir.join("summary.csv");
            let mut writer = csv::Writer::from_path(&path)
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
            writer
                .write_record(SUMMARY_HEADER)
                .and_then(|_| writer.write_record(summary_cells(manifest)))
                .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
            writer
                .flush()
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            written.push(path);
        }
        ReportFormat::Text => {
            let path = reports_dir.join("summary.txt");
            std::fs::write(&path, render_summary_text(manifest))
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Aligned text table: the summary row plus every per-k report.
pub fn render_summary_text(manifest: &RunManifest) -> String {
    let mut out = String::new();
    let cells = summary_cells(manifest);
    let widths: Vec<usize> = SUMMARY_HEADER
        .iter()
        .zip(&cells)
        .map(|(h, c)| h.len().max(c.len()))
        .collect();
    let line = |fields: Vec<String>| -> String {
        fields
            .iter()
            .zip(&widths)
            .map(|(f, w)| format!("{f:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    out.push_str(&line(SUMMARY_HEADER.iter().map(|s| s.to_string()).collect()));
    out.push('\n');
    out.push_str(&line(cells.to_vec()));
    out.push('\n');

    for report in &manifest.reports {
        out.push('\n');
        out.push_str(&format!(
            "{} ({} queries)\n",
            report.label, report.num_queries
        ));
        out.push_str("  k      recall    ndcg\n");
        for score in &report.per_k {
            out.push_str(&format!(
                "  {:<5}  {:>7}  {:>7}\n",
                score.k,
                pct(Some(score.recall)),
                pct(Some(score.ndcg))
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_formatting() {
        assert_eq!(pct(Some(1.0)), "100.00");
        assert_eq!(pct(Some(0.196852)), "19.69");
        assert_eq!(pct(Some(0.1121)), "11.21");
        assert_eq!(pct(None), "-");
    }
}
