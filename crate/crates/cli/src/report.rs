use std::fmt::Write;

use ssd_core::eval::{ConsensusReport, EvalReport, FidelityReport};

/// Left-aligned columns separated by two spaces; no trailing whitespace.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let head: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    for row in std::iter::once(&head).chain(rows) {
        let mut line = String::new();
        for (i, (cell, w)) in row.iter().zip(&widths).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let _ = write!(line, "{cell:<w$}");
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

pub fn metric_reports(title: &str, reports: &[EvalReport]) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.score.clone(),
                r.metric.name().to_string(),
                f4(r.point),
                f4(r.boot_mean),
                f4(r.boot_std),
                format!("[{}, {}]", f4(r.ci_low), f4(r.ci_high)),
                r.n.to_string(),
                format!("{}/{}", r.skipped, r.resamples),
            ]
        })
        .collect();
    let mut out = format!("{title}\n");
    out.push_str(&table(&["score", "metric", "point", "boot_mean", "boot_std", "95%_interval", "n", "skipped"], &rows));
    out
}

pub fn fidelity(report: &FidelityReport) -> String {
    let truth = report.rho_truth.map_or_else(|| "-".to_string(), f4);
    let mut out = String::from("distillation fidelity (spearman)\n");
    out.push_str(&table(
        &["n", "rho_vs_dispersion", "rho_vs_truth"],
        &[vec![report.n.to_string(), f4(report.rho_dispersion), truth]],
    ));
    out
}

pub fn consensus(report: &ConsensusReport) -> String {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.subset.clone(),
                r.n.to_string(),
                format!("{} ({:.2}%)", f4(r.default_msd), r.default_rel_std_pct),
                format!("{} ({:.2}%)", f4(r.ssd_msd), r.ssd_rel_std_pct),
                format!("{:.2}%", r.improvement_pct),
                f4(r.win_rate),
            ]
        })
        .collect();
    let mut out = String::from("semantic consensus (MSD to sample centroid, bootstrap std as % of mean)\n");
    out.push_str(&table(&["subset", "n", "default_msd", "ssd_msd", "improvement", "win_rate"], &rows));
    out
}
