//! Report emission: one JSON object per line, plus flat CSV tables.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{DenoiserMseReport, SimilarityReport};

pub fn to_json_line<T: Serialize>(record: &T) -> Result<String> {
    serde_json::to_string(record).map_err(|e| Error::Malformed(format!("report encoding: {e}")))
}

/// Appends one record to a JSON-lines file.
pub fn append_json_line<T: Serialize>(path: impl AsRef<Path>, record: &T) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", to_json_line(record)?)?;
    Ok(())
}

pub fn mse_csv(report: &DenoiserMseReport) -> String {
    let mut out = String::from("model,oracle,sigma_eval,relative_mse,absolute_mse,n_points\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            report.model_id, report.oracle_id, r.sigma_eval, r.relative_mse, r.absolute_mse, r.n_points
        ));
    }
    out
}

pub fn similarity_csv(report: &SimilarityReport) -> String {
    let mut out = String::from("model,sigma_attack,bin_lo,bin_hi,count\n");
    for (i, c) in report.counts.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            report.model_id,
            report.sigma_attack,
            report.bin_edges[i],
            report.bin_edges[i + 1],
            c
        ));
    }
    out
}
