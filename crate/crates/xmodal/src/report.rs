//! Run and comparison reports, and their serialized forms: JSON (canonical,
//! schema-versioned), CSV curves/metrics, and markdown summary tables.
//!
//! Everything written here must be a pure function of (config, seed): field
//! order is fixed by the struct definitions, maps are ordered, and floats
//! round-trip exactly. Wall-clock time is kept out of the serialized report
//! for that reason; it is reported on stdout instead.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One step of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub total: f64,
    pub av: f64,
    pub va: f64,
    pub aav: f64,
    pub vva: f64,
}

/// Metrics computed on the held-out split at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    pub step: usize,
    pub seed: u64,
    pub cbm_eer: f64,
    pub sv_eer: f64,
    pub vv_eer: f64,
    pub recall_at_1: f64,
    pub recall_at_k: f64,
    pub recall_k: usize,
    pub probe_top1: f64,
    pub probe_topk: f64,
}

/// Everything one training run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: crate::trainer::ExperimentConfig,
    pub curves: Vec<CurvePoint>,
    pub metrics: Vec<MetricsPoint>,
    pub final_metrics: MetricsPoint,
    /// File name of the checkpoint written next to the report, if any.
    pub checkpoint: Option<String>,
    /// Not serialized: wall-clock varies run to run while reports must not.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Aggregates for one objective in a controlled comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub name: String,
    pub seeds: Vec<u64>,
    pub mean_cbm_eer: f64,
    pub mean_sv_eer: f64,
    pub mean_vv_eer: f64,
    pub mean_recall_at_1: f64,
    pub mean_recall_at_k: f64,
    pub mean_probe_top1: f64,
}

/// Mean deltas of one objective against the first (baseline) row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonDelta {
    pub name: String,
    pub baseline: String,
    pub d_cbm_eer: f64,
    pub d_sv_eer: f64,
    pub d_probe_top1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub metrics: MetricsPoint,
}

/// Per-seed and aggregate results for a list of objectives run under
/// otherwise identical configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub rows: Vec<ComparisonRow>,
    pub summaries: Vec<ComparisonSummary>,
    pub deltas: Vec<ComparisonDelta>,
}

/// Output formats for [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    MarkdownTable,
}

fn fmt_pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn write_file(path: &Path, contents: &str) -> Result<PathBuf> {
    std::fs::write(path, contents)
        .map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Loss curves as `step,loss_total,loss_AV,loss_VA,loss_AAV,loss_VVA`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("step,loss_total,loss_AV,loss_VA,loss_AAV,loss_VVA\n");
        for p in &self.curves {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.step, p.total, p.av, p.va, p.aav, p.vva
            ));
        }
        out
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(
            "step,seed,cbm_eer,sv_eer,vv_eer,recall_at_1,recall_at_k,recall_k,probe_top1,probe_topk\n",
        );
        for m in &self.metrics {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                m.step,
                m.seed,
                m.cbm_eer,
                m.sv_eer,
                m.vv_eer,
                m.recall_at_1,
                m.recall_at_k,
                m.recall_k,
                m.probe_top1,
                m.probe_topk
            ));
        }
        out
    }

    pub fn markdown_table(&self) -> String {
        let mut out = String::from("| Method | CBM EER | SV EER |\n|---|---|---|\n");
        let name = crate::trainer::loss_name(&self.config.loss);
        out.push_str(&format!(
            "| {} | {} | {} |\n",
            name,
            fmt_pct(self.final_metrics.cbm_eer),
            fmt_pct(self.final_metrics.sv_eer)
        ));
        out.push_str(&format!("\nschema: {}\n", self.schema_version));
        out
    }
}

impl ComparisonReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn csv(&self) -> String {
        let mut out =
            String::from("name,seed,cbm_eer,sv_eer,vv_eer,recall_at_1,recall_at_k,probe_top1\n");
        for row in &self.rows {
            let m = &row.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.name,
                m.seed,
                m.cbm_eer,
                m.sv_eer,
                m.vv_eer,
                m.recall_at_1,
                m.recall_at_k,
                m.probe_top1
            ));
        }
        out
    }

    /// Identity-verification shape table, then a content/retrieval table.
    pub fn markdown_table(&self) -> String {
        let mut out = String::from("| Method | CBM EER | SV EER |\n|---|---|---|\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "| {} | {} | {} |\n",
                s.name,
                fmt_pct(s.mean_cbm_eer),
                fmt_pct(s.mean_sv_eer)
            ));
        }
        out.push_str("\n| Method | R@1 | R@K | Probe top-1 |\n|---|---|---|---|\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                s.name,
                fmt_pct(s.mean_recall_at_1),
                fmt_pct(s.mean_recall_at_k),
                fmt_pct(s.mean_probe_top1)
            ));
        }
        out.push_str(&format!("\nschema: {}\n", self.schema_version));
        out
    }
}

/// Write a run report in the requested format; returns the files created.
/// JSON is canonical (stable field order, exact floats); curves go to a
/// second CSV file when CSV is requested.
pub fn emit_report(report: &RunReport, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(format!("creating {}: {e}", dir.display())))?;
    match format {
        ReportFormat::Json => Ok(vec![write_file(
            &dir.join("report.json"),
            &report.to_json()?,
        )?]),
        ReportFormat::Csv => Ok(vec![
            write_file(&dir.join("metrics.csv"), &report.metrics_csv())?,
            write_file(&dir.join("curves.csv"), &report.curves_csv())?,
        ]),
        ReportFormat::MarkdownTable => Ok(vec![write_file(
            &dir.join("report.md"),
            &report.markdown_table(),
        )?]),
    }
}

/// Write a comparison report in the requested format.
pub fn emit_comparison(
    report: &ComparisonReport,
    format: ReportFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Io(format!("creating {}: {e}", dir.display())))?;
    match format {
        ReportFormat::Json => Ok(vec![write_file(
            &dir.join("comparison.json"),
            &report.to_json()?,
        )?]),
        ReportFormat::Csv => Ok(vec![write_file(
            &dir.join("comparison.csv"),
            &report.csv(),
        )?]),
        ReportFormat::MarkdownTable => Ok(vec![write_file(
            &dir.join("comparison.md"),
            &report.markdown_table(),
        )?]),
    }
}
