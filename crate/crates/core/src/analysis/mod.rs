//! Post-hoc diagnostics: latent shift under PCA, MI trajectories and
//! teacher-weight trajectories.

mod pca;
pub mod svg;

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::model::{ModelError, StudentModel};
use crate::scoring::{score_instance_with_traces, trace_rows, write_trace_csv, MiTraceRow, PreparedInstance, ScoringError, WeightingConfig};
use crate::trainer::MetricLedger;

pub use pca::{
    final_token_activations, pca_basis, pca_from_activations, pca_shift, pca_shift_sweep, shift_from_activations, top_eigenpairs,
    PcaBasis, ShiftReport, ShiftSpace, POWER_ITERATIONS, POWER_TOLERANCE,
};
use svg::{LineChart, Series};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least 3 probe sequences, got {0}")]
    TooFewProbes(usize),
    #[error("layer {layer} out of range for {n_layers} layers")]
    Layer { layer: usize, n_layers: usize },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("empty ledger")]
    EmptyLedger,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Files written by an export, keyed by the shared basename.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportPaths {
    pub csv: PathBuf,
    pub svg: Option<PathBuf>,
}

/// Trace rows for every teacher of one instance, from fresh scoring.
pub fn mi_trace_rows(
    model: &StudentModel,
    instances: &[PreparedInstance],
    instance_id: &str,
    vocab: &Vocabulary,
    weighting: &WeightingConfig,
    step: u64,
) -> Result<Vec<MiTraceRow>, AnalysisError> {
    let prepared = instances
        .iter()
        .find(|p| p.instance_id == instance_id)
        .ok_or_else(|| AnalysisError::UnknownInstance(instance_id.to_string()))?;
    let (_, traces) = score_instance_with_traces(model, prepared, weighting)?;
    let mut rows = Vec::new();
    for (branch, trace) in prepared.branches.iter().zip(&traces) {
        let tokens: Vec<String> = branch.rationale().iter().map(|&id| vocab.token(id).unwrap_or("?").to_string()).collect();
        rows.extend(trace_rows(step, instance_id, &branch.teacher_id, &tokens, trace));
    }
    Ok(rows)
}

/// Positions with a positive gain at a full-weight mask, per teacher in first-seen order.
pub fn trace_peaks(rows: &[MiTraceRow]) -> IndexMap<String, Vec<usize>> {
    let mut out: IndexMap<String, Vec<usize>> = IndexMap::new();
    for r in rows {
        let peaks = out.entry(r.teacher_id.clone()).or_default();
        if r.mask == 1.0 && r.delta_i.is_some_and(|d| d > 0.0) {
            peaks.push(r.t);
        }
    }
    out
}

pub fn mi_trace_chart(rows: &[MiTraceRow]) -> LineChart {
    let peaks = trace_peaks(rows);
    let series = peaks
        .iter()
        .map(|(teacher, at)| {
            let mine: Vec<&MiTraceRow> = rows.iter().filter(|r| &r.teacher_id == teacher).collect();
            Series {
                name: teacher.clone(),
                points: mine.iter().map(|r| (r.t as f64, r.i_proxy)).collect(),
                markers: at.iter().filter_map(|&t| mine.iter().position(|r| r.t == t)).collect(),
            }
        })
        .collect();
    let instance = rows.first().map(|r| r.instance_id.as_str()).unwrap_or("");
    LineChart { title: format!("I_proxy along rationales, {instance}"), x_label: "t".into(), y_label: "I_proxy".into(), series }
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut p = base.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

/// Writes `<base>.csv` and, when requested, `<base>.svg` with annotated peaks.
pub fn mi_trajectory_export(rows: &[MiTraceRow], base: &Path, chart: bool) -> Result<ExportPaths, AnalysisError> {
    let csv = with_ext(base, "csv");
    write_trace_csv(rows, BufWriter::new(File::create(&csv)?))?;
    let svg = if chart {
        let path = with_ext(base, "svg");
        std::fs::write(&path, mi_trace_chart(rows).render())?;
        Some(path)
    } else {
        None
    };
    Ok(ExportPaths { csv, svg })
}

/// Mean α per (epoch, teacher).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub teachers: Vec<String>,
    pub epochs: Vec<u64>,
    /// `means[e][k]` for `epochs[e]` and `teachers[k]`.
    pub means: Vec<Vec<f64>>,
}

impl WeightTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string()];
        header.extend(self.teachers.iter().cloned());
        w.write_record(&header)?;
        for (e, row) in self.epochs.iter().zip(&self.means) {
            let mut rec = vec![e.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, AnalysisError> {
        let mut r = csv::Reader::from_reader(input);
        let teachers = r.headers()?.iter().skip(1).map(str::to_string).collect();
        let (mut epochs, mut means) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| AnalysisError::ConfigMismatch(format!("bad cell {s:?}: {e}")));
            epochs.push(parse(&rec[0])? as u64);
            means.push(rec.iter().skip(1).map(parse).collect::<Result<Vec<_>, _>>()?);
        }
        Ok(Self { teachers, epochs, means })
    }

    pub fn chart(&self) -> LineChart {
        let series = self
            .teachers
            .iter()
            .enumerate()
            .map(|(k, t)| Series {
                name: t.clone(),
                points: self.epochs.iter().zip(&self.means).map(|(&e, row)| (e as f64, row[k])).collect(),
                markers: Vec::new(),
            })
            .collect();
        LineChart { title: "Mean teacher weight per epoch".into(), x_label: "epoch".into(), y_label: "mean alpha".into(), series }
    }

    /// Writes `<base>.csv` and `<base>.svg`.
    pub fn export(&self, base: &Path) -> Result<ExportPaths, AnalysisError> {
        let csv = with_ext(base, "csv");
        self.write_csv(BufWriter::new(File::create(&csv)?))?;
        let svg = with_ext(base, "svg");
        std::fs::write(&svg, self.chart().render())?;
        Ok(ExportPaths { csv, svg: Some(svg) })
    }
}

pub fn weight_trajectory_summary(ledger: &MetricLedger) -> Result<WeightTable, AnalysisError> {
    if ledger.is_empty() {
        return Err(AnalysisError::EmptyLedger);
    }
    let mut teachers: IndexMap<&str, ()> = IndexMap::new();
    let mut cells: IndexMap<u64, IndexMap<&str, (f64, usize)>> = IndexMap::new();
    for r in ledger.rows() {
        teachers.insert(&r.teacher_id, ());
        let c = cells.entry(r.epoch).or_default().entry(&r.teacher_id).or_insert((0.0, 0));
        c.0 += r.alpha;
        c.1 += 1;
    }
    cells.sort_keys();
    let means = cells
        .values()
        .map(|row| teachers.keys().map(|t| row.get(t).map_or(0.0, |&(s, n)| s / n as f64)).collect())
        .collect();
    Ok(WeightTable { teachers: teachers.keys().map(|t| t.to_string()).collect(), epochs: cells.keys().copied().collect(), means })
}
