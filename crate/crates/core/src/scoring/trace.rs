use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{MiTrace, ScoringError};

/// One rationale position of an exported MI trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiTraceRow {
    pub step: u64,
    pub instance_id: String,
    pub teacher_id: String,
    pub t: usize,
    pub token: String,
    pub i_proxy: f64,
    /// Empty at `t = 0`, where no gain is defined.
    pub delta_i: Option<f64>,
    pub mask: f64,
}

pub fn trace_rows(step: u64, instance_id: &str, teacher_id: &str, tokens: &[String], trace: &MiTrace) -> Vec<MiTraceRow> {
    trace
        .i_proxy
        .iter()
        .enumerate()
        .map(|(t, &i)| MiTraceRow {
            step,
            instance_id: instance_id.to_string(),
            teacher_id: teacher_id.to_string(),
            t,
            token: tokens.get(t).cloned().unwrap_or_default(),
            i_proxy: i,
            delta_i: t.checked_sub(1).map(|p| trace.delta_i[p]),
            mask: trace.mask[t],
        })
        .collect()
}

pub fn write_trace_csv<W: Write>(rows: &[MiTraceRow], out: W) -> Result<(), ScoringError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<MiTraceRow>, ScoringError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}
