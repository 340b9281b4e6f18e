use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::TrainError;

/// One (step, instance, teacher) record of scores, weight and losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub step: u64,
    pub epoch: u64,
    pub instance_id: String,
    pub teacher_id: String,
    pub s_mi: f64,
    pub s_cons: f64,
    pub s_ppl: f64,
    pub score: f64,
    pub alpha: f64,
    pub l_sft: f64,
    pub l_mcon: f64,
    pub l_total: f64,
    pub l_final: f64,
}

/// Append-only training record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLedger {
    rows: Vec<LedgerRow>,
}

impl MetricLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: LedgerRow) {
        debug_assert!(self.rows.last().is_none_or(|last| last.step <= row.step));
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<Result<Vec<LedgerRow>, _>>()?;
        Ok(Self { rows })
    }
}
