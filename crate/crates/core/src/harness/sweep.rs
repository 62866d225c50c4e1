//! Parameter sweeps over a scenario template and the amortization table.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::report::RunReport;
use super::scenario::Scenario;
use super::world::{run, RunError};
use crate::types::ChainId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Operator count n.
    Operators,
    /// Intents per consensus round.
    BatchSize,
    /// Transfers per on-chain batch.
    BatchLength,
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("unknown axis {0:?}; expected operators, batch_size or batch_length")]
    UnknownAxis(String),
    #[error("run for value {value} failed: {source}")]
    Run { value: u64, source: RunError },
}

impl FromStr for Axis {
    type Err = SweepError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "operators" | "n" => Ok(Axis::Operators),
            "batch_size" => Ok(Axis::BatchSize),
            "batch_length" => Ok(Axis::BatchLength),
            _ => Err(SweepError::UnknownAxis(s.into())),
        }
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Operators => "operators",
            Axis::BatchSize => "batch_size",
            Axis::BatchLength => "batch_length",
        }
    }

    pub fn apply(self, template: &Scenario, value: u64) -> Scenario {
        let mut s = template.clone();
        match self {
            Axis::Operators => s.operators = value as usize,
            Axis::BatchSize => s.exchange.raft_batch_size = value as usize,
            Axis::BatchLength => s.exchange.max_batch = value as usize,
        }
        s.name = format!("{}/{self:?}={value}", template.name);
        s
    }
}

/// One amortization row: metered costs of the transfer calls on the target
/// chain per transferred item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmortizationRow {
    pub value: u64,
    pub threshold: usize,
    pub items: u64,
    pub batches: u64,
    pub sig_verifications: u64,
    pub storage_writes: u64,
    pub storage_deletes: u64,
}

impl AmortizationRow {
    pub fn of(value: u64, report: &RunReport) -> Self {
        let transfer = report.call_cost(ChainId::TARGET, "transfer");
        let checkpoint = report.call_cost(ChainId::SOURCE, "update_checkpoint");
        AmortizationRow {
            value,
            threshold: report.threshold,
            items: report.transfer_items,
            batches: transfer.calls,
            sig_verifications: transfer.meter.sig_verifications,
            storage_writes: transfer.meter.storage_writes,
            storage_deletes: checkpoint.meter.storage_deletes,
        }
    }

    pub fn sigs_per_item(&self) -> f64 {
        self.sig_verifications as f64 / self.items.max(1) as f64
    }

    pub fn writes_per_item(&self) -> f64 {
        self.storage_writes as f64 / self.items.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub reports: Vec<(u64, RunReport)>,
}

impl SweepResult {
    pub fn rows(&self) -> Vec<AmortizationRow> {
        self.reports.iter().map(|(v, r)| AmortizationRow::of(*v, r)).collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>12} {:>4} {:>7} {:>8} {:>10} {:>10} {:>12} {:>8} {:>6}",
            self.axis.name(),
            "m",
            "items",
            "batches",
            "sigs",
            "sigs/tx",
            "writes/tx",
            "deletes",
            "pass"
        );
        for ((_, report), row) in self.reports.iter().zip(self.rows()) {
            let _ = writeln!(
                out,
                "{:>12} {:>4} {:>7} {:>8} {:>10} {:>10.4} {:>12.4} {:>8} {:>6}",
                row.value,
                row.threshold,
                row.items,
                row.batches,
                row.sig_verifications,
                row.sigs_per_item(),
                row.writes_per_item(),
                row.storage_deletes,
                report.passed()
            );
        }
        out
    }
}

/// Runs `template` once per value. Runs are independent and execute in
/// parallel; results keep the order of `values`.
pub fn sweep(template: &Scenario, axis: Axis, values: &[u64]) -> Result<SweepResult, SweepError> {
    let reports: Result<Vec<_>, SweepError> = values
        .par_iter()
        .map(|&value| run(axis.apply(template, value)).map(|r| (value, r)).map_err(|source| SweepError::Run { value, source }))
        .collect();
    Ok(SweepResult { axis, reports: reports? })
}
