//! Differentially private synthetic tabular data.
//!
//! The library discretizes a table, then fits a compact neural generator so
//! that its soft marginals match noisy measurements of the real table's
//! marginals, spending a zero-concentrated differential privacy budget
//! across adaptively selected measurement rounds. Sampling the fitted
//! generator yields a synthetic table; the workload error metric scores how
//! close its marginals land.
//!
//! Entry points: [`ingest::load_table`] to read a CSV, [`engine::fit_adaptive`]
//! or [`engine::fit_baseline`] to fit, [`GeneratorModel::sample`] to draw
//! synthetic rows, and [`metrics::workload_error_report`] to evaluate.

pub mod dp;
pub mod engine;
pub mod error;
mod exec;
pub mod generator;
pub mod ingest;
pub mod metrics;
pub mod schema;
pub mod sim;
pub mod store;
pub mod table;
pub mod workload;

pub use dp::PrivacyAccountant;
pub use engine::{fit_adaptive, fit_baseline, EngineConfig, FitResult, Fitter, Mode, RoundLog};
pub use error::{Error, Result};
pub use generator::{GeneratorModel, TrainConfig};
pub use metrics::{workload_error, workload_error_report, WorkloadErrorReport};
pub use schema::{Column, ColumnKind, PreprocSpec, Schema};
pub use store::MeasurementStore;
pub use table::{DiscreteTable, MarginalQuery, MarginalVector, Space};
pub use workload::{Workload, WorkloadSpec};

pub use exec::{parallel_enabled, set_parallel, set_thread_count};

use std::path::Path;

/// Writes via a sibling temp file and rename, so a crash mid-write never
/// leaves a truncated file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("not a writable path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => std::path::PathBuf::from(&tmp_name),
    };
    std::fs::write(&tmp, bytes)?;
    match std::fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e.into())
        }
    }
}
