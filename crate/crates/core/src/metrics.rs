//! Workload error: how far a synthetic table's marginals sit from the
//! real table's, averaged over the queries that matter.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::table::{DiscreteTable, MarginalQuery};
use crate::workload::Workload;

/// Per-query L1 distance between the two tables' normalized marginals.
/// Each table is normalized by its own row count, so the tables may have
/// different sizes; every term lies in [0, 2].
#[derive(Debug, Clone, Serialize)]
pub struct WorkloadErrorReport {
    pub per_query_errors: Vec<QueryError>,
    pub average_error: f64,
    pub workload_size: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryError {
    pub query: MarginalQuery,
    pub error: f64,
}

pub fn workload_error_report(
    real: &DiscreteTable,
    synth: &DiscreteTable,
    workload: &Workload,
) -> Result<WorkloadErrorReport> {
    if real.schema() != synth.schema() {
        return Err(Error::data(
            "workload error requires both tables to share a schema",
        ));
    }
    if workload.is_empty() {
        return Err(Error::config("workload is empty"));
    }
    if real.n_rows() == 0 || synth.n_rows() == 0 {
        return Err(Error::data("workload error is undefined for empty tables"));
    }
    workload.validate(real.schema())?;
    let queries: Vec<MarginalQuery> = workload.queries().cloned().collect();
    let errors = exec::map_ordered(&queries, |q| -> Result<f64> {
        let a = real.evaluate_marginal(q)?.normalized(real.n_rows() as f64);
        let b = synth.evaluate_marginal(q)?.normalized(synth.n_rows() as f64);
        a.l1_distance(&b)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let average_error = errors.iter().sum::<f64>() / errors.len() as f64;
    let per_query_errors = queries
        .into_iter()
        .zip(errors)
        .map(|(query, error)| QueryError { query, error })
        .collect();
    Ok(WorkloadErrorReport {
        per_query_errors,
        average_error,
        workload_size: workload.len(),
    })
}

/// The average alone.
pub fn workload_error(
    real: &DiscreteTable,
    synth: &DiscreteTable,
    workload: &Workload,
) -> Result<f64> {
    Ok(workload_error_report(real, synth, workload)?.average_error)
}
