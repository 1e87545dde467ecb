//! Store of noisy marginal estimates with closure and weighted averaging.
//!
//! Recording a noisy marginal also derives every nonempty strict subquery by
//! summation, at no extra privacy cost. Repeated estimates of the same query
//! combine by inverse-sigma weighted average, so later, less noisy rounds
//! dominate earlier ones.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::table::{MarginalQuery, MarginalVector, Space};
use crate::workload::Workload;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub query: MarginalQuery,
    /// Counts-space estimate, weighted-averaged over all contributions.
    pub estimate: MarginalVector,
    /// Accumulated Σ 1/σ over contributions.
    pub weight: f64,
    /// True when the query itself was measured, not only derived.
    pub directly_measured: bool,
}

/// Serialized as a flat measurement list: JSON objects cannot key on a
/// column tuple, and the directly-measured set is derivable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "StoreFile", try_from = "StoreFile")]
pub struct MeasurementStore {
    by_query: BTreeMap<MarginalQuery, Measurement>,
    measured: BTreeSet<MarginalQuery>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreFile {
    measurements: Vec<Measurement>,
}

impl From<MeasurementStore> for StoreFile {
    fn from(store: MeasurementStore) -> StoreFile {
        StoreFile {
            measurements: store.by_query.into_values().collect(),
        }
    }
}

impl TryFrom<StoreFile> for MeasurementStore {
    type Error = Error;

    fn try_from(file: StoreFile) -> Result<MeasurementStore> {
        let mut store = MeasurementStore::new();
        for m in file.measurements {
            if m.estimate.query != m.query {
                return Err(Error::data(format!(
                    "measurement of {} carries an estimate of {}",
                    m.query, m.estimate.query
                )));
            }
            if m.directly_measured {
                store.measured.insert(m.query.clone());
            }
            if store.by_query.insert(m.query.clone(), m).is_some() {
                return Err(Error::data("duplicate measurement entry".to_string()));
            }
        }
        Ok(store)
    }
}

impl MeasurementStore {
    pub fn new() -> Self {
        MeasurementStore::default()
    }

    pub fn len(&self) -> usize {
        self.by_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_query.is_empty()
    }

    pub fn get(&self, query: &MarginalQuery) -> Option<&Measurement> {
        self.by_query.get(query)
    }

    pub fn measurements(&self) -> impl Iterator<Item = &Measurement> {
        self.by_query.values()
    }

    pub fn is_directly_measured(&self, query: &MarginalQuery) -> bool {
        self.measured.contains(query)
    }

    /// Stores a noisy counts-space estimate and closes it downward: the
    /// query and every nonempty strict subquery receive the marginalized
    /// values at weight 1/sigma, averaged into any existing entry.
    pub fn record(
        &mut self,
        noisy: &MarginalVector,
        sigma: f64,
        schema: &Schema,
    ) -> Result<()> {
        if noisy.space != Space::Counts {
            return Err(Error::config(
                "measurements are recorded in counts space",
            ));
        }
        if noisy.query.is_empty() {
            return Err(Error::config("cannot record the empty query"));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {sigma}")));
        }
        let weight = 1.0 / sigma;
        for sub in noisy.query.subqueries() {
            let derived = noisy.marginalize(&sub, schema)?;
            self.merge(derived, weight);
        }
        self.measured.insert(noisy.query.clone());
        if let Some(m) = self.by_query.get_mut(&noisy.query) {
            m.directly_measured = true;
        }
        Ok(())
    }

    /// Stores a noisy estimate without deriving subqueries: only the query
    /// itself is merged and marked measured. The ablation path uses this in
    /// place of [`MeasurementStore::record`].
    pub fn record_direct(&mut self, noisy: &MarginalVector, sigma: f64) -> Result<()> {
        if noisy.space != Space::Counts {
            return Err(Error::config(
                "measurements are recorded in counts space",
            ));
        }
        if noisy.query.is_empty() {
            return Err(Error::config("cannot record the empty query"));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {sigma}")));
        }
        self.measured.insert(noisy.query.clone());
        self.merge(noisy.clone(), 1.0 / sigma);
        if let Some(m) = self.by_query.get_mut(&noisy.query) {
            m.directly_measured = true;
        }
        Ok(())
    }

    fn merge(&mut self, estimate: MarginalVector, weight: f64) {
        match self.by_query.get_mut(&estimate.query) {
            Some(existing) => {
                let total = existing.weight + weight;
                for (old, new) in existing
                    .estimate
                    .values
                    .iter_mut()
                    .zip(&estimate.values)
                {
                    *old = (existing.weight * *old + weight * new) / total;
                }
                existing.weight = total;
            }
            None => {
                let directly = self.measured.contains(&estimate.query);
                self.by_query.insert(
                    estimate.query.clone(),
                    Measurement {
                        query: estimate.query.clone(),
                        estimate,
                        weight,
                        directly_measured: directly,
                    },
                );
            }
        }
    }

    /// The closure minus directly measured queries. Queries known only
    /// through derivation stay selectable: a direct measurement of them
    /// would still be less noisy.
    pub fn candidates(&self, closure: &Workload) -> Workload {
        Workload::new(
            closure
                .queries()
                .filter(|q| !self.measured.contains(q))
                .cloned(),
        )
    }
}
