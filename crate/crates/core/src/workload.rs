//! Marginal-query workloads and their downward closure.

use std::collections::BTreeSet;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::table::MarginalQuery;

/// An unweighted set of marginal queries over one shared schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Workload {
    queries: BTreeSet<MarginalQuery>,
}

impl Workload {
    pub fn new(queries: impl IntoIterator<Item = MarginalQuery>) -> Self {
        Workload {
            queries: queries.into_iter().collect(),
        }
    }

    /// Every arity-`k` query over a `d`-column schema, C(d, k) of them.
    pub fn all_k_way(schema: &Schema, k: usize) -> Result<Self> {
        let d = schema.arity();
        if k == 0 || k > d {
            return Err(Error::config(format!(
                "k-way workload needs 1 <= k <= {d}, got {k}"
            )));
        }
        Ok(Workload::new(
            (0..d).combinations(k).map(MarginalQuery::new),
        ))
    }

    pub fn queries(&self) -> impl Iterator<Item = &MarginalQuery> {
        self.queries.iter()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn contains(&self, q: &MarginalQuery) -> bool {
        self.queries.contains(q)
    }

    pub fn max_arity(&self) -> usize {
        self.queries.iter().map(MarginalQuery::arity).max().unwrap_or(0)
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        for q in &self.queries {
            q.validate(schema)?;
            if q.is_empty() {
                return Err(Error::config("workload contains the empty query"));
            }
        }
        Ok(())
    }

    /// The union of all nonempty subqueries of every member. The empty
    /// query is excluded; it carries only the public table size.
    pub fn downward_closure(&self) -> Workload {
        let mut closed = BTreeSet::new();
        for q in &self.queries {
            closed.extend(q.subqueries());
        }
        Workload { queries: closed }
    }
}

/// Config-level description of a workload: `{"all_k_way": k}` or an
/// explicit list of column-name tuples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WorkloadSpec {
    AllKWay { all_k_way: usize },
    Explicit(Vec<Vec<String>>),
}

impl WorkloadSpec {
    pub fn resolve(&self, schema: &Schema) -> Result<Workload> {
        match self {
            WorkloadSpec::AllKWay { all_k_way } => Workload::all_k_way(schema, *all_k_way),
            WorkloadSpec::Explicit(groups) => {
                let mut queries = Vec::with_capacity(groups.len());
                for group in groups {
                    if group.is_empty() {
                        return Err(Error::config(
                            "workload contains an empty column tuple",
                        ));
                    }
                    let cols: Result<Vec<usize>> = group
                        .iter()
                        .map(|name| {
                            schema.column_index(name).ok_or_else(|| {
                                Error::config(format!("workload names unknown column `{name}`"))
                            })
                        })
                        .collect();
                    queries.push(MarginalQuery::new(cols?));
                }
                let workload = Workload::new(queries);
                workload.validate(schema)?;
                Ok(workload)
            }
        }
    }
}
