//! Discretized tables and marginal queries.
//!
//! A [`DiscreteTable`] stores encoded rows column-major. A [`MarginalQuery`]
//! names a sorted set of columns; evaluating it yields a [`MarginalVector`]
//! of cell counts in row-major order over the projected domain (last queried
//! column varies fastest).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::schema::Schema;

/// Bin index for a value under uniform discretization, clamped to the domain.
///
/// bin = floor((v - min) / w) with w = (max - min) / bins; v <= min gives 0
/// and v >= max gives bins - 1, so out-of-range values never escape.
pub fn discretize_numeric(v: f64, min: f64, max: f64, bins: usize) -> usize {
    debug_assert!(bins >= 1);
    if !(max > min) || v <= min {
        return 0;
    }
    if v >= max {
        return bins - 1;
    }
    let width = (max - min) / bins as f64;
    let bin = ((v - min) / width).floor() as usize;
    bin.min(bins - 1)
}

/// Encoded table: `columns[j][i]` is row `i`'s category index in column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTable {
    schema: Schema,
    columns: Vec<Vec<u32>>,
    n_rows: usize,
}

impl DiscreteTable {
    pub fn new(schema: Schema, columns: Vec<Vec<u32>>) -> Result<Self> {
        if columns.len() != schema.arity() {
            return Err(Error::data(format!(
                "expected {} columns, got {}",
                schema.arity(),
                columns.len()
            )));
        }
        let n_rows = columns.first().map_or(0, Vec::len);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n_rows {
                return Err(Error::data(format!(
                    "column {j} has {} rows, expected {n_rows}",
                    col.len()
                )));
            }
            let k = schema.cardinality(j) as u32;
            if let Some(&bad) = col.iter().find(|&&v| v >= k) {
                return Err(Error::data(format!(
                    "column {j} holds value {bad} outside domain of size {k}"
                )));
            }
        }
        Ok(DiscreteTable {
            schema,
            columns,
            n_rows,
        })
    }

    /// Builds from row-major encoded records.
    pub fn from_rows(schema: Schema, rows: &[Vec<u32>]) -> Result<Self> {
        let arity = schema.arity();
        let mut columns = vec![Vec::with_capacity(rows.len()); arity];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != arity {
                return Err(Error::data(format!(
                    "row {i} has {} fields, expected {arity}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                columns[j].push(v);
            }
        }
        Ok(DiscreteTable::new(schema, columns)?)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn column(&self, j: usize) -> &[u32] {
        &self.columns[j]
    }

    pub fn row(&self, i: usize) -> Vec<u32> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// Exact counts for a marginal query, in counts space.
    pub fn evaluate_marginal(&self, query: &MarginalQuery) -> Result<MarginalVector> {
        let size = query.domain_size(&self.schema)?;
        if query.columns().is_empty() {
            return Ok(MarginalVector::new(
                query.clone(),
                vec![self.n_rows as f64],
                Space::Counts,
            ));
        }
        let strides = query.strides(&self.schema)?;
        let cols: Vec<&[u32]> = query
            .columns()
            .iter()
            .map(|&j| self.columns[j].as_slice())
            .collect();
        let counts = exec::chunked_counts(self.n_rows, size, |range, acc| {
            for i in range {
                let mut cell = 0usize;
                for (col, &stride) in cols.iter().zip(&strides) {
                    cell += col[i] as usize * stride;
                }
                acc[cell] += 1;
            }
        });
        let values = counts.into_iter().map(|c| c as f64).collect();
        Ok(MarginalVector::new(query.clone(), values, Space::Counts))
    }
}

/// A marginal query: a duplicate-free ascending set of column indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MarginalQuery {
    columns: Vec<usize>,
}

impl MarginalQuery {
    /// Sorts and dedups, so `[2, 0, 2]` and `[0, 2]` are the same query.
    pub fn new(mut columns: Vec<usize>) -> Self {
        columns.sort_unstable();
        columns.dedup();
        MarginalQuery { columns }
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn arity(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn contains(&self, col: usize) -> bool {
        self.columns.binary_search(&col).is_ok()
    }

    /// True when every column of `self` also appears in `other`.
    pub fn is_subset_of(&self, other: &MarginalQuery) -> bool {
        self.columns.iter().all(|&c| other.contains(c))
    }

    /// All non-empty subqueries, including `self`.
    pub fn subqueries(&self) -> Vec<MarginalQuery> {
        let n = self.columns.len();
        let mut out = Vec::with_capacity((1usize << n) - 1);
        for mask in 1u32..(1 << n) {
            let cols = self
                .columns
                .iter()
                .enumerate()
                .filter(|(b, _)| mask >> b & 1 == 1)
                .map(|(_, &c)| c)
                .collect();
            out.push(MarginalQuery { columns: cols });
        }
        out.sort();
        out
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if let Some(&c) = self.columns.iter().find(|&&c| c >= schema.arity()) {
            return Err(Error::config(format!(
                "query references column {c} but the schema has {} columns",
                schema.arity()
            )));
        }
        Ok(())
    }

    /// Product of the queried columns' cardinalities (1 for the empty query).
    pub fn domain_size(&self, schema: &Schema) -> Result<usize> {
        self.validate(schema)?;
        let mut size = 1usize;
        for &c in &self.columns {
            size = size.checked_mul(schema.cardinality(c)).ok_or_else(|| {
                Error::config(format!("domain size of query {self} overflows usize"))
            })?;
        }
        Ok(size)
    }

    /// Row-major strides: the last queried column varies fastest.
    pub fn strides(&self, schema: &Schema) -> Result<Vec<usize>> {
        self.validate(schema)?;
        let mut strides = vec![1usize; self.columns.len()];
        for i in (0..self.columns.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * schema.cardinality(self.columns[i + 1]);
        }
        Ok(strides)
    }

    /// The category index of each queried column in flat cell `cell`.
    pub fn unrank(&self, schema: &Schema, cell: usize) -> Result<Vec<usize>> {
        let strides = self.strides(schema)?;
        Ok(strides
            .iter()
            .zip(&self.columns)
            .map(|(&s, &c)| cell / s % schema.cardinality(c))
            .collect())
    }
}

impl fmt::Display for MarginalQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.columns.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Whether marginal values are raw counts or normalized to sum 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Counts,
    Normalized,
}

/// A marginal query's value vector, cells in the query's row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalVector {
    pub query: MarginalQuery,
    pub values: Vec<f64>,
    pub space: Space,
}

impl MarginalVector {
    pub fn new(query: MarginalQuery, values: Vec<f64>, space: Space) -> Self {
        MarginalVector {
            query,
            values,
            space,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// L1 distance to another vector over the same query and space.
    pub fn l1_distance(&self, other: &MarginalVector) -> Result<f64> {
        if self.query != other.query || self.space != other.space {
            return Err(Error::numeric(format!(
                "L1 distance between mismatched marginals {} and {}",
                self.query, other.query
            )));
        }
        if self.values.len() != other.values.len() {
            return Err(Error::numeric(format!(
                "marginal {} length mismatch: {} vs {}",
                self.query,
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum())
    }

    /// Counts -> probabilities using the table size `n`.
    pub fn normalized(&self, n: f64) -> MarginalVector {
        match self.space {
            Space::Normalized => self.clone(),
            Space::Counts => MarginalVector::new(
                self.query.clone(),
                self.values.iter().map(|v| v / n).collect(),
                Space::Normalized,
            ),
        }
    }

    /// Sums cells onto a subquery of this marginal's query.
    pub fn marginalize(&self, sub: &MarginalQuery, schema: &Schema) -> Result<MarginalVector> {
        if !sub.is_subset_of(&self.query) {
            return Err(Error::config(format!(
                "{sub} is not a subquery of {}",
                self.query
            )));
        }
        let sub_size = sub.domain_size(schema)?;
        let strides = self.query.strides(schema)?;
        let sub_strides = sub.strides(schema)?;
        // Position of each subquery column within the parent query.
        let pos: Vec<usize> = sub
            .columns()
            .iter()
            .map(|c| self.query.columns().iter().position(|p| p == c).unwrap())
            .collect();
        let mut out = vec![0.0; sub_size];
        for (cell, &v) in self.values.iter().enumerate() {
            let mut sub_cell = 0usize;
            for (k, &p) in pos.iter().enumerate() {
                let digit = cell / strides[p] % schema.cardinality(self.query.columns()[p]);
                sub_cell += digit * sub_strides[k];
            }
            out[sub_cell] += v;
        }
        Ok(MarginalVector::new(sub.clone(), out, self.space))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Column, ColumnKind};

    fn schema_k(cards: &[usize]) -> Schema {
        Schema::new(
            cards
                .iter()
                .enumerate()
                .map(|(i, &k)| Column {
                    name: format!("c{i}"),
                    kind: ColumnKind::Categorical {
                        labels: (0..k).map(|v| v.to_string()).collect(),
                    },
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn query_normalizes_order_and_duplicates() {
        assert_eq!(MarginalQuery::new(vec![2, 0, 2]), MarginalQuery::new(vec![0, 2]));
    }

    #[test]
    fn discretize_endpoints_and_interior() {
        // v = min lands in bin 0 and v = max in the last bin.
        assert_eq!(discretize_numeric(0.0, 0.0, 10.0, 4), 0);
        assert_eq!(discretize_numeric(10.0, 0.0, 10.0, 4), 3);
        // Unit-width bins: 15.5 falls in bin 15.
        assert_eq!(discretize_numeric(15.5, 0.0, 32.0, 32), 15);
        // Out-of-range values clamp instead of escaping.
        assert_eq!(discretize_numeric(-1.0, 0.0, 10.0, 4), 0);
        assert_eq!(discretize_numeric(11.0, 0.0, 10.0, 4), 3);
    }

    #[test]
    fn degenerate_range_maps_everything_to_bin_zero() {
        assert_eq!(discretize_numeric(5.0, 5.0, 5.0, 32), 0);
        assert_eq!(discretize_numeric(7.0, 5.0, 5.0, 32), 0);
    }

    #[test]
    fn marginal_counts_on_three_rows() {
        // Rows (0,1), (1,1), (0,0) over two binary columns.
        let schema = schema_k(&[2, 2]);
        let table =
            DiscreteTable::from_rows(schema, &[vec![0, 1], vec![1, 1], vec![0, 0]]).unwrap();
        let m01 = table
            .evaluate_marginal(&MarginalQuery::new(vec![0, 1]))
            .unwrap();
        // Cells in row-major order (0,0), (0,1), (1,0), (1,1).
        assert_eq!(m01.values, vec![1.0, 1.0, 0.0, 1.0]);
        let m_empty = table.evaluate_marginal(&MarginalQuery::new(vec![])).unwrap();
        assert_eq!(m_empty.values, vec![3.0]);
        let m1 = table.evaluate_marginal(&MarginalQuery::new(vec![1])).unwrap();
        assert_eq!(m1.values, vec![1.0, 2.0]);
    }

    #[test]
    fn strides_follow_row_major_order() {
        let schema = schema_k(&[2, 3, 4]);
        let q = MarginalQuery::new(vec![0, 1, 2]);
        assert_eq!(q.strides(&schema).unwrap(), vec![12, 4, 1]);
        assert_eq!(q.domain_size(&schema).unwrap(), 24);
    }

    #[test]
    fn unrank_inverts_ranking() {
        let schema = schema_k(&[2, 3, 4]);
        let q = MarginalQuery::new(vec![0, 2]);
        let strides = q.strides(&schema).unwrap();
        for cell in 0..q.domain_size(&schema).unwrap() {
            let digits = q.unrank(&schema, cell).unwrap();
            let back: usize = digits.iter().zip(&strides).map(|(d, s)| d * s).sum();
            assert_eq!(back, cell);
        }
    }

    #[test]
    fn marginalize_sums_out_columns() {
        // 2x2 joint [3, 7, 4, 6] over (A, B): A sums rows, B sums columns.
        let schema = schema_k(&[2, 2]);
        let joint = MarginalVector::new(
            MarginalQuery::new(vec![0, 1]),
            vec![3.0, 7.0, 4.0, 6.0],
            Space::Counts,
        );
        let a = joint
            .marginalize(&MarginalQuery::new(vec![0]), &schema)
            .unwrap();
        assert_eq!(a.values, vec![10.0, 10.0]);
        let b = joint
            .marginalize(&MarginalQuery::new(vec![1]), &schema)
            .unwrap();
        assert_eq!(b.values, vec![7.0, 13.0]);
    }

    #[test]
    fn marginalize_respects_nonuniform_domains() {
        let schema = schema_k(&[2, 3]);
        let table = DiscreteTable::from_rows(
            schema.clone(),
            &[vec![0, 2], vec![1, 0], vec![1, 2], vec![0, 1]],
        )
        .unwrap();
        let joint = table
            .evaluate_marginal(&MarginalQuery::new(vec![0, 1]))
            .unwrap();
        for sub_cols in [vec![0], vec![1]] {
            let sub = MarginalQuery::new(sub_cols);
            let direct = table.evaluate_marginal(&sub).unwrap();
            let summed = joint.marginalize(&sub, &schema).unwrap();
            assert_eq!(direct.values, summed.values);
        }
    }

    #[test]
    fn subqueries_enumerates_power_set() {
        let q = MarginalQuery::new(vec![1, 3]);
        let subs = q.subqueries();
        assert_eq!(
            subs,
            vec![
                MarginalQuery::new(vec![1]),
                MarginalQuery::new(vec![1, 3]),
                MarginalQuery::new(vec![3]),
            ]
        );
    }

    #[test]
    fn rejects_out_of_domain_values() {
        let schema = schema_k(&[2]);
        let err = DiscreteTable::from_rows(schema, &[vec![2]]).unwrap_err();
        assert!(err.to_string().contains("outside domain"));
    }
}
