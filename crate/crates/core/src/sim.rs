//! Synthetic dataset builders for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::schema::{Column, ColumnKind, Schema};
use crate::table::DiscreteTable;

/// A `d`-column categorical schema with labels "0".."k-1" everywhere.
pub fn uniform_schema(d: usize, k: usize) -> Schema {
    Schema::new(
        (0..d)
            .map(|i| Column {
                name: format!("c{i}"),
                kind: ColumnKind::Categorical {
                    labels: (0..k).map(|v| v.to_string()).collect(),
                },
            })
            .collect(),
    )
    .expect("uniform schema is valid")
}

/// Independent uniform rows over a schema.
pub fn random_table(schema: &Schema, n: usize, seed: u64) -> Result<DiscreteTable> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cards = schema.cardinalities();
    let columns = cards
        .iter()
        .map(|&k| {
            (0..n)
                .map(|_| (rng.random::<u64>() % k as u64) as u32)
                .collect()
        })
        .collect();
    DiscreteTable::new(schema.clone(), columns)
}

/// Five columns over a 4-value domain with two planted couplings: column 1
/// copies column 0 with probability 0.9 (else uniform), column 3 copies
/// column 2 likewise, and column 4 is independent. The strong pairwise
/// structure makes workload error sensitive to whether a fit found it.
pub fn planted_pairs_table(n: usize, seed: u64) -> DiscreteTable {
    const K: u32 = 4;
    let schema = uniform_schema(5, K as usize);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let uniform = |rng: &mut ChaCha20Rng| (rng.random::<u32>() % K) as u32;
    let mut columns: Vec<Vec<u32>> = vec![Vec::with_capacity(n); 5];
    for _ in 0..n {
        let c0 = uniform(&mut rng);
        let c1 = if rng.random::<f64>() < 0.9 { c0 } else { uniform(&mut rng) };
        let c2 = uniform(&mut rng);
        let c3 = if rng.random::<f64>() < 0.9 { c2 } else { uniform(&mut rng) };
        let c4 = uniform(&mut rng);
        for (col, v) in columns.iter_mut().zip([c0, c1, c2, c3, c4]) {
            col.push(v);
        }
    }
    DiscreteTable::new(schema, columns).expect("planted table is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::MarginalQuery;

    #[test]
    fn planted_pairs_have_heavy_diagonals() {
        let table = planted_pairs_table(20_000, 1);
        assert_eq!(table.n_rows(), 20_000);
        for (a, b) in [(0usize, 1usize), (2, 3)] {
            let joint = table
                .evaluate_marginal(&MarginalQuery::new(vec![a, b]))
                .unwrap();
            // Diagonal mass should be near 0.9 + 0.1/4 = 0.925.
            let diag: f64 = (0..4).map(|v| joint.values[v * 4 + v]).sum();
            let frac = diag / 20_000.0;
            assert!((frac - 0.925).abs() < 0.02, "diagonal mass {frac}");
        }
    }

    #[test]
    fn random_table_is_roughly_uniform() {
        let schema = uniform_schema(3, 4);
        let table = random_table(&schema, 40_000, 2).unwrap();
        let m = table.evaluate_marginal(&MarginalQuery::new(vec![1])).unwrap();
        for &v in &m.values {
            assert!((v / 40_000.0 - 0.25).abs() < 0.02);
        }
    }

    #[test]
    fn tables_are_deterministic_by_seed() {
        assert_eq!(planted_pairs_table(500, 9), planted_pairs_table(500, 9));
        let schema = uniform_schema(2, 3);
        assert_eq!(
            random_table(&schema, 100, 4).unwrap(),
            random_table(&schema, 100, 4).unwrap()
        );
    }
}
