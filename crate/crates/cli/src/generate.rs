//! `dpsynth generate`: sample a fitted model into a decoded CSV.

use std::path::Path;

use dpsynth_core::ingest::write_table_csv_to_writer;
use dpsynth_core::{write_atomic, Error, GeneratorModel, Result};

pub fn run(model_path: &Path, rows: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let model = GeneratorModel::load(model_path)?;
    let n_out = match rows {
        Some(n) => n,
        None => model.n_rows().ok_or_else(|| {
            Error::config("model records no fitting row count; pass --rows")
        })? as usize,
    };
    let table = model.sample_seeded(n_out, seed)?;
    let mut buf = Vec::new();
    write_table_csv_to_writer(&table, &mut buf)?;
    write_atomic(out, &buf)
}
