//! `dpsynth evaluate`: encode both CSVs under one schema and report the
//! average L1 workload error.

use std::path::Path;

use serde::Serialize;

use dpsynth_core::ingest::{encode_with_schema, infer_spec_from_csv, load_table};
use dpsynth_core::schema::{PreprocSpec, SchemaFile};
use dpsynth_core::{
    workload_error_report, DiscreteTable, Error, GeneratorModel, Result, Workload, WorkloadSpec,
    write_atomic,
};

const OUTPUT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EvalFile {
    format_version: u32,
    average_error: f64,
    workload_size: usize,
    per_query_errors: Vec<QueryErrorOut>,
}

#[derive(Serialize)]
struct QueryErrorOut {
    columns: Vec<String>,
    error: f64,
}

pub fn run(
    real_path: &Path,
    synth_path: &Path,
    workload_arg: &str,
    schema_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let (real, synth) = load_pair(real_path, synth_path, schema_path)?;
    let workload = resolve_workload(workload_arg, &real)?;
    let report = workload_error_report(&real, &synth, &workload)?;

    let names = real.schema().column_names();
    let per_query_errors = report
        .per_query_errors
        .iter()
        .map(|e| QueryErrorOut {
            columns: e.query.columns().iter().map(|&c| names[c].clone()).collect(),
            error: e.error,
        })
        .collect();
    let file = EvalFile {
        format_version: OUTPUT_FORMAT_VERSION,
        average_error: report.average_error,
        workload_size: report.workload_size,
        per_query_errors,
    };
    let text = serde_json::to_string_pretty(&file)?;
    if let Some(path) = out {
        write_atomic(path, text.as_bytes())?;
    }
    println!("{text}");
    Ok(())
}

/// Loads both tables under a single schema so their marginals align. The
/// schema comes from `--schema` (a model JSON, schema JSON, or preprocessing
/// spec) or, failing that, a spec inferred from the real CSV.
fn load_pair(
    real_path: &Path,
    synth_path: &Path,
    schema_path: Option<&Path>,
) -> Result<(DiscreteTable, DiscreteTable)> {
    let real = match schema_path {
        None => load_table(real_path, &infer_spec_from_csv(real_path)?)?,
        Some(path) => match load_schema_source(path)? {
            SchemaSource::Schema(schema) => encode_with_schema(real_path, &schema)?,
            SchemaSource::Spec(spec) => load_table(real_path, &spec)?,
        },
    };
    let synth = encode_with_schema(synth_path, real.schema())?;
    Ok((real, synth))
}

enum SchemaSource {
    Schema(dpsynth_core::Schema),
    Spec(PreprocSpec),
}

fn load_schema_source(path: &Path) -> Result<SchemaSource> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::config(format!("cannot read schema source {}: {e}", path.display()))
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("latent_dim").is_some() {
        let model = GeneratorModel::from_json(&text)?;
        return Ok(SchemaSource::Schema(model.schema().clone()));
    }
    let tag = value
        .get("columns")
        .and_then(|c| c.get(0))
        .map(|col| (col.get("type").is_some(), col.get("kind").is_some()));
    match tag {
        Some((true, false)) => {
            let file: SchemaFile = serde_json::from_str(&text)?;
            file.schema.validate()?;
            Ok(SchemaSource::Schema(file.schema))
        }
        Some((false, true)) => {
            let spec: PreprocSpec = serde_json::from_str(&text)?;
            spec.validate()?;
            Ok(SchemaSource::Spec(spec))
        }
        _ => Err(Error::config(format!(
            "{} is neither a model, a schema, nor a preprocessing spec",
            path.display()
        ))),
    }
}

/// The workload argument is inline JSON when it parses, otherwise a path.
fn resolve_workload(arg: &str, real: &DiscreteTable) -> Result<Workload> {
    let spec: WorkloadSpec = match serde_json::from_str(arg) {
        Ok(spec) => spec,
        Err(_) => {
            let path = Path::new(arg);
            if !path.is_file() {
                return Err(Error::config(format!(
                    "workload `{arg}` is neither inline JSON nor a readable file"
                )));
            }
            serde_json::from_str(&std::fs::read_to_string(path)?)?
        }
    };
    spec.resolve(real.schema())
}
