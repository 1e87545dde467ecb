//! CSV ingestion and emission.
//!
//! Raw CSVs are turned into [`DiscreteTable`]s by a [`PreprocSpec`]: numeric
//! columns are zero-imputed and uniformly binned, categorical columns are
//! dense-encoded. Empty fields count as nulls. The derived [`Schema`] is
//! returned so the encoding can be reapplied or inverted later.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schema::{Column, ColumnKind, ColumnSpec, NamedColumnSpec, PreprocSpec, Schema};
use crate::table::{discretize_numeric, DiscreteTable};

/// Raw string cells, column-major, plus the header.
struct RawColumns {
    header: Vec<String>,
    columns: Vec<Vec<String>>,
}

fn read_raw_columns<R: Read>(reader: R) -> Result<RawColumns> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut columns: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for record in rdr.records() {
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            columns[j].push(field.trim().to_string());
        }
    }
    Ok(RawColumns { header, columns })
}

fn parse_numeric(field: &str, col: &str, row: usize) -> Result<f64> {
    if field.is_empty() {
        // Zero-imputation: missing numeric values become 0.
        return Ok(0.0);
    }
    field.parse::<f64>().map_err(|_| {
        Error::data(format!(
            "column `{col}`, row {row}: `{field}` is not numeric"
        ))
    })
}

fn encode_numeric(
    raw: &[String],
    col: &str,
    bins: usize,
    spec_min: Option<f64>,
    spec_max: Option<f64>,
) -> Result<(Vec<u32>, f64, f64)> {
    let mut values = Vec::with_capacity(raw.len());
    for (i, field) in raw.iter().enumerate() {
        let v = parse_numeric(field, col, i)?;
        if !v.is_finite() {
            return Err(Error::data(format!(
                "column `{col}`, row {i}: non-finite value {v}"
            )));
        }
        values.push(v);
    }
    let data_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let data_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = spec_min.unwrap_or(if values.is_empty() { 0.0 } else { data_min });
    let max = spec_max.unwrap_or(if values.is_empty() { 0.0 } else { data_max });
    if !(min.is_finite() && max.is_finite() && min <= max) {
        return Err(Error::data(format!(
            "column `{col}`: invalid range [{min}, {max}]"
        )));
    }
    let encoded = values
        .iter()
        .map(|&v| discretize_numeric(v, min, max, bins) as u32)
        .collect();
    Ok((encoded, min, max))
}

fn encode_categorical(
    raw: &[String],
    col: &str,
    explicit: Option<&[String]>,
) -> Result<(Vec<u32>, Vec<String>)> {
    match explicit {
        Some(labels) => {
            let index: std::collections::BTreeMap<&str, u32> = labels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.as_str(), i as u32))
                .collect();
            let mut encoded = Vec::with_capacity(raw.len());
            for (i, field) in raw.iter().enumerate() {
                if field.is_empty() {
                    // Nulls take the first listed category.
                    encoded.push(0);
                } else if let Some(&v) = index.get(field.as_str()) {
                    encoded.push(v);
                } else {
                    return Err(Error::data(format!(
                        "column `{col}`, row {i}: `{field}` is not in the category list"
                    )));
                }
            }
            Ok((encoded, labels.to_vec()))
        }
        None => {
            // First-appearance order; if nulls occur they become a leading
            // empty-string category so every row stays representable.
            let has_null = raw.iter().any(|f| f.is_empty());
            let mut labels: Vec<String> = if has_null { vec![String::new()] } else { vec![] };
            let mut index: std::collections::BTreeMap<String, u32> = labels
                .iter()
                .cloned()
                .map(|l| (l, 0u32))
                .collect();
            let mut encoded = Vec::with_capacity(raw.len());
            for field in raw {
                let v = match index.get(field.as_str()) {
                    Some(&v) => v,
                    None => {
                        let v = labels.len() as u32;
                        labels.push(field.clone());
                        index.insert(field.clone(), v);
                        v
                    }
                };
                encoded.push(v);
            }
            if labels.is_empty() {
                labels.push(String::new());
            }
            Ok((encoded, labels))
        }
    }
}

/// Encodes a CSV under a preprocessing spec, deriving the schema.
pub fn load_table(path: &Path, spec: &PreprocSpec) -> Result<DiscreteTable> {
    spec.validate()?;
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    load_table_from_reader(file, spec)
}

pub fn load_table_from_reader<R: Read>(reader: R, spec: &PreprocSpec) -> Result<DiscreteTable> {
    spec.validate()?;
    let raw = read_raw_columns(reader)?;
    let mut encoded_columns = Vec::with_capacity(spec.columns.len());
    let mut schema_columns = Vec::with_capacity(spec.columns.len());
    for col_spec in &spec.columns {
        let j = raw
            .header
            .iter()
            .position(|h| h == &col_spec.name)
            .ok_or_else(|| {
                Error::data(format!("CSV is missing column `{}`", col_spec.name))
            })?;
        let (encoded, kind) = match &col_spec.spec {
            ColumnSpec::Numeric { bins, min, max } => {
                let (encoded, lo, hi) =
                    encode_numeric(&raw.columns[j], &col_spec.name, *bins, *min, *max)?;
                (
                    encoded,
                    ColumnKind::Numeric {
                        min: lo,
                        max: hi,
                        bins: *bins,
                    },
                )
            }
            ColumnSpec::Categorical { categories } => {
                let (encoded, labels) =
                    encode_categorical(&raw.columns[j], &col_spec.name, categories.as_deref())?;
                (encoded, ColumnKind::Categorical { labels })
            }
        };
        encoded_columns.push(encoded);
        schema_columns.push(Column {
            name: col_spec.name.clone(),
            kind,
        });
    }
    let schema = Schema::new(schema_columns)?;
    DiscreteTable::new(schema, encoded_columns)
}

/// Re-encodes a CSV under an existing schema (bin edges and labels fixed).
///
/// This is how synthetic output and held-out data are brought back into the
/// encoded domain for comparison: numeric fields are binned with the stored
/// range, categorical fields looked up in the stored label list.
pub fn encode_with_schema(path: &Path, schema: &Schema) -> Result<DiscreteTable> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    encode_with_schema_from_reader(file, schema)
}

pub fn encode_with_schema_from_reader<R: Read>(
    reader: R,
    schema: &Schema,
) -> Result<DiscreteTable> {
    let raw = read_raw_columns(reader)?;
    let mut encoded_columns = Vec::with_capacity(schema.arity());
    for col in &schema.columns {
        let j = raw
            .header
            .iter()
            .position(|h| h == &col.name)
            .ok_or_else(|| Error::data(format!("CSV is missing column `{}`", col.name)))?;
        let encoded = match &col.kind {
            ColumnKind::Numeric { min, max, bins } => {
                let mut out = Vec::with_capacity(raw.columns[j].len());
                for (i, field) in raw.columns[j].iter().enumerate() {
                    let v = parse_numeric(field, &col.name, i)?;
                    out.push(discretize_numeric(v, *min, *max, *bins) as u32);
                }
                out
            }
            ColumnKind::Categorical { labels } => {
                let index: std::collections::BTreeMap<&str, u32> = labels
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (l.as_str(), i as u32))
                    .collect();
                let mut out = Vec::with_capacity(raw.columns[j].len());
                for (i, field) in raw.columns[j].iter().enumerate() {
                    match index.get(field.as_str()) {
                        Some(&v) => out.push(v),
                        None => {
                            return Err(Error::data(format!(
                                "column `{}`, row {i}: `{field}` is not a known category",
                                col.name
                            )))
                        }
                    }
                }
                out
            }
        };
        encoded_columns.push(encoded);
    }
    DiscreteTable::new(schema.clone(), encoded_columns)
}

/// Writes a table as CSV in source space: labels for categorical columns,
/// bin midpoints for numeric ones.
pub fn write_table_csv(table: &DiscreteTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
    write_table_csv_to_writer(table, file)
}

pub fn write_table_csv_to_writer<W: std::io::Write>(
    table: &DiscreteTable,
    writer: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let schema = table.schema();
    wtr.write_record(schema.column_names())?;
    for i in 0..table.n_rows() {
        let record: Vec<String> = schema
            .columns
            .iter()
            .enumerate()
            .map(|(j, col)| col.decode(table.column(j)[i] as usize))
            .collect();
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(Error::Io)?;
    Ok(())
}

/// Guesses a preprocessing spec from the data: columns whose non-empty
/// fields all parse as floats become 32-bin numeric, the rest categorical.
pub fn infer_spec_from_csv(path: &Path) -> Result<PreprocSpec> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let raw = read_raw_columns(file)?;
    let columns = raw
        .header
        .iter()
        .zip(&raw.columns)
        .map(|(name, cells)| {
            let numeric = cells
                .iter()
                .filter(|f| !f.is_empty())
                .all(|f| f.parse::<f64>().is_ok())
                && cells.iter().any(|f| !f.is_empty());
            NamedColumnSpec {
                name: name.clone(),
                spec: if numeric {
                    ColumnSpec::Numeric {
                        bins: 32,
                        min: None,
                        max: None,
                    }
                } else {
                    ColumnSpec::Categorical { categories: None }
                },
            }
        })
        .collect();
    Ok(PreprocSpec { columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::table::MarginalQuery;

    fn spec(columns: Vec<NamedColumnSpec>) -> PreprocSpec {
        PreprocSpec { columns }
    }

    fn numeric(name: &str, bins: usize, min: Option<f64>, max: Option<f64>) -> NamedColumnSpec {
        NamedColumnSpec {
            name: name.into(),
            spec: ColumnSpec::Numeric { bins, min, max },
        }
    }

    fn categorical(name: &str, categories: Option<Vec<&str>>) -> NamedColumnSpec {
        NamedColumnSpec {
            name: name.into(),
            spec: ColumnSpec::Categorical {
                categories: categories.map(|c| c.iter().map(|s| s.to_string()).collect()),
            },
        }
    }

    #[test]
    fn numeric_nulls_are_zero_imputed() {
        // [null, 5.0] with range [0, 10] and 2 bins lands in bins [0, 1].
        // Bare empty lines are skipped by the reader, so a null in a
        // single-column file is spelled "".
        let csv = "x\n\"\"\n5.0\n";
        let table = load_table_from_reader(
            csv.as_bytes(),
            &spec(vec![numeric("x", 2, Some(0.0), Some(10.0))]),
        )
        .unwrap();
        assert_eq!(table.column(0), &[0, 1]);
    }

    #[test]
    fn numeric_range_defaults_to_data_range() {
        let csv = "x\n2.0\n4.0\n6.0\n";
        let table = load_table_from_reader(
            csv.as_bytes(),
            &spec(vec![numeric("x", 2, None, None)]),
        )
        .unwrap();
        // Derived range [2, 6]: 2 and (boundary) 4 split low, 6 clamps high.
        assert_eq!(table.column(0), &[0, 1, 1]);
        match table.schema().columns[0].kind {
            crate::schema::ColumnKind::Numeric { min, max, .. } => {
                assert_eq!((min, max), (2.0, 6.0));
            }
            _ => panic!("expected numeric column"),
        }
    }

    #[test]
    fn categorical_labels_in_first_appearance_order() {
        let csv = "c\nb\na\nb\n";
        let table =
            load_table_from_reader(csv.as_bytes(), &spec(vec![categorical("c", None)])).unwrap();
        assert_eq!(table.column(0), &[0, 1, 0]);
        match &table.schema().columns[0].kind {
            crate::schema::ColumnKind::Categorical { labels } => {
                assert_eq!(labels, &["b".to_string(), "a".to_string()]);
            }
            _ => panic!("expected categorical column"),
        }
    }

    #[test]
    fn categorical_nulls_get_leading_empty_label() {
        let csv = "c\nb\n\"\"\nb\na\n";
        let table =
            load_table_from_reader(csv.as_bytes(), &spec(vec![categorical("c", None)])).unwrap();
        assert_eq!(table.column(0), &[1, 0, 1, 2]);
        match &table.schema().columns[0].kind {
            crate::schema::ColumnKind::Categorical { labels } => {
                assert_eq!(labels, &["".to_string(), "b".to_string(), "a".to_string()]);
            }
            _ => panic!("expected categorical column"),
        }
    }

    #[test]
    fn explicit_categories_reject_unknown_values() {
        let csv = "c\nz\n";
        let err = load_table_from_reader(
            csv.as_bytes(),
            &spec(vec![categorical("c", Some(vec!["a", "b"]))]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("not in the category list"));
    }

    #[test]
    fn csv_round_trip_preserves_encoded_table() {
        let csv = "city,age\nparis,10\nlondon,30\nparis,\n";
        let table = load_table_from_reader(
            csv.as_bytes(),
            &spec(vec![
                categorical("city", None),
                numeric("age", 4, Some(0.0), Some(40.0)),
            ]),
        )
        .unwrap();
        let mut out = Vec::new();
        write_table_csv_to_writer(&table, &mut out).unwrap();
        let back = encode_with_schema_from_reader(out.as_slice(), table.schema()).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn reencoding_under_schema_matches_marginals() {
        let csv = "a,b\nx,1\ny,2\nx,3\n";
        let table = load_table_from_reader(
            csv.as_bytes(),
            &spec(vec![
                categorical("a", None),
                numeric("b", 3, Some(0.0), Some(3.0)),
            ]),
        )
        .unwrap();
        let reloaded =
            encode_with_schema_from_reader(csv.as_bytes(), table.schema()).unwrap();
        let q = MarginalQuery::new(vec![0, 1]);
        assert_eq!(
            table.evaluate_marginal(&q).unwrap(),
            reloaded.evaluate_marginal(&q).unwrap()
        );
    }

    #[test]
    fn inferred_spec_separates_numeric_and_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "n,c\n1.5,x\n2,y\n").unwrap();
        let spec = infer_spec_from_csv(&path).unwrap();
        assert!(matches!(spec.columns[0].spec, ColumnSpec::Numeric { .. }));
        assert!(matches!(
            spec.columns[1].spec,
            ColumnSpec::Categorical { .. }
        ));
    }

    #[test]
    fn missing_column_is_a_data_error() {
        let csv = "a\n1\n";
        let err =
            load_table_from_reader(csv.as_bytes(), &spec(vec![categorical("zzz", None)]))
                .unwrap_err();
        assert!(err.to_string().contains("missing column"));
    }
}
