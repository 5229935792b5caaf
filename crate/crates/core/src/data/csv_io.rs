//! CSV ingestion against a [`FeatureSchema`] and CSV export in raw units.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use super::dataset::{Dataset, Instance};
use super::schema::FeatureSchema;
use crate::error::{Error, Result};

pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Reads raw (unstandardized) rows. Rows with a missing or unparseable cell,
/// an out-of-range label, or a categorical value beyond the declared
/// cardinality are dropped and counted.
pub fn read_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position: HashMap<&str, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim(), i))
        .collect();
    let find = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::Ingestion(format!("missing schema column `{name}`")))
    };
    let cont_idx: Vec<usize> = schema
        .continuous
        .iter()
        .map(|n| find(n))
        .collect::<Result<_>>()?;
    let cat_idx: Vec<usize> = schema
        .categorical
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<_>>()?;
    let target_idx = find(&schema.target)?;

    // value -> code tables, seeded from the schema when it pins them
    let mut tables: Vec<Vec<String>> = schema
        .categorical
        .iter()
        .map(|c| c.values.clone().unwrap_or_default())
        .collect();
    let fixed: Vec<bool> = schema.categorical.iter().map(|c| c.values.is_some()).collect();

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0usize;
    for record in rdr.records() {
        let record = record?;
        let cell = |i: usize| record.get(i).map(str::trim).filter(|s| !s.is_empty());

        let continuous: Option<Vec<f64>> = cont_idx
            .iter()
            .map(|&i| cell(i)?.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        let label = cell(target_idx)
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&y| y < schema.classes);
        let raw_cats: Option<Vec<&str>> = cat_idx.iter().map(|&i| cell(i)).collect();
        let (Some(continuous), Some(label), Some(raw_cats)) = (continuous, label, raw_cats) else {
            dropped += 1;
            continue;
        };

        // resolve codes without mutating the tables until the whole row is accepted
        let mut codes = Vec::with_capacity(raw_cats.len());
        let mut pending: Vec<(usize, String)> = Vec::new();
        let mut ok = true;
        for (m, value) in raw_cats.iter().enumerate() {
            if let Some(code) = tables[m].iter().position(|v| v == value) {
                codes.push(code);
            } else if !fixed[m] && tables[m].len() < schema.categorical[m].cardinality {
                codes.push(tables[m].len());
                pending.push((m, value.to_string()));
            } else {
                ok = false;
                break;
            }
        }
        if !ok {
            dropped += 1;
            continue;
        }
        for (m, v) in pending {
            tables[m].push(v);
        }
        rows.push(Instance::new(continuous, codes));
        labels.push(label);
    }

    if rows.is_empty() {
        return Err(Error::Ingestion(format!(
            "no usable rows ({dropped} dropped)"
        )));
    }
    let mut ds = Dataset::new(schema.clone(), rows, labels)?;
    for (m, table) in tables.into_iter().enumerate() {
        let card = schema.categorical[m].cardinality;
        let mut t = table;
        while t.len() < card {
            t.push(format!("<unseen:{}>", t.len()));
        }
        ds.category_values[m] = t;
    }
    ds.dropped_rows = dropped;
    Ok(ds)
}

/// Writes the dataset in raw units with a header row.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    {
        let raw = dataset.destandardize();
        let mut w = csv::Writer::from_writer(&mut buf);
        let schema = &dataset.schema;
        let mut header: Vec<&str> = schema.continuous.iter().map(String::as_str).collect();
        header.extend(schema.categorical.iter().map(|c| c.name.as_str()));
        header.push(&schema.target);
        w.write_record(&header)?;
        for (row, label) in raw.rows.iter().zip(&raw.labels) {
            let mut rec: Vec<String> = row.continuous.iter().map(|v| v.to_string()).collect();
            rec.extend(
                row.categorical
                    .iter()
                    .enumerate()
                    .map(|(m, &c)| dataset.category_values[m][c].clone()),
            );
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    }
    crate::persist::write_atomic(path.as_ref(), &buf)
}
