//! Cohort persistence: delimited text with a schema comment line.
//!
//! Layout: a `#` comment line carrying the schema version, modality
//! dimensions and oracle-column flag; then a CSV header; then one row per
//! patient — id, time, event, four presence flags, fixed-width feature
//! blocks in modality order, and optionally the oracle log-hazard. Floats
//! are written in shortest round-trip form, so write/load is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{McvaeError, Result};

use super::{Cohort, PatientRecord, CLINICAL, MODALITY_NAMES, NUM_MODALITIES};

pub const SCHEMA_VERSION: &str = "mcvae-cohort v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortSchema {
    pub dims: [usize; NUM_MODALITIES],
    pub has_oracle: bool,
}

impl CohortSchema {
    fn comment_line(&self) -> String {
        format!(
            "# {} dims={} oracle={}",
            SCHEMA_VERSION,
            self.dims.map(|d| d.to_string()).join(","),
            self.has_oracle
        )
    }

    fn parse_comment(line: &str) -> Result<Self> {
        let body = line
            .strip_prefix('#')
            .ok_or_else(|| McvaeError::MalformedRow {
                row: 0,
                detail: "missing schema comment line".into(),
            })?
            .trim();
        let rest = body
            .strip_prefix(SCHEMA_VERSION)
            .ok_or_else(|| McvaeError::MalformedRow {
                row: 0,
                detail: format!("unsupported schema line: {body}"),
            })?;
        let mut dims = None;
        let mut oracle = None;
        for token in rest.split_whitespace() {
            if let Some(v) = token.strip_prefix("dims=") {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| McvaeError::MalformedRow {
                        row: 0,
                        detail: format!("bad dims in schema line: {e}"),
                    })?;
                if parts.len() != NUM_MODALITIES {
                    return Err(McvaeError::MalformedRow {
                        row: 0,
                        detail: format!("schema dims must list {NUM_MODALITIES} entries"),
                    });
                }
                dims = Some([parts[0], parts[1], parts[2], parts[3]]);
            } else if let Some(v) = token.strip_prefix("oracle=") {
                oracle = Some(v == "true");
            }
        }
        match (dims, oracle) {
            (Some(dims), Some(has_oracle)) => Ok(CohortSchema { dims, has_oracle }),
            _ => Err(McvaeError::MalformedRow {
                row: 0,
                detail: "schema line must carry dims= and oracle=".into(),
            }),
        }
    }

    fn field_count(&self) -> usize {
        3 + NUM_MODALITIES
            + self.dims.iter().sum::<usize>()
            + if self.has_oracle { 1 } else { 0 }
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec![
            "patient_id".to_string(),
            "time".to_string(),
            "event".to_string(),
        ];
        for name in MODALITY_NAMES {
            h.push(format!("has_{name}"));
        }
        for (k, name) in MODALITY_NAMES.iter().enumerate() {
            for j in 0..self.dims[k] {
                h.push(format!("{name}_{j}"));
            }
        }
        if self.has_oracle {
            h.push("oracle_log_hazard".to_string());
        }
        h
    }
}

pub fn write_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    cohort.validate()?;
    let schema = CohortSchema {
        dims: cohort.dims,
        has_oracle: cohort
            .records
            .iter()
            .any(|r| r.oracle_log_hazard.is_some()),
    };
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", schema.comment_line())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(schema.header())?;
    for r in &cohort.records {
        let mut row: Vec<String> = vec![
            r.id.clone(),
            format!("{}", r.time),
            if r.event { "1" } else { "0" }.to_string(),
        ];
        for k in 0..NUM_MODALITIES {
            row.push(if r.available[k] { "1" } else { "0" }.to_string());
        }
        for k in 0..NUM_MODALITIES {
            for v in &r.features[k] {
                row.push(format!("{v}"));
            }
        }
        if schema.has_oracle {
            row.push(match r.oracle_log_hazard {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a cohort, inferring the schema from the leading comment line. When
/// `expected` is given the file schema must match it exactly.
pub fn load_cohort(path: &Path, expected: Option<&CohortSchema>) -> Result<Cohort> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let schema = CohortSchema::parse_comment(first.trim_end())?;
    if let Some(exp) = expected {
        if &schema != exp {
            return Err(McvaeError::MalformedRow {
                row: 0,
                detail: format!("schema {schema:?} does not match expected {exp:?}"),
            });
        }
    }

    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let mut records = Vec::new();
    for (idx, row) in csv_reader.records().enumerate() {
        let row_no = idx + 1;
        let row = row.map_err(|e| McvaeError::MalformedRow {
            row: row_no,
            detail: e.to_string(),
        })?;
        if row.len() != schema.field_count() {
            return Err(McvaeError::MalformedRow {
                row: row_no,
                detail: format!(
                    "expected {} fields, got {}",
                    schema.field_count(),
                    row.len()
                ),
            });
        }
        records.push(parse_row(&schema, row_no, &row)?);
    }
    let cohort = Cohort {
        records,
        dims: schema.dims,
    };
    cohort.validate()?;
    Ok(cohort)
}

fn parse_row(schema: &CohortSchema, row_no: usize, row: &csv::StringRecord) -> Result<PatientRecord> {
    let bad = |detail: String| McvaeError::MalformedRow {
        row: row_no,
        detail,
    };
    let parse_f64 = |field: &str, what: &str| -> Result<f64> {
        field
            .parse::<f64>()
            .map_err(|e| bad(format!("{what}: {e}")))
    };
    let parse_flag = |field: &str, what: &str| -> Result<bool> {
        match field {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(bad(format!("{what} must be 0 or 1, got {other:?}"))),
        }
    };

    let id = row[0].to_string();
    if id.is_empty() {
        return Err(bad("empty patient id".into()));
    }
    let time = parse_f64(&row[1], "time")?;
    let event = parse_flag(&row[2], "event")?;
    let mut available = [false; NUM_MODALITIES];
    for k in 0..NUM_MODALITIES {
        available[k] = parse_flag(&row[3 + k], &format!("has_{}", MODALITY_NAMES[k]))?;
    }
    if !available[CLINICAL] {
        return Err(bad("clinical modality must be available".into()));
    }

    let mut offset = 3 + NUM_MODALITIES;
    let mut features: [Vec<f64>; NUM_MODALITIES] = Default::default();
    for k in 0..NUM_MODALITIES {
        let d = schema.dims[k];
        if available[k] {
            let mut v = Vec::with_capacity(d);
            for j in 0..d {
                let field = &row[offset + j];
                if field.is_empty() {
                    return Err(bad(format!(
                        "modality {} flagged present but feature {j} is empty",
                        MODALITY_NAMES[k]
                    )));
                }
                let x = parse_f64(field, &format!("{}_{j}", MODALITY_NAMES[k]))?;
                if !x.is_finite() {
                    return Err(bad(format!(
                        "non-finite value in {}_{j}",
                        MODALITY_NAMES[k]
                    )));
                }
                v.push(x);
            }
            features[k] = v;
        } else {
            // absent block: fields may be empty or zero; stored as placeholder
            features[k] = vec![0.0; d];
        }
        offset += d;
    }

    let oracle_log_hazard = if schema.has_oracle {
        let field = &row[offset];
        if field.is_empty() {
            None
        } else {
            Some(parse_f64(field, "oracle_log_hazard")?)
        }
    } else {
        None
    };

    Ok(PatientRecord {
        id,
        time,
        event,
        available,
        features,
        oracle_log_hazard,
    })
}
