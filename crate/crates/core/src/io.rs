//! Dataset and artifact I/O: the participant-record CSV schema, the
//! assignment audit log, randomization input files, and fitted-model export.
//!
//! Column orders and codes are frozen; see `docs/SCHEMA.md` (schema v1).
//! Floats are written with Rust's shortest round-trip formatting so outputs
//! are byte-stable across runs.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{Arm, ParticipantRecord, ResponderCategory, Stage2Action};
use crate::randomizer::AuditRecord;

/// Schema version stamped into `docs/SCHEMA.md`.
pub const SCHEMA_VERSION: u32 = 1;

const RECORD_HEAD: [&str; 10] = [
    "id",
    "site",
    "excluded_arm",
    "early_disc",
    "a1",
    "y1",
    "responder",
    "a2_kind",
    "a2_new_arm",
    "y2",
];

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(field: &str, context: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| Error::Data(format!("bad float {field:?} in {context}")))
}

fn parse_u64(field: &str, context: &str) -> Result<u64> {
    field
        .parse::<u64>()
        .map_err(|_| Error::Data(format!("bad integer {field:?} in {context}")))
}

/// Writes participant records in schema v1.
pub fn write_records_csv<W: Write>(writer: W, records: &[ParticipantRecord]) -> Result<()> {
    let n_cov = records.first().map_or(0, |r| r.covariates.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = RECORD_HEAD.iter().map(|s| s.to_string()).collect();
    header.extend((1..=n_cov).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for rec in records {
        if rec.covariates.len() != n_cov {
            return Err(Error::Dimension {
                context: "record covariates",
                expected: n_cov,
                actual: rec.covariates.len(),
            });
        }
        let mut row: Vec<String> = vec![
            rec.id.to_string(),
            rec.site.to_string(),
            rec.excluded_arm.map_or(String::new(), |a| a.code().to_string()),
            u8::from(rec.early_discontinuation).to_string(),
            rec.a1.code().to_string(),
            fmt_f64(rec.y1),
            rec.responder.code().to_string(),
            rec.a2.kind_code().to_string(),
            rec.a2.new_arm().map_or(String::new(), |a| a.code().to_string()),
            rec.y2.map_or(String::new(), fmt_f64),
        ];
        row.extend(rec.covariates.iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads participant records in schema v1; the covariate width is inferred
/// from the header.
pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<ParticipantRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.len() < RECORD_HEAD.len() {
        return Err(Error::Data("record CSV header too short".into()));
    }
    for (i, expected) in RECORD_HEAD.iter().enumerate() {
        if &header[i] != *expected {
            return Err(Error::Data(format!(
                "record CSV column {i} is {:?}, expected {expected:?}",
                &header[i]
            )));
        }
    }
    let n_cov = header.len() - RECORD_HEAD.len();
    let mut records = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let context = format!("record row {}", line + 1);
        if row.len() != RECORD_HEAD.len() + n_cov {
            return Err(Error::Data(format!("{context}: wrong field count")));
        }
        let excluded_arm = if row[2].is_empty() {
            None
        } else {
            Some(Arm::from_code(parse_u64(&row[2], &context)? as u8)?)
        };
        let a2_new = if row[8].is_empty() {
            None
        } else {
            Some(parse_u64(&row[8], &context)? as u8)
        };
        let rec = ParticipantRecord {
            id: parse_u64(&row[0], &context)? as u32,
            site: parse_u64(&row[1], &context)? as u16,
            excluded_arm,
            early_discontinuation: match &row[3] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Data(format!("{context}: bad early_disc {other:?}")))
                }
            },
            a1: Arm::from_code(parse_u64(&row[4], &context)? as u8)?,
            y1: parse_f64(&row[5], &context)?,
            responder: ResponderCategory::from_code(parse_u64(&row[6], &context)? as u8)?,
            a2: Stage2Action::from_codes(parse_u64(&row[7], &context)? as u8, a2_new)?,
            y2: if row[9].is_empty() {
                None
            } else {
                Some(parse_f64(&row[9], &context)?)
            },
            covariates: (0..n_cov)
                .map(|j| parse_f64(&row[RECORD_HEAD.len() + j], &context))
                .collect::<Result<_>>()?,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

const AUDIT_HEAD: [&str; 14] = [
    "seq",
    "participant_id",
    "factors",
    "excluded_arm",
    "feasible_arms",
    "s_esc",
    "s_act",
    "s_dul",
    "s_ebem",
    "favored_arm",
    "coin",
    "assigned_arm",
    "rng_seed",
    "rng_word_pos",
];

/// Writes the append-only assignment audit log.
pub fn write_audit_csv<W: Write>(writer: W, records: &[AuditRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(AUDIT_HEAD)?;
    for rec in records {
        let factors: String = rec.factors.iter().map(|b| char::from(b'0' + b)).collect();
        let feasible: String = rec
            .feasible
            .iter()
            .map(|a| char::from(b'0' + a.code()))
            .collect();
        w.write_record(&[
            rec.seq.to_string(),
            rec.participant_id.to_string(),
            factors,
            rec.excluded_arm.map_or(String::new(), |a| a.code().to_string()),
            feasible,
            fmt_f64(rec.scores[0]),
            fmt_f64(rec.scores[1]),
            fmt_f64(rec.scores[2]),
            fmt_f64(rec.scores[3]),
            rec.favored.code().to_string(),
            if rec.coin_favored { "F".into() } else { "O".into() },
            rec.assigned.code().to_string(),
            rec.rng_seed.to_string(),
            rec.rng_word_pos.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_audit_csv<R: Read>(reader: R) -> Result<Vec<AuditRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().ne(AUDIT_HEAD) {
        return Err(Error::Data("unexpected audit CSV header".into()));
    }
    let mut records = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let context = format!("audit row {}", line + 1);
        if row.len() != AUDIT_HEAD.len() {
            return Err(Error::Data(format!("{context}: wrong field count")));
        }
        let digits = |field: &str| -> Result<Vec<u8>> {
            field
                .chars()
                .map(|c| {
                    c.to_digit(10)
                        .map(|d| d as u8)
                        .ok_or_else(|| Error::Data(format!("{context}: bad digit field")))
                })
                .collect()
        };
        let feasible = digits(&row[4])?
            .into_iter()
            .map(Arm::from_code)
            .collect::<Result<_>>()?;
        records.push(AuditRecord {
            seq: parse_u64(&row[0], &context)? as u32,
            participant_id: parse_u64(&row[1], &context)? as u32,
            factors: digits(&row[2])?,
            excluded_arm: if row[3].is_empty() {
                None
            } else {
                Some(Arm::from_code(parse_u64(&row[3], &context)? as u8)?)
            },
            feasible,
            scores: vec![
                parse_f64(&row[5], &context)?,
                parse_f64(&row[6], &context)?,
                parse_f64(&row[7], &context)?,
                parse_f64(&row[8], &context)?,
            ],
            favored: Arm::from_code(parse_u64(&row[9], &context)? as u8)?,
            coin_favored: match &row[10] {
                "F" => true,
                "O" => false,
                other => return Err(Error::Data(format!("{context}: bad coin {other:?}"))),
            },
            assigned: Arm::from_code(parse_u64(&row[11], &context)? as u8)?,
            rng_seed: parse_u64(&row[12], &context)?,
            rng_word_pos: row[13]
                .parse::<u128>()
                .map_err(|_| Error::Data(format!("{context}: bad rng position")))?,
        });
    }
    Ok(records)
}

/// One participant row of a randomization input file: an `id` column,
/// optional `site` and `excluded_arm` columns, and one column per binary
/// factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorRow {
    pub id: u32,
    pub site: Option<usize>,
    pub excluded_arm: Option<Arm>,
    pub factors: Vec<u8>,
}

/// Parses a randomization input file, returning the factor names and rows.
pub fn read_factor_csv<R: Read>(reader: R) -> Result<(Vec<String>, Vec<FactorRow>)> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let mut id_col = None;
    let mut site_col = None;
    let mut excl_col = None;
    let mut factor_cols = Vec::new();
    for (i, name) in header.iter().enumerate() {
        match name {
            "id" => id_col = Some(i),
            "site" => site_col = Some(i),
            "excluded_arm" => excl_col = Some(i),
            _ => factor_cols.push((i, name.to_string())),
        }
    }
    let id_col = id_col.ok_or_else(|| Error::Data("factor CSV needs an id column".into()))?;
    if factor_cols.is_empty() {
        return Err(Error::Data("factor CSV has no factor columns".into()));
    }
    let mut rows = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let context = format!("factor row {}", line + 1);
        let factors = factor_cols
            .iter()
            .map(|(i, name)| match &row[*i] {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Data(format!(
                    "{context}: factor {name} must be 0 or 1, got {other:?}"
                ))),
            })
            .collect::<Result<_>>()?;
        rows.push(FactorRow {
            id: parse_u64(&row[id_col], &context)? as u32,
            site: match site_col {
                Some(i) if !row[i].is_empty() => Some(parse_u64(&row[i], &context)? as usize),
                _ => None,
            },
            excluded_arm: match excl_col {
                Some(i) if !row[i].is_empty() => {
                    Some(Arm::from_code(parse_u64(&row[i], &context)? as u8)?)
                }
                _ => None,
            },
            factors,
        });
    }
    Ok((factor_cols.into_iter().map(|(_, n)| n).collect(), rows))
}

/// Serializes a fitted stage model as a tab-separated coefficient table.
pub fn write_qmodel(model: &crate::dtr::QModel) -> String {
    let mut out = String::new();
    out.push_str(&format!("# stage {} coefficient table\n", model.stage));
    out.push_str(&format!("lambda\t{}\n", fmt_f64(model.lambda)));
    out.push_str(&format!("intercept\t{}\n", fmt_f64(model.intercept)));
    for (name, coef) in model.column_names.iter().zip(&model.coefficients) {
        out.push_str(&format!("{name}\t{}\n", fmt_f64(*coef)));
    }
    out
}

/// Parses a coefficient table produced by [`write_qmodel`].
pub fn parse_qmodel(text: &str) -> Result<crate::dtr::QModel> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty coefficient table".into()))?;
    let stage = header
        .strip_prefix("# stage ")
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|s| s.parse::<u8>().ok())
        .ok_or_else(|| Error::Data(format!("bad coefficient table header {header:?}")))?;
    let mut lambda = None;
    let mut intercept = None;
    let mut column_names = Vec::new();
    let mut coefficients = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("bad coefficient line {line:?}")))?;
        let value = parse_f64(value, "coefficient table")?;
        match name {
            "lambda" => lambda = Some(value),
            "intercept" => intercept = Some(value),
            _ => {
                column_names.push(name.to_string());
                coefficients.push(value);
            }
        }
    }
    let model = crate::dtr::QModel {
        stage,
        intercept: intercept.ok_or_else(|| Error::Data("missing intercept".into()))?,
        lambda: lambda.ok_or_else(|| Error::Data("missing lambda".into()))?,
        coefficients,
        column_names,
    };
    model.validate()?;
    Ok(model)
}

/// Human-readable description of a fitted argmax policy.
pub fn policy_description(policy: &crate::dtr::FittedPolicy) -> String {
    let mut out = String::new();
    out.push_str("argmax treatment rule\n");
    out.push_str(&format!("stage-2 action mode: {:?}\n", policy.mode));
    out.push_str(
        "stage 1: assign the arm maximizing the stage-1 model over the four arms\n",
    );
    out.push_str(
        "stage 2: assign the feasible action maximizing the stage-2 model; \
         ties break to the lowest action index (keep, augments by arm code, \
         switches by arm code)\n",
    );
    for (label, model) in [("stage 1", &policy.stage1), ("stage 2", &policy.stage2)] {
        out.push_str(&format!(
            "{label}: lambda {}, {} of {} coefficients nonzero\n",
            fmt_f64(model.lambda),
            model.n_nonzero(),
            model.coefficients.len()
        ));
        let mut nonzero: Vec<(&String, f64)> = model
            .column_names
            .iter()
            .zip(&model.coefficients)
            .filter(|(_, c)| **c != 0.0)
            .map(|(n, c)| (n, *c))
            .collect();
        nonzero.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
        for (name, coef) in nonzero.into_iter().take(12) {
            out.push_str(&format!("  {name}\t{}\n", fmt_f64(coef)));
        }
    }
    out
}
