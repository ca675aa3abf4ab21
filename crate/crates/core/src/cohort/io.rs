//! On-disk cohort format: `patients.csv`, long-format `events.csv`, and the
//! schema as JSON.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{stay_hours, CohortError, FeatureSchema, OutcomeRecord, PatientRecord};
use crate::features::{bin_hourly, Measurement};

pub const PATIENTS_FILE: &str = "patients.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const SCHEMA_FILE: &str = "schema.json";

const FIXED_PATIENT_COLUMNS: [&str; 6] = [
    "patient_id",
    "los_hours",
    "mv_onset_hour",
    "mv_duration_hours",
    "died_inpatient",
    "noninvasive_mv",
];

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRow {
    pub patient_id: String,
    pub outcome: OutcomeRecord,
    pub comorbidities: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub patient_id: String,
    pub measurement: Measurement,
}

/// Unbinned cohort exactly as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCohort {
    pub patients: Vec<PatientRow>,
    pub events: Vec<Event>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CohortError + '_ {
    move |source| CohortError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> CohortError {
    CohortError::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CohortError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(source) => CohortError::Io {
                path: path.display().to_string(),
                source,
            },
            _ => unreachable!(),
        }
    } else {
        parse_err(path, e.to_string())
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn parse_flag(path: &Path, line: u64, field: &str, s: &str) -> Result<bool, CohortError> {
    match s.trim() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(parse_err(
            path,
            format!("line {line}: `{field}` must be 0 or 1, got `{other}`"),
        )),
    }
}

fn parse_num<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    field: &str,
    s: &str,
) -> Result<T, CohortError> {
    s.trim().parse().map_err(|_| {
        parse_err(
            path,
            format!("line {line}: cannot parse `{field}` from `{s}`"),
        )
    })
}

pub fn write_schema(path: &Path, schema: &FeatureSchema) -> Result<(), CohortError> {
    let text = serde_json::to_string_pretty(schema).expect("schema serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_schema(path: &Path) -> Result<FeatureSchema, CohortError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let schema: FeatureSchema =
        serde_json::from_str(&text).map_err(|e| parse_err(path, e.to_string()))?;
    schema.validate()?;
    Ok(schema)
}

pub fn write_patients<W: Write>(
    out: W,
    rows: &[PatientRow],
    schema: &FeatureSchema,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = FIXED_PATIENT_COLUMNS.to_vec();
    header.extend(schema.comorbidity_columns.iter().map(String::as_str));
    w.write_record(&header)?;
    for r in rows {
        let o = &r.outcome;
        let mut rec = vec![
            r.patient_id.clone(),
            o.los_hours.to_string(),
            o.mv_onset_hour.map(|h| h.to_string()).unwrap_or_default(),
            o.mv_duration_hours
                .map(|d| d.to_string())
                .unwrap_or_default(),
            flag(o.died_inpatient).into(),
            flag(o.noninvasive_mv).into(),
        ];
        rec.extend(r.comorbidities.iter().map(|&b| flag(b).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events<W: Write>(out: W, events: &[Event]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient_id", "hour", "column_name", "value"])?;
    for e in events {
        w.write_record([
            e.patient_id.as_str(),
            &e.measurement.hour.to_string(),
            &e.measurement.column,
            &e.measurement.value.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads patient rows; the comorbidity header must match the schema exactly.
pub fn read_patients<R: Read>(
    input: R,
    path: &Path,
    schema: &FeatureSchema,
) -> Result<Vec<PatientRow>, CohortError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected: Vec<&str> = FIXED_PATIENT_COLUMNS
        .iter()
        .copied()
        .chain(schema.comorbidity_columns.iter().map(String::as_str))
        .collect();
    let found: Vec<&str> = header.iter().collect();
    if found != expected {
        let first_diff = expected
            .iter()
            .zip(&found)
            .position(|(a, b)| a != b)
            .unwrap_or(expected.len().min(found.len()));
        return Err(CohortError::SchemaMismatch(format!(
            "{}: header differs from schema at column {} (expected {:?}, found {:?})",
            path.display(),
            first_diff,
            expected.get(first_diff),
            found.get(first_diff)
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let opt = |i: usize| rec.get(i).map(str::trim).filter(|s| !s.is_empty());
        let outcome = OutcomeRecord {
            los_hours: parse_num(path, line, "los_hours", &rec[1])?,
            mv_onset_hour: opt(2)
                .map(|s| parse_num(path, line, "mv_onset_hour", s))
                .transpose()?,
            mv_duration_hours: opt(3)
                .map(|s| parse_num(path, line, "mv_duration_hours", s))
                .transpose()?,
            died_inpatient: parse_flag(path, line, "died_inpatient", &rec[4])?,
            noninvasive_mv: parse_flag(path, line, "noninvasive_mv", &rec[5])?,
        };
        let comorbidities = (FIXED_PATIENT_COLUMNS.len()..rec.len())
            .map(|i| parse_flag(path, line, &header[i], &rec[i]))
            .collect::<Result<_, _>>()?;
        rows.push(PatientRow {
            patient_id: rec[0].to_string(),
            outcome,
            comorbidities,
        });
    }
    Ok(rows)
}

pub fn read_events<R: Read>(input: R, path: &Path) -> Result<Vec<Event>, CohortError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["patient_id", "hour", "column_name", "value"] {
        return Err(parse_err(
            path,
            format!("expected header patient_id,hour,column_name,value, found {header:?}"),
        ));
    }
    let mut events = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        events.push(Event {
            patient_id: rec[0].to_string(),
            measurement: Measurement {
                hour: parse_num(path, line, "hour", &rec[1])?,
                column: rec[2].to_string(),
                value: parse_num(path, line, "value", &rec[3])?,
            },
        });
    }
    Ok(events)
}

impl RawCohort {
    pub fn write_dir(&self, dir: &Path, schema: &FeatureSchema) -> Result<(), CohortError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_schema(&dir.join(SCHEMA_FILE), schema)?;
        let p = dir.join(PATIENTS_FILE);
        let f = File::create(&p).map_err(io_err(&p))?;
        write_patients(BufWriter::new(f), &self.patients, schema).map_err(|e| csv_err(&p, e))?;
        let e = dir.join(EVENTS_FILE);
        let f = File::create(&e).map_err(io_err(&e))?;
        write_events(BufWriter::new(f), &self.events).map_err(|err| csv_err(&e, err))?;
        Ok(())
    }

    pub fn read_dir(dir: &Path, schema: &FeatureSchema) -> Result<Self, CohortError> {
        let p = dir.join(PATIENTS_FILE);
        let f = File::open(&p).map_err(io_err(&p))?;
        let patients = read_patients(BufReader::new(f), &p, schema)?;
        let e = dir.join(EVENTS_FILE);
        let f = File::open(&e).map_err(io_err(&e))?;
        let events = read_events(BufReader::new(f), &e)?;
        Ok(Self { patients, events })
    }

    /// Validates rows and bins each patient's events into an hourly grid.
    pub fn assemble(&self, schema: &FeatureSchema) -> Result<Vec<PatientRecord>, CohortError> {
        let mut slot: HashMap<&str, usize> = HashMap::with_capacity(self.patients.len());
        for (i, p) in self.patients.iter().enumerate() {
            if slot.insert(p.patient_id.as_str(), i).is_some() {
                return Err(CohortError::InvalidRecord {
                    patient: p.patient_id.clone(),
                    reason: "duplicate patient_id".into(),
                });
            }
        }
        let mut per_patient: Vec<Vec<Measurement>> = vec![Vec::new(); self.patients.len()];
        for e in &self.events {
            let i = *slot
                .get(e.patient_id.as_str())
                .ok_or_else(|| CohortError::InvalidRecord {
                    patient: e.patient_id.clone(),
                    reason: "events reference a patient missing from patients.csv".into(),
                })?;
            per_patient[i].push(e.measurement.clone());
        }
        self.patients
            .iter()
            .zip(per_patient)
            .map(|(p, ms)| {
                let invalid = |reason: String| CohortError::InvalidRecord {
                    patient: p.patient_id.clone(),
                    reason,
                };
                p.outcome.validate().map_err(invalid)?;
                if p.comorbidities.len() != schema.comorbidity_width() {
                    return Err(invalid(format!(
                        "{} comorbidity flags for a schema with {}",
                        p.comorbidities.len(),
                        schema.comorbidity_width()
                    )));
                }
                let hours = stay_hours(p.outcome.los_hours);
                let grid = bin_hourly(&ms, hours, schema).map_err(|e| match e {
                    crate::features::FeatureError::UnknownColumn(c) => {
                        CohortError::UnknownColumn(c)
                    }
                    other => invalid(other.to_string()),
                })?;
                Ok(PatientRecord {
                    patient_id: p.patient_id.clone(),
                    grid,
                    comorbidities: p.comorbidities.clone(),
                    outcome: p.outcome.clone(),
                    partition: None,
                })
            })
            .collect()
    }
}
