//! Patient data model, exclusion rules, composite labels, MV onset,
//! stratified splitting and the synthetic cohort generator.

pub mod io;
mod schema;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use schema::{ClinicalColumn, ColumnGroup, FeatureSchema};
pub use synth::{generate_synthetic, MeasurementRates, Quartiles, SynthConfig};

/// Hour from which windows are labeled and scored.
pub const FIRST_WINDOW_HOUR: usize = 4;
/// Stays longer than 20 days are excluded.
pub const MAX_STAY_HOURS: f64 = 480.0;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("schema has no column `{0}`")]
    MissingColumn(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cohort has {0} patients; at least 10 are needed to stratify")]
    TooFewPatients(usize),
    #[error("patient {patient}: {reason}")]
    InvalidRecord { patient: String, reason: String },
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

/// Hours × columns matrix of optional values. A cell is measured exactly
/// when it holds a value.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    hours: usize,
    width: usize,
    cells: Vec<Option<f64>>,
}

impl Grid {
    pub fn empty(hours: usize, width: usize) -> Self {
        Self {
            hours,
            width,
            cells: vec![None; hours * width],
        }
    }

    pub fn hours(&self) -> usize {
        self.hours
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, hour: usize, col: usize) -> Option<f64> {
        self.cells[hour * self.width + col]
    }

    pub fn set(&mut self, hour: usize, col: usize, value: Option<f64>) {
        self.cells[hour * self.width + col] = value;
    }

    pub fn measured(&self, hour: usize, col: usize) -> bool {
        self.get(hour, col).is_some()
    }

    pub fn row(&self, hour: usize) -> &[Option<f64>] {
        &self.cells[hour * self.width..(hour + 1) * self.width]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub mv_onset_hour: Option<usize>,
    pub mv_duration_hours: Option<f64>,
    pub died_inpatient: bool,
    pub noninvasive_mv: bool,
    pub los_hours: f64,
}

impl OutcomeRecord {
    pub fn ventilated(&self) -> bool {
        self.mv_onset_hour.is_some()
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.los_hours.is_finite() && self.los_hours > 0.0) {
            return Err(format!(
                "los_hours must be positive, got {}",
                self.los_hours
            ));
        }
        match (self.mv_onset_hour, self.mv_duration_hours) {
            (None, None) => Ok(()),
            (Some(onset), Some(d)) => {
                if !(d.is_finite() && d > 0.0) {
                    Err(format!("mv_duration_hours must be positive, got {d}"))
                } else if onset as f64 >= self.los_hours {
                    Err(format!(
                        "mv_onset_hour {onset} is not before los_hours {}",
                        self.los_hours
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Err("mv_onset_hour and mv_duration_hours must be given together".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

/// One ICU stay binned to hours since admission.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub grid: Grid,
    pub comorbidities: Vec<bool>,
    pub outcome: OutcomeRecord,
    pub partition: Option<Partition>,
}

impl PatientRecord {
    pub fn hours(&self) -> usize {
        self.grid.hours()
    }
}

/// Number of hourly bins covering a stay.
pub fn stay_hours(los_hours: f64) -> usize {
    (los_hours.ceil() as usize).max(1)
}

/// First hour at which FiO2 and PEEP are both recorded.
pub fn derive_mv_onset(
    record: &PatientRecord,
    schema: &FeatureSchema,
) -> Result<Option<usize>, CohortError> {
    let fio2 = schema.fio2_index()?;
    let peep = schema.peep_index()?;
    Ok((0..record.hours())
        .find(|&t| record.grid.measured(t, fio2) && record.grid.measured(t, peep)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    ShortStay,
    LongStay,
    EarlyMv,
    NoninvasiveMv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Reject(ExclusionReason),
}

pub fn exclude(outcome: &OutcomeRecord) -> Verdict {
    use ExclusionReason::*;
    if outcome.los_hours < FIRST_WINDOW_HOUR as f64 {
        Verdict::Reject(ShortStay)
    } else if outcome.los_hours > MAX_STAY_HOURS {
        Verdict::Reject(LongStay)
    } else if outcome.mv_onset_hour.is_some_and(|h| h < FIRST_WINDOW_HOUR) {
        Verdict::Reject(EarlyMv)
    } else if outcome.noninvasive_mv {
        Verdict::Reject(NoninvasiveMv)
    } else {
        Verdict::Keep
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CompositeScore(u8);

impl CompositeScore {
    pub fn value(self) -> u8 {
        self.0
    }

    pub fn positive(self) -> bool {
        self.0 >= 1
    }
}

/// 0 without MV; 1 for MV of at most 24 h survived; 2 for longer MV or
/// short MV followed by inpatient death.
pub fn composite_label(outcome: &OutcomeRecord) -> CompositeScore {
    match outcome.mv_duration_hours {
        None => CompositeScore(0),
        Some(d) if d > 24.0 || outcome.died_inpatient => CompositeScore(2),
        Some(_) => CompositeScore(1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowLabel {
    pub hour: usize,
    pub target: f64,
    pub evaluable: bool,
}

/// One label per hour of the stay. Hours before the first window hour and
/// hours at or after MV onset are not evaluable.
pub fn window_labels(record: &PatientRecord, horizon_hours: usize) -> Vec<WindowLabel> {
    let score = f64::from(composite_label(&record.outcome).value());
    let onset = record.outcome.mv_onset_hour;
    (0..record.hours())
        .map(|t| {
            let evaluable = t >= FIRST_WINDOW_HOUR && onset.is_none_or(|o| t < o);
            let target = match onset {
                Some(o) if evaluable && t + horizon_hours >= o => score,
                _ => 0.0,
            };
            WindowLabel {
                hour: t,
                target,
                evaluable,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction_of_train: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            val_fraction_of_train: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<PatientRecord>,
    pub validation: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Splits `total` across strata proportionally, rounding by largest remainder.
fn allocate(strata: &[usize], total: usize) -> Vec<usize> {
    let n: usize = strata.iter().sum();
    if n == 0 {
        return vec![0; strata.len()];
    }
    let exact: Vec<f64> = strata
        .iter()
        .map(|&s| s as f64 * total as f64 / n as f64)
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = total - out.iter().sum::<usize>();
    for i in order {
        if missing == 0 {
            break;
        }
        if out[i] < strata[i] {
            out[i] += 1;
            missing -= 1;
        }
    }
    out
}

/// Patient-level split stratified by ventilation status. Validation is
/// carved out of the training share. Records come back tagged.
pub fn split_cohort(cohort: Vec<PatientRecord>, spec: &SplitSpec) -> Result<Split, CohortError> {
    if cohort.len() < 10 {
        return Err(CohortError::TooFewPatients(cohort.len()));
    }
    let frac_ok = |f: f64| f > 0.0 && f < 1.0;
    if !frac_ok(spec.train_fraction) || !frac_ok(spec.val_fraction_of_train) {
        return Err(CohortError::InvalidConfig(format!(
            "split fractions must lie in (0, 1): train {}, validation {}",
            spec.train_fraction, spec.val_fraction_of_train
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut strata: [Vec<PatientRecord>; 2] = [Vec::new(), Vec::new()];
    for r in cohort {
        let s = usize::from(r.outcome.ventilated());
        strata[s].push(r);
    }
    for s in strata.iter_mut() {
        s.shuffle(&mut rng);
    }
    let n: usize = strata.iter().map(Vec::len).sum();
    let n_test = ((1.0 - spec.train_fraction) * n as f64).round() as usize;
    let sizes = [strata[0].len(), strata[1].len()];
    let test_alloc = allocate(&sizes, n_test);
    let train_side: Vec<usize> = sizes.iter().zip(&test_alloc).map(|(s, t)| s - t).collect();
    let n_val =
        (spec.val_fraction_of_train * train_side.iter().sum::<usize>() as f64).round() as usize;
    let val_alloc = allocate(&train_side, n_val);

    let mut split = Split::default();
    for (k, stratum) in strata.into_iter().enumerate() {
        for (i, mut r) in stratum.into_iter().enumerate() {
            let part = if i < test_alloc[k] {
                Partition::Test
            } else if i < test_alloc[k] + val_alloc[k] {
                Partition::Validation
            } else {
                Partition::Train
            };
            r.partition = Some(part);
            match part {
                Partition::Train => split.train.push(r),
                Partition::Validation => split.validation.push(r),
                Partition::Test => split.test.push(r),
            }
        }
    }
    Ok(split)
}
