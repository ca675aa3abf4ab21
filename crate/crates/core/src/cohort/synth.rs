//! Synthetic ICU cohorts calibrated to published cohort statistics.
//!
//! Each patient draws from its own ChaCha stream keyed by (seed, index), so a
//! cohort is identical whether generated serially or in parallel. Vitals and
//! labs follow a per-column hourly Bernoulli measurement process with a
//! bounded gap, started before admission so that time-since-last-measured is
//! stationary from the first labeled hour on. Ventilated patients drift
//! linearly toward respiratory failure ahead of onset, scaled by
//! `signal_strength`; at strength 0 both classes are statistically identical
//! in every observed input.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use super::io::{Event, PatientRow, RawCohort};
use super::{
    stay_hours, CohortError, ColumnGroup, FeatureSchema, OutcomeRecord, PatientRecord,
    FIRST_WINDOW_HOUR, MAX_STAY_HOURS,
};
use crate::features::Measurement;

/// Ratio between the interquartile range and the standard deviation of a
/// normal distribution.
const IQR_TO_SD: f64 = 1.349;
const BURN_IN_HOURS: i64 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quartiles {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Quartiles {
    pub const fn new(median: f64, q1: f64, q3: f64) -> Self {
        Self { median, q1, q3 }
    }

    fn validate(&self, what: &str) -> Result<(), CohortError> {
        if !(self.q1 > 0.0 && self.q1 < self.median && self.median < self.q3 && self.q3.is_finite())
        {
            return Err(CohortError::InvalidConfig(format!(
                "{what}: need 0 < q1 < median < q3, got {} ({}-{})",
                self.median, self.q1, self.q3
            )));
        }
        Ok(())
    }

    fn sigma(&self) -> f64 {
        (self.q3 / self.q1).ln() / IQR_TO_SD
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementRates {
    pub vital: f64,
    pub lab: f64,
    /// Per-column rates that replace the group default.
    pub overrides: BTreeMap<String, f64>,
}

impl Default for MeasurementRates {
    fn default() -> Self {
        Self {
            vital: 0.8,
            lab: 0.3,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub ventilated_fraction: f64,
    pub onset_median_iqr: Quartiles,
    pub los_vent_median_iqr: Quartiles,
    pub los_nonvent_median_iqr: Quartiles,
    pub mv_duration_median_iqr: Quartiles,
    pub mortality_vent: f64,
    pub mortality_nonvent: f64,
    /// Expected measurements per hour for vitals and labs.
    pub measurement_rate: MeasurementRates,
    /// Longest run of hours a vital or lab may go unmeasured.
    pub max_measurement_gap: usize,
    pub signal_strength: f64,
    /// Length of the pre-onset deterioration ramp.
    pub deterioration_hours: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            ventilated_fraction: 0.1926,
            onset_median_iqr: Quartiles::new(16.0, 8.0, 41.0),
            los_vent_median_iqr: Quartiles::new(92.0, 49.0, 173.8),
            los_nonvent_median_iqr: Quartiles::new(42.6, 25.0, 74.7),
            mv_duration_median_iqr: Quartiles::new(30.0, 12.0, 72.0),
            mortality_vent: 0.1574,
            mortality_nonvent: 0.0894,
            measurement_rate: MeasurementRates::default(),
            max_measurement_gap: 4,
            signal_strength: 1.0,
            deterioration_hours: 36.0,
            seed: 0,
        }
    }
}

fn fraction(name: &str, v: f64) -> Result<(), CohortError> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CohortError::InvalidConfig(format!(
            "{name} must lie in (0, 1), got {v}"
        )))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |m: String| Err(CohortError::InvalidConfig(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        fraction("ventilated_fraction", self.ventilated_fraction)?;
        fraction("mortality_vent", self.mortality_vent)?;
        fraction("mortality_nonvent", self.mortality_nonvent)?;
        self.onset_median_iqr.validate("onset_median_iqr")?;
        self.los_vent_median_iqr.validate("los_vent_median_iqr")?;
        self.los_nonvent_median_iqr
            .validate("los_nonvent_median_iqr")?;
        self.mv_duration_median_iqr
            .validate("mv_duration_median_iqr")?;
        if self.onset_median_iqr.median >= self.los_vent_median_iqr.median {
            return bad(format!(
                "onset median {} must be below the ventilated LOS median {}",
                self.onset_median_iqr.median, self.los_vent_median_iqr.median
            ));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return bad(format!(
                "signal_strength must be finite and >= 0, got {}",
                self.signal_strength
            ));
        }
        if !(self.deterioration_hours.is_finite() && self.deterioration_hours > 0.0) {
            return bad("deterioration_hours must be positive".into());
        }
        if self.max_measurement_gap == 0 {
            return bad("max_measurement_gap must be at least 1".into());
        }
        let rates = [
            ("vital", self.measurement_rate.vital),
            ("lab", self.measurement_rate.lab),
        ];
        for (name, r) in rates.into_iter().chain(
            self.measurement_rate
                .overrides
                .iter()
                .map(|(k, v)| (k.as_str(), *v)),
        ) {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!(
                    "measurement rate for {name} must lie in (0, 1], got {r}"
                ));
            }
        }
        Ok(())
    }
}

/// Location of a log-normal whose median, after truncation to `[lo, hi]`,
/// equals `target`.
fn truncated_location(target: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let n = StdNormal::standard();
    let gap = |mu: f64| {
        let c = |x: f64| n.cdf((x.ln() - mu) / sigma);
        c(target) - 0.5 * (c(lo) + c(hi))
    };
    let (mut a, mut b) = (target.ln() - 6.0 * sigma, target.ln() + 6.0 * sigma);
    // gap is decreasing in mu.
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if gap(m) > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn log_normal(q: &Quartiles, lo: f64, hi: f64) -> LogNormal<f64> {
    let sigma = q.sigma();
    LogNormal::new(truncated_location(q.median, sigma, lo, hi), sigma).expect("valid log-normal")
}

fn synthetic_sd(name: &str, reference: f64) -> f64 {
    match name {
        "heart_rate" => 15.0,
        "o2sat" => 2.5,
        "temperature" => 0.6,
        "sbp" => 18.0,
        "map" => 12.0,
        "dbp" => 11.0,
        "resp_rate" => 4.0,
        "etco2" => 5.0,
        "base_excess" => 3.0,
        "bicarbonate" => 3.0,
        "fio2" => 0.08,
        "ph" => 0.05,
        "paco2" => 6.0,
        "pao2" => 20.0,
        "sao2" => 2.5,
        "peep" => 2.0,
        "ast" => 20.0,
        "bun" => 8.0,
        "alkaline_phosphatase" => 30.0,
        "calcium" => 0.6,
        "chloride" => 4.0,
        "creatinine" => 0.4,
        "bilirubin_direct" => 0.2,
        "glucose" => 30.0,
        "lactate" => 0.6,
        "magnesium" => 0.25,
        "phosphate" => 0.7,
        "potassium" => 0.4,
        "bilirubin_total" => 0.5,
        "troponin_i" => 0.05,
        "hematocrit" => 5.0,
        "hemoglobin" => 1.8,
        "ptt" => 6.0,
        "wbc" => 3.0,
        "fibrinogen" => 80.0,
        "platelets" => 70.0,
        "sodium" => 3.5,
        "albumin" => 0.5,
        "inr" => 0.2,
        "alt" => 18.0,
        "anion_gap" => 3.0,
        "ionized_calcium" => 0.06,
        "ldh" => 60.0,
        "ck" => 80.0,
        "bnp" => 80.0,
        "crp" => 4.0,
        "procalcitonin" => 0.1,
        "rdw" => 1.2,
        "mcv" => 5.0,
        "lymphocytes" => 8.0,
        "age" => 17.8,
        "height" => 10.0,
        "weight" => 18.0,
        _ => (0.1 * reference.abs()).max(1.0),
    }
}

/// Mean shift per unit signal strength at full deterioration, in SDs.
fn deterioration(name: &str) -> f64 {
    match name {
        "o2sat" => -1.0,
        "resp_rate" => 0.6,
        "pao2" => -0.5,
        "sao2" => -0.4,
        "fio2" => 0.4,
        "heart_rate" => 0.3,
        _ => 0.0,
    }
}

fn comorbidity_prevalence(name: &str) -> f64 {
    match name {
        "hypertension_uncomplicated" => 0.40,
        "fluid_electrolyte" => 0.30,
        "cardiac_arrhythmias" => 0.28,
        "diabetes_uncomplicated" => 0.22,
        "congestive_heart_failure" => 0.20,
        "chronic_pulmonary" => 0.20,
        "renal_failure" => 0.18,
        "coronary_artery_disease" => 0.18,
        "atrial_fibrillation" => 0.16,
        "obesity" => 0.14,
        "depression" => 0.14,
        "deficiency_anemia" => 0.12,
        "hypothyroidism" => 0.11,
        "sleep_apnea" => 0.08,
        _ => 0.05,
    }
}

/// Conditions whose prevalence rises among ventilated patients when signal
/// is injected.
fn respiratory_risk(name: &str) -> bool {
    matches!(
        name,
        "chronic_pulmonary"
            | "congestive_heart_failure"
            | "pulmonary_circulation"
            | "obesity"
            | "sleep_apnea"
            | "neuromuscular_disease"
            | "pneumonia_history"
            | "sepsis_history"
            | "copd_exacerbation_history"
    )
}

const MEDICATION_PREVALENCE: f64 = 0.2;
const MEDICATION_STOP_RATE: f64 = 0.05;

struct Column {
    name: String,
    group: ColumnGroup,
    mean: f64,
    sd: f64,
    rate: f64,
    drift: f64,
}

struct Plan {
    columns: Vec<Column>,
    comorbidities: Vec<(f64, bool)>,
    peep: usize,
    fio2: usize,
    onset: LogNormal<f64>,
    los_vent: LogNormal<f64>,
    los_nonvent: LogNormal<f64>,
    duration: LogNormal<f64>,
}

impl Plan {
    fn new(cfg: &SynthConfig, schema: &FeatureSchema) -> Result<Self, CohortError> {
        cfg.validate()?;
        schema.validate()?;
        let refs = schema.references();
        let columns = schema
            .clinical_columns
            .iter()
            .zip(refs)
            .map(|(c, mean)| {
                let default_rate = match c.group {
                    ColumnGroup::Vital => cfg.measurement_rate.vital,
                    _ => cfg.measurement_rate.lab,
                };
                Column {
                    name: c.name.clone(),
                    group: c.group,
                    mean,
                    sd: synthetic_sd(&c.name, mean),
                    rate: *cfg
                        .measurement_rate
                        .overrides
                        .get(&c.name)
                        .unwrap_or(&default_rate),
                    drift: deterioration(&c.name),
                }
            })
            .collect();
        let min_los = FIRST_WINDOW_HOUR as f64;
        Ok(Self {
            columns,
            comorbidities: schema
                .comorbidity_columns
                .iter()
                .map(|c| (comorbidity_prevalence(c), respiratory_risk(c)))
                .collect(),
            peep: schema.peep_index()?,
            fio2: schema.fio2_index()?,
            onset: log_normal(&cfg.onset_median_iqr, min_los, MAX_STAY_HOURS),
            los_vent: log_normal(&cfg.los_vent_median_iqr, min_los, MAX_STAY_HOURS),
            los_nonvent: log_normal(&cfg.los_nonvent_median_iqr, min_los, MAX_STAY_HOURS),
            duration: log_normal(&cfg.mv_duration_median_iqr, 0.0, f64::INFINITY),
        })
    }
}

fn centi_floor(x: f64) -> f64 {
    (x * 100.0).floor() / 100.0
}

/// A time inside hour `t`, strictly before `los`.
fn time_in_hour(rng: &mut ChaCha8Rng, t: usize, los: f64) -> f64 {
    let span = (los - t as f64).min(1.0);
    t as f64 + centi_floor(rng.random::<f64>() * span)
}

fn generate_patient(cfg: &SynthConfig, plan: &Plan, index: usize) -> (PatientRow, Vec<Event>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let min_los = FIRST_WINDOW_HOUR as f64;

    let vent = rng.random::<f64>() < cfg.ventilated_fraction;
    let (los, onset) = loop {
        if vent {
            let onset = plan.onset.sample(&mut rng).round();
            let los = (plan.los_vent.sample(&mut rng) * 100.0).round() / 100.0;
            if onset >= min_los && onset < los && los <= MAX_STAY_HOURS {
                break (los, Some(onset as usize));
            }
        } else {
            let los = (plan.los_nonvent.sample(&mut rng) * 100.0).round() / 100.0;
            if (min_los..=MAX_STAY_HOURS).contains(&los) {
                break (los, None);
            }
        }
    };
    let duration = onset.map(|o| {
        let d = (plan.duration.sample(&mut rng) * 100.0).round() / 100.0;
        d.clamp(0.01, los - o as f64)
    });
    let mortality = if vent {
        cfg.mortality_vent
    } else {
        cfg.mortality_nonvent
    };
    let died = rng.random::<f64>() < mortality;

    let lift = 1.0 + 0.5 * cfg.signal_strength;
    let comorbidities = plan
        .comorbidities
        .iter()
        .map(|&(p, resp)| {
            let p = if vent && resp {
                (p * lift).min(0.95)
            } else {
                p
            };
            rng.random::<f64>() < p
        })
        .collect();

    let hours = stay_hours(los);
    let ramp = |t: usize| match onset {
        Some(o) => {
            let start = o as f64 - cfg.deterioration_hours;
            ((t as f64 - start) / cfg.deterioration_hours).clamp(0.0, 1.0)
        }
        None => 0.0,
    };
    let mut measurements: Vec<(f64, usize, f64)> = Vec::new();
    for (j, col) in plan.columns.iter().enumerate() {
        match col.group {
            ColumnGroup::Vital | ColumnGroup::Lab if j != plan.peep => {
                let baseline = col.mean + 0.6 * col.sd * std_normal.sample(&mut rng);
                let mut gap = 0usize;
                for t in -BURN_IN_HOURS..hours as i64 {
                    gap += 1;
                    let take = gap >= cfg.max_measurement_gap || rng.random::<f64>() < col.rate;
                    if !take {
                        continue;
                    }
                    gap = 0;
                    if t < 0 {
                        continue;
                    }
                    let t = t as usize;
                    let shift = cfg.signal_strength * col.drift * col.sd * ramp(t);
                    let draws = if rng.random::<f64>() < 0.1 { 2 } else { 1 };
                    for _ in 0..draws {
                        let v = baseline + shift + 0.5 * col.sd * std_normal.sample(&mut rng);
                        measurements.push((time_in_hour(&mut rng, t, los), j, v));
                    }
                }
            }
            ColumnGroup::Vital | ColumnGroup::Lab => {}
            ColumnGroup::Demographic => {
                let v = match col.name.as_str() {
                    "male" => f64::from(u8::from(rng.random::<f64>() < 0.55)),
                    "emergency_admission" => f64::from(u8::from(rng.random::<f64>() < 0.6)),
                    "age" => (col.mean + col.sd * std_normal.sample(&mut rng)).clamp(18.0, 95.0),
                    "weight" => (col.mean + col.sd * std_normal.sample(&mut rng)).max(35.0),
                    _ => col.mean + col.sd * std_normal.sample(&mut rng),
                };
                measurements.push((0.0, j, v));
            }
            ColumnGroup::Medication => {
                let start =
                    MEDICATION_STOP_RATE * MEDICATION_PREVALENCE / (1.0 - MEDICATION_PREVALENCE);
                let mut on = rng.random::<f64>() < MEDICATION_PREVALENCE;
                measurements.push((0.0, j, f64::from(u8::from(on))));
                for t in 1..hours {
                    let flip = if on { MEDICATION_STOP_RATE } else { start };
                    if rng.random::<f64>() < flip {
                        on = !on;
                        measurements.push((t as f64, j, f64::from(u8::from(on))));
                    }
                }
            }
        }
    }
    // Demographics share their column's index across patients; fix BMI from
    // height and weight when all three exist.
    let find = |name: &str| plan.columns.iter().position(|c| c.name == name);
    if let (Some(h), Some(w), Some(b)) = (find("height"), find("weight"), find("bmi")) {
        let val = |k: usize| measurements.iter().find(|m| m.1 == k).map(|m| m.2);
        if let (Some(hv), Some(wv)) = (val(h), val(w)) {
            for m in measurements.iter_mut().filter(|m| m.1 == b) {
                m.2 = wv / (hv / 100.0).powi(2);
            }
        }
    }
    if let (Some(o), Some(d)) = (onset, duration) {
        let end = ((o as f64 + d).ceil() as usize).min(hours);
        for t in o..end {
            let f = (0.5 + 0.1 * std_normal.sample(&mut rng)).clamp(0.21, 1.0);
            let p = (6.0 + 2.0 * std_normal.sample(&mut rng)).clamp(0.0, 20.0);
            let time = t as f64;
            measurements.push((time, plan.fio2, f));
            measurements.push((time, plan.peep, p));
        }
    }
    measurements.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let patient_id = format!("P{index:06}");
    let events = measurements
        .into_iter()
        .map(|(hour, j, value)| Event {
            patient_id: patient_id.clone(),
            measurement: Measurement {
                hour,
                column: plan.columns[j].name.clone(),
                value,
            },
        })
        .collect();
    let row = PatientRow {
        patient_id,
        outcome: OutcomeRecord {
            mv_onset_hour: onset,
            mv_duration_hours: duration,
            died_inpatient: died,
            noninvasive_mv: false,
            los_hours: los,
        },
        comorbidities,
    };
    (row, events)
}

/// Generates the on-disk representation of a synthetic cohort.
pub fn generate_raw(cfg: &SynthConfig, schema: &FeatureSchema) -> Result<RawCohort, CohortError> {
    let plan = Plan::new(cfg, schema)?;
    let parts: Vec<(PatientRow, Vec<Event>)> = (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(cfg, &plan, i))
        .collect();
    let mut raw = RawCohort::default();
    for (row, events) in parts {
        raw.patients.push(row);
        raw.events.extend(events);
    }
    Ok(raw)
}

/// Generates and bins a synthetic cohort.
pub fn generate_synthetic(
    cfg: &SynthConfig,
    schema: &FeatureSchema,
) -> Result<Vec<PatientRecord>, CohortError> {
    generate_raw(cfg, schema)?.assemble(schema)
}
