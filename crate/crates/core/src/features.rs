//! Hourly binning, forward fill with time-since-last-measured counters, and
//! standardization.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{FeatureSchema, Grid, PatientRecord};

pub const DEFAULT_TSLM_CAP: f64 = 72.0;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("measurement of `{column}` at hour {hour} lies outside [0, {hours})")]
    HourOutOfRange {
        column: String,
        hour: f64,
        hours: usize,
    },
    #[error("non-finite value for `{column}` at hour {hour}")]
    NonFinite { column: String, hour: f64 },
    #[error("input is already standardized")]
    AlreadyStandardized,
    #[error("standardizer has {expected} columns, input has {found}")]
    WidthMismatch { expected: usize, found: usize },
}

/// One raw measurement; `hour` is fractional hours since admission.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub hour: f64,
    pub column: String,
    pub value: f64,
}

/// Median of each column's measurements within each whole hour.
pub fn bin_hourly(
    measurements: &[Measurement],
    hours: usize,
    schema: &FeatureSchema,
) -> Result<Grid, FeatureError> {
    let index = schema.name_to_index();
    let width = schema.clinical_width();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); hours * width];
    for m in measurements {
        let col = *index
            .get(m.column.as_str())
            .ok_or_else(|| FeatureError::UnknownColumn(m.column.clone()))?;
        if !(m.hour >= 0.0 && m.hour < hours as f64) {
            return Err(FeatureError::HourOutOfRange {
                column: m.column.clone(),
                hour: m.hour,
                hours,
            });
        }
        if !m.value.is_finite() {
            return Err(FeatureError::NonFinite {
                column: m.column.clone(),
                hour: m.hour,
            });
        }
        buckets[m.hour.floor() as usize * width + col].push(m.value);
    }
    let mut grid = Grid::empty(hours, width);
    for (i, b) in buckets.iter_mut().enumerate() {
        if !b.is_empty() {
            grid.set(i / width, i % width, Some(median(b)));
        }
    }
    Ok(grid)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fully imputed hourly inputs for one stay.
#[derive(Clone, Debug, PartialEq)]
pub struct HourlyInput {
    pub hours: usize,
    /// `hours x clinical_width`, row-major.
    pub values: Vec<f64>,
    /// `hours x tracked_width`, row-major.
    pub tslm: Vec<f64>,
    pub comorbidities: Vec<f64>,
    pub standardized: bool,
}

impl HourlyInput {
    pub fn clinical_width(&self) -> usize {
        self.values.len() / self.hours.max(1)
    }

    pub fn tracked_width(&self) -> usize {
        self.tslm.len() / self.hours.max(1)
    }

    pub fn values_at(&self, hour: usize) -> &[f64] {
        let w = self.clinical_width();
        &self.values[hour * w..(hour + 1) * w]
    }

    pub fn tslm_at(&self, hour: usize) -> &[f64] {
        let w = self.tracked_width();
        &self.tslm[hour * w..(hour + 1) * w]
    }

    pub fn from_record(record: &PatientRecord, schema: &FeatureSchema, tslm_cap: f64) -> Self {
        let mut input = forward_fill(&record.grid, schema, tslm_cap);
        input.comorbidities = record
            .comorbidities
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        input
    }
}

/// Carries the latest measurement forward. Before a column's first
/// measurement the schema reference is used and its counter sits at the cap.
pub fn forward_fill(grid: &Grid, schema: &FeatureSchema, tslm_cap: f64) -> HourlyInput {
    let hours = grid.hours();
    let width = grid.width();
    let tracked = schema.tracked_indices();
    let mut last = schema.references();
    let mut since = vec![tslm_cap; width];
    let mut values = Vec::with_capacity(hours * width);
    let mut tslm = Vec::with_capacity(hours * tracked.len());
    for t in 0..hours {
        for (j, cell) in grid.row(t).iter().enumerate() {
            match cell {
                Some(v) => {
                    last[j] = *v;
                    since[j] = 0.0;
                }
                None if t > 0 => since[j] = (since[j] + 1.0).min(tslm_cap),
                None => {}
            }
        }
        values.extend_from_slice(&last);
        tslm.extend(tracked.iter().map(|&j| since[j]));
    }
    HourlyInput {
        hours,
        values,
        tslm,
        comorbidities: Vec::new(),
        standardized: false,
    }
}

/// Per-column z-scoring statistics fit on measured training cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns never measured in `records` keep their reference value as
    /// mean and unit scale.
    pub fn fit<'a>(
        records: impl IntoIterator<Item = &'a PatientRecord> + Clone,
        schema: &FeatureSchema,
    ) -> Self {
        let width = schema.clinical_width();
        let mut count = vec![0usize; width];
        let mut sum = vec![0.0; width];
        for r in records.clone() {
            for t in 0..r.hours() {
                for (j, cell) in r.grid.row(t).iter().enumerate() {
                    if let Some(v) = cell {
                        count[j] += 1;
                        sum[j] += v;
                    }
                }
            }
        }
        let refs = schema.references();
        let mean: Vec<f64> = (0..width)
            .map(|j| {
                if count[j] == 0 {
                    refs[j]
                } else {
                    sum[j] / count[j] as f64
                }
            })
            .collect();
        let mut ss = vec![0.0; width];
        for r in records {
            for t in 0..r.hours() {
                for (j, cell) in r.grid.row(t).iter().enumerate() {
                    if let Some(v) = cell {
                        ss[j] += (v - mean[j]).powi(2);
                    }
                }
            }
        }
        let std = (0..width)
            .map(|j| {
                if count[j] == 0 {
                    1.0
                } else {
                    (ss[j] / count[j] as f64).sqrt().max(STD_FLOOR)
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, mut input: HourlyInput) -> Result<HourlyInput, FeatureError> {
        if input.standardized {
            return Err(FeatureError::AlreadyStandardized);
        }
        let w = input.clinical_width();
        if w != self.width() {
            return Err(FeatureError::WidthMismatch {
                expected: self.width(),
                found: w,
            });
        }
        for row in input.values.chunks_mut(w) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        input.standardized = true;
        Ok(input)
    }
}

/// Long-format dump: patient_id, hour, column, value, tslm (empty for
/// untracked columns).
pub fn write_features_csv<W: Write>(
    out: W,
    patients: &[(&str, &HourlyInput)],
    schema: &FeatureSchema,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["patient_id", "hour", "column", "value", "tslm"])?;
    let tracked = schema.tracked_indices();
    let mut slot = vec![None; schema.clinical_width()];
    for (k, &j) in tracked.iter().enumerate() {
        slot[j] = Some(k);
    }
    for (id, input) in patients {
        for t in 0..input.hours {
            let values = input.values_at(t);
            let tslm = input.tslm_at(t);
            for (j, col) in schema.clinical_columns.iter().enumerate() {
                let ts = slot[j].map(|k| tslm[k].to_string()).unwrap_or_default();
                w.write_record([
                    id.to_string(),
                    t.to_string(),
                    col.name.clone(),
                    values[j].to_string(),
                    ts,
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{OutcomeRecord, PatientRecord};
    use proptest::prelude::*;

    fn m(hour: f64, column: &str, value: f64) -> Measurement {
        Measurement {
            hour,
            column: column.into(),
            value,
        }
    }

    #[test]
    fn binning_takes_the_median() {
        let s = FeatureSchema::default();
        let ph = s.column_index("ph").unwrap();
        let g = bin_hourly(&[m(3.2, "ph", 7.4)], 8, &s).unwrap();
        assert_eq!(g.get(3, ph), Some(7.4));
        let g = bin_hourly(&[m(3.1, "ph", 7.2), m(3.9, "ph", 7.6)], 8, &s).unwrap();
        assert!((g.get(3, ph).unwrap() - 7.4).abs() < 1e-12);
        assert!(!g.measured(5, ph));
        assert_eq!(g.get(5, ph), None);
        let g = bin_hourly(
            &[m(1.0, "ph", 7.0), m(1.5, "ph", 7.5), m(1.7, "ph", 7.1)],
            3,
            &s,
        )
        .unwrap();
        assert_eq!(g.get(1, ph), Some(7.1));
    }

    #[test]
    fn binning_rejects_unknown_columns_and_hours() {
        let s = FeatureSchema::default();
        let err = bin_hourly(&[m(1.0, "glucosee", 1.0)], 4, &s).unwrap_err();
        assert!(err.to_string().contains("glucosee"));
        assert!(matches!(
            bin_hourly(&[m(4.0, "ph", 7.0)], 4, &s),
            Err(FeatureError::HourOutOfRange { .. })
        ));
    }

    #[test]
    fn forward_fill_traces() {
        let s = FeatureSchema::default();
        let ph = s.column_index("ph").unwrap();
        let ph_t = s.tracked_indices().iter().position(|&j| j == ph).unwrap();
        let mut g = Grid::empty(12, s.clinical_width());
        g.set(5, ph, Some(7.4));
        let f = forward_fill(&g, &s, 72.0);
        assert_eq!(f.values_at(7)[ph], 7.4);
        assert_eq!(f.tslm_at(7)[ph_t], 2.0);
        assert_eq!(f.values_at(2)[ph], s.reference_values["ph"]);
        assert_eq!(f.tslm_at(2)[ph_t], 72.0);

        g.set(9, ph, Some(7.3));
        let f = forward_fill(&g, &s, 72.0);
        let seq: Vec<f64> = (5..=9).map(|t| f.tslm_at(t)[ph_t]).collect();
        assert_eq!(seq, vec![0.0, 1.0, 2.0, 3.0, 0.0]);

        let hr = s.column_index("heart_rate").unwrap();
        for t in 0..12 {
            assert_eq!(f.values_at(t)[hr], s.reference_values["heart_rate"]);
            assert_eq!(f.tslm_at(t)[hr], 72.0);
        }
    }

    fn record_with(grid: Grid) -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            grid,
            comorbidities: vec![true, false],
            outcome: OutcomeRecord {
                mv_onset_hour: None,
                mv_duration_hours: None,
                died_inpatient: false,
                noninvasive_mv: false,
                los_hours: 10.0,
            },
            partition: None,
        }
    }

    #[test]
    fn standardizer_zscores_measured_cells() {
        let s = FeatureSchema::default();
        let w = s.clinical_width();
        let mut g = Grid::empty(6, w);
        let hr = s.column_index("heart_rate").unwrap();
        let ph = s.column_index("ph").unwrap();
        for (t, v) in [70.0, 80.0, 90.0, 100.0, 110.0, 120.0]
            .into_iter()
            .enumerate()
        {
            g.set(t, hr, Some(v));
            g.set(t, ph, Some(7.35));
        }
        let r = record_with(g);
        let st = Standardizer::fit([&r], &s);
        assert_eq!(st.std[ph], STD_FLOOR);
        let x = st.apply(HourlyInput::from_record(&r, &s, 72.0)).unwrap();
        let col: Vec<f64> = (0..6).map(|t| x.values_at(t)[hr]).collect();
        let mean = col.iter().sum::<f64>() / 6.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        assert!((0..6).all(|t| x.values_at(t)[ph].abs() < 1e-6));
        assert_eq!(x.comorbidities, vec![1.0, 0.0]);
        // Never-measured column: centered on its reference.
        let na = s.column_index("sodium").unwrap();
        assert_eq!(st.mean[na], s.reference_values["sodium"]);
        assert_eq!(x.values_at(0)[na], 0.0);
        assert!(matches!(
            st.apply(x),
            Err(FeatureError::AlreadyStandardized)
        ));
    }

    #[test]
    fn features_csv_has_tslm_only_for_tracked() {
        let s = FeatureSchema::default();
        let r = record_with(Grid::empty(2, s.clinical_width()));
        let x = HourlyInput::from_record(&r, &s, 72.0);
        let mut buf = Vec::new();
        write_features_csv(&mut buf, &[("p", &x)], &s).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("p,0,heart_rate,80,72"));
        assert!(text.contains("p,1,age,64,\n"));
        assert_eq!(text.lines().count(), 1 + 2 * s.clinical_width());
    }

    proptest! {
        #[test]
        fn tslm_recurrence_and_carry_forward(
            pattern in proptest::collection::vec(proptest::option::of(-5.0f64..5.0), 1..120),
            cap in 1.0f64..100.0,
        ) {
            let s = FeatureSchema::default();
            let col = s.column_index("lactate").unwrap();
            let k = s.tracked_indices().iter().position(|&j| j == col).unwrap();
            let mut g = Grid::empty(pattern.len(), s.clinical_width());
            for (t, v) in pattern.iter().enumerate() {
                g.set(t, col, *v);
            }
            let f = forward_fill(&g, &s, cap);
            let mut last = None;
            for (t, obs) in pattern.iter().enumerate() {
                let ts = f.tslm_at(t)[k];
                if let Some(v) = *obs {
                    last = Some(v);
                    prop_assert_eq!(ts, 0.0);
                } else if t == 0 || last.is_none() {
                    prop_assert_eq!(ts, cap);
                } else {
                    let prev = f.tslm_at(t - 1)[k];
                    prop_assert_eq!(ts, (prev + 1.0).min(cap));
                }
                let expect = last.unwrap_or(s.reference_values["lactate"]);
                prop_assert_eq!(f.values_at(t)[col], expect);
            }
        }

        #[test]
        fn pipeline_ignores_event_order(
            raw in proptest::collection::vec((0.0f64..10.0, 0usize..3, -3.0f64..3.0), 0..40),
            seed: u64,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let s = FeatureSchema::default();
            let names = ["ph", "o2sat", "age"];
            let mut events: Vec<Measurement> =
                raw.iter().map(|&(h, c, v)| m(h, names[c], v)).collect();
            let run = |ev: &[Measurement]| {
                let r = record_with(bin_hourly(ev, 10, &s).unwrap());
                let st = Standardizer::fit([&r], &s);
                st.apply(HourlyInput::from_record(&r, &s, 72.0)).unwrap()
            };
            let a = run(&events);
            events.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = run(&events);
            prop_assert_eq!(a.tslm, b.tslm);
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
