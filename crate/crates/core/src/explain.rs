//! Occlusion relevance and the top-factor heatmap before ventilation onset.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{FeatureSchema, PatientRecord, FIRST_WINDOW_HOUR};
use crate::features::{FeatureError, HourlyInput, Standardizer};
use crate::model::{Batch, ModelError, Network, Window};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("no ventilated patient has onset at or after hour {0}")]
    NoQualifyingPatients(usize),
    #[error("reference vector has width {found}, model inputs have {expected}")]
    ReferenceWidth { expected: usize, found: usize },
}

/// Anything that scores a batch of windows.
pub trait RiskModel: Sync {
    fn risk(&self, batch: &Batch<f64>) -> Result<Vec<f64>, ModelError>;
}

impl RiskModel for Network<f64> {
    fn risk(&self, batch: &Batch<f64>) -> Result<Vec<f64>, ModelError> {
        self.predict_batch(batch)
    }
}

/// Occlusion values per input, in model input space.
#[derive(Clone, Debug, PartialEq)]
pub struct References {
    pub clinical: Vec<f64>,
    pub comorbidities: Vec<f64>,
}

impl References {
    /// Standardized clinical reference 0 (the training mean) and absent
    /// comorbidities.
    pub fn standardized(clinical: usize, comorbidities: usize) -> Self {
        Self {
            clinical: vec![0.0; clinical],
            comorbidities: vec![0.0; comorbidities],
        }
    }
}

/// `risk(actual) - risk(variable at reference)` for every clinical variable
/// followed by every comorbidity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVector {
    pub risk: f64,
    pub values: Vec<f64>,
}

pub fn relevance(
    model: &dyn RiskModel,
    window: Window<'_>,
    references: &References,
) -> Result<RelevanceVector, ExplainError> {
    let (c, m) = (window.clinical.len(), window.comorbidities.len());
    if references.clinical.len() != c || references.comorbidities.len() != m {
        return Err(ExplainError::ReferenceWidth {
            expected: c + m,
            found: references.clinical.len() + references.comorbidities.len(),
        });
    }
    let rows = 1 + c + m;
    let mut clinical = Vec::with_capacity(rows * c);
    let mut tslm = Vec::with_capacity(rows * window.tslm.len());
    let mut comorbidities = Vec::with_capacity(rows * m);
    for r in 0..rows {
        let start = clinical.len();
        clinical.extend_from_slice(window.clinical);
        tslm.extend_from_slice(window.tslm);
        let zstart = comorbidities.len();
        comorbidities.extend_from_slice(window.comorbidities);
        if (1..=c).contains(&r) {
            clinical[start + r - 1] = references.clinical[r - 1];
        } else if r > c {
            comorbidities[zstart + r - 1 - c] = references.comorbidities[r - 1 - c];
        }
    }
    let risks = model.risk(&Batch::from_rows(rows, &clinical, &tslm, &comorbidities)?)?;
    Ok(RelevanceVector {
        risk: risks[0],
        values: risks[1..].iter().map(|r| risks[0] - r).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapSettings {
    pub hours_before: usize,
    pub top_k: usize,
    pub rows: usize,
}

impl Default for HeatmapSettings {
    fn default() -> Self {
        Self {
            hours_before: 12,
            top_k: 3,
            rows: 15,
        }
    }
}

/// Per-variable fractions of patients marking the variable as a top factor,
/// by hours before onset. Rows are ordered by mean relevance magnitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub variables: Vec<String>,
    /// Column labels, e.g. `[12, 11, ..., 1]`.
    pub hours_before: Vec<usize>,
    pub cells: Vec<Vec<f64>>,
    pub mean_abs_relevance: Vec<f64>,
    pub patients: usize,
}

impl HeatmapMatrix {
    pub fn truncated(mut self, rows: usize) -> Self {
        self.variables.truncate(rows);
        self.cells.truncate(rows);
        self.mean_abs_relevance.truncate(rows);
        self
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "variable,hour_before_onset,fraction")?;
        for (name, row) in self.variables.iter().zip(&self.cells) {
            for (h, f) in self.hours_before.iter().zip(row) {
                writeln!(out, "{name},{h},{f}")?;
            }
        }
        out.flush()
    }
}

/// Indices of the `k` largest relevance values; ties keep input order.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(k);
    order
}

/// Heatmap over every variable, ranked; see [`heatmap`].
pub fn heatmap_full(
    model: &dyn RiskModel,
    patients: &[PatientRecord],
    schema: &FeatureSchema,
    standardizer: &Standardizer,
    tslm_cap: f64,
    settings: HeatmapSettings,
) -> Result<HeatmapMatrix, ExplainError> {
    let earliest = settings.hours_before + FIRST_WINDOW_HOUR;
    let qualifying: Vec<&PatientRecord> = patients
        .iter()
        .filter(|p| p.outcome.mv_onset_hour.is_some_and(|t| t >= earliest))
        .collect();
    if qualifying.is_empty() || settings.hours_before == 0 {
        return Err(ExplainError::NoQualifyingPatients(earliest));
    }
    let names: Vec<String> = schema
        .clinical_columns
        .iter()
        .map(|c| c.name.clone())
        .chain(schema.comorbidity_columns.iter().cloned())
        .collect();
    let refs = References::standardized(schema.clinical_width(), schema.comorbidity_width());
    let h = settings.hours_before;

    // Per patient: marks[h][var] and summed |relevance|[var].
    let per: Vec<(Vec<Vec<bool>>, Vec<f64>)> = qualifying
        .par_iter()
        .map(|p| {
            let input = standardizer.apply(HourlyInput::from_record(p, schema, tslm_cap))?;
            let onset = p.outcome.mv_onset_hour.expect("filtered on onset");
            let mut marks = vec![vec![false; names.len()]; h];
            let mut magnitude = vec![0.0; names.len()];
            for (col, before) in (1..=h).rev().enumerate() {
                let hour = onset - before;
                let window = Window {
                    clinical: input.values_at(hour),
                    tslm: input.tslm_at(hour),
                    comorbidities: &input.comorbidities,
                };
                let rel = relevance(model, window, &refs)?;
                for j in top_k(&rel.values, settings.top_k) {
                    marks[col][j] = true;
                }
                for (m, v) in magnitude.iter_mut().zip(&rel.values) {
                    *m += v.abs();
                }
            }
            Ok((marks, magnitude))
        })
        .collect::<Result<_, ExplainError>>()?;

    let n = qualifying.len() as f64;
    let mut cells = vec![vec![0.0; h]; names.len()];
    let mut mean_abs = vec![0.0; names.len()];
    for (marks, magnitude) in &per {
        for (col, row) in marks.iter().enumerate() {
            for (j, &marked) in row.iter().enumerate() {
                if marked {
                    cells[j][col] += 1.0;
                }
            }
        }
        for (m, v) in mean_abs.iter_mut().zip(magnitude) {
            *m += v;
        }
    }
    cells.iter_mut().flatten().for_each(|c| *c /= n);
    mean_abs.iter_mut().for_each(|m| *m /= n * h as f64);

    let order = top_k(&mean_abs, names.len());
    Ok(HeatmapMatrix {
        variables: order.iter().map(|&j| names[j].clone()).collect(),
        hours_before: (1..=h).rev().collect(),
        cells: order.iter().map(|&j| cells[j].clone()).collect(),
        mean_abs_relevance: order.iter().map(|&j| mean_abs[j]).collect(),
        patients: qualifying.len(),
    })
}

/// At each of the `hours_before` hours preceding onset, marks each
/// ventilated patient's `top_k` highest-relevance variables and reports the
/// fraction of patients marking each variable, keeping the `rows` variables
/// with the largest mean relevance magnitude.
pub fn heatmap(
    model: &dyn RiskModel,
    patients: &[PatientRecord],
    schema: &FeatureSchema,
    standardizer: &Standardizer,
    tslm_cap: f64,
    settings: HeatmapSettings,
) -> Result<HeatmapMatrix, ExplainError> {
    Ok(
        heatmap_full(model, patients, schema, standardizer, tslm_cap, settings)?
            .truncated(settings.rows),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::synth::{generate_synthetic, SynthConfig};

    /// `risk = sum_j w_j x_j` over clinical then comorbidity inputs.
    struct Linear(Vec<f64>);

    impl RiskModel for Linear {
        fn risk(&self, batch: &Batch<f64>) -> Result<Vec<f64>, ModelError> {
            let (n, c) = batch.clinical.dims2()?;
            let m = batch.comorbidities.shape()[1];
            Ok((0..n)
                .map(|i| {
                    (0..c)
                        .map(|j| self.0[j] * batch.clinical.at(i, j))
                        .sum::<f64>()
                        + (0..m)
                            .map(|j| self.0[c + j] * batch.comorbidities.at(i, j))
                            .sum::<f64>()
                })
                .collect())
        }
    }

    #[test]
    fn linear_surrogate_relevance_is_exact() {
        let w = vec![0.5, -1.25, 2.0, 0.75, 3.0];
        let model = Linear(w.clone());
        let x = [1.5, 0.0, -2.0];
        let z = [1.0, 0.0];
        let refs = References {
            clinical: vec![0.5, 0.0, 1.0],
            comorbidities: vec![0.0, 0.0],
        };
        let window = Window {
            clinical: &x,
            tslm: &[0.0],
            comorbidities: &z,
        };
        let rel = relevance(&model, window, &refs).unwrap();
        let inputs = [1.5, 0.0, -2.0, 1.0, 0.0];
        let r = [0.5, 0.0, 1.0, 0.0, 0.0];
        for j in 0..5 {
            assert_eq!(rel.values[j], w[j] * (inputs[j] - r[j]));
        }
        assert_eq!(rel.values[1], 0.0);
        assert_eq!(rel.values[4], 0.0);
    }

    #[test]
    fn single_active_variable_is_additive() {
        let model = Linear(vec![0.0, 0.0, 1.7, 0.0]);
        let refs = References::standardized(3, 1);
        let window = Window {
            clinical: &[0.3, -0.4, 2.5],
            tslm: &[1.0],
            comorbidities: &[1.0],
        };
        let rel = relevance(&model, window, &refs).unwrap();
        let all_ref = model
            .risk(&Batch::from_rows(1, &[0.0; 3], &[1.0], &[0.0]).unwrap())
            .unwrap()[0];
        assert!((rel.values.iter().sum::<f64>() - (rel.risk - all_ref)).abs() < 1e-15);
    }

    #[test]
    fn heatmap_columns_sum_to_top_k() {
        let schema = FeatureSchema::default();
        let cfg = SynthConfig {
            n_patients: 40,
            ventilated_fraction: 0.5,
            seed: 3,
            ..SynthConfig::default()
        };
        let records = generate_synthetic(&cfg, &schema).unwrap();
        let std = Standardizer::fit(&records, &schema);
        let c = schema.clinical_width();
        let o2 = schema.column_index("o2sat").unwrap();
        let mut w = vec![0.01; c + schema.comorbidity_width()];
        w[o2] = -5.0;
        let model = Linear(w);
        let settings = HeatmapSettings::default();
        let full = heatmap_full(&model, &records, &schema, &std, 72.0, settings).unwrap();
        for col in 0..settings.hours_before {
            let total: f64 = full.cells.iter().map(|r| r[col]).sum();
            assert!((total - settings.top_k as f64).abs() < 1e-12);
        }
        assert!(full
            .cells
            .iter()
            .flatten()
            .all(|&f| (0.0..=1.0).contains(&f)));
        assert_eq!(full.variables[0], "o2sat");
        let top = full.truncated(settings.rows);
        assert_eq!(top.variables.len(), 15);
        assert_eq!(top.hours_before.first(), Some(&12));
    }

    #[test]
    fn no_qualifying_patients_is_an_error() {
        let schema = FeatureSchema::default();
        let cfg = SynthConfig {
            n_patients: 20,
            ..SynthConfig::default()
        };
        let mut records = generate_synthetic(&cfg, &schema).unwrap();
        records.retain(|r| !r.outcome.ventilated());
        let std = Standardizer::fit(&records, &schema);
        let model = Linear(vec![
            0.0;
            schema.clinical_width() + schema.comorbidity_width()
        ]);
        let err = heatmap(
            &model,
            &records,
            &schema,
            &std,
            72.0,
            HeatmapSettings::default(),
        );
        assert!(matches!(err, Err(ExplainError::NoQualifyingPatients(16))));
    }
}
