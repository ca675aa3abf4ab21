//! Flattened evaluable windows ready for batching.

use rayon::prelude::*;

use crate::cohort::{window_labels, FeatureSchema, Partition, PatientRecord};
use crate::eval::{ScoredCohort, ScoredPatient};
use crate::features::{FeatureError, HourlyInput, Standardizer};
use crate::model::{Batch, ModelError, Window};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PatientSlot {
    pub patient_id: String,
    pub partition: Option<Partition>,
    pub comorbidities: Vec<f64>,
    /// Index of this patient's first window.
    pub first: usize,
    pub count: usize,
}

/// Every evaluable window of a set of patients, in patient then hour order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowSet {
    pub clinical_width: usize,
    pub tracked_width: usize,
    pub comorbidity_width: usize,
    /// `len x clinical_width`, standardized.
    pub clinical: Vec<f64>,
    /// `len x tracked_width`
    pub tslm: Vec<f64>,
    pub targets: Vec<f64>,
    pub hours: Vec<usize>,
    pub owner: Vec<usize>,
    pub patients: Vec<PatientSlot>,
}

struct PatientWindows {
    slot: PatientSlot,
    clinical: Vec<f64>,
    tslm: Vec<f64>,
    targets: Vec<f64>,
    hours: Vec<usize>,
}

impl WindowSet {
    pub fn build(
        records: &[PatientRecord],
        schema: &FeatureSchema,
        standardizer: &Standardizer,
        horizon_hours: usize,
        tslm_cap: f64,
    ) -> Result<Self, FeatureError> {
        let per: Vec<PatientWindows> = records
            .par_iter()
            .map(|r| {
                let input = standardizer.apply(HourlyInput::from_record(r, schema, tslm_cap))?;
                let mut w = PatientWindows {
                    slot: PatientSlot {
                        patient_id: r.patient_id.clone(),
                        partition: r.partition,
                        comorbidities: input.comorbidities.clone(),
                        first: 0,
                        count: 0,
                    },
                    clinical: Vec::new(),
                    tslm: Vec::new(),
                    targets: Vec::new(),
                    hours: Vec::new(),
                };
                for label in window_labels(r, horizon_hours)
                    .into_iter()
                    .filter(|l| l.evaluable)
                {
                    w.clinical.extend_from_slice(input.values_at(label.hour));
                    w.tslm.extend_from_slice(input.tslm_at(label.hour));
                    w.targets.push(label.target);
                    w.hours.push(label.hour);
                }
                w.slot.count = w.targets.len();
                Ok(w)
            })
            .collect::<Result<_, FeatureError>>()?;

        let mut set = WindowSet {
            clinical_width: schema.clinical_width(),
            tracked_width: schema.tracked_width(),
            comorbidity_width: schema.comorbidity_width(),
            ..Default::default()
        };
        for (i, mut p) in per.into_iter().enumerate() {
            p.slot.first = set.targets.len();
            set.owner.extend(std::iter::repeat_n(i, p.slot.count));
            set.clinical.append(&mut p.clinical);
            set.tslm.append(&mut p.tslm);
            set.targets.append(&mut p.targets);
            set.hours.append(&mut p.hours);
            set.patients.push(p.slot);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window(&self, i: usize) -> Window<'_> {
        let (c, k) = (self.clinical_width, self.tracked_width);
        Window {
            clinical: &self.clinical[i * c..(i + 1) * c],
            tslm: &self.tslm[i * k..(i + 1) * k],
            comorbidities: &self.patients[self.owner[i]].comorbidities,
        }
    }

    /// Gathers the listed windows into one batch.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Batch<T>, ModelError> {
        let n = indices.len();
        let mut clinical = Vec::with_capacity(n * self.clinical_width);
        let mut tslm = Vec::with_capacity(n * self.tracked_width);
        let mut comorbidities = Vec::with_capacity(n * self.comorbidity_width);
        let lit = |v: &f64| T::lit(*v);
        for &i in indices {
            let w = self.window(i);
            clinical.extend(w.clinical.iter().map(lit));
            tslm.extend(w.tslm.iter().map(lit));
            comorbidities.extend(w.comorbidities.iter().map(lit));
        }
        Ok(Batch {
            clinical: Tensor::matrix(n, self.clinical_width, clinical)?,
            tslm: Tensor::matrix(n, self.tracked_width, tslm)?,
            comorbidities: Tensor::matrix(n, self.comorbidity_width, comorbidities)?,
        })
    }

    pub fn positive_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t > 0.0).count()
    }

    /// Groups per-window scores by patient; a window is positive when its
    /// target is nonzero.
    pub fn scored(&self, scores: &[f64]) -> ScoredCohort {
        assert_eq!(scores.len(), self.len(), "one score per window");
        ScoredCohort {
            patients: self
                .patients
                .iter()
                .filter(|p| p.count > 0)
                .map(|p| {
                    let r = p.first..p.first + p.count;
                    ScoredPatient {
                        patient_id: p.patient_id.clone(),
                        scores: scores[r.clone()].to_vec(),
                        labels: self.targets[r].iter().map(|&t| t > 0.0).collect(),
                    }
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::synth::{generate_synthetic, SynthConfig};

    #[test]
    fn windows_cover_evaluable_hours() {
        let schema = FeatureSchema::default();
        let records = generate_synthetic(
            &SynthConfig {
                n_patients: 12,
                ..SynthConfig::default()
            },
            &schema,
        )
        .unwrap();
        let std = Standardizer::fit(&records, &schema);
        let set = WindowSet::build(&records, &schema, &std, 6, 72.0).unwrap();
        let expected: usize = records
            .iter()
            .map(|r| window_labels(r, 6).iter().filter(|l| l.evaluable).count())
            .sum();
        assert_eq!(set.len(), expected);
        assert_eq!(set.clinical.len(), expected * schema.clinical_width());
        for p in &set.patients {
            let hours = &set.hours[p.first..p.first + p.count];
            assert!(hours.windows(2).all(|w| w[1] == w[0] + 1));
        }
        let b: Batch<f32> = set.batch(&[0, set.len() - 1]).unwrap();
        assert_eq!(b.rows(), 2);
        let cohort = set.scored(&vec![0.0; set.len()]);
        assert_eq!(cohort.window_count(), set.len());
    }
}
