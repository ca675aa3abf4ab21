use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    auc_pr, operating_point, policy_curve, roc_auc, trapezoid, DeLong, EvalError, OperatingPoint,
    RocPoint, ScoredCohort,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub silence_hours: usize,
    pub target_sensitivity: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            silence_hours: 6,
            target_sensitivity: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub delong: DeLong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub settings: EvalSettings,
    pub n_patients: usize,
    pub n_windows: usize,
    pub n_positive_windows: usize,
    /// AUC under the alarm-silencing policy.
    pub policy_auc: f64,
    /// AUC over all evaluable windows with no silencing.
    pub window_auc: f64,
    pub auc_pr: f64,
    pub operating_point: OperatingPoint,
    pub roc: Vec<RocPoint>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

impl EvalReport {
    pub fn compute(
        model: &str,
        cohort: &ScoredCohort,
        settings: EvalSettings,
    ) -> Result<Self, EvalError> {
        let (scores, labels) = cohort.pooled();
        let roc = policy_curve(cohort, settings.silence_hours)?;
        Ok(Self {
            model: model.to_string(),
            settings,
            n_patients: cohort.patients.len(),
            n_windows: scores.len(),
            n_positive_windows: labels.iter().filter(|&&l| l).count(),
            policy_auc: trapezoid(&roc),
            window_auc: roc_auc(&scores, &labels)?,
            auc_pr: auc_pr(&scores, &labels)?,
            operating_point: operating_point(
                cohort,
                settings.target_sensitivity,
                settings.silence_hours,
            )?,
            roc,
            comparisons: Vec::new(),
        })
    }

    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("report.json"), json)?;
        write_roc_csv(&self.roc, &dir.join("roc_points.csv"))
    }
}

pub fn write_roc_csv(points: &[RocPoint], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "threshold,tpr,fpr")?;
    for (i, p) in points.iter().enumerate() {
        let threshold = match p.threshold {
            Some(t) => t.to_string(),
            None if i == 0 => "inf".to_string(),
            None => "-inf".to_string(),
        };
        writeln!(out, "{threshold},{},{}", p.tpr, p.fpr)?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ScoredPatient;

    #[test]
    fn report_round_trip() {
        let cohort = ScoredCohort {
            patients: vec![
                ScoredPatient {
                    patient_id: "a".into(),
                    scores: vec![0.1, 0.3, 1.2, 1.4],
                    labels: vec![false, false, true, true],
                },
                ScoredPatient {
                    patient_id: "b".into(),
                    scores: vec![0.2, 0.9, 0.4],
                    labels: vec![false; 3],
                },
            ],
        };
        let report = EvalReport::compute("ffnn", &cohort, EvalSettings::default()).unwrap();
        assert_eq!(report.n_windows, 7);
        assert_eq!(report.window_auc, 1.0);
        let dir = tempfile::tempdir().unwrap();
        report.write_dir(dir.path()).unwrap();
        let back: EvalReport =
            serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(back, report);
        let csv = std::fs::read_to_string(dir.path().join("roc_points.csv")).unwrap();
        assert!(csv.starts_with("threshold,tpr,fpr\ninf,0,0\n"));
        assert!(csv.trim_end().ends_with("-inf,1,1"));
    }
}
