use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CohortError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnGroup {
    Vital,
    Lab,
    Demographic,
    Medication,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalColumn {
    pub name: String,
    pub group: ColumnGroup,
}

/// Column layout shared by ingestion, features, models and checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub clinical_columns: Vec<ClinicalColumn>,
    pub comorbidity_columns: Vec<String>,
    /// Columns that receive time-since-last-measured features.
    pub tslm_tracked: Vec<String>,
    pub fio2_column: String,
    pub peep_column: String,
    /// Physiological reference per clinical column, used before a column's
    /// first measurement.
    pub reference_values: BTreeMap<String, f64>,
}

// (name, reference value)
const VITALS: [(&str, f64); 8] = [
    ("heart_rate", 80.0),
    ("o2sat", 97.0),
    ("temperature", 37.0),
    ("sbp", 120.0),
    ("map", 82.0),
    ("dbp", 65.0),
    ("resp_rate", 16.0),
    ("etco2", 35.0),
];

const LABS: [(&str, f64); 42] = [
    ("base_excess", 0.0),
    ("bicarbonate", 24.0),
    ("fio2", 0.21),
    ("ph", 7.4),
    ("paco2", 40.0),
    ("pao2", 95.0),
    ("sao2", 97.0),
    ("peep", 0.0),
    ("ast", 30.0),
    ("bun", 15.0),
    ("alkaline_phosphatase", 80.0),
    ("calcium", 9.0),
    ("chloride", 102.0),
    ("creatinine", 1.0),
    ("bilirubin_direct", 0.2),
    ("glucose", 110.0),
    ("lactate", 1.2),
    ("magnesium", 2.0),
    ("phosphate", 3.5),
    ("potassium", 4.0),
    ("bilirubin_total", 0.8),
    ("troponin_i", 0.02),
    ("hematocrit", 38.0),
    ("hemoglobin", 12.5),
    ("ptt", 30.0),
    ("wbc", 8.0),
    ("fibrinogen", 300.0),
    ("platelets", 220.0),
    ("sodium", 139.0),
    ("albumin", 3.8),
    ("inr", 1.1),
    ("alt", 28.0),
    ("anion_gap", 12.0),
    ("ionized_calcium", 1.18),
    ("ldh", 200.0),
    ("ck", 120.0),
    ("bnp", 100.0),
    ("crp", 5.0),
    ("procalcitonin", 0.1),
    ("rdw", 13.5),
    ("mcv", 90.0),
    ("lymphocytes", 25.0),
];

const DEMOGRAPHICS: [(&str, f64); 6] = [
    ("age", 64.0),
    ("male", 0.5),
    ("height", 170.0),
    ("weight", 80.0),
    ("bmi", 27.0),
    ("emergency_admission", 0.5),
];

const MEDICATIONS: [&str; 11] = [
    "on_anesthesia",
    "on_anticoagulants",
    "on_vasopressors",
    "on_antibiotics",
    "on_sedatives",
    "on_opioids",
    "on_diuretics",
    "on_steroids",
    "on_insulin",
    "on_antiarrhythmics",
    "on_bronchodilators",
];

pub(crate) const COMORBIDITIES: [&str; 62] = [
    "congestive_heart_failure",
    "cardiac_arrhythmias",
    "valvular_disease",
    "pulmonary_circulation",
    "peripheral_vascular",
    "hypertension_uncomplicated",
    "hypertension_complicated",
    "paralysis",
    "other_neurological",
    "chronic_pulmonary",
    "diabetes_uncomplicated",
    "diabetes_complicated",
    "hypothyroidism",
    "renal_failure",
    "liver_disease",
    "peptic_ulcer",
    "aids_hiv",
    "lymphoma",
    "metastatic_cancer",
    "solid_tumor",
    "rheumatoid_arthritis",
    "coagulopathy",
    "obesity",
    "weight_loss",
    "fluid_electrolyte",
    "blood_loss_anemia",
    "deficiency_anemia",
    "alcohol_abuse",
    "drug_abuse",
    "psychoses",
    "depression",
    "myocardial_infarction",
    "cerebrovascular_disease",
    "dementia",
    "mild_liver_disease",
    "severe_liver_disease",
    "hemiplegia",
    "malignancy",
    "liver_cirrhosis",
    "sleep_apnea",
    "asthma",
    "interstitial_lung_disease",
    "pneumonia_history",
    "copd_exacerbation_history",
    "tuberculosis_history",
    "cystic_fibrosis",
    "neuromuscular_disease",
    "myasthenia_gravis",
    "amyotrophic_lateral_sclerosis",
    "spinal_cord_injury",
    "chronic_kidney_disease",
    "dialysis_dependent",
    "organ_transplant",
    "immunosuppression",
    "sickle_cell_disease",
    "pulmonary_embolism_history",
    "deep_vein_thrombosis",
    "atrial_fibrillation",
    "coronary_artery_disease",
    "pancreatitis",
    "sepsis_history",
    "stroke_history",
];

impl Default for FeatureSchema {
    /// 8 vitals, 42 labs, 6 demographics, 11 medications and 62
    /// comorbidities; vitals and labs are TSLM-tracked.
    fn default() -> Self {
        let mut clinical_columns = Vec::new();
        let mut reference_values = BTreeMap::new();
        let mut push = |name: &str, group, reference| {
            clinical_columns.push(ClinicalColumn {
                name: name.to_string(),
                group,
            });
            reference_values.insert(name.to_string(), reference);
        };
        for (n, r) in VITALS {
            push(n, ColumnGroup::Vital, r);
        }
        for (n, r) in LABS {
            push(n, ColumnGroup::Lab, r);
        }
        for (n, r) in DEMOGRAPHICS {
            push(n, ColumnGroup::Demographic, r);
        }
        for n in MEDICATIONS {
            push(n, ColumnGroup::Medication, 0.0);
        }
        let tslm_tracked = clinical_columns
            .iter()
            .filter(|c| matches!(c.group, ColumnGroup::Vital | ColumnGroup::Lab))
            .map(|c| c.name.clone())
            .collect();
        Self {
            clinical_columns,
            comorbidity_columns: COMORBIDITIES.iter().map(|s| s.to_string()).collect(),
            tslm_tracked,
            fio2_column: "fio2".into(),
            peep_column: "peep".into(),
            reference_values,
        }
    }
}

impl FeatureSchema {
    pub fn clinical_width(&self) -> usize {
        self.clinical_columns.len()
    }

    pub fn comorbidity_width(&self) -> usize {
        self.comorbidity_columns.len()
    }

    pub fn tracked_width(&self) -> usize {
        self.tslm_tracked.len()
    }

    pub fn group_count(&self, group: ColumnGroup) -> usize {
        self.clinical_columns
            .iter()
            .filter(|c| c.group == group)
            .count()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.clinical_columns.iter().position(|c| c.name == name)
    }

    pub fn comorbidity_index(&self, name: &str) -> Option<usize> {
        self.comorbidity_columns.iter().position(|c| c == name)
    }

    pub fn name_to_index(&self) -> HashMap<&str, usize> {
        self.clinical_columns
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.as_str(), i))
            .collect()
    }

    /// Clinical indices of the tracked columns, in clinical-column order.
    pub fn tracked_indices(&self) -> Vec<usize> {
        let tracked: HashSet<&str> = self.tslm_tracked.iter().map(String::as_str).collect();
        self.clinical_columns
            .iter()
            .enumerate()
            .filter(|(_, c)| tracked.contains(c.name.as_str()))
            .map(|(i, _)| i)
            .collect()
    }

    /// Reference values in clinical-column order.
    pub fn references(&self) -> Vec<f64> {
        self.clinical_columns
            .iter()
            .map(|c| self.reference_values.get(&c.name).copied().unwrap_or(0.0))
            .collect()
    }

    pub fn fio2_index(&self) -> Result<usize, CohortError> {
        self.column_index(&self.fio2_column)
            .ok_or_else(|| CohortError::MissingColumn(self.fio2_column.clone()))
    }

    pub fn peep_index(&self) -> Result<usize, CohortError> {
        self.column_index(&self.peep_column)
            .ok_or_else(|| CohortError::MissingColumn(self.peep_column.clone()))
    }

    /// Checks uniqueness, group constraints on the tracked set, the
    /// oxygenation columns and reference coverage.
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |msg: String| Err(CohortError::InvalidSchema(msg));
        if self.clinical_columns.is_empty() {
            return bad("no clinical columns".into());
        }
        let mut seen = HashSet::new();
        for c in &self.clinical_columns {
            if !seen.insert(c.name.as_str()) {
                return bad(format!("duplicate clinical column `{}`", c.name));
            }
        }
        let mut seen_c = HashSet::new();
        for c in &self.comorbidity_columns {
            if !seen_c.insert(c.as_str()) {
                return bad(format!("duplicate comorbidity column `{c}`"));
            }
        }
        let mut seen_t = HashSet::new();
        for t in &self.tslm_tracked {
            if !seen_t.insert(t.as_str()) {
                return bad(format!("`{t}` tracked twice"));
            }
            match self.clinical_columns.iter().find(|c| &c.name == t) {
                None => return bad(format!("tracked column `{t}` is not a clinical column")),
                Some(c) if !matches!(c.group, ColumnGroup::Vital | ColumnGroup::Lab) => {
                    return bad(format!("tracked column `{t}` must be a vital or lab"));
                }
                _ => {}
            }
        }
        self.fio2_index()?;
        self.peep_index()?;
        for c in &self.clinical_columns {
            match self.reference_values.get(&c.name) {
                Some(v) if v.is_finite() => {}
                _ => return bad(format!("missing or non-finite reference for `{}`", c.name)),
            }
        }
        for k in self.reference_values.keys() {
            if !seen.contains(k.as_str()) {
                return bad(format!("reference given for unknown column `{k}`"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths() {
        let s = FeatureSchema::default();
        s.validate().unwrap();
        assert_eq!(s.group_count(ColumnGroup::Vital), 8);
        assert_eq!(s.group_count(ColumnGroup::Lab), 42);
        assert_eq!(s.group_count(ColumnGroup::Demographic), 6);
        assert_eq!(s.group_count(ColumnGroup::Medication), 11);
        assert_eq!(s.clinical_width(), 67);
        assert_eq!(s.comorbidity_width(), 62);
        assert_eq!(s.tracked_width(), 50);
        assert_eq!(s.tracked_indices(), (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn tracked_must_be_vital_or_lab() {
        let mut s = FeatureSchema::default();
        s.tslm_tracked.push("age".into());
        assert!(matches!(s.validate(), Err(CohortError::InvalidSchema(_))));
    }

    #[test]
    fn oxygenation_columns_must_exist() {
        let s = FeatureSchema {
            peep_column: "nope".into(),
            ..FeatureSchema::default()
        };
        assert!(matches!(s.validate(), Err(CohortError::MissingColumn(c)) if c == "nope"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = FeatureSchema::default();
        assert_eq!(a.hash(), FeatureSchema::default().hash());
        let mut b = a.clone();
        b.reference_values.insert("o2sat".into(), 96.0);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn json_round_trip() {
        let s = FeatureSchema::default();
        let text = serde_json::to_string(&s).unwrap();
        let back: FeatureSchema = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
