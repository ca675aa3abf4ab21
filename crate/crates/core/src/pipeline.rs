//! Run configuration and the end-to-end steps shared by the command line and
//! the integration tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cohort::io::{read_schema, RawCohort, SCHEMA_FILE};
use crate::cohort::{
    exclude, split_cohort, CohortError, FeatureSchema, PatientRecord, Split, SplitSpec,
    SynthConfig, Verdict,
};
use crate::dataset::WindowSet;
use crate::eval::{EvalError, EvalSettings, ScoredCohort};
use crate::explain::{ExplainError, HeatmapSettings};
use crate::features::{FeatureError, Standardizer, DEFAULT_TSLM_CAP};
use crate::model::{
    Checkpoint, CheckpointError, CheckpointMeta, ModelConfig, ModelError, Network, Variant,
};
use crate::train::{predict_windows, train_with, EpochLog, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the seeds of the generator, the split, initialization and
    /// training.
    pub seed: u64,
    /// Schema JSON; the built-in schema when absent.
    pub schema: Option<PathBuf>,
    /// Cohort directory holding `patients.csv` and `events.csv`.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub horizon_hours: usize,
    pub tslm_cap: f64,
    pub synth: SynthConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub heatmap: HeatmapSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schema: None,
            data: None,
            out: PathBuf::from("out"),
            horizon_hours: 24,
            tslm_cap: DEFAULT_TSLM_CAP,
            synth: SynthConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            heatmap: HeatmapSettings::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document, applies `key.path=value` overrides and
    /// propagates the run seed.
    pub fn from_json(text: Option<&str>, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut doc = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn resolved(mut self) -> Self {
        self.synth.seed = self.seed;
        self.split.seed = self.seed;
        self.train.seed = self.seed;
        self.train.silence_hours = self.eval.silence_hours;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (what, p) in [("schema", &self.schema), ("data", &self.data)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(PipelineError::Config(format!(
                        "{what} path {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if !(self.tslm_cap.is_finite() && self.tslm_cap >= 0.0) {
            return Err(PipelineError::Config(
                "tslm_cap must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.eval.target_sensitivity) {
            return Err(PipelineError::Config(
                "target_sensitivity must lie in [0, 1]".into(),
            ));
        }
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn schema(&self) -> Result<FeatureSchema, PipelineError> {
        match &self.schema {
            Some(p) => Ok(read_schema(p)?),
            None => Ok(FeatureSchema::default()),
        }
    }

    pub fn data_dir(&self) -> Result<&Path, PipelineError> {
        self.data
            .as_deref()
            .ok_or_else(|| PipelineError::Config("no cohort directory given (`data`)".into()))
    }
}

/// Sets `a.b.c` in a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        PipelineError::Config(format!("override `{assignment}` is not key=value"))
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            PipelineError::Config(format!("`{key}`: `{part}` is not inside an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(PipelineError::Config("empty override key".into()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub ventilated: usize,
    pub excluded: BTreeMap<String, usize>,
    pub prevalence: f64,
    pub onset_median: Option<f64>,
    pub onset_q1: Option<f64>,
    pub onset_q3: Option<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

impl CohortSummary {
    pub fn of(records: &[PatientRecord], excluded: BTreeMap<String, usize>) -> Self {
        let mut onsets: Vec<f64> = records
            .iter()
            .filter_map(|r| r.outcome.mv_onset_hour.map(|h| h as f64))
            .collect();
        onsets.sort_by(f64::total_cmp);
        Self {
            patients: records.len(),
            ventilated: onsets.len(),
            excluded,
            prevalence: onsets.len() as f64 / records.len().max(1) as f64,
            onset_median: quantile(&onsets, 0.5),
            onset_q1: quantile(&onsets, 0.25),
            onset_q3: quantile(&onsets, 0.75),
        }
    }
}

/// Applies the exclusion rules, returning kept records and counts per reason.
pub fn apply_exclusions(
    records: Vec<PatientRecord>,
) -> (Vec<PatientRecord>, BTreeMap<String, usize>) {
    let mut counts = BTreeMap::new();
    let kept = records
        .into_iter()
        .filter(|r| match exclude(&r.outcome) {
            Verdict::Keep => true,
            Verdict::Reject(reason) => {
                let key = serde_json::to_value(reason)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_else(|| format!("{reason:?}"));
                *counts.entry(key).or_insert(0) += 1;
                false
            }
        })
        .collect();
    (kept, counts)
}

/// Reads, validates and filters a cohort directory. A `schema.json` inside
/// the directory must match `schema`.
pub fn load_cohort(
    dir: &Path,
    schema: &FeatureSchema,
) -> Result<(Vec<PatientRecord>, CohortSummary), PipelineError> {
    let stored = dir.join(SCHEMA_FILE);
    if stored.exists() {
        let theirs = read_schema(&stored)?;
        if theirs.hash() != schema.hash() {
            return Err(CohortError::SchemaMismatch(format!(
                "{} has hash {}, expected {}",
                stored.display(),
                theirs.hash(),
                schema.hash()
            ))
            .into());
        }
    }
    let records = RawCohort::read_dir(dir, schema)?.assemble(schema)?;
    let (kept, excluded) = apply_exclusions(records);
    let summary = CohortSummary::of(&kept, excluded);
    Ok((kept, summary))
}

/// Split records with standardized window sets for each partition.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: Split,
    pub standardizer: Standardizer,
    pub train: WindowSet,
    pub validation: WindowSet,
    pub test: WindowSet,
}

pub fn prepare(
    records: Vec<PatientRecord>,
    schema: &FeatureSchema,
    split: &SplitSpec,
    horizon_hours: usize,
    tslm_cap: f64,
) -> Result<Prepared, PipelineError> {
    let split = split_cohort(records, split)?;
    let standardizer = Standardizer::fit(&split.train, schema);
    let build =
        |r: &[PatientRecord]| WindowSet::build(r, schema, &standardizer, horizon_hours, tslm_cap);
    Ok(Prepared {
        train: build(&split.train)?,
        validation: build(&split.validation)?,
        test: build(&split.test)?,
        standardizer: standardizer.clone(),
        split,
    })
}

/// Trains one variant and packages the selected parameters.
pub fn fit_variant(
    prepared: &Prepared,
    schema: &FeatureSchema,
    cfg: &RunConfig,
    variant: Variant,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, TrainOutcome), PipelineError> {
    let model = ModelConfig {
        variant,
        dropout_rate: cfg.train.dropout_rate,
        ..cfg.model.clone()
    };
    let dims = crate::model::InputDims::from_schema(schema);
    let init = Network::init(model, dims, cfg.seed)?;
    let outcome = train_with(
        init,
        &prepared.train,
        &prepared.validation,
        &cfg.train,
        on_epoch,
    )?;
    let ck = Checkpoint::from_network(
        &outcome.network,
        CheckpointMeta {
            schema_hash: schema.hash(),
            train_config: cfg.train.clone(),
            split: cfg.split,
            horizon_hours: cfg.horizon_hours,
            tslm_cap: cfg.tslm_cap,
            epoch: outcome.best_epoch,
            val_auc: outcome.best_val_auc,
            standardizer: prepared.standardizer.clone(),
        },
    );
    Ok((ck, outcome))
}

/// Rebuilds the checkpoint's test partition of `records`.
pub fn test_windows(
    ck: &Checkpoint,
    records: Vec<PatientRecord>,
    schema: &FeatureSchema,
) -> Result<(WindowSet, Vec<PatientRecord>), PipelineError> {
    let split = split_cohort(records, &ck.split)?;
    let set = WindowSet::build(
        &split.test,
        schema,
        &ck.standardizer,
        ck.horizon_hours,
        ck.tslm_cap,
    )?;
    Ok((set, split.test))
}

/// Eval-mode 64-bit scores for every window, grouped per patient.
pub fn score(
    net: &Network<f64>,
    set: &WindowSet,
) -> Result<(Vec<f64>, ScoredCohort), PipelineError> {
    let scores = predict_windows(net, set, 2048)?;
    let cohort = set.scored(&scores);
    Ok((scores, cohort))
}

/// Cohort written by `synth`, kept as the generator produced it.
pub fn synthesize(
    cfg: &RunConfig,
    schema: &FeatureSchema,
    dir: &Path,
) -> Result<CohortSummary, PipelineError> {
    let raw = crate::cohort::synth::generate_raw(&cfg.synth, schema)?;
    raw.write_dir(dir, schema)?;
    let records = raw.assemble(schema)?;
    let (kept, excluded) = apply_exclusions(records);
    Ok(CohortSummary::of(&kept, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::from_json(
            None,
            &[
                "train.epochs=7".into(),
                "model.variant=ffnn_sa".into(),
                "seed=42".into(),
                "out=runs/a".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.variant, Variant::FfnnSa);
        assert_eq!(cfg.out, PathBuf::from("runs/a"));
        assert_eq!(
            (cfg.synth.seed, cfg.split.seed, cfg.train.seed),
            (42, 42, 42)
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_json(None, &["train.epoch=7".into()]),
            Err(PipelineError::Config(_))
        ));
        assert!(RunConfig::from_json(Some("{\"bogus\": 1}"), &[]).is_err());
        assert!(RunConfig::from_json(None, &["noequals".into()]).is_err());
    }

    #[test]
    fn missing_paths_fail_validation() {
        let cfg = RunConfig {
            data: Some(PathBuf::from("/definitely/not/here")),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        assert_eq!(quantile(&v, 0.0), Some(1.0));
        assert_eq!(quantile(&[], 0.5), None);
    }
}
