//! JSON checkpoints: parameters plus everything needed to rebuild inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::SplitSpec;
use crate::features::Standardizer;
use crate::numerics::{ParamKind, ParamStore, Tensor};
use crate::train::TrainConfig;

use super::{InputDims, ModelConfig, ModelError, Network};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("checkpoint format {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint was trained on schema {found}, current schema is {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub schema_hash: String,
    pub model_config: ModelConfig,
    pub dims: InputDims,
    pub train_config: TrainConfig,
    pub split: SplitSpec,
    pub horizon_hours: usize,
    pub tslm_cap: f64,
    pub epoch: usize,
    pub val_auc: f64,
    pub standardizer: Standardizer,
    pub parameters: BTreeMap<String, StoredTensor>,
}

/// Provenance recorded next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub schema_hash: String,
    pub train_config: TrainConfig,
    pub split: SplitSpec,
    pub horizon_hours: usize,
    pub tslm_cap: f64,
    pub epoch: usize,
    pub val_auc: f64,
    pub standardizer: Standardizer,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f64>, meta: CheckpointMeta) -> Self {
        let parameters = net
            .params
            .iter()
            .map(|(name, kind, t)| {
                (
                    name.to_string(),
                    StoredTensor {
                        kind,
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            schema_hash: meta.schema_hash,
            model_config: net.config.clone(),
            dims: net.dims.clone(),
            train_config: meta.train_config,
            split: meta.split,
            horizon_hours: meta.horizon_hours,
            tslm_cap: meta.tslm_cap,
            epoch: meta.epoch,
            val_auc: meta.val_auc,
            standardizer: meta.standardizer,
            parameters,
        }
    }

    /// Rebuilds the network, checking every tensor against a freshly
    /// initialized one of the same configuration.
    pub fn network(&self) -> Result<Network<f64>, CheckpointError> {
        let template = Network::init(self.model_config.clone(), self.dims.clone(), 0)?;
        let mismatch = |m: String| CheckpointError::Model(ModelError::Config(m));
        if template.params.len() != self.parameters.len() {
            return Err(mismatch(format!(
                "checkpoint holds {} tensors, the architecture needs {}",
                self.parameters.len(),
                template.params.len()
            )));
        }
        let mut params = ParamStore::new();
        for (name, kind, t) in template.params.iter() {
            let stored = self
                .parameters
                .get(name)
                .ok_or_else(|| mismatch(format!("missing tensor `{name}`")))?;
            if stored.shape != t.shape() || stored.kind != kind {
                return Err(mismatch(format!(
                    "tensor `{name}` is {:?} {:?}, expected {:?} {:?}",
                    stored.kind,
                    stored.shape,
                    kind,
                    t.shape()
                )));
            }
            let tensor =
                Tensor::new(stored.shape.clone(), stored.data.clone()).map_err(ModelError::from)?;
            params.insert(name, kind, tensor);
        }
        Ok(Network {
            config: self.model_config.clone(),
            dims: self.dims.clone(),
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        let bytes = serde_json::to_vec(self).map_err(|e| CheckpointError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        std::fs::write(path, bytes).map_err(io)
    }

    /// Loads a checkpoint; with `expected_schema` set, a different schema
    /// hash is an error.
    pub fn load(path: &Path, expected_schema: Option<&str>) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| CheckpointError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: ck.format_version,
            });
        }
        if let Some(expected) = expected_schema {
            if expected != ck.schema_hash {
                return Err(CheckpointError::SchemaMismatch {
                    expected: expected.to_string(),
                    found: ck.schema_hash.clone(),
                });
            }
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixture::{tiny_config, tiny_dims};
    use crate::model::Variant;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            schema_hash: "abc".into(),
            train_config: TrainConfig::default(),
            split: SplitSpec::default(),
            horizon_hours: 6,
            tslm_cap: 72.0,
            epoch: 3,
            val_auc: 0.8,
            standardizer: Standardizer {
                mean: vec![0.0; 5],
                std: vec![1.0; 5],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/ck.json");
        for v in Variant::ALL {
            let net = Network::init(tiny_config(v), tiny_dims(), 11).unwrap();
            let ck = Checkpoint::from_network(&net, meta());
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path, Some("abc")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.network().unwrap(), net);
        }
    }

    #[test]
    fn schema_and_shape_mismatches_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let net = Network::init(tiny_config(Variant::FfnnMha), tiny_dims(), 1).unwrap();
        let mut ck = Checkpoint::from_network(&net, meta());
        ck.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path, Some("other")),
            Err(CheckpointError::SchemaMismatch { .. })
        ));
        ck.parameters.get_mut("head.bias").unwrap().shape = vec![1, 2];
        assert!(ck.network().is_err());
        std::fs::write(&path, b"{").unwrap();
        assert!(matches!(
            Checkpoint::load(&path, None),
            Err(CheckpointError::Parse { .. })
        ));
    }
}
