//! Trained-model artifact: parameters plus everything needed to serve and
//! audit them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::data::{DataConfig, Scaler};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::train::TrainConfig;

pub const MODEL_KIND: &str = "model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Data settings of the dataset the model was fitted on.
    pub data: DataConfig,
    pub columns: Vec<String>,
    pub scaler: Scaler,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Hex SHA-256 of the training dataset artifact.
    pub dataset_digest: String,
}

/// Parameters are stored in f64 whatever precision they were trained in.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub meta: ModelMeta,
    pub params: ModelParams<f64>,
}

impl ModelArtifact {
    pub fn new<T: Scalar>(meta: ModelMeta, params: &ModelParams<T>) -> Result<Self> {
        let params = params.cast::<f64>();
        meta.model.validate()?;
        params.check_shapes(&meta.model)?;
        if meta.scaler.n_features() != meta.model.n_features || meta.scaler.n_outputs() != meta.model.output_dim {
            return Err(Error::Format("scaler does not match the model's inputs and outputs".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(MODEL_KIND, &self.meta)?;
        for (name, shape, data) in self.params.named_tensors() {
            c.push(Tensor::new(name, shape, data.to_vec())?);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != MODEL_KIND {
            return Err(Error::Format(format!("expected a {MODEL_KIND} artifact, found {}", c.kind)));
        }
        let meta: ModelMeta = c.header_as()?;
        meta.model.validate()?;
        let mut params = ModelParams::<f64>::zeros(&meta.model);
        let names: Vec<(String, Vec<usize>)> =
            params.named_tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if c.tensors.len() != names.len() {
            return Err(Error::Format(format!("model artifact holds {} tensors, config implies {}", c.tensors.len(), names.len())));
        }
        for (dst, (name, shape)) in params.tensors_mut().into_iter().zip(&names) {
            let t = c.tensor(name)?;
            if &t.shape != shape {
                return Err(Error::Format(format!("tensor {name}: shape {:?}, config implies {shape:?}", t.shape)));
            }
            dst.copy_from_slice(&t.data);
        }
        if !params.is_finite() {
            return Err(Error::Format("model parameters are not finite".into()));
        }
        Self::new(meta, &params)
    }

    pub fn params_as<T: Scalar>(&self) -> ModelParams<T> {
        self.params.cast()
    }

    /// Writes the artifact and returns its digest.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let c = self.to_container()?;
        c.save(path)?;
        c.digest_hex()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load_kind(path, MODEL_KIND)?)
    }
}
