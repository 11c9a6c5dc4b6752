use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldModel, ModelConfig};
use crate::error::{Error, Result};
use crate::geodata::Normalizer;
use crate::nn::{Mat, Params};

pub const CHECKPOINT_FORMAT: &str = "stfnn-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Model parameters keyed by module path, with everything needed to run
/// inference on raw coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub normalizer: Option<Normalizer>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(
        model: &FieldModel,
        normalizer: Option<&Normalizer>,
        seed: u64,
        epoch: Option<usize>,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |name, m| {
            tensors.insert(
                name,
                TensorRecord {
                    shape: m.shape(),
                    data: m.data().to_vec(),
                },
            );
        });
        Self {
            format: CHECKPOINT_FORMAT.into(),
            config: model.config.clone(),
            normalizer: normalizer.cloned(),
            seed,
            epoch,
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<FieldModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {:?}",
                self.format
            )));
        }
        let mut model = FieldModel::new(self.config.clone())?;
        let mut problems = Vec::new();
        let mut seen = 0;
        model.visit_mut("", &mut |name, m| match self.tensors.get(&name) {
            Some(t) if t.shape == m.shape() && t.data.len() == m.data().len() => {
                *m = Mat::from_vec(t.shape[0], t.shape[1], t.data.clone());
                seen += 1;
            }
            Some(t) => problems.push(format!("{name}: shape {:?}, expected {:?}", t.shape, m.shape())),
            None => problems.push(format!("{name}: missing")),
        });
        if seen != self.tensors.len() && problems.is_empty() {
            problems.push(format!("{} unexpected tensors", self.tensors.len() - seen));
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}
