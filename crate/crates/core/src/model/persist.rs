//! Versioned single-file model format (JSON).
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so a loaded model reproduces predictions bit for bit.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{head_input_dim, Coverage, Head, JointModel, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpRecord};
use crate::obs_store::{LossKind, SourceId};

pub const MODEL_FORMAT: &str = "jima-model";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: ModelConfig,
    factors: Vec<FactorRecord>,
    heads: Vec<HeadRecord>,
    #[serde(default)]
    coverage: Option<Coverage>,
}

#[derive(Serialize, Deserialize)]
struct FactorRecord {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadRecord {
    source: SourceId,
    name: String,
    fibers: Vec<usize>,
    loss: LossKind,
    net: MlpRecord,
}

impl JointModel {
    pub fn to_json_string(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            factors: self
                .factors
                .iter()
                .map(|t| FactorRecord {
                    rows: t.nrows(),
                    cols: t.ncols(),
                    data: t.iter().copied().collect(),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadRecord {
                    source: h.source,
                    name: h.name.clone(),
                    fibers: h.fibers.clone(),
                    loss: h.loss,
                    net: h.net.to_record(),
                })
                .collect(),
            coverage: self.coverage.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let r = file.config.rank;
        let factors = file
            .factors
            .into_iter()
            .map(|f| {
                if f.cols != r || f.rows == 0 {
                    return Err(Error::invalid(
                        "embedding table shape does not match the rank",
                    ));
                }
                if !f.data.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite("embedding table".into()));
                }
                Array2::from_shape_vec((f.rows, f.cols), f.data)
                    .map_err(|e| Error::invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = file
            .heads
            .into_iter()
            .map(|h| {
                let net = Mlp::from_record(&h.net)?;
                let k = h.fibers.len();
                if k < 2 || h.fibers.iter().any(|&f| f >= factors.len()) {
                    return Err(Error::invalid(format!(
                        "head {} has invalid fibers",
                        h.source
                    )));
                }
                if net.input_dim() != head_input_dim(k, r, file.config.use_interactions) {
                    return Err(Error::invalid(format!(
                        "head {} input width does not match its fibers",
                        h.source
                    )));
                }
                Ok(Head {
                    source: h.source,
                    name: h.name,
                    fibers: h.fibers,
                    loss: h.loss,
                    net,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let listed: Vec<SourceId> = heads.iter().map(|h| h.source).collect();
        if listed != file.config.sources {
            return Err(Error::invalid("heads do not match the configured sources"));
        }
        if let Some(c) = &file.coverage {
            let shape_ok = c.per_fiber.len() == factors.len()
                && c.per_fiber
                    .iter()
                    .zip(&factors)
                    .all(|(e, t)| e.len() == t.nrows());
            if !shape_ok {
                return Err(Error::invalid(
                    "coverage table does not match the embeddings",
                ));
            }
        }
        Ok(JointModel {
            config: file.config,
            factors,
            heads,
            coverage: file.coverage,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}
