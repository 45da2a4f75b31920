//! Joint multi-source model: one latent-factor table per fiber shared by every
//! source, plus one feedforward prediction head per source.
//!
//! NCF and NTF are the single-source, interaction-free configurations; the
//! ablations toggle `use_interactions` and the source subset.

mod features;
mod objective;
mod persist;
mod train;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, Mlp, DEFAULT_HIDDEN};
use crate::obs_store::{LossKind, Schema, SourceId};
use crate::seed;

pub use features::{head_input_dim, interaction_features, interaction_masks};
pub use objective::{batch_loss, multi_task_loss, JointGrads};
pub use persist::{MODEL_FORMAT, MODEL_FORMAT_VERSION};
pub use train::{
    cold_start_predict, evaluate, train, train_until, ColdStartPrediction, Coverage,
    EntityCoverage, TrainReport,
};

fn default_rank() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}
fn default_lambda() -> f64 {
    1e-4
}
fn default_init_sd() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent dimension r.
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_true")]
    pub use_interactions: bool,
    /// Sources modeled jointly; must be non-empty.
    pub sources: Vec<SourceId>,
    #[serde(default = "default_hidden")]
    pub head_hidden: Vec<usize>,
    /// L2 weight on head weights and biases, unless overridden per source.
    #[serde(default = "default_lambda")]
    pub head_lambda: f64,
    #[serde(default)]
    pub head_lambdas: BTreeMap<SourceId, f64>,
    /// L2 weight on the embedding rows touched by a step.
    #[serde(default = "default_lambda")]
    pub embedding_lambda: f64,
    /// Standard deviation of the normal embedding initialization.
    #[serde(default = "default_init_sd")]
    pub init_sd: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clamp: Option<(f64, f64)>,
}

impl ModelConfig {
    pub fn new(sources: &[SourceId]) -> Self {
        Self {
            rank: default_rank(),
            use_interactions: true,
            sources: sources.to_vec(),
            head_hidden: default_hidden(),
            head_lambda: default_lambda(),
            head_lambdas: BTreeMap::new(),
            embedding_lambda: default_lambda(),
            init_sd: default_init_sd(),
            adam: AdamConfig::default(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            seed: 0,
            clamp: None,
        }
    }

    pub fn lambda_for(&self, source: SourceId) -> f64 {
        self.head_lambdas
            .get(&source)
            .copied()
            .unwrap_or(self.head_lambda)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::invalid("model needs at least one source"));
        }
        let mut seen = self.sources.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.sources.len() {
            return Err(Error::invalid("model lists a source twice"));
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.head_hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        let lambdas = std::iter::once(self.head_lambda)
            .chain(self.head_lambdas.values().copied())
            .chain([self.embedding_lambda, self.init_sd]);
        for l in lambdas {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::invalid(format!(
                    "penalty/scale {l} must be finite and >= 0"
                )));
            }
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo <= hi) {
                return Err(Error::invalid("clamp range must satisfy lo <= hi"));
            }
        }
        self.adam.validate()
    }
}

/// Prediction head for one source.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub source: SourceId,
    pub name: String,
    pub fibers: Vec<usize>,
    pub loss: LossKind,
    pub net: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointModel {
    config: ModelConfig,
    /// One `n_k x r` table per fiber.
    factors: Vec<Array2<f64>>,
    heads: Vec<Head>,
    coverage: Option<Coverage>,
}

impl JointModel {
    /// Fresh model: N(0, init_sd²) embeddings and scaled-uniform heads.
    pub fn new(schema: &Schema, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let r = config.rank;
        let normal = Normal::new(0.0, config.init_sd).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = seed::rng(config.seed, &[seed::tag("embedding")]);
        let factors = schema
            .fibers()
            .iter()
            .map(|f| Array2::from_shape_simple_fn((f.dim, r), || normal.sample(&mut rng)))
            .collect();
        let heads = config
            .sources
            .iter()
            .map(|&id| {
                let src = schema
                    .source(id)
                    .ok_or_else(|| Error::invalid(format!("unknown source {id}")))?;
                let dim = head_input_dim(src.order(), r, config.use_interactions);
                let mut rng = seed::rng(config.seed, &[seed::tag("head"), u64::from(id)]);
                Ok(Head {
                    source: id,
                    name: src.name().to_string(),
                    fibers: src.fibers().to_vec(),
                    loss: src.loss(),
                    net: Mlp::new(dim, &config.head_hidden, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            factors,
            heads,
            coverage: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn factors(&self) -> &[Array2<f64>] {
        &self.factors
    }

    pub fn factors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.factors
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head] {
        &mut self.heads
    }

    pub fn head(&self, source: SourceId) -> Option<&Head> {
        self.heads.iter().find(|h| h.source == source)
    }

    pub(crate) fn head_position(&self, source: SourceId) -> Result<usize> {
        self.heads
            .iter()
            .position(|h| h.source == source)
            .ok_or_else(|| Error::invalid(format!("source {source} is not modeled")))
    }

    pub fn coverage(&self) -> Option<&Coverage> {
        self.coverage.as_ref()
    }

    pub fn num_params(&self) -> usize {
        self.factors.iter().map(Array2::len).sum::<usize>()
            + self.heads.iter().map(|h| h.net.num_params()).sum::<usize>()
    }

    /// Flat parameter view: embedding tables (row-major, by fiber) then heads.
    pub fn param(&self, mut i: usize) -> f64 {
        for t in &self.factors {
            if i < t.len() {
                return t.as_slice().expect("standard layout")[i];
            }
            i -= t.len();
        }
        for h in &self.heads {
            if i < h.net.num_params() {
                return h.net.param(i);
            }
            i -= h.net.num_params();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut i: usize, value: f64) {
        for t in &mut self.factors {
            if i < t.len() {
                t.as_slice_mut().expect("standard layout")[i] = value;
                return;
            }
            i -= t.len();
        }
        for h in &mut self.heads {
            if i < h.net.num_params() {
                h.net.set_param(i, value);
                return;
            }
            i -= h.net.num_params();
        }
        panic!("parameter index out of range");
    }

    fn check_index(&self, head: &Head, index: &[usize]) -> Result<()> {
        if index.len() != head.fibers.len() {
            return Err(Error::DimensionMismatch {
                expected: head.fibers.len(),
                actual: index.len(),
            });
        }
        for (&f, &i) in head.fibers.iter().zip(index) {
            if i >= self.factors[f].nrows() {
                return Err(Error::invalid(format!(
                    "index {i} out of range for fiber {f} (dim {})",
                    self.factors[f].nrows()
                )));
            }
        }
        Ok(())
    }

    /// Head input for one cell: raw factor rows, then interaction blocks if enabled.
    pub fn head_input(&self, source: SourceId, index: &[usize]) -> Result<Vec<f64>> {
        let head = &self.heads[self.head_position(source)?];
        self.check_index(head, index)?;
        let rows: Vec<ArrayView1<'_, f64>> = head
            .fibers
            .iter()
            .zip(index)
            .map(|(&f, &i)| self.factors[f].row(i))
            .collect();
        let vectors: Vec<&[f64]> = rows
            .iter()
            .map(|r| r.as_slice().expect("contiguous row"))
            .collect();
        let mut out = vec![0.0; head.net.input_dim()];
        features::write_head_input(&vectors, self.config.use_interactions, &mut out);
        Ok(out)
    }

    /// Builds the `batch x input_dim` head-input matrix for a list of cells.
    pub(crate) fn head_inputs<'a>(
        &self,
        head: &Head,
        cells: impl ExactSizeIterator<Item = &'a [usize]>,
    ) -> Array2<f64> {
        let width = head.net.input_dim();
        let mut x = Array2::zeros((cells.len(), width));
        let mut vectors: Vec<&[f64]> = Vec::with_capacity(head.fibers.len());
        for (mut row, idx) in x.rows_mut().into_iter().zip(cells) {
            vectors.clear();
            for (&f, &i) in head.fibers.iter().zip(idx) {
                vectors.push(self.factors[f].row(i).to_slice().expect("contiguous row"));
            }
            features::write_head_input(
                &vectors,
                self.config.use_interactions,
                row.as_slice_mut().expect("contiguous row"),
            );
        }
        x
    }

    fn finish(&self, head: &Head, z: f64) -> f64 {
        let y = match head.loss {
            LossKind::Squared => z,
            LossKind::CrossEntropy => sigmoid(z),
        };
        match self.config.clamp {
            Some((lo, hi)) => y.clamp(lo, hi),
            None => y,
        }
    }

    /// Predicted value for one cell of a modeled source.
    pub fn predict(&self, source: SourceId, index: &[usize]) -> Result<f64> {
        let head = &self.heads[self.head_position(source)?];
        let input = self.head_input(source, index)?;
        let (z, _) = head.net.forward(&input)?;
        Ok(self.finish(head, z))
    }

    /// Predictions for many cells at once.
    pub fn predict_many(&self, source: SourceId, cells: &[&[usize]]) -> Result<Vec<f64>> {
        let head = &self.heads[self.head_position(source)?];
        for idx in cells {
            self.check_index(head, idx)?;
        }
        let mut out = Vec::with_capacity(cells.len());
        for chunk in cells.chunks(4096) {
            let x = self.head_inputs(head, chunk.iter().copied());
            out.extend(
                head.net
                    .predict_batch(x.view())
                    .iter()
                    .map(|&z| self.finish(head, z)),
            );
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests;
