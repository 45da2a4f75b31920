//! Sparse multi-source observation data.
//!
//! A [`Schema`] binds a set of fibers (the modes of the master tensor, e.g.
//! user / top / bottom) to a set of [`DataSource`]s, each of which is a sparse
//! tensor over an ordered subset of those fibers. Indices are 0-based
//! everywhere.

mod io;
mod split;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_observations_csv, read_observations, write_observations, write_observations_csv,
};
pub use split::{minibatches, split, SourceSplit, SplitPlan};

pub type SourceId = u32;

/// One mode of the master tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiberSpec {
    pub id: usize,
    pub label: String,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Squared,
    /// Sigmoid output with log loss, for binary-valued sources.
    CrossEntropy,
}

/// Declared layout of one source, without its observations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub id: SourceId,
    pub name: String,
    pub fibers: Vec<usize>,
    #[serde(default)]
    pub loss: LossKind,
}

impl SourceSpec {
    pub fn new(id: SourceId, name: &str, fibers: &[usize]) -> Self {
        Self {
            id,
            name: name.to_string(),
            fibers: fibers.to_vec(),
            loss: LossKind::Squared,
        }
    }

    pub fn order(&self) -> usize {
        self.fibers.len()
    }
}

/// Fiber and source declarations, as stored in the schema JSON file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub fibers: Vec<FiberSpec>,
    pub sources: Vec<SourceSpec>,
}

impl SchemaConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn read_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn write_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn source(&self, id: SourceId) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.id == id)
    }
}

/// One observed tensor: its declared layout plus sparse `(index tuple, value)` cells.
///
/// Index tuples are stored flat, `order()` entries per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSource {
    spec: SourceSpec,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl DataSource {
    pub fn new(spec: SourceSpec) -> Self {
        Self {
            spec,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn with_capacity(spec: SourceSpec, n: usize) -> Self {
        let order = spec.order();
        Self {
            spec,
            indices: Vec::with_capacity(n * order),
            values: Vec::with_capacity(n),
        }
    }

    /// Appends a cell. Bounds and duplicates are checked by [`build_schema`].
    pub fn push(&mut self, index: &[usize], value: f64) -> Result<()> {
        if index.len() != self.order() {
            return Err(Error::DimensionMismatch {
                expected: self.order(),
                actual: index.len(),
            });
        }
        self.indices.extend_from_slice(index);
        self.values.push(value);
        Ok(())
    }

    pub fn spec(&self) -> &SourceSpec {
        &self.spec
    }

    pub fn id(&self) -> SourceId {
        self.spec.id
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn fibers(&self) -> &[usize] {
        &self.spec.fibers
    }

    pub fn order(&self) -> usize {
        self.spec.fibers.len()
    }

    pub fn loss(&self) -> LossKind {
        self.spec.loss
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index(&self, obs: usize) -> &[usize] {
        let k = self.order();
        &self.indices[obs * k..(obs + 1) * k]
    }

    pub fn value(&self, obs: usize) -> f64 {
        self.values[obs]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.indices
            .chunks_exact(self.order())
            .zip(self.values.iter().copied())
    }
}

/// Validated, immutable binding of sources to fibers.
#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    fibers: Vec<FiberSpec>,
    sources: Vec<DataSource>,
}

/// Validates `fibers` and `sources` and binds them into a [`Schema`].
///
/// Fiber ids must be exactly `0..K` (in any order). Sources must have order
/// between 2 and K, distinct fiber signatures, in-range indices and no
/// duplicate cells.
pub fn build_schema(mut fibers: Vec<FiberSpec>, sources: Vec<DataSource>) -> Result<Schema> {
    if fibers.is_empty() {
        return Err(Error::invalid("schema declares no fibers"));
    }
    fibers.sort_by_key(|f| f.id);
    for (pos, f) in fibers.iter().enumerate() {
        if pos > 0 && fibers[pos - 1].id == f.id {
            return Err(Error::invalid(format!("duplicate fiber id {}", f.id)));
        }
        if f.id != pos {
            return Err(Error::invalid(format!(
                "fiber ids must be 0..{}; found {}",
                fibers.len(),
                f.id
            )));
        }
        if f.dim == 0 {
            return Err(Error::invalid(format!("fiber '{}' has dim 0", f.label)));
        }
    }
    let k = fibers.len();
    let max_sources = if k >= 64 {
        usize::MAX
    } else {
        (1usize << k) - k - 1
    };
    if sources.len() > max_sources {
        return Err(Error::invalid(format!(
            "{} sources exceed the maximum of {} for K = {}",
            sources.len(),
            max_sources,
            k
        )));
    }

    let mut ids = HashSet::new();
    let mut names = HashSet::new();
    let mut signatures = HashSet::new();
    for src in &sources {
        let spec = src.spec();
        if !ids.insert(spec.id) {
            return Err(Error::invalid(format!("duplicate source id {}", spec.id)));
        }
        if spec.name.is_empty() || !names.insert(spec.name.clone()) {
            return Err(Error::invalid(format!(
                "source {} needs a unique non-empty name",
                spec.id
            )));
        }
        if spec.order() < 2 || spec.order() > k {
            return Err(Error::invalid(format!(
                "source '{}' has order {}; must be in 2..={}",
                spec.name,
                spec.order(),
                k
            )));
        }
        let mut sig = spec.fibers.clone();
        sig.sort_unstable();
        if sig.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!(
                "source '{}' repeats a fiber",
                spec.name
            )));
        }
        if let Some(&bad) = sig.iter().find(|&&f| f >= k) {
            return Err(Error::invalid(format!(
                "source '{}' references unknown fiber {}",
                spec.name, bad
            )));
        }
        if !signatures.insert(sig) {
            return Err(Error::invalid(format!(
                "source '{}' duplicates another source's fiber signature",
                spec.name
            )));
        }
        validate_cells(src, &fibers)?;
    }
    Ok(Schema { fibers, sources })
}

fn validate_cells(src: &DataSource, fibers: &[FiberSpec]) -> Result<()> {
    let dims: Vec<usize> = src.fibers().iter().map(|&f| fibers[f].dim).collect();
    // Mixed-radix linear index; every realistic shape fits in u128.
    let linear = |idx: &[usize]| -> Option<u128> {
        idx.iter().zip(&dims).try_fold(0u128, |acc, (&i, &d)| {
            acc.checked_mul(d as u128)?.checked_add(i as u128)
        })
    };
    let mut seen_linear = HashSet::with_capacity(src.len());
    let mut seen_tuples: HashSet<&[usize]> = HashSet::new();
    for (obs, (idx, value)) in src.iter().enumerate() {
        for (pos, (&i, &d)) in idx.iter().zip(&dims).enumerate() {
            if i >= d {
                return Err(Error::invalid(format!(
                    "source '{}' observation {}: index {} on fiber {} out of range (dim {})",
                    src.name(),
                    obs,
                    i,
                    src.fibers()[pos],
                    d
                )));
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "source '{}' observation {}",
                src.name(),
                obs
            )));
        }
        let fresh = match linear(idx) {
            Some(l) => seen_linear.insert(l),
            None => seen_tuples.insert(idx),
        };
        if !fresh {
            return Err(Error::invalid(format!(
                "source '{}' has duplicate cell {:?}",
                src.name(),
                idx
            )));
        }
    }
    Ok(())
}

impl Schema {
    /// Builds a schema with empty sources from a declaration.
    pub fn empty(config: &SchemaConfig) -> Result<Self> {
        build_schema(
            config.fibers.clone(),
            config
                .sources
                .iter()
                .cloned()
                .map(DataSource::new)
                .collect(),
        )
    }

    /// Number of fibers K.
    pub fn order(&self) -> usize {
        self.fibers.len()
    }

    /// Number of sources L.
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn fibers(&self) -> &[FiberSpec] {
        &self.fibers
    }

    pub fn fiber_dims(&self) -> Vec<usize> {
        self.fibers.iter().map(|f| f.dim).collect()
    }

    pub fn sources(&self) -> &[DataSource] {
        &self.sources
    }

    pub fn source(&self, id: SourceId) -> Option<&DataSource> {
        self.sources.iter().find(|s| s.id() == id)
    }

    pub fn source_by_name(&self, name: &str) -> Option<&DataSource> {
        self.sources.iter().find(|s| s.name() == name)
    }

    pub fn source_ids(&self) -> Vec<SourceId> {
        self.sources.iter().map(DataSource::id).collect()
    }

    /// Number of cells in the full (dense) tensor of a source.
    pub fn cell_count(&self, id: SourceId) -> Option<f64> {
        let src = self.source(id)?;
        Some(
            src.fibers()
                .iter()
                .map(|&f| self.fibers[f].dim as f64)
                .product(),
        )
    }

    /// Observed fraction |Ω_l| / Π n_{l_j}.
    pub fn density(&self, id: SourceId) -> Option<f64> {
        let cells = self.cell_count(id)?;
        Some(self.source(id)?.len() as f64 / cells)
    }

    pub fn config(&self) -> SchemaConfig {
        SchemaConfig {
            fibers: self.fibers.clone(),
            sources: self.sources.iter().map(|s| s.spec().clone()).collect(),
        }
    }

    /// Keeps only sources that have at least one observation.
    pub fn drop_empty_sources(self) -> Self {
        Schema {
            fibers: self.fibers,
            sources: self.sources.into_iter().filter(|s| !s.is_empty()).collect(),
        }
    }
}
