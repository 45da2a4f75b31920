use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataSource, Schema, SourceId};
use crate::error::{Error, Result};
use crate::seed;

/// Observation indices (into a [`DataSource`]) assigned to train and test.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_fraction: f64,
    pub seed: u64,
    pub per_source: BTreeMap<SourceId, SourceSplit>,
}

impl SplitPlan {
    pub fn get(&self, id: SourceId) -> Option<&SourceSplit> {
        self.per_source.get(&id)
    }

    pub fn train(&self, id: SourceId) -> &[usize] {
        self.per_source.get(&id).map_or(&[], |s| &s.train)
    }

    pub fn test(&self, id: SourceId) -> &[usize] {
        self.per_source.get(&id).map_or(&[], |s| &s.test)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Checks that every split references valid, disjoint, exhaustive indices.
    pub fn validate_against(&self, schema: &Schema) -> Result<()> {
        for (&id, s) in &self.per_source {
            let src = schema
                .source(id)
                .ok_or_else(|| Error::invalid(format!("split references unknown source {id}")))?;
            let mut seen = vec![false; src.len()];
            for &i in s.train.iter().chain(&s.test) {
                if i >= src.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!(
                        "split for source '{}' has an invalid or repeated index {i}",
                        src.name()
                    )));
                }
            }
            if seen.iter().any(|&b| !b) {
                return Err(Error::invalid(format!(
                    "split for source '{}' does not cover every observation",
                    src.name()
                )));
            }
        }
        Ok(())
    }
}

/// Independently splits every source into train/test by uniform sampling
/// without replacement; `round(train_fraction * n)` observations go to train.
pub fn split(schema: &Schema, train_fraction: f64, seed_value: u64) -> Result<SplitPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut per_source = BTreeMap::new();
    for src in schema.sources() {
        if src.is_empty() {
            return Err(Error::invalid(format!("source '{}' is empty", src.name())));
        }
        let n = src.len();
        let n_train = (train_fraction * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(seed_value, &[seed::tag("split"), u64::from(src.id())]);
        order.shuffle(&mut rng);
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        per_source.insert(src.id(), SourceSplit { train, test });
    }
    Ok(SplitPlan {
        train_fraction,
        seed: seed_value,
        per_source,
    })
}

/// One epoch of shuffled minibatches over `index_list`.
///
/// The permutation depends on `(seed, source id, epoch)`; every index appears
/// exactly once across the returned batches.
pub fn minibatches(
    source: &DataSource,
    index_list: &[usize],
    batch_size: usize,
    seed_value: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if index_list.is_empty() {
        return Err(Error::invalid(format!(
            "no observations to batch for source '{}'",
            source.name()
        )));
    }
    let mut perm = index_list.to_vec();
    let mut rng = seed::rng(
        seed_value,
        &[seed::tag("batch"), u64::from(source.id()), epoch],
    );
    perm.shuffle(&mut rng);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
