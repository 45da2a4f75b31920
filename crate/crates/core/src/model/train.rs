use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{multi_task_loss, JointModel};
use crate::error::{Error, Result};
use crate::metrics::{score, Scores};
use crate::nn::{AdamState, MlpAdam};
use crate::obs_store::{minibatches, DataSource, Schema, SourceId, SplitPlan};
use crate::seed;

/// Which training sources each entity appeared in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// fiber -> entity -> sorted source ids.
    pub per_fiber: Vec<Vec<Vec<SourceId>>>,
}

impl Coverage {
    fn build(schema: &Schema, plan: &SplitPlan, sources: &[SourceId]) -> Self {
        let mut per_fiber: Vec<Vec<Vec<SourceId>>> = schema
            .fibers()
            .iter()
            .map(|f| vec![Vec::new(); f.dim])
            .collect();
        for &id in sources {
            let Some(src) = schema.source(id) else {
                continue;
            };
            for &o in plan.train(id) {
                for (&f, &i) in src.fibers().iter().zip(src.index(o)) {
                    let list = &mut per_fiber[f][i];
                    if list.last() != Some(&id) {
                        list.push(id);
                    }
                }
            }
        }
        for lists in &mut per_fiber {
            for l in lists.iter_mut() {
                l.sort_unstable();
                l.dedup();
            }
        }
        Coverage { per_fiber }
    }

    pub fn sources_for(&self, fiber: usize, index: usize) -> &[SourceId] {
        self.per_fiber
            .get(fiber)
            .and_then(|f| f.get(index))
            .map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean objective over the steps of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Modeled sources skipped because their training set was empty.
    pub dropped_sources: Vec<SourceId>,
}

/// Endless shuffled batches over one source's training indices; each pass
/// through the list is a fresh permutation.
struct Cycler<'a> {
    source: &'a DataSource,
    list: &'a [usize],
    batch_size: usize,
    seed: u64,
    pass: u64,
    queue: Vec<Vec<usize>>,
    pos: usize,
}

impl<'a> Cycler<'a> {
    fn next(&mut self) -> Result<Vec<usize>> {
        if self.pos == self.queue.len() {
            self.queue = minibatches(
                self.source,
                self.list,
                self.batch_size,
                self.seed,
                self.pass,
            )?;
            self.pass += 1;
            self.pos = 0;
        }
        self.pos += 1;
        Ok(std::mem::take(&mut self.queue[self.pos - 1]))
    }
}

/// Trains for `config.epochs` epochs. See [`train_until`].
pub fn train(model: &mut JointModel, schema: &Schema, plan: &SplitPlan) -> Result<TrainReport> {
    train_until(model, schema, plan, None)
}

/// Adam on the multi-task objective.
///
/// An epoch is as many steps as the largest training set needs to be seen
/// once; each step takes one batch from every modeled source, and smaller
/// sources cycle through reshuffled passes. Stops with [`Error::TimeLimit`]
/// once `time_limit` has elapsed (checked every step).
pub fn train_until(
    model: &mut JointModel,
    schema: &Schema,
    plan: &SplitPlan,
    time_limit: Option<Duration>,
) -> Result<TrainReport> {
    let started = Instant::now();
    let config = model.config().clone();
    let mut active = Vec::new();
    let mut dropped = Vec::new();
    for &id in &config.sources {
        let src = schema
            .source(id)
            .ok_or_else(|| Error::invalid(format!("source {id} missing from schema")))?;
        if plan.get(id).is_none() {
            return Err(Error::invalid(format!(
                "split plan does not cover source '{}'",
                src.name()
            )));
        }
        if plan.train(id).is_empty() {
            dropped.push(id);
        } else {
            active.push(src);
        }
    }
    if active.is_empty() {
        return Err(Error::invalid("no modeled source has training data"));
    }
    model.coverage = Some(Coverage::build(
        schema,
        plan,
        &active.iter().map(|s| s.id()).collect::<Vec<_>>(),
    ));

    let batch_seed = seed::derive(config.seed, &[seed::tag("minibatch")]);
    let mut cyclers: Vec<Cycler<'_>> = active
        .iter()
        .map(|src| Cycler {
            source: src,
            list: plan.train(src.id()),
            batch_size: config.batch_size,
            seed: batch_seed,
            pass: 0,
            queue: Vec::new(),
            pos: 0,
        })
        .collect();
    let steps_per_epoch = active
        .iter()
        .map(|s| plan.train(s.id()).len().div_ceil(config.batch_size))
        .max()
        .unwrap_or(0);

    let r = config.rank;
    let mut factor_opt: Vec<AdamState> = model
        .factors
        .iter()
        .map(|t| AdamState::new(config.adam, t.len()))
        .collect();
    let mut head_opt: Vec<MlpAdam> = model
        .heads
        .iter()
        .map(|h| MlpAdam::new(config.adam, &h.net))
        .collect();

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for step in 0..steps_per_epoch {
            if let Some(limit) = time_limit.filter(|&l| started.elapsed() > l) {
                return Err(Error::TimeLimit(limit.as_secs_f64()));
            }
            let batches: Vec<(SourceId, Vec<usize>)> = cyclers
                .iter_mut()
                .map(|c| Ok((c.source.id(), c.next()?)))
                .collect::<Result<_>>()?;
            let views: Vec<(SourceId, &[usize])> =
                batches.iter().map(|(id, b)| (*id, b.as_slice())).collect();
            let (loss, grads) = match multi_task_loss(model, schema, &views) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            let diverged = |_| Error::Divergence { epoch, step, loss };
            for (((table, g), rows), opt) in model
                .factors
                .iter_mut()
                .zip(&grads.factors)
                .zip(&grads.touched)
                .zip(&mut factor_opt)
            {
                opt.step_rows(
                    table.as_slice_mut().expect("standard layout"),
                    g.as_slice().expect("standard layout"),
                    r,
                    rows,
                )
                .map_err(diverged)?;
            }
            for ((head, g), opt) in model.heads.iter_mut().zip(&grads.heads).zip(&mut head_opt) {
                if let Some(g) = g {
                    opt.step(&mut head.net, g).map_err(diverged)?;
                }
            }
            sum += loss;
            steps += 1;
        }
        epoch_losses.push(sum / steps_per_epoch.max(1) as f64);
    }
    Ok(TrainReport {
        epoch_losses,
        steps,
        dropped_sources: dropped,
    })
}

/// RMSE and MAE over every modeled source's test cells.
pub fn evaluate(
    model: &JointModel,
    schema: &Schema,
    plan: &SplitPlan,
) -> Result<BTreeMap<SourceId, Scores>> {
    let mut out = BTreeMap::new();
    for head in model.heads() {
        let src = schema
            .source(head.source)
            .ok_or_else(|| Error::invalid(format!("source {} missing from schema", head.source)))?;
        let test = plan.test(head.source);
        if test.is_empty() {
            return Err(Error::invalid(format!(
                "source '{}' has no test cells",
                src.name()
            )));
        }
        let cells: Vec<&[usize]> = test.iter().map(|&o| src.index(o)).collect();
        let predicted = model.predict_many(head.source, &cells)?;
        let actual: Vec<f64> = test.iter().map(|&o| src.value(o)).collect();
        out.insert(head.source, score(&actual, &predicted)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityCoverage {
    pub fiber: usize,
    pub index: usize,
    /// Training sources whose observations reached this entity's embedding.
    pub trained_by: Vec<SourceId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartPrediction {
    pub value: f64,
    pub entities: Vec<EntityCoverage>,
    /// Entities whose embedding never received a training gradient.
    pub untrained: Vec<(usize, usize)>,
}

/// Prediction plus per-entity training provenance.
///
/// An entity is warm if it appears in any modeled training source, even one
/// different from `source`; cold entities are flagged, not rejected.
pub fn cold_start_predict(
    model: &JointModel,
    source: SourceId,
    index: &[usize],
) -> Result<ColdStartPrediction> {
    let value = model.predict(source, index)?;
    let head = &model.heads()[model.head_position(source)?];
    let mut entities = Vec::with_capacity(index.len());
    let mut untrained = Vec::new();
    for (&fiber, &i) in head.fibers.iter().zip(index) {
        let trained_by = model
            .coverage()
            .map(|c| c.sources_for(fiber, i).to_vec())
            .unwrap_or_default();
        if trained_by.is_empty() {
            untrained.push((fiber, i));
        }
        entities.push(EntityCoverage {
            fiber,
            index: i,
            trained_by,
        });
    }
    Ok(ColdStartPrediction {
        value,
        entities,
        untrained,
    })
}
