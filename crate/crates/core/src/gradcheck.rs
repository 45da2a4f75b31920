//! Central finite-difference checks of the multi-task objective's gradient
//! over randomized toy layouts (two entities per fiber).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{multi_task_loss, JointModel, ModelConfig};
use crate::obs_store::{
    build_schema, DataSource, FiberSpec, LossKind, Schema, SourceId, SourceSpec,
};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub instances: usize,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Finite-difference step.
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            tol: 1e-4,
            step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance: usize,
    pub layout: String,
    pub params: usize,
    /// Parameters compared; the rest sat on a rectifier kink.
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter with the largest error.
    pub worst_param: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tol: f64,
    pub instances: Vec<InstanceResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.instances.is_empty()
            && self
                .instances
                .iter()
                .all(|r| r.checked > 0 && r.max_rel_error < self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.instances
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Toy problem: a schema, a model over it and one batch per source.
pub struct Instance {
    pub layout: String,
    pub schema: Schema,
    pub model: JointModel,
    pub batches: Vec<(SourceId, Vec<usize>)>,
}

fn full_source(spec: SourceSpec, rng: &mut impl Rng) -> Result<DataSource> {
    let k = spec.order();
    let binary = spec.loss == LossKind::CrossEntropy;
    let mut src = DataSource::with_capacity(spec, 1 << k);
    for c in 0..(1usize << k) {
        let idx: Vec<usize> = (0..k).map(|j| (c >> j) & 1).collect();
        let y = if binary {
            f64::from(rng.random_bool(0.5))
        } else {
            rng.random_range(-2.0..2.0)
        };
        src.push(&idx, y)?;
    }
    Ok(src)
}

/// Instance `i` of the randomized suite. Layouts rotate through the
/// three-item schema with and without interactions, a single order-4 tensor
/// and a binary matrix.
pub fn instance(i: usize, base_seed: u64) -> Result<Instance> {
    let mut rng = seed::rng(base_seed, &[seed::tag("gradcheck"), i as u64]);
    let (layout, k, specs, interactions): (&str, usize, Vec<SourceSpec>, bool) = match i % 4 {
        0 | 1 => (
            if i.is_multiple_of(4) {
                "k3-l4-interactions"
            } else {
                "k3-l4-plain"
            },
            3,
            vec![
                SourceSpec::new(1, "utb", &[0, 1, 2]),
                SourceSpec::new(2, "ut", &[0, 1]),
                SourceSpec::new(3, "ub", &[0, 2]),
                SourceSpec::new(4, "tb", &[1, 2]),
            ],
            i.is_multiple_of(4),
        ),
        2 => (
            "k4-utbh",
            4,
            vec![SourceSpec::new(1, "utbh", &[0, 1, 2, 3])],
            true,
        ),
        _ => (
            "k2-binary",
            2,
            vec![SourceSpec {
                loss: LossKind::CrossEntropy,
                ..SourceSpec::new(1, "click", &[0, 1])
            }],
            true,
        ),
    };
    let fibers: Vec<FiberSpec> = (0..k)
        .map(|id| FiberSpec {
            id,
            label: format!("f{id}"),
            dim: 2,
        })
        .collect();
    let sources = specs
        .into_iter()
        .map(|s| full_source(s, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let schema = build_schema(fibers, sources)?;
    let ids = schema.source_ids();
    let hidden: Vec<usize> = (0..rng.random_range(1..=2))
        .map(|_| rng.random_range(3..=6))
        .collect();
    let config = ModelConfig {
        rank: 2,
        use_interactions: interactions,
        head_hidden: hidden,
        head_lambda: rng.random_range(0.0..0.05),
        embedding_lambda: rng.random_range(0.0..0.05),
        init_sd: rng.random_range(0.5..1.0),
        seed: rng.random(),
        ..ModelConfig::new(&ids)
    };
    let model = JointModel::new(&schema, config)?;
    let batches = schema
        .sources()
        .iter()
        .map(|s| {
            let size = rng.random_range(1..=s.len());
            let picked = rand::seq::index::sample(&mut rng, s.len(), size).into_vec();
            (s.id(), picked)
        })
        .collect();
    Ok(Instance {
        layout: layout.to_string(),
        schema,
        model,
        batches,
    })
}

/// Analytic gradient provider: objective value and the gradient flattened in
/// [`JointModel::param`] order.
pub type Analytic<'a> =
    dyn Fn(&JointModel, &Schema, &[(SourceId, &[usize])]) -> Result<(f64, Vec<f64>)> + 'a;

pub fn backprop(
    model: &JointModel,
    schema: &Schema,
    batches: &[(SourceId, &[usize])],
) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = multi_task_loss(model, schema, batches)?;
    Ok((loss, grads.flat(model)))
}

/// Compares `analytic` with central differences on every parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`. Parameters whose left
/// and right one-sided slopes disagree straddle a rectifier kink, where the
/// derivative does not exist, and are skipped.
pub fn check_instance(
    inst: &Instance,
    step: f64,
    analytic: &Analytic<'_>,
) -> Result<(usize, f64, usize)> {
    let batches: Vec<(SourceId, &[usize])> = inst
        .batches
        .iter()
        .map(|(id, b)| (*id, b.as_slice()))
        .collect();
    let (l0, grad) = analytic(&inst.model, &inst.schema, &batches)?;
    if grad.len() != inst.model.num_params() {
        return Err(Error::DimensionMismatch {
            expected: inst.model.num_params(),
            actual: grad.len(),
        });
    }
    let loss = |m: &JointModel| multi_task_loss(m, &inst.schema, &batches).map(|(l, _)| l);
    let mut probe = inst.model.clone();
    let (mut checked, mut worst, mut worst_param) = (0, 0.0_f64, 0);
    for p in 0..grad.len() {
        let orig = inst.model.param(p);
        probe.set_param(p, orig + step);
        let lp = loss(&probe)?;
        probe.set_param(p, orig - step);
        let lm = loss(&probe)?;
        probe.set_param(p, orig);
        let numeric = (lp - lm) / (2.0 * step);
        let right = (lp - l0) / step;
        let left = (l0 - lm) / step;
        if (right - left).abs() > 1e-3 * numeric.abs().max(1.0) {
            continue;
        }
        let rel = (grad[p] - numeric).abs() / grad[p].abs().max(numeric.abs()).max(1e-6);
        checked += 1;
        if rel > worst || rel.is_nan() {
            worst = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_param = p;
        }
    }
    Ok((checked, worst, worst_param))
}

pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    run_with(config, &backprop)
}

/// The suite with a substitute gradient, for testing the checker itself.
pub fn run_with(config: &GradcheckConfig, analytic: &Analytic<'_>) -> Result<GradcheckReport> {
    if config.instances == 0 || !(config.tol > 0.0) || !(config.step > 0.0) {
        return Err(Error::invalid(
            "gradcheck needs instances >= 1 and positive tol and step",
        ));
    }
    let mut instances = Vec::with_capacity(config.instances);
    for i in 0..config.instances {
        let inst = instance(i, config.seed)?;
        let (checked, max_rel_error, worst_param) = check_instance(&inst, config.step, analytic)?;
        instances.push(InstanceResult {
            instance: i,
            layout: inst.layout,
            params: inst.model.num_params(),
            checked,
            max_rel_error,
            worst_param,
        });
    }
    Ok(GradcheckReport {
        tol: config.tol,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backprop_passes_a_short_suite() {
        let report = run(&GradcheckConfig {
            instances: 8,
            ..Default::default()
        })
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error());
        let layouts: std::collections::BTreeSet<&str> =
            report.instances.iter().map(|r| r.layout.as_str()).collect();
        assert_eq!(layouts.len(), 4);
        for r in &report.instances {
            assert!(r.checked * 10 >= r.params * 9, "{r:?}");
        }
    }

    #[test]
    fn a_sign_error_is_caught() {
        let flipped = |m: &JointModel, s: &Schema, b: &[(SourceId, &[usize])]| {
            backprop(m, s, b).map(|(l, g)| (l, g.into_iter().map(|v| -v).collect()))
        };
        let report = run_with(
            &GradcheckConfig {
                instances: 4,
                ..Default::default()
            },
            &flipped,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.instances.iter().all(|r| r.max_rel_error > 1.0));
    }

    #[test]
    fn a_single_wrong_component_is_caught() {
        let nudged = |m: &JointModel, s: &Schema, b: &[(SourceId, &[usize])]| {
            backprop(m, s, b).map(|(l, mut g)| {
                // first embedding coordinate
                g[0] = g[0] * 1.01 + 1e-3;
                (l, g)
            })
        };
        let report = run_with(
            &GradcheckConfig {
                instances: 2,
                ..Default::default()
            },
            &nudged,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.instances[0].worst_param, 0);
    }

    #[test]
    fn instances_are_reproducible() {
        let a = instance(5, 3).unwrap();
        let b = instance(5, 3).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.batches, b.batches);
        assert!(run(&GradcheckConfig {
            instances: 0,
            ..Default::default()
        })
        .is_err());
    }
}
