//! Replication harness: generate or load data, split, fit every method, score
//! the test cells, and aggregate across replications.

mod table;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{cp_fit, gmi_fit_source, mf_fit, CpConfig, MfConfig};
use crate::error::{Error, Result};
use crate::metrics::{score, Metric, Scores};
use crate::model::{evaluate, train_until, JointModel, ModelConfig};
use crate::obs_store::{load_observations_csv, split, Schema, SchemaConfig, SourceId, SplitPlan};
use crate::ratings::{load_ratings, synthetic_ratings, SyntheticRatingsSpec};
use crate::seed;
use crate::simgen::{gen_four_way, gen_three_way, SimSpec3, SimSpec4};

pub use table::{Failure, RawRecord, ResultRow, ResultTable, Stat, CSV_COLUMNS, RAW_COLUMNS};

/// Where each replication's data comes from. Generated kinds are redrawn per
/// replication; file-backed kinds are loaded once and only re-split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    ThreeWay(SimSpec3),
    FourWay(SimSpec4),
    Files {
        schema: PathBuf,
        observations: PathBuf,
    },
    Ratings {
        manifest: PathBuf,
    },
    SyntheticRatings(SyntheticRatingsSpec),
}

impl DataSpec {
    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSpec::Files {
                schema,
                observations,
            } => {
                fix(schema);
                fix(observations);
            }
            DataSpec::Ratings { manifest } => fix(manifest),
            _ => {}
        }
    }

    /// True when every replication draws fresh data.
    pub fn is_generated(&self) -> bool {
        matches!(self, DataSpec::ThreeWay(_) | DataSpec::FourWay(_))
    }

    /// The data set; `seed` replaces the generator seed of generated kinds.
    pub fn materialize(&self, seed: u64) -> Result<Schema> {
        Ok(match self {
            DataSpec::ThreeWay(s) => gen_three_way(&SimSpec3 { seed, ..s.clone() })?.schema,
            DataSpec::FourWay(s) => gen_four_way(&SimSpec4 { seed, ..s.clone() })?.schema,
            DataSpec::Files {
                schema,
                observations,
            } => load_observations_csv(observations, &SchemaConfig::read_json(schema)?)?,
            DataSpec::Ratings { manifest } => load_ratings(manifest)?.0,
            DataSpec::SyntheticRatings(s) => synthetic_ratings(s)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Gmi,
    Mf,
    Cp,
    /// Interaction-free network on one matrix.
    Ncf,
    /// Interaction-free network on one tensor.
    Ntf,
    /// Network with interaction features on one source.
    Nfx,
    /// Joint model without interaction features.
    Joint,
    /// Joint model with interaction features.
    Jima,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Gmi => "gmi",
            MethodKind::Mf => "mf",
            MethodKind::Cp => "cp",
            MethodKind::Ncf => "ncf",
            MethodKind::Ntf => "ntf",
            MethodKind::Nfx => "nfx",
            MethodKind::Joint => "joint",
            MethodKind::Jima => "jima",
        }
    }

    /// Fitted once per selected source, labelled `<label>_<source>`.
    fn per_source(self) -> bool {
        matches!(
            self,
            MethodKind::Mf | MethodKind::Cp | MethodKind::Ncf | MethodKind::Ntf | MethodKind::Nfx
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Source names; defaults to every source the kind applies to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Merged over the kind's default configuration.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub overrides: Value,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            sources: None,
            label: None,
            overrides: Value::Null,
        }
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.kind.name())
    }
}

fn default_fraction() -> f64 {
    0.2
}
fn default_reps() -> usize {
    10
}
fn default_metrics() -> Vec<Metric> {
    vec![Metric::Rmse, Metric::Mae]
}
fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub data: DataSpec,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    /// Wall-clock budget per replication.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit_s: Option<f64>,
    /// Replications run concurrently on this many threads.
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub methods: Vec<MethodSpec>,
}

impl ExperimentSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Loads a spec file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut spec = Self::from_json_str(&std::fs::read_to_string(path)?)?;
        spec.data
            .resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(spec)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::invalid("replications must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("method list is empty"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid(
                "train_fraction must lie strictly between 0 and 1",
            ));
        }
        if self.metrics.is_empty() {
            return Err(Error::invalid("metric list is empty"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if let Some(t) = self.time_limit_s {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::invalid("time_limit_s must be positive"));
            }
        }
        let mut labels = std::collections::HashSet::new();
        for m in &self.methods {
            if !labels.insert(m.label()) {
                return Err(Error::invalid(format!(
                    "duplicate method label '{}'",
                    m.label()
                )));
            }
            if !(m.overrides.is_null() || m.overrides.is_object()) {
                return Err(Error::invalid(format!(
                    "overrides of '{}' must be an object",
                    m.label()
                )));
            }
            // catches unknown fields and bad types before any work starts
            match m.kind {
                MethodKind::Gmi => {
                    if m.overrides.as_object().is_some_and(|o| !o.is_empty()) {
                        return Err(Error::invalid("gmi takes no overrides"));
                    }
                }
                MethodKind::Mf => merged::<MfConfig>(&m.overrides).map(drop)?,
                MethodKind::Cp => merged::<CpConfig>(&m.overrides).map(drop)?,
                _ => merged::<ModelConfig>(&m.overrides).map(drop)?,
            }
        }
        Ok(())
    }

    /// Keeps the methods whose label or kind name is listed.
    pub fn select_methods(&mut self, names: &[String]) -> Result<()> {
        let keep: Vec<MethodSpec> = self
            .methods
            .iter()
            .filter(|m| names.iter().any(|n| n == m.label() || n == m.kind.name()))
            .cloned()
            .collect();
        if keep.is_empty() {
            return Err(Error::invalid(format!(
                "no method matches {}",
                names.join(",")
            )));
        }
        self.methods = keep;
        Ok(())
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (_, Value::Null) => {}
        (b, p) => *b = p.clone(),
    }
}

/// Default configuration with `overrides` applied; unknown keys are rejected.
fn merged<T: Default + Serialize + serde::de::DeserializeOwned>(overrides: &Value) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Value::Object(o) = overrides {
        let known = value.as_object().expect("config serializes to an object");
        if let Some(k) = o.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::invalid(format!("unknown override '{k}'")));
        }
    }
    merge(&mut value, overrides);
    Ok(serde_json::from_value(value)?)
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::new(&[])
    }
}

#[derive(Clone, Debug)]
enum Fitter {
    Gmi,
    Mf(MfConfig),
    Cp(CpConfig),
    Neural(ModelConfig),
}

/// One fitted model per replication: a label and the sources it is scored on.
#[derive(Clone, Debug)]
struct Unit {
    label: String,
    sources: Vec<SourceId>,
    fitter: Fitter,
}

fn resolve_sources(schema: &Schema, m: &MethodSpec) -> Result<Vec<SourceId>> {
    let applies = |order: usize| match m.kind {
        MethodKind::Mf | MethodKind::Ncf => order == 2,
        MethodKind::Cp | MethodKind::Ntf => order >= 3,
        _ => true,
    };
    match &m.sources {
        None => Ok(schema
            .sources()
            .iter()
            .filter(|s| applies(s.order()))
            .map(|s| s.id())
            .collect()),
        Some(names) => names
            .iter()
            .map(|n| {
                let src = schema.source_by_name(n).ok_or_else(|| {
                    Error::invalid(format!("method '{}': unknown source '{n}'", m.label()))
                })?;
                if !applies(src.order()) {
                    return Err(Error::invalid(format!(
                        "method '{}' cannot model '{n}' of order {}",
                        m.label(),
                        src.order()
                    )));
                }
                Ok(src.id())
            })
            .collect(),
    }
}

fn plan_units(schema: &Schema, spec: &ExperimentSpec) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    for m in &spec.methods {
        let sources = resolve_sources(schema, m)?;
        if sources.is_empty() {
            return Err(Error::invalid(format!(
                "method '{}' applies to no source",
                m.label()
            )));
        }
        let fitter = |ids: &[SourceId]| -> Result<Fitter> {
            Ok(match m.kind {
                MethodKind::Gmi => Fitter::Gmi,
                MethodKind::Mf => Fitter::Mf(merged(&m.overrides)?),
                MethodKind::Cp => Fitter::Cp(merged(&m.overrides)?),
                kind => {
                    let mut cfg: ModelConfig = merged(&m.overrides)?;
                    cfg.sources = ids.to_vec();
                    cfg.use_interactions = matches!(kind, MethodKind::Nfx | MethodKind::Jima);
                    cfg.validate()?;
                    Fitter::Neural(cfg)
                }
            })
        };
        if m.kind.per_source() {
            for &id in &sources {
                let name = schema.source(id).expect("resolved").name();
                units.push(Unit {
                    label: format!("{}_{name}", m.label()),
                    sources: vec![id],
                    fitter: fitter(&[id])?,
                });
            }
        } else {
            units.push(Unit {
                label: m.label().to_string(),
                fitter: fitter(&sources)?,
                sources,
            });
        }
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(u) = units.iter().find(|u| !seen.insert(u.label.clone())) {
        return Err(Error::invalid(format!(
            "method label '{}' is produced twice",
            u.label
        )));
    }
    Ok(units)
}

fn test_scores(
    schema: &Schema,
    plan: &SplitPlan,
    id: SourceId,
    predict: impl Fn(&[usize]) -> Result<f64>,
) -> Result<Scores> {
    let src = schema.source(id).expect("resolved");
    let test = plan.test(id);
    let actual: Vec<f64> = test.iter().map(|&o| src.value(o)).collect();
    let predicted = test
        .iter()
        .map(|&o| predict(src.index(o)))
        .collect::<Result<Vec<_>>>()?;
    score(&actual, &predicted)
}

fn fit_unit(
    unit: &Unit,
    schema: &Schema,
    plan: &SplitPlan,
    rep_seed: u64,
    budget: Option<Duration>,
) -> Result<Vec<(SourceId, Scores)>> {
    let unit_seed = seed::derive(rep_seed, &[seed::tag(&unit.label)]);
    match &unit.fitter {
        Fitter::Gmi => unit
            .sources
            .iter()
            .map(|&id| {
                let g = gmi_fit_source(schema.source(id).expect("resolved"), plan.train(id))?;
                Ok((id, test_scores(schema, plan, id, |_| Ok(g.predict()))?))
            })
            .collect(),
        Fitter::Mf(cfg) => {
            let id = unit.sources[0];
            let cfg = MfConfig {
                seed: unit_seed,
                ..cfg.clone()
            };
            let (model, _) = mf_fit(schema, id, plan.train(id), &cfg)?;
            Ok(vec![(
                id,
                test_scores(schema, plan, id, |i| model.predict(i))?,
            )])
        }
        Fitter::Cp(cfg) => {
            let id = unit.sources[0];
            let cfg = CpConfig {
                seed: unit_seed,
                ..cfg.clone()
            };
            let (model, _) = cp_fit(schema, id, plan.train(id), &cfg)?;
            Ok(vec![(
                id,
                test_scores(schema, plan, id, |i| model.predict(i))?,
            )])
        }
        Fitter::Neural(cfg) => {
            let cfg = ModelConfig {
                seed: unit_seed,
                ..cfg.clone()
            };
            let mut model = JointModel::new(schema, cfg)?;
            train_until(&mut model, schema, plan, budget)?;
            Ok(evaluate(&model, schema, plan)?.into_iter().collect())
        }
    }
}

enum Data {
    Fixed(Arc<Schema>),
    Generated,
}

fn load_fixed(spec: &ExperimentSpec) -> Result<Data> {
    if spec.data.is_generated() {
        Ok(Data::Generated)
    } else {
        Ok(Data::Fixed(Arc::new(
            spec.data.materialize(spec.base_seed)?,
        )))
    }
}

fn replication_data(spec: &ExperimentSpec, data: &Data, rep_seed: u64) -> Result<Arc<Schema>> {
    match data {
        Data::Fixed(s) => Ok(Arc::clone(s)),
        Data::Generated => Ok(Arc::new(spec.data.materialize(rep_seed)?)),
    }
}

struct RepOutcome {
    raw: Vec<RawRecord>,
    failures: Vec<Failure>,
}

fn run_replication(
    spec: &ExperimentSpec,
    data: &Data,
    units: &[Unit],
    rep: usize,
) -> Result<RepOutcome> {
    let started = Instant::now();
    let rep_seed = spec.base_seed.wrapping_add(rep as u64);
    let schema = replication_data(spec, data, rep_seed)?;
    let plan = split(&schema, spec.train_fraction, rep_seed)?;
    let limit = spec.time_limit_s.map(Duration::from_secs_f64);
    let mut out = RepOutcome {
        raw: Vec::new(),
        failures: Vec::new(),
    };
    for unit in units {
        let budget = limit.map(|l| l.saturating_sub(started.elapsed()));
        let t0 = Instant::now();
        let result = match budget {
            Some(b) if b.is_zero() => {
                Err(Error::TimeLimit(limit.unwrap_or_default().as_secs_f64()))
            }
            _ => fit_unit(unit, &schema, &plan, rep_seed, budget),
        };
        let elapsed = t0.elapsed().as_secs_f64();
        match result {
            Ok(scores) => {
                for (id, s) in scores {
                    out.raw.push(RawRecord {
                        rep,
                        seed: rep_seed,
                        method: unit.label.clone(),
                        source: schema.source(id).expect("resolved").name().to_string(),
                        rmse: s.rmse,
                        mae: s.mae,
                        n: s.n,
                        time_s: elapsed,
                    });
                }
            }
            Err(e) => out.failures.push(Failure {
                rep,
                method: unit.label.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Runs every replication and aggregates the scores. Replication `i` uses
/// seed `base_seed + i` for data, split and (through per-method derivation)
/// model initialization and batching. A method error is recorded as a
/// failure of that replication and excluded from its cells.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let data = load_fixed(spec)?;
    // resolve methods against the first replication's layout
    let probe = replication_data(spec, &data, spec.base_seed)?;
    let units = plan_units(&probe, spec)?;
    let sources: Vec<String> = probe
        .sources()
        .iter()
        .map(|s| s.name().to_string())
        .collect();
    let methods: Vec<(String, Vec<String>)> = units
        .iter()
        .map(|u| {
            let names = u
                .sources
                .iter()
                .map(|&id| probe.source(id).expect("resolved").name().to_string())
                .collect();
            (u.label.clone(), names)
        })
        .collect();
    drop(probe);

    let outcomes: Vec<RepOutcome> = if spec.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.workers)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?;
        pool.install(|| {
            (0..spec.replications)
                .into_par_iter()
                .map(|rep| run_replication(spec, &data, &units, rep))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..spec.replications)
            .map(|rep| run_replication(spec, &data, &units, rep))
            .collect::<Result<Vec<_>>>()?
    };
    let mut raw = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        raw.extend(o.raw);
        failures.extend(o.failures);
    }
    Ok(ResultTable::aggregate(
        &methods,
        &sources,
        &spec.metrics,
        spec.replications,
        raw,
        failures,
    ))
}
