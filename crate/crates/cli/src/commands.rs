use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use jima_core::gradcheck::{self, GradcheckConfig};
use jima_core::model::{evaluate, train, JointModel, ModelConfig};
use jima_core::obs_store::{split, write_observations_csv, Schema, SourceId, SplitPlan};
use jima_core::ratings::write_synthetic_ratings;
use jima_core::runner::{run_experiment, DataSpec, ExperimentSpec, ResultTable};
use jima_core::seed;
use jima_core::simgen::{gen_four_way, gen_three_way, SimSpec3, SimSpec4};

use crate::{Cli, Command};

/// Bad command-line input detected by the driver itself.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(jima_core::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    serde_json::from_value(v)
        .map_err(jima_core::Error::from)
        .with_context(|| format!("invalid {what}"))
}

pub fn dispatch(cli: &Cli) -> Result<ExitCode> {
    let log = |msg: &str| {
        if cli.verbose {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Simulate { config, out, seed } => simulate(config, out, *seed, &log),
        Command::Train { config, out, seed } => train_cmd(config, out, *seed, &log),
        Command::Evaluate { config, out, seed } => evaluate_cmd(config, out, *seed),
        Command::Run {
            config,
            out,
            seed,
            reps,
            methods,
        } => run_cmd(config, out, *seed, *reps, methods.as_deref(), &log),
        Command::Report { config, out } => report(config, out.as_deref()),
        Command::Gradcheck { tol, seed, reps } => gradcheck_cmd(*tol, seed.unwrap_or(0), *reps),
    }
}

/// A bare data spec, or the data section of an experiment spec.
fn data_spec(path: &Path) -> Result<DataSpec> {
    let mut v = read_json(path)?;
    if let Some(data) = v.get_mut("data") {
        v = data.take();
    }
    let mut spec: DataSpec = from_value(v, "data spec")?;
    spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(spec)
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>, log: &dyn Fn(&str)) -> Result<ExitCode> {
    let spec = data_spec(config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let sim = match spec {
        DataSpec::ThreeWay(s) => gen_three_way(&SimSpec3 {
            seed: seed.unwrap_or(s.seed),
            ..s
        })?,
        DataSpec::FourWay(s) => gen_four_way(&SimSpec4 {
            seed: seed.unwrap_or(s.seed),
            ..s
        })?,
        DataSpec::SyntheticRatings(mut s) => {
            s.seed = seed.unwrap_or(s.seed);
            let manifest = write_synthetic_ratings(&s, out)?;
            log(&format!("wrote {}", manifest.display()));
            return Ok(ExitCode::SUCCESS);
        }
        DataSpec::Files { .. } | DataSpec::Ratings { .. } => {
            return Err(invalid(
                "simulate needs a generator spec, not file-backed data",
            ));
        }
    };
    sim.schema.config().write_json(out.join("schema.json"))?;
    write_observations_csv(out.join("observations.csv"), &sim.schema)?;
    fs::write(out.join("truth.json"), sim.truth.to_json_string()?)?;
    for s in sim.schema.sources() {
        log(&format!("{}: {} cells", s.name(), s.len()));
    }
    Ok(ExitCode::SUCCESS)
}

fn default_fraction() -> f64 {
    0.2
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    data: DataSpec,
    #[serde(default = "default_fraction")]
    train_fraction: f64,
    #[serde(default)]
    seed: u64,
    /// Source names; all sources when absent.
    #[serde(default)]
    sources: Option<Vec<String>>,
    /// Model settings other than the source list.
    #[serde(default)]
    model: Value,
}

struct Prepared {
    schema: Schema,
    model_config: ModelConfig,
    seed: u64,
    train_fraction: f64,
}

fn prepare(config: &Path, seed: Option<u64>) -> Result<Prepared> {
    let mut tc: TrainConfig = from_value(read_json(config)?, "training config")?;
    tc.data
        .resolve_paths(config.parent().unwrap_or(Path::new(".")));
    let seed = seed.unwrap_or(tc.seed);
    let schema = tc.data.materialize(seed)?;
    let ids: Vec<SourceId> = match &tc.sources {
        None => schema.source_ids(),
        Some(names) => names
            .iter()
            .map(|n| {
                schema
                    .source_by_name(n)
                    .map(|s| s.id())
                    .ok_or_else(|| invalid(format!("unknown source '{n}'")))
            })
            .collect::<Result<_>>()?,
    };
    let mut model = match tc.model {
        Value::Null => serde_json::json!({}),
        v @ Value::Object(_) => v,
        _ => return Err(invalid("model settings must be an object")),
    };
    model["sources"] = serde_json::to_value(&ids)?;
    if model.get("seed").is_none() {
        model["seed"] = seed::derive(seed, &[seed::tag("model")]).into();
    }
    let model_config: ModelConfig = from_value(model, "model settings")?;
    model_config.validate()?;
    Ok(Prepared {
        schema,
        model_config,
        seed,
        train_fraction: tc.train_fraction,
    })
}

#[derive(Serialize)]
struct ScoreLine {
    source: String,
    rmse: f64,
    mae: f64,
    n: usize,
}

fn score_lines(model: &JointModel, schema: &Schema, plan: &SplitPlan) -> Result<Vec<ScoreLine>> {
    Ok(evaluate(model, schema, plan)?
        .into_iter()
        .map(|(id, s)| ScoreLine {
            source: schema
                .source(id)
                .map(|x| x.name().to_string())
                .unwrap_or_default(),
            rmse: s.rmse,
            mae: s.mae,
            n: s.n,
        })
        .collect())
}

fn print_scores(lines: &[ScoreLine]) {
    println!("source,rmse,mae,n");
    for l in lines {
        println!("{},{:.6},{:.6},{}", l.source, l.rmse, l.mae, l.n);
    }
}

fn train_cmd(config: &Path, out: &Path, seed: Option<u64>, log: &dyn Fn(&str)) -> Result<ExitCode> {
    let p = prepare(config, seed)?;
    let plan = split(&p.schema, p.train_fraction, p.seed)?;
    let mut model = JointModel::new(&p.schema, p.model_config)?;
    log(&format!("training {} parameters", model.num_params()));
    let report = train(&mut model, &p.schema, &plan)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    model.save(out.join("model.json"))?;
    fs::write(out.join("split.json"), plan.to_json_string()?)?;
    fs::write(
        out.join("train_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let scores = score_lines(&model, &p.schema, &plan)?;
    fs::write(
        out.join("scores.json"),
        serde_json::to_string_pretty(&scores)?,
    )?;
    print_scores(&scores);
    Ok(ExitCode::SUCCESS)
}

fn evaluate_cmd(config: &Path, dir: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let p = prepare(config, seed)?;
    let model = JointModel::load(dir.join("model.json"))
        .with_context(|| format!("loading {}", dir.join("model.json").display()))?;
    let plan = SplitPlan::from_json_str(&fs::read_to_string(dir.join("split.json"))?)?;
    plan.validate_against(&p.schema)?;
    print_scores(&score_lines(&model, &p.schema, &plan)?);
    Ok(ExitCode::SUCCESS)
}

fn run_cmd(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    reps: Option<usize>,
    methods: Option<&[String]>,
    log: &dyn Fn(&str),
) -> Result<ExitCode> {
    let mut spec = ExperimentSpec::load(config)?;
    if let Some(s) = seed {
        spec.base_seed = s;
    }
    if let Some(r) = reps {
        spec.replications = r;
    }
    if let Some(m) = methods {
        spec.select_methods(m)?;
    }
    spec.validate()?;
    log(&format!(
        "running '{}': {} replications, {} methods",
        spec.name,
        spec.replications,
        spec.methods.len()
    ));
    let table = run_experiment(&spec)?;
    table
        .write_dir(out)
        .with_context(|| format!("writing results to {}", out.display()))?;
    print!("{}", table.render_text());
    let failing = table.failing_methods();
    if failing.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "methods failing in at least half the replications: {}",
            failing.join(", ")
        );
        Ok(ExitCode::from(2))
    }
}

fn report(config: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let file = fs::File::open(config).with_context(|| format!("opening {}", config.display()))?;
    let table = ResultTable::read_csv(file, &config.display().to_string())?;
    let text = table.render_text();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("table.txt"), &text)?;
    }
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(tol: f64, seed: u64, instances: usize) -> Result<ExitCode> {
    if !(tol > 0.0) || instances == 0 {
        return Err(invalid("--tol must be positive and --reps at least 1"));
    }
    let report = gradcheck::run(&GradcheckConfig {
        instances,
        tol,
        seed,
        ..Default::default()
    })?;
    for r in &report.instances {
        let verdict = if r.max_rel_error < tol { "ok" } else { "FAIL" };
        println!(
            "{:>4} {:<20} params {:>4} checked {:>4} max rel err {:.3e} {verdict}",
            r.instance, r.layout, r.params, r.checked, r.max_rel_error
        );
    }
    println!(
        "{} instances, max relative error {:.3e}, tolerance {tol:e}: {}",
        report.instances.len(),
        report.max_rel_error(),
        if report.passed() { "pass" } else { "FAIL" }
    );
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
