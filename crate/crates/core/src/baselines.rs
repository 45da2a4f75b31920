//! Non-neural baselines: global mean imputation, matrix factorization and
//! CP decomposition fitted by masked alternating least squares.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState};
use crate::obs_store::{minibatches, DataSource, Schema, SourceId};
use crate::seed;

fn source_and_dims(schema: &Schema, id: SourceId) -> Result<(&DataSource, Vec<usize>)> {
    let src = schema
        .source(id)
        .ok_or_else(|| Error::invalid(format!("source {id} missing from schema")))?;
    let dims = src
        .fibers()
        .iter()
        .map(|&f| schema.fibers()[f].dim)
        .collect();
    Ok((src, dims))
}

fn random_table(
    rows: usize,
    cols: usize,
    sd: f64,
    rng: &mut impl rand::Rng,
) -> Result<Array2<f64>> {
    let normal = Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(Array2::from_shape_simple_fn((rows, cols), || {
        normal.sample(rng)
    }))
}

/// Constant predictor at the training mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmi {
    pub mean: f64,
}

impl Gmi {
    pub fn predict(&self) -> f64 {
        self.mean
    }
}

pub fn gmi_fit(values: &[f64]) -> Result<Gmi> {
    if values.is_empty() {
        return Err(Error::invalid("global mean of an empty training set"));
    }
    Ok(Gmi {
        mean: values.iter().sum::<f64>() / values.len() as f64,
    })
}

pub fn gmi_fit_source(source: &DataSource, train: &[usize]) -> Result<Gmi> {
    let values: Vec<f64> = train.iter().map(|&o| source.value(o)).collect();
    gmi_fit(&values)
        .map_err(|_| Error::invalid(format!("source '{}' has no training values", source.name())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfConfig {
    pub rank: usize,
    /// Penalty on the squared norm of every factor row touched by a batch.
    pub lambda: f64,
    pub init_sd: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// One step per epoch over the whole training set.
    pub full_batch: bool,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            rank: 5,
            lambda: 1e-4,
            init_sd: 0.1,
            adam: AdamConfig::default(),
            epochs: 200,
            batch_size: 256,
            full_batch: false,
            seed: 0,
        }
    }
}

/// Inner-product model over one matrix source.
#[derive(Clone, Debug, PartialEq)]
pub struct MfModel {
    pub source: SourceId,
    pub rows: Array2<f64>,
    pub cols: Array2<f64>,
    pub lambda: f64,
    pub trained: bool,
}

impl MfModel {
    pub fn predict(&self, index: &[usize]) -> Result<f64> {
        let [i, j] = index else {
            return Err(Error::DimensionMismatch {
                expected: 2,
                actual: index.len(),
            });
        };
        if *i >= self.rows.nrows() || *j >= self.cols.nrows() {
            return Err(Error::invalid(format!("cell ({i}, {j}) out of range")));
        }
        Ok(self.rows.row(*i).dot(&self.cols.row(*j)))
    }
}

/// Per-epoch objective trace of an iterative fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub losses: Vec<f64>,
    pub converged: bool,
}

/// Mean squared error over `batch` plus the penalty on touched rows, with
/// gradients scattered into full-size tables.
fn mf_batch(
    model: &MfModel,
    source: &DataSource,
    batch: &[usize],
) -> (f64, Array2<f64>, Array2<f64>, Vec<usize>, Vec<usize>) {
    let mut ga = Array2::zeros(model.rows.raw_dim());
    let mut gb = Array2::zeros(model.cols.raw_dim());
    let mut touched_a = Vec::with_capacity(batch.len());
    let mut touched_b = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &o in batch {
        let idx = source.index(o);
        let (i, j) = (idx[0], idx[1]);
        let a = model.rows.row(i);
        let b = model.cols.row(j);
        let e = a.dot(&b) - source.value(o);
        loss += e * e * scale;
        let d = 2.0 * e * scale;
        ga.row_mut(i).scaled_add(d, &b);
        gb.row_mut(j).scaled_add(d, &a);
        touched_a.push(i);
        touched_b.push(j);
    }
    for (touched, table, grad) in [
        (&mut touched_a, &model.rows, &mut ga),
        (&mut touched_b, &model.cols, &mut gb),
    ] {
        touched.sort_unstable();
        touched.dedup();
        for &t in touched.iter() {
            let row = table.row(t);
            loss += model.lambda * row.dot(&row);
            grad.row_mut(t).scaled_add(2.0 * model.lambda, &row);
        }
    }
    (loss, ga, gb, touched_a, touched_b)
}

/// Adam on squared error plus an L2 penalty on the rows each batch touches.
pub fn mf_fit(
    schema: &Schema,
    source: SourceId,
    train: &[usize],
    config: &MfConfig,
) -> Result<(MfModel, FitReport)> {
    let (src, dims) = source_and_dims(schema, source)?;
    if src.order() != 2 {
        return Err(Error::invalid(format!(
            "matrix factorization needs an order-2 source, '{}' has order {}",
            src.name(),
            src.order()
        )));
    }
    if config.rank == 0 || config.batch_size == 0 {
        return Err(Error::invalid("rank and batch size must be positive"));
    }
    if !(config.lambda >= 0.0) || !(config.init_sd >= 0.0) {
        return Err(Error::invalid("lambda and init_sd must be non-negative"));
    }
    config.adam.validate()?;
    if train.is_empty() {
        return Err(Error::invalid(format!(
            "source '{}' has no training values",
            src.name()
        )));
    }
    let r = config.rank;
    let mut rng = seed::rng(config.seed, &[seed::tag("mf-init")]);
    let mut model = MfModel {
        source,
        rows: random_table(dims[0], r, config.init_sd, &mut rng)?,
        cols: random_table(dims[1], r, config.init_sd, &mut rng)?,
        lambda: config.lambda,
        trained: false,
    };
    let mut opt_a = AdamState::new(config.adam, model.rows.len());
    let mut opt_b = AdamState::new(config.adam, model.cols.len());
    let batch_seed = seed::derive(config.seed, &[seed::tag("mf-batch")]);
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let batches = if config.full_batch {
            vec![train.to_vec()]
        } else {
            minibatches(src, train, config.batch_size, batch_seed, epoch as u64)?
        };
        let mut sum = 0.0;
        for batch in &batches {
            let (loss, ga, gb, ta, tb) = mf_batch(&model, src, batch);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "matrix factorization loss at epoch {epoch}"
                )));
            }
            sum += loss;
            opt_a.step_rows(
                model.rows.as_slice_mut().expect("standard layout"),
                ga.as_slice().expect("standard layout"),
                r,
                &ta,
            )?;
            opt_b.step_rows(
                model.cols.as_slice_mut().expect("standard layout"),
                gb.as_slice().expect("standard layout"),
                r,
                &tb,
            )?;
        }
        losses.push(sum / batches.len() as f64);
    }
    model.trained = true;
    Ok((
        model,
        FitReport {
            losses,
            converged: true,
        },
    ))
}

/// Full objective of an MF model over `cells` (mean error plus the penalty on
/// every row the cells reach).
pub fn mf_objective(model: &MfModel, source: &DataSource, cells: &[usize]) -> f64 {
    mf_batch(model, source, cells).0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpConfig {
    pub rank: usize,
    /// Maximum number of alternating sweeps.
    pub iterations: usize,
    /// Stop once the relative change of the objective falls below this.
    pub tol: f64,
    pub ridge: f64,
    pub init_sd: f64,
    pub seed: u64,
}

impl Default for CpConfig {
    fn default() -> Self {
        Self {
            rank: 5,
            iterations: 100,
            tol: 1e-6,
            ridge: 1e-8,
            init_sd: 1.0,
            seed: 0,
        }
    }
}

/// Sum of rank-one terms over one tensor source.
#[derive(Clone, Debug, PartialEq)]
pub struct CpModel {
    pub source: SourceId,
    pub factors: Vec<Array2<f64>>,
}

impl CpModel {
    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn predict(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.factors.len() {
            return Err(Error::DimensionMismatch {
                expected: self.factors.len(),
                actual: index.len(),
            });
        }
        for (&i, f) in index.iter().zip(&self.factors) {
            if i >= f.nrows() {
                return Err(Error::invalid(format!("index {i} out of range")));
            }
        }
        Ok(self.predict_unchecked(index))
    }

    fn predict_unchecked(&self, index: &[usize]) -> f64 {
        (0..self.rank())
            .map(|j| {
                index
                    .iter()
                    .zip(&self.factors)
                    .map(|(&i, f)| f[[i, j]])
                    .product::<f64>()
            })
            .sum()
    }
}

/// Squared error over the cells plus the ridge term on every factor entry.
fn cp_objective(model: &CpModel, source: &DataSource, cells: &[usize], ridge: f64) -> f64 {
    let fit: f64 = cells
        .iter()
        .map(|&o| {
            let e = model.predict_unchecked(source.index(o)) - source.value(o);
            e * e
        })
        .sum();
    let penalty: f64 = model
        .factors
        .iter()
        .flat_map(|f| f.iter())
        .map(|v| v * v)
        .sum();
    fit + ridge * penalty
}

fn solve_spd(gram: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    match gram.clone().cholesky() {
        Some(c) => Some(c.solve(rhs)),
        None => gram.lu().solve(rhs),
    }
}

/// Masked ALS: each factor row is the ridge solution over that row's observed
/// cells with the other factors held fixed. Rows with no training cells end at 0.
pub fn cp_fit(
    schema: &Schema,
    source: SourceId,
    train: &[usize],
    config: &CpConfig,
) -> Result<(CpModel, FitReport)> {
    let (src, dims) = source_and_dims(schema, source)?;
    if src.order() < 3 {
        return Err(Error::invalid(format!(
            "CP decomposition needs a source of order at least 3, '{}' has order {}",
            src.name(),
            src.order()
        )));
    }
    if config.rank == 0 {
        return Err(Error::invalid("CP rank must be positive"));
    }
    if !(config.ridge >= 0.0) || !(config.tol >= 0.0) || !(config.init_sd >= 0.0) {
        return Err(Error::invalid(
            "ridge, tol and init_sd must be non-negative",
        ));
    }
    if train.is_empty() {
        return Err(Error::invalid(format!(
            "source '{}' has no training values",
            src.name()
        )));
    }
    let r = config.rank;
    let k = dims.len();
    let mut rng = seed::rng(config.seed, &[seed::tag("cp-init")]);
    let factors = dims
        .iter()
        .map(|&n| random_table(n, r, config.init_sd, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut model = CpModel { source, factors };

    // observations grouped by row, per mode
    let by_row: Vec<Vec<Vec<usize>>> = (0..k)
        .map(|mode| {
            let mut rows = vec![Vec::new(); dims[mode]];
            for &o in train {
                rows[src.index(o)[mode]].push(o);
            }
            rows
        })
        .collect();

    let mut losses = Vec::with_capacity(config.iterations);
    let mut prev = cp_objective(&model, src, train, config.ridge);
    let mut converged = false;
    let mut z = vec![0.0; r];
    for _ in 0..config.iterations {
        for mode in 0..k {
            for (row, cells) in by_row[mode].iter().enumerate() {
                let mut gram = DMatrix::<f64>::identity(r, r) * config.ridge;
                let mut rhs = DVector::<f64>::zeros(r);
                for &o in cells {
                    let idx = src.index(o);
                    z.fill(1.0);
                    for (m, f) in model.factors.iter().enumerate() {
                        if m != mode {
                            for (zj, v) in z.iter_mut().zip(f.row(idx[m])) {
                                *zj *= v;
                            }
                        }
                    }
                    let y = src.value(o);
                    for a in 0..r {
                        rhs[a] += y * z[a];
                        for b in a..r {
                            gram[(a, b)] += z[a] * z[b];
                        }
                    }
                }
                for a in 0..r {
                    for b in 0..a {
                        gram[(a, b)] = gram[(b, a)];
                    }
                }
                let solution = if cells.is_empty() {
                    DVector::zeros(r)
                } else {
                    solve_spd(gram, &rhs).unwrap_or_else(|| DVector::zeros(r))
                };
                for (dst, v) in model.factors[mode]
                    .row_mut(row)
                    .iter_mut()
                    .zip(solution.iter())
                {
                    *dst = *v;
                }
            }
        }
        let loss = cp_objective(&model, src, train, config.ridge);
        if !loss.is_finite() {
            return Err(Error::NonFinite("CP objective".into()));
        }
        losses.push(loss);
        let change = (prev - loss).abs() / prev.abs().max(f64::MIN_POSITIVE);
        prev = loss;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Ok((model, FitReport { losses, converged }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::score;
    use crate::obs_store::{build_schema, FiberSpec, SourceSpec};
    use rand::Rng;

    fn fibers(dims: &[usize]) -> Vec<FiberSpec> {
        dims.iter()
            .enumerate()
            .map(|(id, &dim)| FiberSpec {
                id,
                label: format!("f{id}"),
                dim,
            })
            .collect()
    }

    fn full_source(id: SourceId, dims: &[usize], f: impl Fn(&[usize]) -> f64) -> DataSource {
        let fs: Vec<usize> = (0..dims.len()).collect();
        let mut src = DataSource::new(SourceSpec::new(id, &format!("s{id}"), &fs));
        let total: usize = dims.iter().product();
        for c in 0..total {
            let mut idx = Vec::with_capacity(dims.len());
            let mut rest = c;
            for &d in dims {
                idx.push(rest % d);
                rest /= d;
            }
            src.push(&idx, f(&idx)).unwrap();
        }
        src
    }

    fn rank_one_matrix() -> Schema {
        let mut rng = seed::rng(11, &[]);
        let a: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
        let b: Vec<f64> = (0..10).map(|_| rng.random_range(-1.5..1.5)).collect();
        build_schema(
            fibers(&[10, 10]),
            vec![full_source(1, &[10, 10], |i| a[i[0]] * b[i[1]])],
        )
        .unwrap()
    }

    fn train_rmse(schema: &Schema, predict: impl Fn(&[usize]) -> f64) -> f64 {
        let src = &schema.sources()[0];
        let pred: Vec<f64> = src.iter().map(|(i, _)| predict(i)).collect();
        score(src.values(), &pred).unwrap().rmse
    }

    #[test]
    fn gmi_predicts_the_training_mean() {
        assert_eq!(gmi_fit(&[1.0, 2.0, 3.0]).unwrap().predict(), 2.0);
        let constant = gmi_fit(&[4.0; 5]).unwrap();
        let s = score(&[4.0; 3], &[constant.predict(); 3]).unwrap();
        assert_eq!(s.rmse, 0.0);
        assert!(gmi_fit(&[]).is_err());
    }

    #[test]
    fn gmi_rmse_matches_the_variance_bias_identity() {
        let mut rng = seed::rng(3, &[]);
        let train: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..5.0)).collect();
        let test: Vec<f64> = (0..80).map(|_| rng.random_range(-2.0..7.0)).collect();
        let g = gmi_fit(&train).unwrap();
        let rmse = score(&test, &vec![g.predict(); test.len()]).unwrap().rmse;
        let n = test.len() as f64;
        let m = test.iter().sum::<f64>() / n;
        let var = test.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / n;
        let closed = (var + (m - g.mean).powi(2)).sqrt();
        assert!((rmse - closed).abs() < 1e-12 * closed);
    }

    #[test]
    fn mf_recovers_an_exact_rank_one_matrix() {
        let schema = rank_one_matrix();
        let cfg = MfConfig {
            rank: 1,
            lambda: 0.0,
            init_sd: 0.5,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
            epochs: 3000,
            full_batch: true,
            seed: 1,
            ..Default::default()
        };
        let train: Vec<usize> = (0..100).collect();
        let (model, _) = mf_fit(&schema, 1, &train, &cfg).unwrap();
        let rmse = train_rmse(&schema, |i| model.predict(i).unwrap());
        assert!(rmse < 1e-2, "rmse {rmse}");
    }

    #[test]
    fn full_batch_mf_objective_does_not_increase() {
        let schema = rank_one_matrix();
        let cfg = MfConfig {
            rank: 3,
            lambda: 1e-3,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..Default::default()
            },
            epochs: 300,
            full_batch: true,
            ..Default::default()
        };
        let (_, report) = mf_fit(&schema, 1, &(0..100).collect::<Vec<_>>(), &cfg).unwrap();
        for w in report.losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn huge_penalty_shrinks_predictions() {
        let schema = rank_one_matrix();
        let cfg = MfConfig {
            lambda: 1e6,
            epochs: 300,
            ..Default::default()
        };
        let (model, _) = mf_fit(&schema, 1, &(0..100).collect::<Vec<_>>(), &cfg).unwrap();
        let worst = schema.sources()[0]
            .iter()
            .map(|(i, _)| model.predict(i).unwrap().abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "largest |prediction| {worst}");
    }

    #[test]
    fn mf_is_deterministic_and_checks_its_input() {
        let schema = rank_one_matrix();
        let train: Vec<usize> = (0..60).collect();
        let cfg = MfConfig {
            epochs: 5,
            batch_size: 7,
            ..Default::default()
        };
        assert_eq!(
            mf_fit(&schema, 1, &train, &cfg).unwrap(),
            mf_fit(&schema, 1, &train, &cfg).unwrap()
        );
        assert!(mf_fit(&schema, 2, &train, &cfg).is_err());
        assert!(mf_fit(&schema, 1, &[], &cfg).is_err());
        let zero = MfConfig { rank: 0, ..cfg };
        assert!(mf_fit(&schema, 1, &train, &zero).is_err());
    }

    fn rank_two_tensor() -> Schema {
        let mut rng = seed::rng(12, &[]);
        let mut draw = || -> Vec<[f64; 2]> {
            (0..8)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect()
        };
        let (a, b, c) = (draw(), draw(), draw());
        let src = full_source(1, &[8, 8, 8], |i| {
            (0..2).map(|j| a[i[0]][j] * b[i[1]][j] * c[i[2]][j]).sum()
        });
        build_schema(fibers(&[8, 8, 8]), vec![src]).unwrap()
    }

    #[test]
    fn cp_recovers_an_exact_rank_two_tensor() {
        let schema = rank_two_tensor();
        let cfg = CpConfig {
            rank: 2,
            iterations: 500,
            tol: 1e-14,
            ..Default::default()
        };
        let (model, _) = cp_fit(&schema, 1, &(0..512).collect::<Vec<_>>(), &cfg).unwrap();
        let rmse = train_rmse(&schema, |i| model.predict(i).unwrap());
        assert!(rmse < 1e-2, "rmse {rmse}");
    }

    #[test]
    fn cp_objective_does_not_increase_per_sweep() {
        let schema = rank_two_tensor();
        let cfg = CpConfig {
            rank: 3,
            iterations: 50,
            tol: 0.0,
            ridge: 1e-3,
            ..Default::default()
        };
        let (_, report) = cp_fit(&schema, 1, &(0..512).collect::<Vec<_>>(), &cfg).unwrap();
        assert_eq!(report.losses.len(), 50);
        for w in report.losses.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn cp_rejects_bad_rank_and_matrices() {
        let schema = rank_two_tensor();
        let train: Vec<usize> = (0..512).collect();
        let cfg = CpConfig {
            rank: 0,
            ..Default::default()
        };
        assert!(cp_fit(&schema, 1, &train, &cfg).is_err());
        assert!(cp_fit(
            &rank_one_matrix(),
            1,
            &(0..100).collect::<Vec<_>>(),
            &CpConfig::default()
        )
        .is_err());
    }

    #[test]
    fn cp_on_sparse_cells_leaves_unseen_rows_at_zero() {
        let schema = rank_two_tensor();
        let src = &schema.sources()[0];
        let train: Vec<usize> = (0..512).filter(|&o| src.index(o)[0] != 7).collect();
        let (model, report) = cp_fit(&schema, 1, &train, &CpConfig::default()).unwrap();
        assert!(model.factors[0].row(7).iter().all(|&v| v == 0.0));
        assert!(!report.losses.is_empty());
        assert!(model.predict(&[8, 0, 0]).is_err());
    }
}
