//! Synthetic outfit data: standard normal latent vectors per entity, sources
//! built from weighted inner products plus Gaussian noise.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs_store::{build_schema, DataSource, FiberSpec, Schema, SourceId, SourceSpec};
use crate::seed;

fn default_rank() -> usize {
    5
}
fn default_noise() -> f64 {
    0.1
}
fn default_weight() -> f64 {
    2.0
}

/// Users, tops and bottoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec3 {
    pub n: usize,
    pub t: usize,
    pub b: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    /// Weight on the top-bottom term of the outfit tensor.
    #[serde(default = "default_weight")]
    pub interaction_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimSpec3 {
    pub fn new(n: usize, t: usize, b: usize, seed: u64) -> Self {
        Self {
            n,
            t,
            b,
            rank: 5,
            noise_sd: 0.1,
            interaction_weight: 2.0,
            seed,
        }
    }
}

/// Users, tops, bottoms and hats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec4 {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub n4: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimSpec4 {
    pub fn new(n1: usize, n2: usize, n3: usize, n4: usize, seed: u64) -> Self {
        Self {
            n1,
            n2,
            n3,
            n4,
            rank: 5,
            noise_sd: 0.1,
            seed,
        }
    }
}

/// `weight * <x_a, x_b>` for fibers `a` and `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceTruth {
    pub id: SourceId,
    pub name: String,
    pub fibers: Vec<usize>,
    pub terms: Vec<Term>,
    pub noisy: bool,
}

/// Latent vectors and the noiseless signal of every source. Doubles as the
/// oracle predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub fibers: Vec<FiberSpec>,
    /// fiber -> entity -> latent vector.
    pub factors: Vec<Vec<Vec<f64>>>,
    pub sources: Vec<SourceTruth>,
    pub noise_sd: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn term(a: usize, b: usize, weight: f64) -> Term {
    Term { a, b, weight }
}

impl GroundTruth {
    pub fn source(&self, id: SourceId) -> Option<&SourceTruth> {
        self.sources.iter().find(|s| s.id == id)
    }

    /// Noiseless value of one cell; `index` follows the source's fiber order.
    pub fn predict(&self, id: SourceId, index: &[usize]) -> Result<f64> {
        let src = self
            .source(id)
            .ok_or_else(|| Error::invalid(format!("source {id} not generated")))?;
        if index.len() != src.fibers.len() {
            return Err(Error::DimensionMismatch {
                expected: src.fibers.len(),
                actual: index.len(),
            });
        }
        let mut entity = vec![usize::MAX; self.factors.len()];
        for (&f, &i) in src.fibers.iter().zip(index) {
            if i >= self.factors[f].len() {
                return Err(Error::invalid(format!(
                    "index {i} out of range for fiber {f}"
                )));
            }
            entity[f] = i;
        }
        Ok(self.signal(src, &entity))
    }

    fn signal(&self, src: &SourceTruth, entity: &[usize]) -> f64 {
        src.terms
            .iter()
            .map(|t| {
                t.weight
                    * dot(
                        &self.factors[t.a][entity[t.a]],
                        &self.factors[t.b][entity[t.b]],
                    )
            })
            .sum()
    }

    /// Every cell of every source, with independent noise per noisy source.
    pub fn sample(&self, noise_seed: u64) -> Result<Schema> {
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(Error::invalid("noise_sd must be finite and non-negative"));
        }
        let normal = Normal::new(0.0, self.noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
        let mut sources = Vec::with_capacity(self.sources.len());
        for src in &self.sources {
            let dims: Vec<usize> = src.fibers.iter().map(|&f| self.factors[f].len()).collect();
            let total: usize = dims.iter().product();
            let mut out =
                DataSource::with_capacity(SourceSpec::new(src.id, &src.name, &src.fibers), total);
            let mut rng = seed::rng(noise_seed, &[seed::tag("noise"), src.id as u64]);
            let mut index = vec![0usize; dims.len()];
            let mut entity = vec![0usize; self.factors.len()];
            for _ in 0..total {
                for (&f, &i) in src.fibers.iter().zip(&index) {
                    entity[f] = i;
                }
                let mut y = self.signal(src, &entity);
                if src.noisy && self.noise_sd > 0.0 {
                    y += normal.sample(&mut rng);
                }
                out.push(&index, y)?;
                // last position varies fastest
                for p in (0..dims.len()).rev() {
                    index[p] += 1;
                    if index[p] < dims[p] {
                        break;
                    }
                    index[p] = 0;
                }
            }
            sources.push(out);
        }
        build_schema(self.fibers.clone(), sources)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let truth: GroundTruth = serde_json::from_str(s)?;
        truth.validate()?;
        Ok(truth)
    }

    fn validate(&self) -> Result<()> {
        if self.factors.len() != self.fibers.len() {
            return Err(Error::invalid("one factor table per fiber required"));
        }
        let rank = self
            .factors
            .iter()
            .flatten()
            .map(Vec::len)
            .next()
            .unwrap_or(0);
        for (f, (spec, table)) in self.fibers.iter().zip(&self.factors).enumerate() {
            if spec.id != f || table.len() != spec.dim {
                return Err(Error::invalid(format!(
                    "factor table {f} does not match its fiber"
                )));
            }
            if table
                .iter()
                .any(|row| row.len() != rank || row.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::invalid(format!(
                    "factor table {f} is ragged or non-finite"
                )));
            }
        }
        for src in &self.sources {
            let used = |f: usize| src.fibers.contains(&f) && f < self.fibers.len();
            if src.fibers.iter().any(|&f| f >= self.fibers.len())
                || src.terms.iter().any(|t| !used(t.a) || !used(t.b))
            {
                return Err(Error::invalid(format!(
                    "source '{}' refers to unknown fibers",
                    src.name
                )));
            }
        }
        Ok(())
    }
}

/// Data plus the factors that produced it.
#[derive(Clone, Debug)]
pub struct Simulated {
    pub schema: Schema,
    pub truth: GroundTruth,
}

fn latent_tables(dims: &[usize], rank: usize, latent_seed: u64) -> Vec<Vec<Vec<f64>>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    dims.iter()
        .enumerate()
        .map(|(f, &n)| {
            let mut rng = seed::rng(latent_seed, &[seed::tag("latent"), f as u64]);
            (0..n)
                .map(|_| (0..rank).map(|_| normal.sample(&mut rng)).collect())
                .collect()
        })
        .collect()
}

fn fibers(labels: &[&str], dims: &[usize]) -> Vec<FiberSpec> {
    labels
        .iter()
        .zip(dims)
        .enumerate()
        .map(|(id, (label, &dim))| FiberSpec {
            id,
            label: (*label).to_string(),
            dim,
        })
        .collect()
}

fn check_common(dims: &[usize], rank: usize, noise_sd: f64) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid("entity counts must be at least 1"));
    }
    if rank == 0 {
        return Err(Error::invalid("latent rank must be positive"));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::invalid("noise_sd must be finite and non-negative"));
    }
    Ok(())
}

fn truth_source(
    id: SourceId,
    name: &str,
    fibers: &[usize],
    terms: Vec<Term>,
    noisy: bool,
) -> SourceTruth {
    SourceTruth {
        id,
        name: name.to_string(),
        fibers: fibers.to_vec(),
        terms,
        noisy,
    }
}

/// Ground truth of the two-item layout: utb = x'u + x'v + w u'v, ut = x'u,
/// ub = x'v, all with noise, and a noiseless tb = u'v.
pub fn three_way_truth(spec: &SimSpec3) -> Result<GroundTruth> {
    let dims = [spec.n, spec.t, spec.b];
    check_common(&dims, spec.rank, spec.noise_sd)?;
    if !spec.interaction_weight.is_finite() {
        return Err(Error::invalid("interaction weight must be finite"));
    }
    let w = spec.interaction_weight;
    Ok(GroundTruth {
        fibers: fibers(&["user", "top", "bottom"], &dims),
        factors: latent_tables(&dims, spec.rank, spec.seed),
        sources: vec![
            truth_source(
                1,
                "utb",
                &[0, 1, 2],
                vec![term(0, 1, 1.0), term(0, 2, 1.0), term(1, 2, w)],
                true,
            ),
            truth_source(2, "ut", &[0, 1], vec![term(0, 1, 1.0)], true),
            truth_source(3, "ub", &[0, 2], vec![term(0, 2, 1.0)], true),
            truth_source(4, "tb", &[1, 2], vec![term(1, 2, 1.0)], false),
        ],
        noise_sd: spec.noise_sd,
    })
}

/// Ground truth of the three-item layout. Outfit tensors carry every
/// user-item inner product plus weight-2 item-item products; the matrices pair
/// the user with one item each. Other combinations are not generated.
pub fn four_way_truth(spec: &SimSpec4) -> Result<GroundTruth> {
    let dims = [spec.n1, spec.n2, spec.n3, spec.n4];
    check_common(&dims, spec.rank, spec.noise_sd)?;
    Ok(GroundTruth {
        fibers: fibers(&["user", "top", "bottom", "hat"], &dims),
        factors: latent_tables(&dims, spec.rank, spec.seed),
        sources: vec![
            truth_source(
                1,
                "utbh",
                &[0, 1, 2, 3],
                vec![
                    term(0, 1, 1.0),
                    term(0, 2, 1.0),
                    term(0, 3, 1.0),
                    term(1, 2, 2.0),
                    term(1, 3, 2.0),
                    term(2, 3, 2.0),
                ],
                true,
            ),
            truth_source(
                2,
                "utb",
                &[0, 1, 2],
                vec![term(0, 1, 1.0), term(0, 2, 1.0), term(1, 2, 2.0)],
                true,
            ),
            truth_source(3, "ut", &[0, 1], vec![term(0, 1, 1.0)], true),
            truth_source(4, "ub", &[0, 2], vec![term(0, 2, 1.0)], true),
            truth_source(5, "uh", &[0, 3], vec![term(0, 3, 1.0)], true),
        ],
        noise_sd: spec.noise_sd,
    })
}

pub fn gen_three_way(spec: &SimSpec3) -> Result<Simulated> {
    let truth = three_way_truth(spec)?;
    let schema = truth.sample(spec.seed)?;
    Ok(Simulated { schema, truth })
}

pub fn gen_four_way(spec: &SimSpec4) -> Result<Simulated> {
    let truth = four_way_truth(spec)?;
    let schema = truth.sample(spec.seed)?;
    Ok(Simulated { schema, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::score;

    fn oracle_rmse(sim: &Simulated, id: SourceId) -> f64 {
        let src = sim.schema.source(id).unwrap();
        let pred: Vec<f64> = src
            .iter()
            .map(|(i, _)| sim.truth.predict(id, i).unwrap())
            .collect();
        score(src.values(), &pred).unwrap().rmse
    }

    #[test]
    fn three_way_layout_and_cell_counts() {
        let sim = gen_three_way(&SimSpec3::new(5, 3, 4, 1)).unwrap();
        let s = &sim.schema;
        assert_eq!((s.order(), s.num_sources()), (3, 4));
        let lens: Vec<usize> = s.sources().iter().map(|x| x.len()).collect();
        assert_eq!(lens, vec![60, 15, 20, 12]);
        let names: Vec<&str> = s.sources().iter().map(|x| x.name()).collect();
        assert_eq!(names, vec!["utb", "ut", "ub", "tb"]);
    }

    #[test]
    fn zero_latents_and_zero_noise_give_zeros() {
        let spec = SimSpec3 {
            noise_sd: 0.0,
            ..SimSpec3::new(3, 2, 2, 4)
        };
        let mut truth = three_way_truth(&spec).unwrap();
        for row in truth.factors.iter_mut().flatten() {
            row.fill(0.0);
        }
        let schema = truth.sample(4).unwrap();
        assert!(schema
            .sources()
            .iter()
            .all(|s| s.values().iter().all(|&v| v == 0.0)));

        let spec = SimSpec4 {
            noise_sd: 0.0,
            ..SimSpec4::new(2, 2, 2, 2, 4)
        };
        let mut truth = four_way_truth(&spec).unwrap();
        for row in truth.factors.iter_mut().flatten() {
            row.fill(0.0);
        }
        let schema = truth.sample(4).unwrap();
        assert!(schema
            .sources()
            .iter()
            .all(|s| s.values().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn noiseless_three_way_identity() {
        let spec = SimSpec3 {
            noise_sd: 0.0,
            ..SimSpec3::new(4, 3, 5, 9)
        };
        let sim = gen_three_way(&spec).unwrap();
        let s = &sim.schema;
        let (utb, ut, ub, tb) = (
            s.source(1).unwrap(),
            s.source(2).unwrap(),
            s.source(3).unwrap(),
            s.source(4).unwrap(),
        );
        // cells are emitted in row-major order
        for (idx, y1) in utb.iter() {
            let (i, t, b) = (idx[0], idx[1], idx[2]);
            let y2 = ut.value(i * 3 + t);
            let y3 = ub.value(i * 5 + b);
            let y4 = tb.value(t * 5 + b);
            assert!((y1 - y2 - y3 - 2.0 * y4).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_four_way_identity() {
        let spec = SimSpec4 {
            noise_sd: 0.0,
            ..SimSpec4::new(3, 2, 3, 2, 5)
        };
        let sim = gen_four_way(&spec).unwrap();
        let s = &sim.schema;
        assert_eq!((s.order(), s.num_sources()), (4, 5));
        let f = &sim.truth.factors;
        let (utbh, utb) = (s.source(1).unwrap(), s.source(2).unwrap());
        for (idx, y1) in utbh.iter() {
            let (i, t, b, h) = (idx[0], idx[1], idx[2], idx[3]);
            let y2 = utb.value((i * 2 + t) * 3 + b);
            let rhs = dot(&f[0][i], &f[3][h])
                + 2.0 * dot(&f[1][t], &f[3][h])
                + 2.0 * dot(&f[2][b], &f[3][h]);
            assert!((y1 - y2 - rhs).abs() < 1e-12);
        }
        assert!(s.source_by_name("ubh").is_none());
    }

    #[test]
    fn oracle_is_exact_without_noise() {
        let spec = SimSpec4 {
            noise_sd: 0.0,
            ..SimSpec4::new(3, 3, 2, 2, 6)
        };
        let sim = gen_four_way(&spec).unwrap();
        for id in 1..=5 {
            assert_eq!(oracle_rmse(&sim, id), 0.0);
        }
    }

    #[test]
    fn oracle_error_matches_the_noise_level() {
        let sim = gen_three_way(&SimSpec3::new(20, 15, 25, 7)).unwrap();
        for id in 1..=3 {
            let rmse = oracle_rmse(&sim, id);
            assert!((0.08..=0.12).contains(&rmse), "source {id}: {rmse}");
        }
        assert_eq!(oracle_rmse(&sim, 4), 0.0);
    }

    #[test]
    fn latent_moments_are_standard_normal() {
        let sim = gen_three_way(&SimSpec3::new(2000, 1, 1, 8)).unwrap();
        let coords: Vec<f64> = sim.truth.factors[0].iter().flatten().copied().collect();
        let n = coords.len() as f64;
        assert!(n >= 1e4);
        let mean = coords.iter().sum::<f64>() / n;
        let var = coords.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 5.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 5.0 * (2.0 / n).sqrt(), "var {var}");
    }

    #[test]
    fn seed_controls_the_output() {
        let a = gen_three_way(&SimSpec3::new(4, 3, 2, 1)).unwrap();
        let b = gen_three_way(&SimSpec3::new(4, 3, 2, 1)).unwrap();
        let c = gen_three_way(&SimSpec3::new(4, 3, 2, 2)).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(
            a.schema.source(1).unwrap().values(),
            b.schema.source(1).unwrap().values()
        );
        assert_ne!(
            a.schema.source(1).unwrap().values(),
            c.schema.source(1).unwrap().values()
        );
        assert_eq!(
            a.schema.source(1).unwrap().len(),
            c.schema.source(1).unwrap().len()
        );
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(gen_three_way(&SimSpec3::new(0, 3, 2, 1)).is_err());
        let neg = SimSpec3 {
            noise_sd: -1.0,
            ..SimSpec3::new(1, 1, 1, 1)
        };
        assert!(gen_three_way(&neg).is_err());
        let r0 = SimSpec4 {
            rank: 0,
            ..SimSpec4::new(1, 1, 1, 1, 1)
        };
        assert!(gen_four_way(&r0).is_err());
    }

    #[test]
    fn truth_round_trips_through_json() {
        let truth = three_way_truth(&SimSpec3::new(3, 2, 2, 1)).unwrap();
        let back = GroundTruth::from_json_str(&truth.to_json_string().unwrap()).unwrap();
        assert_eq!(back, truth);
        let mut broken = truth.clone();
        broken.factors[1].pop();
        assert!(GroundTruth::from_json_str(&broken.to_json_string().unwrap()).is_err());
    }
}
