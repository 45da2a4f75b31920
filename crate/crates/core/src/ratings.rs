//! Rating-data layout: user-outfit, user-top, user-bottom and top-bottom fit
//! files named by a JSON manifest, each in the observation CSV format.
//!
//! Also a generator of layout-conformant synthetic rating files for exercising
//! the pipeline. Its output is simulated, not collected.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs_store::{
    build_schema, read_observations, write_observations_csv, DataSource, FiberSpec, Schema,
    SchemaConfig, SourceId, SourceSpec,
};
use crate::seed;
use crate::simgen::{three_way_truth, SimSpec3};

pub const UTB: SourceId = 1;
pub const UT: SourceId = 2;
pub const UB: SourceId = 3;
pub const TB: SourceId = 4;

const ROLES: [(SourceId, &str, &[usize]); 4] = [
    (UTB, "utb", &[0, 1, 2]),
    (UT, "ut", &[0, 1]),
    (UB, "ub", &[0, 2]),
    (TB, "tb", &[1, 2]),
];

// index bound while dimensions are still being inferred
const PROVISIONAL_DIM: usize = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingScale {
    pub lo: f64,
    pub hi: f64,
    /// Grid spacing of individual ratings; fit scores may be averages.
    pub step: f64,
}

impl Default for RatingScale {
    fn default() -> Self {
        Self {
            lo: 1.0,
            hi: 5.0,
            step: 0.5,
        }
    }
}

impl RatingScale {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::invalid("rating scale needs finite lo < hi"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("rating step must be positive"));
        }
        Ok(())
    }

    pub fn in_range(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn on_grid(&self, v: f64) -> bool {
        let k = (v - self.lo) / self.step;
        (k - k.round()).abs() < 1e-9
    }

    /// Nearest grid value inside the scale.
    pub fn snap(&self, v: f64) -> f64 {
        let k = ((v - self.lo) / self.step).round();
        (self.lo + k * self.step).clamp(self.lo, self.hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingDims {
    pub users: usize,
    pub tops: usize,
    pub bottoms: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatingFiles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utb: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ut: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ub: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tb: Option<PathBuf>,
}

impl RatingFiles {
    fn get(&self, id: SourceId) -> Option<&PathBuf> {
        match id {
            UTB => self.utb.as_ref(),
            UT => self.ut.as_ref(),
            UB => self.ub.as_ref(),
            _ => self.tb.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingsManifest {
    #[serde(default)]
    pub scale: RatingScale,
    /// Inferred from the largest index per fiber when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<RatingDims>,
    pub files: RatingFiles,
}

impl RatingsManifest {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: RatingsManifest = serde_json::from_str(s)?;
        m.scale.validate()?;
        Ok(m)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Per-source observation counts of a loaded layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDensity {
    pub name: String,
    pub observed: usize,
    pub cells: f64,
    pub density: f64,
}

fn fibers(dims: [usize; 3]) -> Vec<FiberSpec> {
    ["user", "top", "bottom"]
        .iter()
        .zip(dims)
        .enumerate()
        .map(|(id, (label, dim))| FiberSpec {
            id,
            label: (*label).to_string(),
            dim,
        })
        .collect()
}

fn role_spec(id: SourceId) -> SourceSpec {
    let (_, name, fs) = ROLES.iter().find(|r| r.0 == id).expect("known role");
    SourceSpec::new(id, name, fs)
}

/// Checks scale membership of every value. Fit scores may be averages and are
/// only range-checked.
fn check_values(src: &DataSource, scale: &RatingScale, origin: &str) -> Result<()> {
    for (idx, v) in src.iter() {
        let bad = if !scale.in_range(v) {
            Some(format!("outside [{}, {}]", scale.lo, scale.hi))
        } else if src.id() != TB && !scale.on_grid(v) {
            Some(format!(
                "not a multiple of {} above {}",
                scale.step, scale.lo
            ))
        } else {
            None
        };
        if let Some(why) = bad {
            return Err(Error::invalid(format!(
                "{origin}: rating {v} at cell {idx:?} is {why}"
            )));
        }
    }
    Ok(())
}

/// Reads every role file named in `manifest`, resolving relative paths
/// against `base`. Roles with no file or an empty file are dropped.
pub fn read_ratings(
    manifest: &RatingsManifest,
    base: &Path,
) -> Result<(Schema, Vec<SourceDensity>)> {
    manifest.scale.validate()?;
    let declared = manifest.dims.map(|d| [d.users, d.tops, d.bottoms]);
    let bound = declared.unwrap_or([PROVISIONAL_DIM; 3]);
    let mut sources = Vec::new();
    for (id, _, _) in ROLES {
        let Some(rel) = manifest.files.get(id) else {
            continue;
        };
        let path = if rel.is_relative() {
            base.join(rel)
        } else {
            rel.clone()
        };
        let origin = path.display().to_string();
        let config = SchemaConfig {
            fibers: fibers(bound),
            sources: vec![role_spec(id)],
        };
        let reader = BufReader::new(File::open(&path)?);
        let schema = read_observations(reader, &config, &origin)?;
        let src = schema.sources()[0].clone();
        if src.is_empty() {
            continue;
        }
        check_values(&src, &manifest.scale, &origin)?;
        sources.push(src);
    }
    if sources.is_empty() {
        return Err(Error::invalid("no rating file has observations"));
    }
    let dims = match declared {
        Some(d) => d,
        None => {
            let mut d = [0usize; 3];
            for src in &sources {
                for (idx, _) in src.iter() {
                    for (&f, &i) in src.fibers().iter().zip(idx) {
                        d[f] = d[f].max(i + 1);
                    }
                }
            }
            // a fiber no file mentions still needs one entity
            d.map(|n| n.max(1))
        }
    };
    let schema = build_schema(fibers(dims), sources)?;
    let report = schema
        .sources()
        .iter()
        .map(|s| {
            let cells = schema.cell_count(s.id()).expect("present");
            SourceDensity {
                name: s.name().to_string(),
                observed: s.len(),
                cells,
                density: s.len() as f64 / cells,
            }
        })
        .collect();
    Ok((schema, report))
}

/// Loads a manifest file; relative data paths resolve against its directory.
pub fn load_ratings(path: impl AsRef<Path>) -> Result<(Schema, Vec<SourceDensity>)> {
    let path = path.as_ref();
    let manifest = RatingsManifest::from_json_str(&std::fs::read_to_string(path)?)?;
    read_ratings(&manifest, path.parent().unwrap_or(Path::new(".")))
}

fn default_users() -> usize {
    386
}
fn default_items() -> usize {
    50
}
fn default_counts() -> [usize; 4] {
    [16254, 4712, 4569, 2500]
}
fn default_raters() -> usize {
    7
}
fn default_spread() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    0.5
}

/// Simulated rating files with the observation counts of the offline study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRatingsSpec {
    #[serde(default = "default_users")]
    pub users: usize,
    #[serde(default = "default_items")]
    pub tops: usize,
    #[serde(default = "default_items")]
    pub bottoms: usize,
    /// Observed cells of utb, ut, ub, tb.
    #[serde(default = "default_counts")]
    pub counts: [usize; 4],
    #[serde(default)]
    pub scale: RatingScale,
    /// Ratings averaged into each fit score.
    #[serde(default = "default_raters")]
    pub raters: usize,
    /// Rating-scale units per unit of latent signal.
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticRatingsSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Latent-factor ratings centred on the scale midpoint, discretized to the
/// grid and clamped; fit scores average `raters` such ratings.
pub fn synthetic_ratings(spec: &SyntheticRatingsSpec) -> Result<Schema> {
    spec.scale.validate()?;
    if spec.raters == 0 || !(spec.noise_sd >= 0.0) || !spec.spread.is_finite() {
        return Err(Error::invalid(
            "raters must be positive and noise_sd non-negative",
        ));
    }
    let truth = three_way_truth(&SimSpec3 {
        noise_sd: 0.0,
        ..SimSpec3::new(spec.users, spec.tops, spec.bottoms, spec.seed)
    })?;
    let dims = [spec.users, spec.tops, spec.bottoms];
    let mid = 0.5 * (spec.scale.lo + spec.scale.hi);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let mut sources = Vec::new();
    for ((id, name, fs), &count) in ROLES.iter().zip(&spec.counts) {
        let role_dims: Vec<usize> = fs.iter().map(|&f| dims[f]).collect();
        let total: usize = role_dims.iter().product();
        if count > total {
            return Err(Error::invalid(format!(
                "{name}: {count} observations exceed {total} cells"
            )));
        }
        let mut rng = seed::rng(spec.seed, &[seed::tag("ratings"), *id as u64]);
        let mut cells: Vec<usize> = sample(&mut rng, total, count).into_vec();
        cells.sort_unstable();
        let mut src = DataSource::with_capacity(SourceSpec::new(*id, name, fs), count);
        let mut idx = vec![0; fs.len()];
        for c in cells {
            let mut rest = c;
            for p in (0..fs.len()).rev() {
                idx[p] = rest % role_dims[p];
                rest /= role_dims[p];
            }
            let signal = mid + spec.spread * truth.predict(*id, &idx)?;
            let draws = if *id == TB { spec.raters } else { 1 };
            let value = (0..draws)
                .map(|_| spec.scale.snap(signal + noise.sample(&mut rng)))
                .sum::<f64>()
                / draws as f64;
            src.push(&idx, value)?;
        }
        sources.push(src);
    }
    build_schema(fibers(dims), sources)
}

/// Writes one observation CSV per role plus `manifest.json` into `dir`.
pub fn write_synthetic_ratings(
    spec: &SyntheticRatingsSpec,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let schema = synthetic_ratings(spec)?;
    let mut files = RatingFiles::default();
    for src in schema.sources() {
        let name = format!("{}.csv", src.name());
        let single = build_schema(schema.fibers().to_vec(), vec![src.clone()])?;
        write_observations_csv(dir.join(&name), &single)?;
        let slot = match src.id() {
            UTB => &mut files.utb,
            UT => &mut files.ut,
            UB => &mut files.ub,
            _ => &mut files.tb,
        };
        *slot = Some(PathBuf::from(name));
    }
    let manifest = RatingsManifest {
        scale: spec.scale,
        dims: Some(RatingDims {
            users: spec.users,
            tops: spec.tops,
            bottoms: spec.bottoms,
        }),
        files,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json_string()?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        std::fs::write(dir.join(name), body).unwrap();
        PathBuf::from(name)
    }

    fn manifest(files: RatingFiles) -> RatingsManifest {
        RatingsManifest {
            scale: RatingScale::default(),
            dims: None,
            files,
        }
    }

    #[test]
    fn synthetic_layout_matches_the_study_densities() {
        let schema = synthetic_ratings(&SyntheticRatingsSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_synthetic_ratings(&SyntheticRatingsSpec::default(), dir.path()).unwrap();
        let (loaded, report) = load_ratings(&path).unwrap();
        assert_eq!(loaded.fiber_dims(), vec![386, 50, 50]);
        let pct: Vec<String> = report
            .iter()
            .map(|d| format!("{:.1}", 100.0 * d.density))
            .collect();
        assert_eq!(pct, vec!["1.7", "24.4", "23.7", "100.0"]);
        assert!((100.0 * report[0].density - 1.68).abs() < 0.005);
        let counts: Vec<usize> = report.iter().map(|d| d.observed).collect();
        assert_eq!(counts, vec![16254, 4712, 4569, 2500]);
        for (a, b) in schema.sources().iter().zip(loaded.sources()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn ratings_stay_on_the_scale() {
        let spec = SyntheticRatingsSpec {
            users: 20,
            tops: 6,
            bottoms: 5,
            counts: [100, 40, 30, 30],
            ..Default::default()
        };
        let schema = synthetic_ratings(&spec).unwrap();
        let scale = RatingScale::default();
        for src in schema.sources() {
            for &v in src.values() {
                assert!(scale.in_range(v));
                if src.id() != TB {
                    assert!(scale.on_grid(v));
                }
            }
        }
        let too_many = SyntheticRatingsSpec {
            counts: [1, 1, 1, 31],
            ..spec
        };
        assert!(synthetic_ratings(&too_many).is_err());
    }

    #[test]
    fn out_of_scale_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ut = write(dir.path(), "ut.csv", "2,0,0,4.5\n2,1,0,5.5\n");
        let m = manifest(RatingFiles {
            ut: Some(ut),
            ..Default::default()
        });
        let err = read_ratings(&m, dir.path()).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("5.5"));
    }

    #[test]
    fn off_grid_rating_is_rejected_but_averaged_fit_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let ut = write(dir.path(), "ut.csv", "2,0,0,3.3\n");
        let m = manifest(RatingFiles {
            ut: Some(ut),
            ..Default::default()
        });
        assert!(read_ratings(&m, dir.path()).is_err());
        let tb = write(dir.path(), "tb.csv", "4,0,0,3.2857142857\n");
        let m = manifest(RatingFiles {
            tb: Some(tb),
            ..Default::default()
        });
        assert!(read_ratings(&m, dir.path()).is_ok());
    }

    #[test]
    fn empty_fit_file_drops_the_source() {
        let dir = tempfile::tempdir().unwrap();
        let files = RatingFiles {
            utb: Some(write(dir.path(), "utb.csv", "1,0,0,0,3\n1,2,1,1,4.5\n")),
            ut: Some(write(dir.path(), "ut.csv", "2,1,1,2\n")),
            ub: Some(write(
                dir.path(),
                "ub.csv",
                "source_id,i,b,value\n3,0,1,1\n",
            )),
            tb: Some(write(dir.path(), "tb.csv", "")),
        };
        let (schema, report) = read_ratings(&manifest(files), dir.path()).unwrap();
        assert_eq!(schema.num_sources(), 3);
        assert_eq!(schema.fiber_dims(), vec![3, 2, 2]);
        assert_eq!(report.len(), 3);
    }

    #[test]
    fn declared_dims_conflicting_with_a_file_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = RatingsManifest {
            dims: Some(RatingDims {
                users: 2,
                tops: 2,
                bottoms: 2,
            }),
            ..manifest(RatingFiles {
                ut: Some(write(dir.path(), "ut.csv", "2,0,0,3\n")),
                ub: Some(write(dir.path(), "ub.csv", "3,5,0,3\n")),
                ..Default::default()
            })
        };
        assert!(read_ratings(&m, dir.path()).is_err());
    }

    #[test]
    fn wrong_role_id_and_missing_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(RatingFiles {
            ut: Some(write(dir.path(), "ut.csv", "3,0,0,3\n")),
            ..Default::default()
        });
        assert!(read_ratings(&m, dir.path()).is_err());
        let m = manifest(RatingFiles {
            ut: Some(PathBuf::from("absent.csv")),
            ..Default::default()
        });
        assert!(read_ratings(&m, dir.path()).is_err());
        assert!(read_ratings(&manifest(RatingFiles::default()), dir.path()).is_err());
        assert!(
            RatingsManifest::from_json_str(r#"{"scale":{"lo":5,"hi":1,"step":1},"files":{}}"#)
                .is_err()
        );
    }
}
