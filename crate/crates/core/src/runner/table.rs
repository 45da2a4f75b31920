//! Aggregated results: one row per (method, source) pair, long-format CSV and
//! a wide text layout with one column per source.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metric;

pub const CSV_COLUMNS: [&str; 9] = [
    "method",
    "source",
    "rmse_mean",
    "rmse_std",
    "mae_mean",
    "mae_std",
    "time_mean_s",
    "time_std_s",
    "r_effective",
];

pub const RAW_COLUMNS: [&str; 8] = [
    "rep", "seed", "method", "source", "rmse", "mae", "n", "time_s",
];

/// One method's scores on one source in one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub rep: usize,
    pub seed: u64,
    pub method: String,
    pub source: String,
    pub rmse: f64,
    pub mae: f64,
    /// Number of test cells.
    pub n: usize,
    /// Fit plus predict time of the whole method in this replication.
    pub time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep: usize,
    pub method: String,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Stat { mean, std })
    }
}

/// Summary of one (method, source) cell. Every field is `None` when the
/// method does not model the source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub source: String,
    pub rmse: Option<Stat>,
    pub mae: Option<Stat>,
    pub time: Option<Stat>,
    pub r_effective: Option<usize>,
}

impl ResultRow {
    pub fn metric(&self, metric: Metric) -> Option<Stat> {
        match metric {
            Metric::Rmse => self.rmse,
            Metric::Mae => self.mae,
        }
    }

    fn without_time(&self) -> ResultRow {
        ResultRow {
            time: None,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Row order of the wide layout.
    pub methods: Vec<String>,
    /// Column order of the wide layout.
    pub sources: Vec<String>,
    /// `methods x sources`, method-major.
    pub rows: Vec<ResultRow>,
    pub metrics: Vec<Metric>,
    pub replications: usize,
    pub raw: Vec<RawRecord>,
    pub failures: Vec<Failure>,
}

impl ResultTable {
    /// Aggregates raw records. `modeled` lists the sources each method covers;
    /// a method's effective replication count excludes its failed replications.
    pub fn aggregate(
        methods: &[(String, Vec<String>)],
        sources: &[String],
        metrics: &[Metric],
        replications: usize,
        raw: Vec<RawRecord>,
        failures: Vec<Failure>,
    ) -> ResultTable {
        let mut grouped: BTreeMap<(&str, &str), Vec<&RawRecord>> = BTreeMap::new();
        for r in &raw {
            grouped.entry((&r.method, &r.source)).or_default().push(r);
        }
        let mut rows = Vec::with_capacity(methods.len() * sources.len());
        for (method, modeled) in methods {
            for source in sources {
                let mut row = ResultRow {
                    method: method.clone(),
                    source: source.clone(),
                    rmse: None,
                    mae: None,
                    time: None,
                    r_effective: None,
                };
                if modeled.contains(source) {
                    let recs = grouped
                        .get(&(method.as_str(), source.as_str()))
                        .map(Vec::as_slice)
                        .unwrap_or(&[]);
                    let col =
                        |f: fn(&RawRecord) -> f64| recs.iter().map(|r| f(r)).collect::<Vec<_>>();
                    if metrics.contains(&Metric::Rmse) {
                        row.rmse = Stat::of(&col(|r| r.rmse));
                    }
                    if metrics.contains(&Metric::Mae) {
                        row.mae = Stat::of(&col(|r| r.mae));
                    }
                    row.time = Stat::of(&col(|r| r.time_s));
                    row.r_effective = Some(recs.len());
                }
                rows.push(row);
            }
        }
        ResultTable {
            methods: methods.iter().map(|(m, _)| m.clone()).collect(),
            sources: sources.to_vec(),
            rows,
            metrics: metrics.to_vec(),
            replications,
            raw,
            failures,
        }
    }

    pub fn row(&self, method: &str, source: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.source == source)
    }

    /// Mean of `metric` for a modeled cell with at least one success.
    pub fn mean(&self, method: &str, source: &str, metric: Metric) -> Option<f64> {
        self.row(method, source)?.metric(metric).map(|s| s.mean)
    }

    /// Methods that failed in at least half of the replications.
    pub fn failing_methods(&self) -> Vec<String> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for f in &self.failures {
            *counts.entry(&f.method).or_default() += 1;
        }
        self.methods
            .iter()
            .filter(|m| {
                let c = counts.get(m.as_str()).copied().unwrap_or(0);
                c > 0 && 2 * c >= self.replications
            })
            .cloned()
            .collect()
    }

    /// Equality of everything except wall-clock time.
    pub fn same_results(&self, other: &ResultTable) -> bool {
        let strip_raw = |t: &ResultTable| -> Vec<RawRecord> {
            t.raw
                .iter()
                .map(|r| RawRecord {
                    time_s: 0.0,
                    ..r.clone()
                })
                .collect()
        };
        self.methods == other.methods
            && self.sources == other.sources
            && self.replications == other.replications
            && self.failures == other.failures
            && strip_raw(self) == strip_raw(other)
            && self
                .rows
                .iter()
                .map(ResultRow::without_time)
                .eq(other.rows.iter().map(ResultRow::without_time))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_COLUMNS)?;
        let num = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.source.clone(),
                num(r.rmse.map(|s| s.mean)),
                num(r.rmse.map(|s| s.std)),
                num(r.mae.map(|s| s.mean)),
                num(r.mae.map(|s| s.std)),
                num(r.time.map(|s| s.mean)),
                num(r.time.map(|s| s.std)),
                r.r_effective.map(|n| n.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the summary CSV back. Raw values, failures and the replication
    /// count are not part of that file and come back empty.
    pub fn read_csv<R: Read>(reader: R, origin: &str) -> Result<ResultTable> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(CSV_COLUMNS) {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 1,
                message: format!("expected columns {}", CSV_COLUMNS.join(",")),
            });
        }
        let mut table = ResultTable::default();
        let mut metrics = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let err = |message: String| Error::Parse {
                path: origin.to_string(),
                line,
                message,
            };
            if rec.len() != CSV_COLUMNS.len() {
                return Err(err(format!(
                    "expected {} fields, found {}",
                    CSV_COLUMNS.len(),
                    rec.len()
                )));
            }
            let num = |i: usize| -> Result<Option<f64>> {
                let s = &rec[i];
                if s.is_empty() {
                    return Ok(None);
                }
                let v: f64 = s
                    .parse()
                    .map_err(|_| err(format!("bad number {s:?} in {}", CSV_COLUMNS[i])))?;
                if !v.is_finite() {
                    return Err(err(format!("non-finite {} value", CSV_COLUMNS[i])));
                }
                Ok(Some(v))
            };
            let stat = |i: usize| -> Result<Option<Stat>> {
                match (num(i)?, num(i + 1)?) {
                    (Some(mean), Some(std)) => Ok(Some(Stat { mean, std })),
                    (None, None) => Ok(None),
                    _ => Err(err(format!("{} needs both mean and std", CSV_COLUMNS[i]))),
                }
            };
            let r_effective = match &rec[8] {
                "" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| err(format!("bad r_effective {s:?}")))?,
                ),
            };
            let row = ResultRow {
                method: rec[0].to_string(),
                source: rec[1].to_string(),
                rmse: stat(2)?,
                mae: stat(4)?,
                time: stat(6)?,
                r_effective,
            };
            if row.method.is_empty() || row.source.is_empty() {
                return Err(err("empty method or source name".into()));
            }
            if !table.methods.contains(&row.method) {
                table.methods.push(row.method.clone());
            }
            if !table.sources.contains(&row.source) {
                table.sources.push(row.source.clone());
            }
            if row.rmse.is_some() && !metrics.contains(&Metric::Rmse) {
                metrics.push(Metric::Rmse);
            }
            if row.mae.is_some() && !metrics.contains(&Metric::Mae) {
                metrics.push(Metric::Mae);
            }
            if table
                .rows
                .iter()
                .any(|r| r.method == row.method && r.source == row.source)
            {
                return Err(err(format!(
                    "duplicate row ({}, {})",
                    row.method, row.source
                )));
            }
            table.rows.push(row);
        }
        metrics.sort();
        table.metrics = metrics;
        Ok(table)
    }

    pub fn write_raw_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(RAW_COLUMNS)?;
        for r in &self.raw {
            w.write_record([
                r.rep.to_string(),
                r.seed.to_string(),
                r.method.clone(),
                r.source.clone(),
                format!("{:?}", r.rmse),
                format!("{:?}", r.mae),
                r.n.to_string(),
                format!("{:?}", r.time_s),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Wide layout: one block per metric plus one for time, `mean (std)` with
    /// three decimals, blank where the method does not model the source.
    pub fn render_text(&self) -> String {
        let mut blocks: Vec<(String, Box<dyn Fn(&ResultRow) -> Option<Stat>>)> = self
            .metrics
            .iter()
            .map(|&m| {
                let f: Box<dyn Fn(&ResultRow) -> Option<Stat>> = Box::new(move |r| r.metric(m));
                (m.name().to_uppercase(), f)
            })
            .collect();
        blocks.push(("Time (s)".to_string(), Box::new(|r: &ResultRow| r.time)));

        let mut out = String::new();
        for (title, get) in &blocks {
            let mut grid: Vec<Vec<String>> = vec![std::iter::once("method".to_string())
                .chain(self.sources.iter().cloned())
                .collect()];
            for m in &self.methods {
                let mut line = vec![m.clone()];
                for s in &self.sources {
                    let cell = self
                        .row(m, s)
                        .and_then(get)
                        .map(|st| format!("{:.3} ({:.3})", st.mean, st.std))
                        .unwrap_or_default();
                    line.push(cell);
                }
                grid.push(line);
            }
            let widths: Vec<usize> = (0..grid[0].len())
                .map(|c| grid.iter().map(|l| l[c].len()).max().unwrap_or(0))
                .collect();
            let _ = writeln!(out, "{title}");
            for (i, line) in grid.iter().enumerate() {
                let mut text = String::new();
                for (c, cell) in line.iter().enumerate() {
                    if c == 0 {
                        let _ = write!(text, "{cell:<w$}", w = widths[c]);
                    } else {
                        let _ = write!(text, "  {cell:>w$}", w = widths[c]);
                    }
                }
                let _ = writeln!(out, "{}", text.trim_end());
                if i == 0 {
                    let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                    let _ = writeln!(out, "{}", "-".repeat(total));
                }
            }
            out.push('\n');
        }
        if self.replications > 0 {
            let _ = writeln!(out, "replications: {}", self.replications);
        }
        for f in &self.failures {
            let _ = writeln!(
                out,
                "failed: {} in replication {}: {}",
                f.method, f.rep, f.message
            );
        }
        out
    }

    /// Writes `results.csv`, `raw.csv` and `table.txt` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("results.csv"))?)?;
        self.write_raw_csv(std::fs::File::create(dir.join("raw.csv"))?)?;
        std::fs::write(dir.join("table.txt"), self.render_text())?;
        Ok(())
    }
}
