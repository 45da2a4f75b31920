use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Mae,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Mae => "mae",
        }
    }
}

/// Error summary over one source's test cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

impl Scores {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Rmse => self.rmse,
            Metric::Mae => self.mae,
        }
    }
}

/// RMSE and MAE of `predicted` against `actual`.
pub fn score(actual: &[f64], predicted: &[f64]) -> Result<Scores> {
    if actual.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            actual: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::invalid("cannot score an empty test set"));
    }
    let n = actual.len() as f64;
    let (sq, abs) = actual
        .iter()
        .zip(predicted)
        .fold((0.0, 0.0), |(sq, abs), (y, p)| {
            let e = y - p;
            (sq + e * e, abs + e.abs())
        });
    Ok(Scores {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        n: actual.len(),
    })
}
