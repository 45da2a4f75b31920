use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpGrads};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First/second moments for one flat parameter block.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    fn check(&self, params: &[f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                actual: params.len().max(grads.len()),
            });
        }
        Ok(())
    }

    /// Bias-corrected update of every component.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.check(params, grads)?;
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let (c1, c2) = self.corrections();
        for i in 0..params.len() {
            self.update(i, params, grads[i], c1, c2);
        }
        Ok(())
    }

    /// Lazy update: advances the step counter but only touches the listed
    /// rows (each `row_len` wide); other rows keep their moments and values.
    pub fn step_rows(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        row_len: usize,
        rows: &[usize],
    ) -> Result<()> {
        self.check(params, grads)?;
        if row_len == 0 || !params.len().is_multiple_of(row_len) {
            return Err(Error::invalid(
                "row length does not divide the parameter block",
            ));
        }
        let n_rows = params.len() / row_len;
        for &r in rows {
            if r >= n_rows {
                return Err(Error::invalid(format!("row {r} out of range")));
            }
            if !grads[r * row_len..(r + 1) * row_len]
                .iter()
                .all(|g| g.is_finite())
            {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        self.t += 1;
        let (c1, c2) = self.corrections();
        for &r in rows {
            for i in r * row_len..(r + 1) * row_len {
                self.update(i, params, grads[i], c1, c2);
            }
        }
        Ok(())
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t as i32;
        (
            1.0 - self.config.beta1.powi(t),
            1.0 - self.config.beta2.powi(t),
        )
    }

    #[inline]
    fn update(&mut self, i: usize, params: &mut [f64], g: f64, c1: f64, c2: f64) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
        self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
        let m_hat = self.m[i] / c1;
        let v_hat = self.v[i] / c2;
        params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// Adam moments for every weight matrix and bias vector of one network.
#[derive(Clone, Debug)]
pub struct MlpAdam {
    states: Vec<(AdamState, AdamState)>,
}

impl MlpAdam {
    pub fn new(config: AdamConfig, net: &Mlp) -> Self {
        Self {
            states: net
                .layers()
                .iter()
                .map(|l| {
                    (
                        AdamState::new(config, l.weights.len()),
                        AdamState::new(config, l.bias.len()),
                    )
                })
                .collect(),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGrads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite("network gradient".into()));
        }
        if grads.layers.len() != self.states.len() {
            return Err(Error::DimensionMismatch {
                expected: self.states.len(),
                actual: grads.layers.len(),
            });
        }
        for ((layer, g), (sw, sb)) in net
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.states)
        {
            sw.step(
                layer.weights.as_slice_mut().expect("standard layout"),
                g.weights.as_slice().expect("standard layout"),
            )?;
            sb.step(
                layer.bias.as_slice_mut().expect("standard layout"),
                g.bias.as_slice().expect("standard layout"),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_advances_t() {
        let mut s = AdamState::new(AdamConfig::default(), 3);
        let mut p = [1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
        assert_eq!(s.t(), 1);
    }

    #[test]
    fn first_step_moves_by_about_the_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + ε).
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(cfg, 1);
        let mut p = [0.5];
        s.step(&mut p, &[1.0]).unwrap();
        let expected = 0.5 - cfg.learning_rate / (1.0 + cfg.epsilon);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_scalar_quadratic() {
        let mut s = AdamState::new(
            AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            1,
        );
        let mut theta = [5.0];
        let mut reached = None;
        for step in 0..2000 {
            let g = [2.0 * theta[0]];
            s.step(&mut theta, &g).unwrap();
            if theta[0].abs() < 1e-2 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "theta = {}", theta[0]);
    }

    #[test]
    fn rejects_non_finite_and_mismatched_gradients() {
        let mut s = AdamState::new(AdamConfig::default(), 2);
        let mut p = [0.0, 0.0];
        assert!(s.step(&mut p, &[f64::NAN, 0.0]).is_err());
        assert!(s.step(&mut p, &[0.0]).is_err());
        assert_eq!(s.t(), 0);
    }

    #[test]
    fn step_rows_only_touches_listed_rows() {
        let mut s = AdamState::new(AdamConfig::default(), 6);
        let mut p = [1.0; 6];
        s.step_rows(&mut p, &[1.0; 6], 2, &[1]).unwrap();
        assert_eq!(&p[..2], &[1.0, 1.0]);
        assert!(p[2] < 1.0 && p[3] < 1.0);
        assert_eq!(&p[4..], &[1.0, 1.0]);
        assert!(s.step_rows(&mut p, &[1.0; 6], 2, &[3]).is_err());
    }
}
