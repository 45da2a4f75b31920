use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden widths of the prediction heads; a scalar output layer follows.
pub const DEFAULT_HIDDEN: [usize; 4] = [64, 32, 16, 8];

pub const MLP_FORMAT: &str = "jima-mlp";
pub const MLP_FORMAT_VERSION: u32 = 1;

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| v.max(0.0));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Multi-layer perceptron with a scalar output.
///
/// Every mutation through [`Mlp::layers_mut`] stamps the network with a fresh
/// generation; a [`BatchCache`] from an older generation is rejected by
/// backward.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations retained by a batched forward pass.
#[derive(Clone, Debug)]
pub struct BatchCache {
    generation: u64,
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl BatchCache {
    /// Network outputs, one per batch row.
    pub fn output(&self) -> ArrayView1<'_, f64> {
        self.post.last().expect("non-empty network").column(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(scale, &b.weights);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    /// All components in parameter order (per layer: weights row-major, then bias).
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// Scaled-uniform initialization: weights in `±sqrt(6 / (fan_in + fan_out))`,
    /// zero biases, rectifier on hidden layers and identity on the scalar output.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(input_dim, hidden)?;
        for layer in &mut net.layers {
            let limit = (6.0 / (layer.inputs() + layer.outputs()) as f64).sqrt();
            layer
                .weights
                .mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        Ok(net)
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for (pos, &width) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let activation = if pos < hidden.len() {
                Activation::Relu
            } else {
                Activation::Identity
            };
            layers.push(DenseLayer {
                weights: Array2::zeros((width, fan_in)),
                bias: Array1::zeros(width),
                activation,
            });
            fan_in = width;
        }
        Ok(Mlp {
            layers,
            generation: next_generation(),
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::invalid("network needs at least one layer"));
        };
        if last.outputs() != 1 {
            return Err(Error::invalid("output layer must have width 1"));
        }
        for (pos, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() || l.inputs() == 0 {
                return Err(Error::invalid(format!(
                    "layer {pos} has inconsistent shapes"
                )));
            }
            if pos > 0 && layers[pos - 1].outputs() != l.inputs() {
                return Err(Error::DimensionMismatch {
                    expected: layers[pos - 1].outputs(),
                    actual: l.inputs(),
                });
            }
            if !l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {pos} parameters")));
            }
        }
        Ok(Mlp {
            layers,
            generation: next_generation(),
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.generation = next_generation();
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn param(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            if i < l.weights.len() {
                return l.weights.as_slice().expect("standard layout")[i];
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                return l.bias[i];
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut i: usize, value: f64) {
        for l in self.layers_mut() {
            if i < l.weights.len() {
                l.weights.as_slice_mut().expect("standard layout")[i] = value;
                return;
            }
            i -= l.weights.len();
            if i < l.bias.len() {
                l.bias[i] = value;
                return;
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(f64, BatchCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("1 x d view");
        let cache = self.forward_batch(x);
        Ok((cache.output()[0], cache))
    }

    /// Forward pass over a `batch x input_dim` matrix.
    ///
    /// Panics if the column count does not match the input width.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> BatchCache {
        assert_eq!(inputs.ncols(), self.input_dim(), "input width");
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let prev = post.last().map_or(inputs.view(), |a| a.view());
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.bias;
            let mut a = z.clone();
            layer.activation.apply(&mut a);
            pre.push(z);
            post.push(a);
        }
        BatchCache {
            generation: self.generation,
            input: inputs.to_owned(),
            pre,
            post,
        }
    }

    /// Outputs only, without retaining a cache.
    pub fn predict_batch(&self, inputs: ArrayView2<'_, f64>) -> Array1<f64> {
        assert_eq!(inputs.ncols(), self.input_dim(), "input width");
        let mut act: Option<Array2<f64>> = None;
        for layer in &self.layers {
            let prev = act.as_ref().map_or(inputs.view(), |a| a.view());
            let mut z = prev.dot(&layer.weights.t());
            z += &layer.bias;
            layer.activation.apply(&mut z);
            act = Some(z);
        }
        act.expect("non-empty network").column(0).to_owned()
    }

    /// Backpropagates `upstream[b] = dL/d output[b]` through the cached pass.
    ///
    /// Returns parameter gradients summed over the batch and the per-row
    /// gradient with respect to the inputs.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        upstream: ArrayView1<'_, f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        if upstream.len() != cache.input.nrows() {
            return Err(Error::DimensionMismatch {
                expected: cache.input.nrows(),
                actual: upstream.len(),
            });
        }
        let mut delta = upstream.to_owned().insert_axis(Axis(1));
        let mut grads = Vec::with_capacity(self.layers.len());
        for (pos, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre[pos])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            let below = if pos == 0 {
                cache.input.view()
            } else {
                cache.post[pos - 1].view()
            };
            grads.push(LayerGrads {
                weights: delta.t().dot(&below),
                bias: delta.sum_axis(Axis(0)),
            });
            delta = delta.dot(&layer.weights);
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    /// Single-output backward: parameter gradients and `dL/d input`.
    pub fn backward(&self, cache: &BatchCache, upstream: f64) -> Result<(MlpGrads, Vec<f64>)> {
        if cache.input.nrows() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: cache.input.nrows(),
            });
        }
        let (g, dx) = self.backward_batch(cache, ndarray::aview1(&[upstream]))?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }

    pub fn to_record(&self) -> MlpRecord {
        MlpRecord {
            format: MLP_FORMAT.to_string(),
            version: MLP_FORMAT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_record(record: &MlpRecord) -> Result<Self> {
        if record.format != MLP_FORMAT || record.version != MLP_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported network format {} v{}",
                record.format, record.version
            )));
        }
        let layers = record
            .layers
            .iter()
            .map(|l| {
                let expected = l
                    .inputs
                    .checked_mul(l.outputs)
                    .ok_or_else(|| Error::invalid("layer shape overflows"))?;
                if l.weights.len() != expected || l.bias.len() != l.outputs {
                    return Err(Error::invalid(
                        "layer parameter count does not match its shape",
                    ));
                }
                Ok(DenseLayer {
                    weights: Array2::from_shape_vec((l.outputs, l.inputs), l.weights.clone())
                        .map_err(|e| Error::invalid(e.to_string()))?,
                    bias: Array1::from(l.bias.clone()),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_record())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_record(&serde_json::from_str(s)?)
    }
}

/// Serialized network: layer shapes plus row-major (`out x in`) weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `lambda * Σθ²` over all weights and biases, with gradient `2·lambda·θ`.
pub fn l2_penalty(net: &Mlp, lambda: f64) -> Result<(f64, MlpGrads)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!(
            "penalty weight {lambda} must be >= 0"
        )));
    }
    let mut total = 0.0;
    let layers = net
        .layers
        .iter()
        .map(|l| {
            total += l
                .weights
                .iter()
                .chain(l.bias.iter())
                .map(|v| v * v)
                .sum::<f64>();
            LayerGrads {
                weights: &l.weights * (2.0 * lambda),
                bias: &l.bias * (2.0 * lambda),
            }
        })
        .collect();
    Ok((lambda * total, MlpGrads { layers }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use approx::assert_relative_eq;
    use ndarray::array;

    /// Naive-loop forward pass, independent of the ndarray path.
    fn naive_forward(net: &Mlp, input: &[f64]) -> f64 {
        let mut act = input.to_vec();
        for l in net.layers() {
            let mut next = vec![0.0; l.outputs()];
            for (o, slot) in next.iter_mut().enumerate() {
                let mut z = l.bias[o];
                for (i, a) in act.iter().enumerate() {
                    z += l.weights[[o, i]] * a;
                }
                *slot = match l.activation {
                    Activation::Relu => z.max(0.0),
                    Activation::Identity => z,
                };
            }
            act = next;
        }
        act[0]
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(4, &DEFAULT_HIDDEN).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 4.0]).unwrap().0, 0.0);
    }

    #[test]
    fn single_identity_layer_is_a_dot_product() {
        let net = Mlp::from_layers(vec![DenseLayer {
            weights: array![[1.0, 1.0, 1.0]],
            bias: array![0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let (y, cache) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, 6.0);
        let (g, dx) = net.backward(&cache, 1.0).unwrap();
        assert_eq!(g.layers[0].weights, array![[1.0, 2.0, 3.0]]);
        assert_eq!(dx, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = seed::rng(3, &[]);
        let net = Mlp::new(6, &[5, 4], &mut rng).unwrap();
        let (_, cache) = net.forward(&[0.3, -0.1, 0.7, 0.2, -0.9, 1.1]).unwrap();
        let (g, dx) = net.backward(&cache, 0.0).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_forward() {
        let mut rng = seed::rng(11, &[]);
        for trial in 0..20 {
            let net = Mlp::new(7, &DEFAULT_HIDDEN, &mut rng).unwrap();
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (y, _) = net.forward(&x).unwrap();
            assert!((y - naive_forward(&net, &x)).abs() < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn batch_forward_matches_rowwise() {
        let mut rng = seed::rng(12, &[]);
        let net = Mlp::new(3, &[8, 4], &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.1);
        let batch = net.predict_batch(x.view());
        for (row, &y) in x.rows().into_iter().zip(batch.iter()) {
            assert_relative_eq!(
                net.forward(row.as_slice().unwrap()).unwrap().0,
                y,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn default_head_parameter_count() {
        for d in [6, 15, 35, 75] {
            let net = Mlp::zeros(d, &DEFAULT_HIDDEN).unwrap();
            let expected = (64 * d + 64) + (64 * 32 + 32) + (32 * 16 + 16) + (16 * 8 + 8) + (8 + 1);
            assert_eq!(net.num_params(), expected);
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = Mlp::zeros(3, &[2]).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            net.forward(&[1.0, f64::NAN, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = Mlp::zeros(2, &[2]).unwrap();
        let (_, cache) = net.forward(&[1.0, 2.0]).unwrap();
        net.set_param(0, 0.5);
        assert!(matches!(net.backward(&cache, 1.0), Err(Error::StaleCache)));
    }

    #[test]
    fn l2_penalty_by_formula() {
        let mut net = Mlp::zeros(1, &[]).unwrap();
        assert_eq!(l2_penalty(&net, 0.0).unwrap().0, 0.0);
        net.set_param(0, 3.0);
        let (p, g) = l2_penalty(&net, 0.5).unwrap();
        assert_eq!(p, 4.5);
        assert_eq!(g.flat(), vec![3.0, 0.0]);
        assert!(l2_penalty(&net, -1.0).is_err());
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let mut rng = seed::rng(5, &[]);
        let net = Mlp::new(3, &[4, 2], &mut rng).unwrap();
        let lambda = 0.37;
        let (_, g) = l2_penalty(&net, lambda).unwrap();
        let g = g.flat();
        let h = 1e-5;
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            plus.set_param(i, net.param(i) + h);
            let mut minus = net.clone();
            minus.set_param(i, net.param(i) - h);
            let fd = (l2_penalty(&plus, lambda).unwrap().0 - l2_penalty(&minus, lambda).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(g[i].abs()).max(1e-6));
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = seed::rng(8, &[]);
        let net = Mlp::new(5, &DEFAULT_HIDDEN, &mut rng).unwrap();
        let back = Mlp::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        let x = [0.1, 0.2, -0.3, 0.4, 0.5];
        assert_eq!(
            back.forward(&x).unwrap().0.to_bits(),
            net.forward(&x).unwrap().0.to_bits()
        );
    }

    #[test]
    fn from_record_rejects_inconsistent_shapes() {
        let net = Mlp::zeros(3, &[2]).unwrap();
        let mut rec = net.to_record();
        rec.layers[0].weights.pop();
        assert!(Mlp::from_record(&rec).is_err());
        let mut rec = net.to_record();
        rec.layers[1].inputs = 3;
        rec.layers[1].weights = vec![0.0; 3];
        assert!(Mlp::from_record(&rec).is_err());
        let mut rec = net.to_record();
        rec.version = 99;
        assert!(Mlp::from_record(&rec).is_err());
    }
}
