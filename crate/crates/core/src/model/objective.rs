use ndarray::{Array1, Array2, ArrayView1};

use super::{features, sigmoid, JointModel};
use crate::error::{Error, Result};
use crate::nn::{l2_penalty, MlpGrads};
use crate::obs_store::{LossKind, Schema, SourceId};

/// Gradient of the multi-task objective.
#[derive(Clone, Debug)]
pub struct JointGrads {
    /// Aligned with `JointModel::heads`; `None` for heads without a batch.
    pub heads: Vec<Option<MlpGrads>>,
    /// Dense per-fiber gradient tables (non-zero only on `touched` rows).
    pub factors: Vec<Array2<f64>>,
    /// Sorted distinct rows per fiber that appeared in the batches.
    pub touched: Vec<Vec<usize>>,
}

impl JointGrads {
    /// Components in [`JointModel::param`] order.
    pub fn flat(&self, model: &JointModel) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .factors
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect();
        for (g, head) in self.heads.iter().zip(model.heads()) {
            match g {
                Some(g) => out.extend(g.flat()),
                None => out.extend(std::iter::repeat_n(0.0, head.net.num_params())),
            }
        }
        out
    }
}

/// Mean per-cell loss over a batch and `dLoss/dz` for each raw head output `z`.
///
/// Squared: `mean (y - z)²`. Cross-entropy: `p = σ(z)`, `mean -[y ln p + (1-y) ln(1-p)]`.
pub fn batch_loss(kind: LossKind, z: ArrayView1<'_, f64>, y: &[f64]) -> (f64, Array1<f64>) {
    let n = y.len() as f64;
    match kind {
        LossKind::Squared => {
            let mut loss = 0.0;
            let grad = Array1::from_iter(z.iter().zip(y).map(|(&z, &y)| {
                let e = z - y;
                loss += e * e;
                2.0 * e / n
            }));
            (loss / n, grad)
        }
        LossKind::CrossEntropy => {
            let mut loss = 0.0;
            let grad = Array1::from_iter(z.iter().zip(y).map(|(&z, &y)| {
                // softplus(z) - y z, computed without overflow
                loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
                (sigmoid(z) - y) / n
            }));
            (loss / n, grad)
        }
    }
}

/// Σ_l mean loss over batch_l + Σ_l λ_l‖θ_l‖² + λ_e Σ‖touched embedding rows‖².
///
/// `batches` pairs a modeled source with observation indices into that
/// source; empty batches are skipped along with their head penalty.
pub fn multi_task_loss(
    model: &JointModel,
    schema: &Schema,
    batches: &[(SourceId, &[usize])],
) -> Result<(f64, JointGrads)> {
    let r = model.rank();
    let mut factor_grads: Vec<Array2<f64>> = model
        .factors()
        .iter()
        .map(|t| Array2::zeros(t.raw_dim()))
        .collect();
    let mut touched: Vec<Vec<bool>> = model
        .factors()
        .iter()
        .map(|t| vec![false; t.nrows()])
        .collect();
    let mut head_grads: Vec<Option<MlpGrads>> = vec![None; model.heads().len()];
    let mut total = 0.0;

    for &(source, batch) in batches {
        if batch.is_empty() {
            continue;
        }
        let pos = model.head_position(source)?;
        if head_grads[pos].is_some() {
            return Err(Error::invalid(format!("source {source} has two batches")));
        }
        let head = &model.heads()[pos];
        let src = schema
            .source(source)
            .ok_or_else(|| Error::invalid(format!("source {source} missing from schema")))?;
        if src.fibers() != head.fibers.as_slice() {
            return Err(Error::invalid(format!(
                "source '{}' fibers differ from the model head",
                src.name()
            )));
        }
        if let Some(&bad) = batch.iter().find(|&&o| o >= src.len()) {
            return Err(Error::invalid(format!("observation {bad} out of range")));
        }
        for &o in batch {
            model.check_index(head, src.index(o))?;
        }

        let x = model.head_inputs(head, batch.iter().map(|&o| src.index(o)));
        let cache = head.net.forward_batch(x.view());
        let y: Vec<f64> = batch.iter().map(|&o| src.value(o)).collect();
        let (loss, dz) = batch_loss(head.loss, cache.output(), &y);
        let (mut g, dx) = head.net.backward_batch(&cache, dz.view())?;
        let lambda = model.config().lambda_for(source);
        let (penalty, pg) = l2_penalty(&head.net, lambda)?;
        g.add_scaled(&pg, 1.0);
        total += loss + penalty;
        head_grads[pos] = Some(g);

        let k = head.fibers.len();
        let mut acc = vec![0.0; k * r];
        for (&o, d_input) in batch.iter().zip(dx.rows()) {
            let idx = src.index(o);
            let vectors: Vec<&[f64]> = head
                .fibers
                .iter()
                .zip(idx)
                .map(|(&f, &i)| {
                    model.factors()[f]
                        .row(i)
                        .to_slice()
                        .expect("contiguous row")
                })
                .collect();
            acc.fill(0.0);
            let mut slots: Vec<&mut [f64]> = acc.chunks_exact_mut(r).collect();
            features::accumulate_input_grad(
                &vectors,
                d_input.as_slice().expect("contiguous row"),
                model.config().use_interactions,
                &mut slots,
            );
            for ((&f, &i), g) in head.fibers.iter().zip(idx).zip(acc.chunks_exact(r)) {
                let mut row = factor_grads[f].row_mut(i);
                for (a, b) in row.iter_mut().zip(g) {
                    *a += b;
                }
                touched[f][i] = true;
            }
        }
    }

    let lambda_e = model.config().embedding_lambda;
    let touched: Vec<Vec<usize>> = touched
        .iter()
        .map(|flags| {
            flags
                .iter()
                .enumerate()
                .filter(|(_, &t)| t)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    if lambda_e > 0.0 {
        for (f, rows) in touched.iter().enumerate() {
            for &i in rows {
                let row = model.factors()[f].row(i);
                total += lambda_e * row.dot(&row);
                factor_grads[f].row_mut(i).scaled_add(2.0 * lambda_e, &row);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("multi-task loss".into()));
    }
    Ok((
        total,
        JointGrads {
            heads: head_grads,
            factors: factor_grads,
            touched,
        },
    ))
}
