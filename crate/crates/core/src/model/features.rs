//! Element-wise interaction features.
//!
//! For `k` latent vectors of length `r`, the interaction blocks are the
//! element-wise products over every subset of size ≥ 2, ordered by ascending
//! bitmask (bit `j` selects input `j`). For `(x, u, v)` that is
//! `[x⊙u, x⊙v, u⊙v, x⊙u⊙v]`. A head input is the `k` raw vectors followed by
//! those blocks, `(2^k - 1)·r` values in total.

use crate::error::{Error, Result};

/// Subset masks with at least two members, ascending.
pub fn interaction_masks(k: usize) -> impl Iterator<Item = u32> {
    (1u32..(1u32 << k)).filter(|m| m.count_ones() >= 2)
}

/// Head input width for an order-`k` source.
pub fn head_input_dim(k: usize, rank: usize, interactions: bool) -> usize {
    if interactions {
        ((1usize << k) - 1) * rank
    } else {
        k * rank
    }
}

/// Concatenated interaction blocks, `(2^k - k - 1)·r` values.
pub fn interaction_features(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let k = vectors.len();
    if k < 2 {
        return Err(Error::invalid(format!(
            "need at least two vectors, got {k}"
        )));
    }
    let r = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != r) {
        return Err(Error::DimensionMismatch {
            expected: r,
            actual: bad.len(),
        });
    }
    if k > 16 {
        return Err(Error::invalid(
            "interaction order above 16 is not supported",
        ));
    }
    let mut out = vec![0.0; ((1usize << k) - k - 1) * r];
    write_interactions(vectors, &mut out);
    Ok(out)
}

fn write_interactions(vectors: &[&[f64]], out: &mut [f64]) {
    let r = vectors[0].len();
    for (block, mask) in out
        .chunks_exact_mut(r)
        .zip(interaction_masks(vectors.len()))
    {
        block.fill(1.0);
        for (j, v) in vectors.iter().enumerate() {
            if mask & (1 << j) != 0 {
                for (b, x) in block.iter_mut().zip(v.iter()) {
                    *b *= x;
                }
            }
        }
    }
}

/// Writes one head-input row: raw vectors, then (optionally) interaction blocks.
pub(crate) fn write_head_input(vectors: &[&[f64]], interactions: bool, out: &mut [f64]) {
    let r = vectors[0].len();
    let k = vectors.len();
    for (slot, v) in out.chunks_exact_mut(r).zip(vectors) {
        slot.copy_from_slice(v);
    }
    if interactions {
        write_interactions(vectors, &mut out[k * r..]);
    }
}

/// Chain rule from a head-input gradient back to each raw vector.
///
/// `grads[j]` receives `d/dv_j` accumulated over the raw slot and every
/// interaction block containing `j` (block gradient ⊙ product of the other
/// members).
pub(crate) fn accumulate_input_grad(
    vectors: &[&[f64]],
    d_input: &[f64],
    interactions: bool,
    grads: &mut [&mut [f64]],
) {
    let r = vectors[0].len();
    let k = vectors.len();
    for (g, d) in grads.iter_mut().zip(d_input.chunks_exact(r)) {
        for (a, b) in g.iter_mut().zip(d) {
            *a += b;
        }
    }
    if !interactions {
        return;
    }
    for (d_block, mask) in d_input[k * r..].chunks_exact(r).zip(interaction_masks(k)) {
        for j in (0..k).filter(|j| mask & (1 << j) != 0) {
            for e in 0..r {
                let mut others = d_block[e];
                for (i, v) in vectors.iter().enumerate() {
                    if i != j && mask & (1 << i) != 0 {
                        others *= v[e];
                    }
                }
                grads[j][e] += others;
            }
        }
    }
}
