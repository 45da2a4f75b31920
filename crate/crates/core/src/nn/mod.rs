//! Dense feedforward networks with hand-derived backpropagation and Adam.

mod adam;
mod mlp;

pub use adam::{AdamConfig, AdamState, MlpAdam};
pub use mlp::{
    l2_penalty, Activation, BatchCache, DenseLayer, LayerGrads, LayerRecord, Mlp, MlpGrads,
    MlpRecord, DEFAULT_HIDDEN, MLP_FORMAT, MLP_FORMAT_VERSION,
};
