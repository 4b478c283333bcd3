//! Layers, models and optimizers built on the tape.

pub mod film;
pub mod gru;
pub mod layers;
pub mod optim;
pub mod proto;

pub use film::{FilmBlock, FilmConfig, FilmNetwork, NormInfo, NormVariant, Stage};
pub use gru::{gru_encode, GruEncoder};
pub use layers::{argmax_rows, coord_maps, he_normal, Conv2d, Linear};
pub use optim::{Optimizer, OptimizerKind};
pub use proto::{EmbeddingNet, ProtoConfig, ProtoHead, Support};

use crate::error::Result;
use crate::tensor::Tensor;

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Mean softmax cross-entropy of `[N, K]` logits, computed on values.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let tape = crate::tensor::Tape::new();
    let l = tape.constant(logits.clone()).softmax_xent(labels)?;
    Ok(l.value().data()[0])
}
