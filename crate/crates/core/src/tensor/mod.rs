//! Dense `f64` matrices and a reverse-mode differentiation tape.

mod gradcheck;
mod graph;
mod matrix;
mod spectral;

pub use gradcheck::finite_diff_check;
pub use graph::{ExtractMethod, Graph, NodeId, Role, SeqLayout};
pub use matrix::Matrix;


use crate::error::{Error, Result};

/// Default epsilon inside the square root of [`layer_norm_pf`].
pub const LN_EPS: f64 = 1e-5;

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(x: &Matrix) -> Matrix {
    graph::row_softmax(x)
}

/// Parameter-free layer normalization of each row (population variance,
/// `eps` added under the square root).
pub fn layer_norm_pf(x: &Matrix, eps: f64) -> Matrix {
    graph::layer_norm_rows(x, eps).0
}

/// Mean over rows of `-ln softmax(row)[target]`.
pub fn cross_entropy_mean(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "cross entropy over {} rows with {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if let Some((offset, &id)) = targets.iter().enumerate().find(|(_, &t)| t >= logits.cols()) {
        return Err(Error::TokenOutOfRange {
            id: id as u64,
            offset,
            vocab_size: logits.cols(),
        });
    }
    Ok(graph::cross_entropy_mean(logits, targets))
}
