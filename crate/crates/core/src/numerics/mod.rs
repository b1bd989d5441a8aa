//! Dense helpers, a seeded RNG, and the reverse-mode [`Tape`].

mod gradcheck;
mod rng;
mod tape;

pub use gradcheck::{grad_check, Parameterized};
pub use rng::SeededRng;
pub use tape::{Gradients, Tape, Var};

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

pub type DenseMatrix = Array2<f64>;

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.ncols() != b.nrows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a.dot(b))
}

pub fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            op: "hadamard",
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a * b)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(x: f64) -> f64 {
    x.tanh()
}

pub(crate) fn all_finite(m: &DenseMatrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub(crate) fn zip_map(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))
}
