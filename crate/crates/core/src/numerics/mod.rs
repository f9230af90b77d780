//! Dense `f64` matrix arithmetic with per-operation backward rules, a
//! recording tape, and finite-difference gradient checks.

pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod ops;

pub use gradcheck::{gradient_check, gradient_check_params, GradCheckReport, FD_STEP};
pub use graph::{BackwardRule, Gradients, Graph, Var};
pub use matrix::{MaskBits, Matrix, ParamId, ParamStore, Parameter, Vector};
pub use ops::{
    activation, layer_norm, masked_max_pool, masked_softmax, matmul, Activation, LAYER_NORM_EPS,
};

use rand::Rng;

/// Matrix with entries drawn uniformly from `[-scale, scale)`.
pub fn random_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}
