//! Dense linear algebra and deterministic randomness.

pub mod binio;
mod linalg;
mod matrix;
mod rng;

pub use linalg::{cholesky, cholesky_inverse, damped};
pub(crate) use matrix::softmax_in_place;
pub use matrix::{softmax_rows, Matrix};
pub use rng::Rng;

/// Matrix with i.i.d. standard-normal entries scaled by `std`.
pub fn random_normal(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.normal() * std;
    }
    m
}

/// Random symmetric positive-definite matrix `A Aᵀ / k + ridge·I`.
pub fn random_spd(rng: &mut Rng, n: usize, ridge: f64) -> Matrix {
    let a = random_normal(rng, n, n + 4, 1.0);
    let mut h = a
        .matmul_t(&a)
        .expect("square by construction")
        .scale(1.0 / (n + 4) as f64);
    for i in 0..n {
        h[(i, i)] += ridge;
    }
    h
}
