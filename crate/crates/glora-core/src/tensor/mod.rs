//! Minimal dense-matrix arithmetic with reverse-mode automatic differentiation,
//! restricted to the operations the adapter layer and toy models need.

mod matrix;
mod tape;

pub use matrix::{mse, softmax_cross_entropy, BroadcastShape, DenseMatrix, ElemType, Scalar};
pub use tape::{GradientMap, Tape, ValueId};

/// Central-difference gradient estimate `(f(x + h e) - f(x - h e)) / 2h` per
/// element. This is the independent oracle the analytic gradients are checked
/// against; it never touches the tape.
pub fn finite_difference_grad<T: Scalar>(
    f: impl Fn(&DenseMatrix<T>) -> T,
    at: &DenseMatrix<T>,
    step: f64,
) -> DenseMatrix<T> {
    assert!(step > 0.0, "finite_difference_grad needs a positive step");
    let h = T::of_f64(step);
    let two_h = T::of_f64(2.0 * step);
    let mut grad = DenseMatrix::zeros(at.rows(), at.cols());
    for i in 0..at.rows() {
        for j in 0..at.cols() {
            let mut plus = at.clone();
            plus.set(i, j, at.get(i, j) + h);
            let mut minus = at.clone();
            minus.set(i, j, at.get(i, j) - h);
            grad.set(i, j, (f(&plus) - f(&minus)) / two_h);
        }
    }
    grad
}
