//! Small dense-matrix helpers shared by the engines and estimators.

use nalgebra::DMatrix;

/// `y += a * x` without allocating a temporary; the estimator hot loops run
/// this millions of times.
#[inline]
pub(crate) fn mat_axpy(y: &mut DMatrix<f64>, a: f64, x: &DMatrix<f64>) {
    debug_assert_eq!(y.shape(), x.shape());
    for (yi, xi) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *yi += a * xi;
    }
}
