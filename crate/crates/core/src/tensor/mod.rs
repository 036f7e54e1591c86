//! Dense network substrate: row-major batches, fixed-topology MLPs with
//! hand-written reverse mode, Adam, and the two policy distribution families.

mod adam;
mod dist;
mod matrix;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use dist::{
    gaussian_kl, gumbel_softmax, gumbel_softmax_backward, kl_categorical, log_softmax_with_temperature,
    sample_gumbel, softmax_with_temperature, Categorical, SquashedGaussian, SquashedSample,
    LOG_STD_MAX, LOG_STD_MIN,
};
pub use matrix::Matrix;
pub use mlp::{Grad, Mlp, Trace};

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}
