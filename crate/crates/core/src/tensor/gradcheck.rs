//! Central finite-difference gradient checking.
//!
//! Used by unit tests for each layer and by the end-to-end network check
//! behind the `gradcheck` CLI command. Runs in `f64`: second-order central
//! differences reach ~1e-7 relative error there, versus ~1e-2 in `f32`.

use super::{Tensor, TensorError};

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Checks `analytic` against central differences of `forward` at the given
/// coordinates of `params`, returning the worst relative error.
///
/// `forward` is called with the perturbed tensor and must return the scalar
/// loss. `params` is restored to its original values before returning.
pub fn finite_diff_gradcheck_at<F>(
    mut forward: F,
    params: &mut Tensor<f64>,
    analytic: &Tensor<f64>,
    coords: &[usize],
    epsilon: f64,
) -> Result<f64, TensorError>
where
    F: FnMut(&Tensor<f64>) -> Result<f64, TensorError>,
{
    params.same_shape(analytic, "finite_diff_gradcheck_at")?;
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(TensorError::NonFinite {
            context: "finite_diff_gradcheck_at epsilon",
        });
    }
    let mut worst = 0.0f64;
    for &idx in coords {
        if idx >= params.len() {
            return Err(TensorError::DataLength {
                context: "finite_diff_gradcheck_at coords",
                expected: params.len(),
                actual: idx,
            });
        }
        let original = params.data()[idx];
        params.data_mut()[idx] = original + epsilon;
        let loss_plus = forward(params)?;
        params.data_mut()[idx] = original - epsilon;
        let loss_minus = forward(params)?;
        params.data_mut()[idx] = original;
        if !loss_plus.is_finite() || !loss_minus.is_finite() {
            return Err(TensorError::NonFinite {
                context: "finite_diff_gradcheck_at loss",
            });
        }
        let numeric = (loss_plus - loss_minus) / (2.0 * epsilon);
        let err = relative_error(analytic.data()[idx], numeric);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// Checks every coordinate of `params`.
pub fn finite_diff_gradcheck<F>(
    forward: F,
    params: &mut Tensor<f64>,
    analytic: &Tensor<f64>,
    epsilon: f64,
) -> Result<f64, TensorError>
where
    F: FnMut(&Tensor<f64>) -> Result<f64, TensorError>,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_diff_gradcheck_at(forward, params, analytic, &coords, epsilon)
}

/// Evenly spread sample of `count` coordinates over a tensor of `len`
/// elements, always including the first and last.
pub fn sample_coords(len: usize, count: usize) -> Vec<usize> {
    if len == 0 || count == 0 {
        return Vec::new();
    }
    if count >= len {
        return (0..len).collect();
    }
    let mut coords: Vec<usize> = (0..count)
        .map(|i| i * (len - 1) / (count - 1).max(1))
        .collect();
    coords.dedup();
    coords
}
