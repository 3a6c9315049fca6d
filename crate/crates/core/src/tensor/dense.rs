//! Pointwise and fully connected layers plus the softmax cross entropy loss.

use super::{dot, Scalar, Tensor, TensorError};

/// Elementwise max(x, 0).
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Passes gradient where the forward input was non-negative, zero elsewhere.
pub fn relu_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    forward_input: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    grad_out.same_shape(forward_input, "relu_backward")?;
    let mut grad_input = grad_out.clone();
    for (g, x) in grad_input.data_mut().iter_mut().zip(forward_input.data()) {
        if *x < T::zero() {
            *g = T::zero();
        }
    }
    Ok(grad_input)
}

/// y = x Wᵀ + b for x [B, F], W [O, F], b [O]; output [B, O].
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let [b, f] = input.dims2("linear_forward input")?;
    let [o, wf] = weights.dims2("linear_forward weights")?;
    if wf != f {
        return Err(TensorError::AxisMismatch {
            context: "linear_forward weights",
            axis: 1,
            expected: f,
            actual: wf,
        });
    }
    let bn = bias.dims1("linear_forward bias")?;
    if bn != o {
        return Err(TensorError::AxisMismatch {
            context: "linear_forward bias",
            axis: 0,
            expected: o,
            actual: bn,
        });
    }
    let mut out = Tensor::zeros(&[b, o])?;
    let x = input.data();
    let w = weights.data();
    let out_data = out.data_mut();
    for bi in 0..b {
        let row = &x[bi * f..(bi + 1) * f];
        for oi in 0..o {
            let w_row = &w[oi * f..(oi + 1) * f];
            out_data[bi * o + oi] = dot(row, w_row) + bias.data()[oi];
        }
    }
    Ok(out)
}

/// Gradients of the linear layer: (grad_input, grad_weights, grad_bias).
pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let [b, f] = input.dims2("linear_backward input")?;
    let [o, _] = weights.dims2("linear_backward weights")?;
    let [gb, go] = grad_out.dims2("linear_backward grad_out")?;
    if gb != b {
        return Err(TensorError::AxisMismatch {
            context: "linear_backward grad_out",
            axis: 0,
            expected: b,
            actual: gb,
        });
    }
    if go != o {
        return Err(TensorError::AxisMismatch {
            context: "linear_backward grad_out",
            axis: 1,
            expected: o,
            actual: go,
        });
    }

    let mut grad_input = Tensor::zeros(&[b, f])?;
    let mut grad_weights = Tensor::zeros(&[o, f])?;
    let mut grad_bias = Tensor::zeros(&[o])?;

    let g = grad_out.data();
    let x = input.data();
    let w = weights.data();

    // grad_input[b] = sum_o g[b,o] * W[o]; output channels ascending.
    let gi = grad_input.data_mut();
    for bi in 0..b {
        let dst = &mut gi[bi * f..(bi + 1) * f];
        for oi in 0..o {
            let scale = g[bi * o + oi];
            let w_row = &w[oi * f..(oi + 1) * f];
            super::axpy(dst, scale, w_row);
        }
    }

    // grad_weights[o] = sum_b g[b,o] * x[b]; samples ascending.
    let gw = grad_weights.data_mut();
    for bi in 0..b {
        let row = &x[bi * f..(bi + 1) * f];
        for oi in 0..o {
            let scale = g[bi * o + oi];
            let dst = &mut gw[oi * f..(oi + 1) * f];
            super::axpy(dst, scale, row);
        }
    }

    // grad_bias[o] = sum_b g[b,o]; samples ascending.
    let gbias = grad_bias.data_mut();
    for bi in 0..b {
        for oi in 0..o {
            gbias[oi] = gbias[oi] + g[bi * o + oi];
        }
    }

    Ok((grad_input, grad_weights, grad_bias))
}

/// Row-wise softmax with the usual max subtraction for stability.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let [b, k] = logits.dims2("softmax_rows")?;
    let mut out = logits.clone();
    let data = out.data_mut();
    for bi in 0..b {
        let row = &mut data[bi * k..(bi + 1) * k];
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

/// Mean softmax cross entropy over the batch.
///
/// Returns the scalar loss and the gradient with respect to the logits,
/// already divided by the batch size.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>), TensorError> {
    let [b, k] = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != b {
        return Err(TensorError::DataLength {
            context: "softmax_cross_entropy labels",
            expected: b,
            actual: labels.len(),
        });
    }
    for &label in labels {
        if label >= k {
            return Err(TensorError::LabelOutOfRange {
                context: "softmax_cross_entropy",
                label,
                classes: k,
            });
        }
    }
    let mut grad = softmax_rows(logits)?;
    let inv_b = T::one() / T::from_f64(b as f64);
    let mut loss = T::zero();
    let g = grad.data_mut();
    for (bi, &label) in labels.iter().enumerate() {
        let p = g[bi * k + label];
        // Probabilities are strictly positive after max-subtracted softmax,
        // but ln of a denormal could still produce -inf; clamp defensively.
        let p_safe = if p > T::min_positive_value() {
            p
        } else {
            T::min_positive_value()
        };
        loss = loss - p_safe.ln();
        g[bi * k + label] = g[bi * k + label] - T::one();
    }
    for v in g.iter_mut() {
        *v = *v * inv_b;
    }
    Ok((loss * inv_b, grad))
}
