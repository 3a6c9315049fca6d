//! 3D max pooling with argmax tracking for the backward pass.

use super::{Scalar, Tensor, TensorError};

fn pool_extent(
    n: usize,
    window: usize,
    stride: usize,
    axis: usize,
) -> Result<usize, TensorError> {
    if window == 0 || stride == 0 {
        return Err(TensorError::InvalidShape {
            shape: vec![],
            reason: format!("pool window/stride on axis {axis} must be positive"),
        });
    }
    if n < window {
        return Err(TensorError::ExtentTooSmall {
            context: "maxpool3d",
            axis,
            extent: n,
            required: window,
        });
    }
    Ok((n - window) / stride + 1)
}

/// Max pools `input` [N, C, T, H, W] over `window` with `stride`.
///
/// Returns the pooled tensor and, per output element, the linear index into
/// `input.data()` of the element that won. Ties resolve to the lowest linear
/// index because the window scan is row-major and only a strictly greater
/// value replaces the current winner.
pub fn maxpool3d<T: Scalar>(
    input: &Tensor<T>,
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let [n, c, t, h, w] = input.dims5("maxpool3d")?;
    let ot = pool_extent(t, window.0, stride.0, 2)?;
    let oh = pool_extent(h, window.1, stride.1, 3)?;
    let ow = pool_extent(w, window.2, stride.2, 4)?;

    let mut out = Tensor::zeros(&[n, c, ot, oh, ow])?;
    let mut argmax = vec![0usize; out.len()];
    let in_data = input.data();
    let out_data = out.data_mut();

    let mut o_idx = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * t;
            for pt in 0..ot {
                let t0 = pt * stride.0;
                for ph in 0..oh {
                    let h0 = ph * stride.1;
                    for pw in 0..ow {
                        let w0 = pw * stride.2;
                        let mut best_idx = ((plane + t0) * h + h0) * w + w0;
                        let mut best = in_data[best_idx];
                        for dt in 0..window.0 {
                            for dh in 0..window.1 {
                                let row = ((plane + t0 + dt) * h + h0 + dh) * w + w0;
                                for dw in 0..window.2 {
                                    let idx = row + dw;
                                    let v = in_data[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out_data[o_idx] = best;
                        argmax[o_idx] = best_idx;
                        o_idx += 1;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient back to the input element that won the max.
///
/// Overlapping windows may route several gradients to one input element;
/// they accumulate in ascending output index order.
pub fn maxpool3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>, TensorError> {
    if grad_out.len() != argmax.len() {
        return Err(TensorError::DataLength {
            context: "maxpool3d_backward argmax",
            expected: grad_out.len(),
            actual: argmax.len(),
        });
    }
    let mut grad_input = Tensor::zeros(input_shape)?;
    let gi = grad_input.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax.iter()) {
        if idx >= gi.len() {
            return Err(TensorError::InvalidShape {
                shape: input_shape.to_vec(),
                reason: format!("argmax index {idx} outside input volume {}", gi.len()),
            });
        }
        gi[idx] = gi[idx] + *g;
    }
    Ok(grad_input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_known_values() {
        // One channel, 2x2x4 input, window (1,2,2) stride (1,2,2).
        let data: Vec<f32> = vec![
            1.0, 2.0, 5.0, 0.0, //
            3.0, 4.0, 1.0, 2.0, //
            -1.0, -2.0, 0.5, 0.25, //
            -3.0, -4.0, 0.75, 0.125,
        ];
        let input = Tensor::new(&[1, 1, 2, 2, 4], data).unwrap();
        let (out, argmax) = maxpool3d(&input, (1, 2, 2), (1, 2, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 1, 2]);
        assert_eq!(out.data(), &[4.0, 5.0, -1.0, 0.75]);
        assert_eq!(argmax, vec![5, 2, 8, 14]);
    }

    #[test]
    fn ties_pick_lowest_linear_index() {
        let input = Tensor::new(&[1, 1, 1, 2, 2], vec![7.0f32, 7.0, 7.0, 7.0]).unwrap();
        let (out, argmax) = maxpool3d(&input, (1, 2, 2), (1, 1, 1)).unwrap();
        assert_eq!(out.data(), &[7.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn backward_routes_to_winner() {
        let input = Tensor::new(
            &[1, 1, 1, 2, 4],
            vec![1.0f32, 9.0, 2.0, 3.0, 4.0, 5.0, 8.0, 7.0],
        )
        .unwrap();
        let (out, argmax) = maxpool3d(&input, (1, 2, 2), (1, 1, 2)).unwrap();
        assert_eq!(out.data(), &[9.0, 8.0]);
        let grad_out = Tensor::new(&[1, 1, 1, 1, 2], vec![0.5f32, 0.25]).unwrap();
        let gi = maxpool3d_backward(&grad_out, &argmax, input.shape()).unwrap();
        assert_eq!(gi.data(), &[0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.25, 0.0]);
    }

    #[test]
    fn overlapping_windows_accumulate() {
        // Window 2 stride 1 over 3 elements with the max in the middle:
        // both windows route their gradient to index 1.
        let input = Tensor::new(&[1, 1, 1, 1, 3], vec![0.0f32, 5.0, 1.0]).unwrap();
        let (_, argmax) = maxpool3d(&input, (1, 1, 2), (1, 1, 1)).unwrap();
        assert_eq!(argmax, vec![1, 1]);
        let grad_out = Tensor::new(&[1, 1, 1, 1, 2], vec![1.0f32, 2.0]).unwrap();
        let gi = maxpool3d_backward(&grad_out, &argmax, input.shape()).unwrap();
        assert_eq!(gi.data(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn window_larger_than_extent_names_axis() {
        let input = Tensor::<f32>::zeros(&[1, 1, 2, 4, 4]).unwrap();
        match maxpool3d(&input, (3, 1, 1), (1, 1, 1)).unwrap_err() {
            TensorError::ExtentTooSmall { axis, extent, required, .. } => {
                assert_eq!((axis, extent, required), (2, 2, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn leftover_columns_are_dropped() {
        // Extent 5, window 2, stride 2 -> 2 outputs covering columns 0..4.
        let input =
            Tensor::new(&[1, 1, 1, 1, 5], vec![1.0f32, 2.0, 3.0, 4.0, 100.0]).unwrap();
        let (out, _) = maxpool3d(&input, (1, 1, 2), (1, 1, 2)).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }
}
