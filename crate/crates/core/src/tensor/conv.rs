//! 3D convolution forward and backward passes.
//!
//! Tensors follow the [N, C, T, H, W] layout, weights [O, C, KT, KH, KW].
//! Zero padding is implicit: instead of materializing a padded input, each
//! kernel tap is applied only to the output positions whose receptive field
//! stays inside the input. Per output element the accumulation order is
//! fixed (bias, then input channel major, then kernel taps in row-major
//! order), which keeps results bitwise reproducible.

use serde::{Deserialize, Serialize};

use super::{axpy, dot, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl Conv3dSpec {
    /// 3x3x3 kernel, unit stride, no padding.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (3, 3, 3),
            stride: (1, 1, 1),
            padding: (0, 0, 0),
        }
    }

    pub fn with_kernel(mut self, kernel: (usize, usize, usize)) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_stride(mut self, stride: (usize, usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
            self.kernel.2,
        ]
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let fields = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("kernel.0", self.kernel.0),
            ("kernel.1", self.kernel.1),
            ("kernel.2", self.kernel.2),
            ("stride.0", self.stride.0),
            ("stride.1", self.stride.1),
            ("stride.2", self.stride.2),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(TensorError::InvalidShape {
                    shape: vec![],
                    reason: format!("Conv3dSpec.{name} must be positive"),
                });
            }
        }
        Ok(())
    }

    /// Output extents for an input of the given spatial extents, checking
    /// that every axis is large enough for the kernel.
    pub fn output_extents(
        &self,
        input: (usize, usize, usize),
    ) -> Result<(usize, usize, usize), TensorError> {
        let axes = [
            (2usize, input.0, self.kernel.0, self.stride.0, self.padding.0),
            (3, input.1, self.kernel.1, self.stride.1, self.padding.1),
            (4, input.2, self.kernel.2, self.stride.2, self.padding.2),
        ];
        let mut out = [0usize; 3];
        for (i, (axis, n, k, s, p)) in axes.into_iter().enumerate() {
            if n + 2 * p < k {
                return Err(TensorError::ExtentTooSmall {
                    context: "conv3d output",
                    axis,
                    extent: n,
                    required: k - 2 * p,
                });
            }
            out[i] = (n + 2 * p - k) / s + 1;
        }
        Ok((out[0], out[1], out[2]))
    }
}

impl Default for Conv3dSpec {
    fn default() -> Self {
        Self::new(1, 1)
    }
}

pub struct Conv3dGrads<T: Scalar = f32> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
}

/// Range of output indices whose receptive field covers input for a kernel
/// tap at offset `k`, plus the corresponding first input index.
#[derive(Clone, Copy)]
struct TapRange {
    out_lo: usize,
    out_hi: usize, // exclusive
    in_lo: usize,
}

fn tap_range(n_in: usize, n_out: usize, k: usize, s: usize, p: usize) -> Option<TapRange> {
    let (n_in, k, s, p) = (n_in as isize, k as isize, s as isize, p as isize);
    // valid o: 0 <= o*s + k - p <= n_in - 1
    let lo = (p - k + s - 1).div_euclid(s).max(0);
    let hi = (n_in - 1 + p - k).div_euclid(s).min(n_out as isize - 1);
    if lo > hi {
        return None;
    }
    Some(TapRange {
        out_lo: lo as usize,
        out_hi: hi as usize + 1,
        in_lo: (lo * s + k - p) as usize,
    })
}

struct ConvShapes {
    n: usize,
    in_c: usize,
    in_t: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_t: usize,
    out_h: usize,
    out_w: usize,
}

fn check_shapes<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &Conv3dSpec,
    context: &'static str,
) -> Result<ConvShapes, TensorError> {
    spec.validate()?;
    let [n, c, t, h, w] = input.dims5(context)?;
    if c != spec.in_channels {
        return Err(TensorError::AxisMismatch {
            context,
            axis: 1,
            expected: spec.in_channels,
            actual: c,
        });
    }
    let wdims = weights.dims5(context)?;
    let expect = spec.weight_shape();
    for axis in 0..5 {
        if wdims[axis] != expect[axis] {
            return Err(TensorError::AxisMismatch {
                context,
                axis,
                expected: expect[axis],
                actual: wdims[axis],
            });
        }
    }
    let b = bias.dims1(context)?;
    if b != spec.out_channels {
        return Err(TensorError::AxisMismatch {
            context,
            axis: 0,
            expected: spec.out_channels,
            actual: b,
        });
    }
    let (out_t, out_h, out_w) = spec.output_extents((t, h, w))?;
    Ok(ConvShapes {
        n,
        in_c: c,
        in_t: t,
        in_h: h,
        in_w: w,
        out_c: spec.out_channels,
        out_t,
        out_h,
        out_w,
    })
}

/// Convolves `input` [N, C, T, H, W] with `weights` [O, C, KT, KH, KW] and
/// adds `bias` [O], producing [N, O, OT, OH, OW].
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &Conv3dSpec,
) -> Result<Tensor<T>, TensorError> {
    let s = check_shapes(input, weights, bias, spec, "conv3d_forward")?;
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;

    let in_vol = s.in_t * s.in_h * s.in_w;
    let out_vol = s.out_t * s.out_h * s.out_w;
    let mut out = Tensor::zeros(&[s.n, s.out_c, s.out_t, s.out_h, s.out_w])?;

    let t_ranges: Vec<Option<TapRange>> =
        (0..kt).map(|k| tap_range(s.in_t, s.out_t, k, st, pt)).collect();
    let h_ranges: Vec<Option<TapRange>> =
        (0..kh).map(|k| tap_range(s.in_h, s.out_h, k, sh, ph)).collect();
    let w_ranges: Vec<Option<TapRange>> =
        (0..kw).map(|k| tap_range(s.in_w, s.out_w, k, sw, pw)).collect();

    let wk_vol = kt * kh * kw;
    let in_data = input.data();
    let w_data = weights.data();
    let b_data = bias.data();
    let out_data = out.data_mut();

    for n in 0..s.n {
        for oc in 0..s.out_c {
            let out_base = (n * s.out_c + oc) * out_vol;
            let out_vol_slice = &mut out_data[out_base..out_base + out_vol];
            out_vol_slice.fill(b_data[oc]);
            for ic in 0..s.in_c {
                let in_base = (n * s.in_c + ic) * in_vol;
                let in_vol_slice = &in_data[in_base..in_base + in_vol];
                let w_base = (oc * s.in_c + ic) * wk_vol;
                for dt in 0..kt {
                    let Some(rt) = t_ranges[dt] else { continue };
                    for dh in 0..kh {
                        let Some(rh) = h_ranges[dh] else { continue };
                        for dw in 0..kw {
                            let Some(rw) = w_ranges[dw] else { continue };
                            let wtap = w_data[w_base + (dt * kh + dh) * kw + dw];
                            let run = rw.out_hi - rw.out_lo;
                            let mut it = rt.in_lo;
                            for ot in rt.out_lo..rt.out_hi {
                                let mut ih = rh.in_lo;
                                for oh in rh.out_lo..rh.out_hi {
                                    let o_row = (ot * s.out_h + oh) * s.out_w;
                                    let i_row = (it * s.in_h + ih) * s.in_w;
                                    if sw == 1 {
                                        let dst =
                                            &mut out_vol_slice[o_row + rw.out_lo..o_row + rw.out_hi];
                                        let src =
                                            &in_vol_slice[i_row + rw.in_lo..i_row + rw.in_lo + run];
                                        axpy(dst, wtap, src);
                                    } else {
                                        for j in 0..run {
                                            let ow = rw.out_lo + j;
                                            let iw = rw.in_lo + j * sw;
                                            out_vol_slice[o_row + ow] = out_vol_slice[o_row + ow]
                                                + wtap * in_vol_slice[i_row + iw];
                                        }
                                    }
                                    ih += sh;
                                }
                                it += st;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of the convolution with respect to input, weights and bias.
///
/// `grad_out` must have the exact forward output shape. Accumulation orders
/// are fixed: bias sums samples then voxels in row-major order; weight taps
/// sum samples in ascending index, rows in row-major order with a fixed-tree
/// dot per row; input gradients sum output channels then kernel taps.
pub fn conv3d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &Conv3dSpec,
) -> Result<Conv3dGrads<T>, TensorError> {
    let bias_probe = Tensor::zeros(&[spec.out_channels])?;
    let s = check_shapes(input, weights, &bias_probe, spec, "conv3d_backward")?;
    let expected = [s.n, s.out_c, s.out_t, s.out_h, s.out_w];
    let gdims = grad_out.dims5("conv3d_backward grad_out")?;
    for axis in 0..5 {
        if gdims[axis] != expected[axis] {
            return Err(TensorError::AxisMismatch {
                context: "conv3d_backward grad_out",
                axis,
                expected: expected[axis],
                actual: gdims[axis],
            });
        }
    }

    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let in_vol = s.in_t * s.in_h * s.in_w;
    let out_vol = s.out_t * s.out_h * s.out_w;
    let wk_vol = kt * kh * kw;

    let t_ranges: Vec<Option<TapRange>> =
        (0..kt).map(|k| tap_range(s.in_t, s.out_t, k, st, pt)).collect();
    let h_ranges: Vec<Option<TapRange>> =
        (0..kh).map(|k| tap_range(s.in_h, s.out_h, k, sh, ph)).collect();
    let w_ranges: Vec<Option<TapRange>> =
        (0..kw).map(|k| tap_range(s.in_w, s.out_w, k, sw, pw)).collect();

    let mut grad_input = Tensor::zeros(input.shape())?;
    let mut grad_weights = Tensor::zeros(weights.shape())?;
    let mut grad_bias = Tensor::zeros(&[s.out_c])?;

    let g_data = grad_out.data();
    let in_data = input.data();
    let w_data = weights.data();

    // Bias: per output channel, samples ascending then voxels row-major.
    {
        let gb = grad_bias.data_mut();
        for n in 0..s.n {
            for oc in 0..s.out_c {
                let base = (n * s.out_c + oc) * out_vol;
                let mut acc = T::zero();
                for &g in &g_data[base..base + out_vol] {
                    acc = acc + g;
                }
                gb[oc] = gb[oc] + acc;
            }
        }
    }

    // Weights: per tap, a dot over the valid output window, summed over
    // samples in ascending order.
    {
        let gw = grad_weights.data_mut();
        for n in 0..s.n {
            for oc in 0..s.out_c {
                let g_base = (n * s.out_c + oc) * out_vol;
                let g_vol = &g_data[g_base..g_base + out_vol];
                for ic in 0..s.in_c {
                    let in_base = (n * s.in_c + ic) * in_vol;
                    let in_vol_slice = &in_data[in_base..in_base + in_vol];
                    let w_base = (oc * s.in_c + ic) * wk_vol;
                    for dt in 0..kt {
                        let Some(rt) = t_ranges[dt] else { continue };
                        for dh in 0..kh {
                            let Some(rh) = h_ranges[dh] else { continue };
                            for dw in 0..kw {
                                let Some(rw) = w_ranges[dw] else { continue };
                                let run = rw.out_hi - rw.out_lo;
                                let mut acc = T::zero();
                                let mut it = rt.in_lo;
                                for ot in rt.out_lo..rt.out_hi {
                                    let mut ih = rh.in_lo;
                                    for oh in rh.out_lo..rh.out_hi {
                                        let o_row = (ot * s.out_h + oh) * s.out_w;
                                        let i_row = (it * s.in_h + ih) * s.in_w;
                                        if sw == 1 {
                                            let g_row =
                                                &g_vol[o_row + rw.out_lo..o_row + rw.out_hi];
                                            let i_slice = &in_vol_slice
                                                [i_row + rw.in_lo..i_row + rw.in_lo + run];
                                            acc = acc + dot(g_row, i_slice);
                                        } else {
                                            for j in 0..run {
                                                acc = acc
                                                    + g_vol[o_row + rw.out_lo + j]
                                                        * in_vol_slice[i_row + rw.in_lo + j * sw];
                                            }
                                        }
                                        ih += sh;
                                    }
                                    it += st;
                                }
                                let idx = w_base + (dt * kh + dh) * kw + dw;
                                gw[idx] = gw[idx] + acc;
                            }
                        }
                    }
                }
            }
        }
    }

    // Input: transpose scatter, output channel major then kernel taps.
    {
        let gi = grad_input.data_mut();
        for n in 0..s.n {
            for oc in 0..s.out_c {
                let g_base = (n * s.out_c + oc) * out_vol;
                let g_vol = &g_data[g_base..g_base + out_vol];
                for ic in 0..s.in_c {
                    let gi_base = (n * s.in_c + ic) * in_vol;
                    let w_base = (oc * s.in_c + ic) * wk_vol;
                    for dt in 0..kt {
                        let Some(rt) = t_ranges[dt] else { continue };
                        for dh in 0..kh {
                            let Some(rh) = h_ranges[dh] else { continue };
                            for dw in 0..kw {
                                let Some(rw) = w_ranges[dw] else { continue };
                                let wtap = w_data[w_base + (dt * kh + dh) * kw + dw];
                                let run = rw.out_hi - rw.out_lo;
                                let mut it = rt.in_lo;
                                for ot in rt.out_lo..rt.out_hi {
                                    let mut ih = rh.in_lo;
                                    for oh in rh.out_lo..rh.out_hi {
                                        let o_row = (ot * s.out_h + oh) * s.out_w;
                                        let i_row =
                                            gi_base + (it * s.in_h + ih) * s.in_w;
                                        if sw == 1 {
                                            let dst = &mut gi
                                                [i_row + rw.in_lo..i_row + rw.in_lo + run];
                                            let src =
                                                &g_vol[o_row + rw.out_lo..o_row + rw.out_hi];
                                            axpy(dst, wtap, src);
                                        } else {
                                            for j in 0..run {
                                                let iw = i_row + rw.in_lo + j * sw;
                                                gi[iw] = gi[iw]
                                                    + wtap * g_vol[o_row + rw.out_lo + j];
                                            }
                                        }
                                        ih += sh;
                                    }
                                    it += st;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(Conv3dGrads {
        grad_input,
        grad_weights,
        grad_bias,
    })
}
