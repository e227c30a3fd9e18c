//! Pooling kernels: global average, windowed average, windowed max.

use super::{arg_err, shape_err, Tensor, TensorError};
use crate::element::Element;

/// Validated geometry of one windowed pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub count_include_pad: bool,
}

impl PoolGeom {
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.out_dims[0], self.out_dims[1], self.out_dims[2]]
    }

    fn in_plane(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out_dims.iter().product()
    }
}

const AXES: [&str; 3] = ["depth", "height", "width"];

pub fn validate(
    op: &'static str,
    input: &[usize],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    ceil_mode: bool,
    count_include_pad: bool,
) -> Result<PoolGeom, TensorError> {
    if input.len() != 5 {
        return Err(shape_err(op, format!("input must be [N, C, D, H, W], got {input:?}")));
    }
    if kernel.iter().any(|&k| k == 0) || stride.iter().any(|&s| s == 0) {
        return Err(arg_err(op, format!("kernel {kernel:?} and stride {stride:?} must be positive")));
    }
    let in_dims = [input[2], input[3], input[4]];
    let mut out_dims = [0; 3];
    for axis in 0..3 {
        if 2 * padding[axis] > kernel[axis] {
            return Err(arg_err(
                op,
                format!(
                    "padding {} exceeds half the kernel {} on {} axis",
                    padding[axis], kernel[axis], AXES[axis]
                ),
            ));
        }
        let padded = in_dims[axis] + 2 * padding[axis];
        if kernel[axis] > padded {
            return Err(arg_err(
                op,
                format!(
                    "kernel {} exceeds input extent {} on {} axis",
                    kernel[axis], in_dims[axis], AXES[axis]
                ),
            ));
        }
        let span = padded - kernel[axis];
        let mut out = if ceil_mode {
            span.div_ceil(stride[axis]) + 1
        } else {
            span / stride[axis] + 1
        };
        // A ceil-mode window starting entirely inside the right padding
        // contributes nothing and is dropped.
        if ceil_mode && (out - 1) * stride[axis] >= in_dims[axis] + padding[axis] {
            out -= 1;
        }
        out_dims[axis] = out;
    }
    Ok(PoolGeom {
        batch: input[0],
        channels: input[1],
        in_dims,
        out_dims,
        kernel,
        stride,
        padding,
        count_include_pad,
    })
}

/// Clips the pooling window for output position `o` to valid input
/// coordinates on one axis.
fn window(o: usize, stride: usize, pad: usize, kernel: usize, limit: usize) -> (usize, usize) {
    let start = (o * stride) as i64 - pad as i64;
    let lo = start.max(0) as usize;
    let hi = ((start + kernel as i64).min(limit as i64)).max(0) as usize;
    (lo.min(hi), hi)
}

pub fn avg_forward<T: Element>(g: &PoolGeom, input: &[T], out: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [odz, ohy, owx] = g.out_dims;
    let kvol: usize = g.kernel.iter().product();
    let (in_plane, out_plane) = (g.in_plane(), g.out_plane());
    for plane_idx in 0..g.batch * g.channels {
        let in_base = plane_idx * in_plane;
        let out_base = plane_idx * out_plane;
        for oz in 0..odz {
            let (z0, z1) = window(oz, g.stride[0], g.padding[0], g.kernel[0], d);
            for oy in 0..ohy {
                let (y0, y1) = window(oy, g.stride[1], g.padding[1], g.kernel[1], h);
                for ox in 0..owx {
                    let (x0, x1) = window(ox, g.stride[2], g.padding[2], g.kernel[2], w);
                    let mut acc = T::zero();
                    for iz in z0..z1 {
                        for iy in y0..y1 {
                            let row = in_base + (iz * h + iy) * w;
                            for ix in x0..x1 {
                                acc = acc + input[row + ix];
                            }
                        }
                    }
                    let divisor = if g.count_include_pad {
                        kvol
                    } else {
                        (z1 - z0) * (y1 - y0) * (x1 - x0)
                    };
                    out[out_base + (oz * ohy + oy) * owx + ox] =
                        acc / T::from_f64(divisor as f64);
                }
            }
        }
    }
}

pub fn avg_backward<T: Element>(g: &PoolGeom, og: &[T], in_grad: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [odz, ohy, owx] = g.out_dims;
    let kvol: usize = g.kernel.iter().product();
    let (in_plane, out_plane) = (g.in_plane(), g.out_plane());
    for plane_idx in 0..g.batch * g.channels {
        let in_base = plane_idx * in_plane;
        let out_base = plane_idx * out_plane;
        for oz in 0..odz {
            let (z0, z1) = window(oz, g.stride[0], g.padding[0], g.kernel[0], d);
            for oy in 0..ohy {
                let (y0, y1) = window(oy, g.stride[1], g.padding[1], g.kernel[1], h);
                for ox in 0..owx {
                    let (x0, x1) = window(ox, g.stride[2], g.padding[2], g.kernel[2], w);
                    let divisor = if g.count_include_pad {
                        kvol
                    } else {
                        (z1 - z0) * (y1 - y0) * (x1 - x0)
                    };
                    let share = og[out_base + (oz * ohy + oy) * owx + ox]
                        / T::from_f64(divisor as f64);
                    for iz in z0..z1 {
                        for iy in y0..y1 {
                            let row = in_base + (iz * h + iy) * w;
                            for ix in x0..x1 {
                                in_grad[row + ix] = in_grad[row + ix] + share;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns per-output argmax indices (flat into the input) for backward.
/// Ties resolve to the first element in scan order.
pub fn max_forward<T: Element>(g: &PoolGeom, input: &[T], out: &mut [T]) -> Vec<usize> {
    let [_, h, w] = g.in_dims;
    let [odz, ohy, owx] = g.out_dims;
    let (in_plane, out_plane) = (g.in_plane(), g.out_plane());
    let mut argmax = vec![0usize; out.len()];
    for plane_idx in 0..g.batch * g.channels {
        let in_base = plane_idx * in_plane;
        let out_base = plane_idx * out_plane;
        for oz in 0..odz {
            let (z0, z1) = window(oz, g.stride[0], g.padding[0], g.kernel[0], g.in_dims[0]);
            for oy in 0..ohy {
                let (y0, y1) = window(oy, g.stride[1], g.padding[1], g.kernel[1], h);
                for ox in 0..owx {
                    let (x0, x1) = window(ox, g.stride[2], g.padding[2], g.kernel[2], w);
                    let mut best = input[in_base + (z0 * h + y0) * w + x0];
                    let mut best_idx = in_base + (z0 * h + y0) * w + x0;
                    for iz in z0..z1 {
                        for iy in y0..y1 {
                            let row = in_base + (iz * h + iy) * w;
                            for ix in x0..x1 {
                                if input[row + ix] > best {
                                    best = input[row + ix];
                                    best_idx = row + ix;
                                }
                            }
                        }
                    }
                    let o = out_base + (oz * ohy + oy) * owx + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    argmax
}

/// Mean over all spatial axes: `[N, C, ...] -> [N, C]`.
pub fn global_avg<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let shape = input.shape();
    let (batch, channels) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let mut out = Tensor::zeros(&[batch, channels]);
    for nc in 0..batch * channels {
        let base = nc * spatial;
        let mut acc = 0.0f64;
        for v in &input.data()[base..base + spatial] {
            acc += v.as_f64();
        }
        out.data_mut()[nc] = T::from_f64(acc / spatial as f64);
    }
    out
}

pub fn global_avg_backward<T: Element>(in_shape: &[usize], og: &[T], in_grad: &mut [T]) {
    let spatial: usize = in_shape[2..].iter().product();
    let inv = T::one() / T::from_f64(spatial as f64);
    for (nc, &gv) in og.iter().enumerate() {
        let share = gv * inv;
        let base = nc * spatial;
        for v in &mut in_grad[base..base + spatial] {
            *v = *v + share;
        }
    }
}
