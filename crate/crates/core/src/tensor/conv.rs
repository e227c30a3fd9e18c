//! Direct 3D convolution kernels.
//!
//! Output elements are independent, so forward and both backward passes
//! parallelize over disjoint output planes; every element is accumulated in a
//! fixed scan order, keeping results bit-identical across runs regardless of
//! thread count.

use rayon::prelude::*;

use super::{arg_err, shape_err, TensorError};
use crate::element::Element;

/// Validated geometry of one convolution, shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.out_dims[0], self.out_dims[1], self.out_dims[2]]
    }

    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
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
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
    stride: [usize; 3],
    padding: [usize; 3],
    groups: usize,
) -> Result<ConvGeom, TensorError> {
    if input.len() != 5 {
        return Err(shape_err("conv3d", format!("input must be [N, C, D, H, W], got {input:?}")));
    }
    if weight.len() != 5 {
        return Err(shape_err(
            "conv3d",
            format!("weight must be [C_out, C_in/groups, kD, kH, kW], got {weight:?}"),
        ));
    }
    let (batch, cin) = (input[0], input[1]);
    let in_dims = [input[2], input[3], input[4]];
    let cout = weight[0];
    let kernel = [weight[2], weight[3], weight[4]];
    if groups == 0 {
        return Err(arg_err("conv3d", "groups must be positive".into()));
    }
    if cin % groups != 0 {
        return Err(arg_err(
            "conv3d",
            format!("input channels {cin} not divisible by groups {groups}"),
        ));
    }
    if cout % groups != 0 {
        return Err(arg_err(
            "conv3d",
            format!("output channels {cout} not divisible by groups {groups}"),
        ));
    }
    if weight[1] != cin / groups {
        return Err(shape_err(
            "conv3d",
            format!(
                "weight has {} channels per group, input supplies {} ({} channels / {} groups)",
                weight[1],
                cin / groups,
                cin,
                groups
            ),
        ));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(arg_err("conv3d", format!("stride {stride:?} must be positive")));
    }
    let mut out_dims = [0; 3];
    for axis in 0..3 {
        let padded = in_dims[axis] + 2 * padding[axis];
        if kernel[axis] > padded {
            return Err(arg_err(
                "conv3d",
                format!(
                    "kernel {} exceeds padded input extent {} on {} axis",
                    kernel[axis], padded, AXES[axis]
                ),
            ));
        }
        out_dims[axis] = (padded - kernel[axis]) / stride[axis] + 1;
    }
    if let Some(b) = bias {
        if b != [cout] {
            return Err(shape_err(
                "conv3d",
                format!("bias shape {b:?} must be [{cout}] to match output channels"),
            ));
        }
    }
    Ok(ConvGeom { batch, cin, cout, groups, in_dims, out_dims, kernel, stride, padding })
}

/// Kernel offsets hitting valid (unpadded) input for output position `o`:
/// offsets `k` with `o*s + k - p` in `[0, limit)`.
fn kernel_range(o: usize, s: usize, p: usize, k: usize, limit: usize) -> (usize, usize) {
    let origin = (o * s) as i64 - p as i64;
    let lo = (-origin).max(0) as usize;
    let hi = (limit as i64 - origin).clamp(0, k as i64) as usize;
    (lo.min(hi), hi)
}

/// Output positions whose window covers input coordinate derived from kernel
/// offset `k_off`: positions `o` with `o*s + k_off - p` in `[0, in_limit)`.
fn out_range(k_off: usize, p: usize, s: usize, in_limit: usize, out_limit: usize) -> (usize, usize) {
    let shift = k_off as i64 - p as i64;
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(s) };
    let hi = ((in_limit as i64 - 1 - shift).div_euclid(s as i64) + 1).clamp(0, out_limit as i64);
    let hi = hi as usize;
    (lo.min(hi), hi)
}

pub fn forward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let [d, h, w] = g.in_dims;
    let [odz, ohy, owx] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let (in_plane, out_plane, kvol) = (g.in_plane(), g.out_plane(), g.kvol());

    out.par_chunks_mut(out_plane).enumerate().for_each(|(p, plane)| {
        let n = p / g.cout;
        let co = p % g.cout;
        let grp = co / cout_g;
        let w_base = co * cin_g * kvol;
        let bias_v = bias.map_or(T::zero(), |b| b[co]);
        for oz in 0..odz {
            let (kd0, kd1) = kernel_range(oz, sd, pd, kd, d);
            for oy in 0..ohy {
                let (kh0, kh1) = kernel_range(oy, sh, ph, kh, h);
                for ox in 0..owx {
                    let (kw0, kw1) = kernel_range(ox, sw, pw, kw, w);
                    let mut acc = bias_v;
                    for ci in 0..cin_g {
                        let in_base = (n * g.cin + grp * cin_g + ci) * in_plane;
                        let wc_base = w_base + ci * kvol;
                        for kz in kd0..kd1 {
                            let iz = oz * sd + kz - pd;
                            for ky in kh0..kh1 {
                                let iy = oy * sh + ky - ph;
                                let row = in_base + (iz * h + iy) * w;
                                let wrow = wc_base + (kz * kh + ky) * kw;
                                let ix0 = ox * sw + kw0 - pw;
                                for (step, kx) in (kw0..kw1).enumerate() {
                                    acc = acc + input[row + ix0 + step] * weight[wrow + kx];
                                }
                            }
                        }
                    }
                    plane[(oz * ohy + oy) * owx + ox] = acc;
                }
            }
        }
    });
}

pub fn backward_input<T: Element>(g: &ConvGeom, weight: &[T], og: &[T], in_grad: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [odz, ohy, owx] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let (in_plane, out_plane, kvol) = (g.in_plane(), g.out_plane(), g.kvol());

    in_grad.par_chunks_mut(in_plane).enumerate().for_each(|(p, plane)| {
        let n = p / g.cin;
        let ci = p % g.cin;
        let grp = ci / cin_g;
        let ci_g = ci % cin_g;
        for iz in 0..d {
            for iy in 0..h {
                for ix in 0..w {
                    let mut acc = T::zero();
                    for kz in 0..kd {
                        let tz = iz as i64 + pd as i64 - kz as i64;
                        if tz < 0 {
                            break;
                        }
                        if tz % sd as i64 != 0 {
                            continue;
                        }
                        let oz = (tz / sd as i64) as usize;
                        if oz >= odz {
                            continue;
                        }
                        for ky in 0..kh {
                            let ty = iy as i64 + ph as i64 - ky as i64;
                            if ty < 0 {
                                break;
                            }
                            if ty % sh as i64 != 0 {
                                continue;
                            }
                            let oy = (ty / sh as i64) as usize;
                            if oy >= ohy {
                                continue;
                            }
                            for kx in 0..kw {
                                let tx = ix as i64 + pw as i64 - kx as i64;
                                if tx < 0 {
                                    break;
                                }
                                if tx % sw as i64 != 0 {
                                    continue;
                                }
                                let ox = (tx / sw as i64) as usize;
                                if ox >= owx {
                                    continue;
                                }
                                let o_off = (oz * ohy + oy) * owx + ox;
                                let k_off = (kz * kh + ky) * kw + kx;
                                for co_g in 0..cout_g {
                                    let co = grp * cout_g + co_g;
                                    let gv = og[(n * g.cout + co) * out_plane + o_off];
                                    let wv = weight[(co * cin_g + ci_g) * kvol + k_off];
                                    acc = acc + gv * wv;
                                }
                            }
                        }
                    }
                    plane[(iz * h + iy) * w + ix] = plane[(iz * h + iy) * w + ix] + acc;
                }
            }
        }
    });
}

pub fn backward_weight<T: Element>(g: &ConvGeom, input: &[T], og: &[T], w_grad: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [odz, ohy, owx] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let (cin_g, cout_g) = (g.cin_per_group(), g.cout_per_group());
    let (in_plane, out_plane, kvol) = (g.in_plane(), g.out_plane(), g.kvol());

    w_grad.par_chunks_mut(cin_g * kvol).enumerate().for_each(|(co, wrow)| {
        let grp = co / cout_g;
        for ci in 0..cin_g {
            for kz in 0..kd {
                let (oz0, oz1) = out_range(kz, pd, sd, d, odz);
                for ky in 0..kh {
                    let (oy0, oy1) = out_range(ky, ph, sh, h, ohy);
                    for kx in 0..kw {
                        let (ox0, ox1) = out_range(kx, pw, sw, w, owx);
                        let mut acc = T::zero();
                        for n in 0..g.batch {
                            let in_base = (n * g.cin + grp * cin_g + ci) * in_plane;
                            let og_base = (n * g.cout + co) * out_plane;
                            for oz in oz0..oz1 {
                                let iz = oz * sd + kz - pd;
                                for oy in oy0..oy1 {
                                    let iy = oy * sh + ky - ph;
                                    let in_row = in_base + (iz * h + iy) * w;
                                    let og_row = og_base + (oz * ohy + oy) * owx;
                                    for ox in ox0..ox1 {
                                        let ix = ox * sw + kx - pw;
                                        acc = acc + og[og_row + ox] * input[in_row + ix];
                                    }
                                }
                            }
                        }
                        let idx = (ci * kd + kz) * kh * kw + ky * kw + kx;
                        wrow[idx] = wrow[idx] + acc;
                    }
                }
            }
        }
    });
}

pub fn backward_bias<T: Element>(g: &ConvGeom, og: &[T], b_grad: &mut [T]) {
    let out_plane = g.out_plane();
    for n in 0..g.batch {
        for co in 0..g.cout {
            let base = (n * g.cout + co) * out_plane;
            let mut acc = T::zero();
            for v in &og[base..base + out_plane] {
                acc = acc + *v;
            }
            b_grad[co] = b_grad[co] + acc;
        }
    }
}
