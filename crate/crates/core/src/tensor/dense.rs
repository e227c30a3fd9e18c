//! Grouped fully connected layer kernels.
//!
//! With `groups > 1` the input and output feature axes are partitioned into
//! contiguous blocks; output block `g` sees only input block `g`, mirroring
//! grouped 1x1 convolution.

use super::{arg_err, shape_err, Tensor, TensorError};
use crate::element::Element;

pub fn validate(
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
    groups: usize,
) -> Result<(), TensorError> {
    if input.len() != 2 {
        return Err(shape_err("dense", format!("input must be [N, F_in], got {input:?}")));
    }
    if weight.len() != 2 {
        return Err(shape_err(
            "dense",
            format!("weight must be [F_out, F_in/groups], got {weight:?}"),
        ));
    }
    if groups == 0 {
        return Err(arg_err("dense", "groups must be positive".into()));
    }
    let (fin, fout) = (input[1], weight[0]);
    if fin % groups != 0 {
        return Err(arg_err(
            "dense",
            format!("input features {fin} not divisible by groups {groups}"),
        ));
    }
    if fout % groups != 0 {
        return Err(arg_err(
            "dense",
            format!("output features {fout} not divisible by groups {groups}"),
        ));
    }
    if weight[1] != fin / groups {
        return Err(shape_err(
            "dense",
            format!(
                "weight has {} features per group, input supplies {} ({} features / {} groups)",
                weight[1],
                fin / groups,
                fin,
                groups
            ),
        ));
    }
    if let Some(b) = bias {
        if b != [fout] {
            return Err(shape_err(
                "dense",
                format!("bias shape {b:?} must be [{fout}] to match output features"),
            ));
        }
    }
    Ok(())
}

pub fn forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    groups: usize,
) -> Tensor<T> {
    let (batch, fin) = (input.shape()[0], input.shape()[1]);
    let fout = weight.shape()[0];
    let (fin_g, fout_g) = (fin / groups, fout / groups);
    let mut out = Tensor::zeros(&[batch, fout]);
    let (x, w, o) = (input.data(), weight.data(), out.data_mut());
    for n in 0..batch {
        for fo in 0..fout {
            let grp = fo / fout_g;
            let x_base = n * fin + grp * fin_g;
            let w_base = fo * fin_g;
            let mut acc = bias.map_or(T::zero(), |b| b[fo]);
            for fi in 0..fin_g {
                acc = acc + x[x_base + fi] * w[w_base + fi];
            }
            o[n * fout + fo] = acc;
        }
    }
    out
}

pub fn backward_input<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    groups: usize,
    og: &[T],
) -> Vec<T> {
    let (batch, fin) = (input.shape()[0], input.shape()[1]);
    let fout = weight.shape()[0];
    let (fin_g, fout_g) = (fin / groups, fout / groups);
    let w = weight.data();
    let mut dx = vec![T::zero(); batch * fin];
    for n in 0..batch {
        for fo in 0..fout {
            let grp = fo / fout_g;
            let gv = og[n * fout + fo];
            let x_base = n * fin + grp * fin_g;
            let w_base = fo * fin_g;
            for fi in 0..fin_g {
                dx[x_base + fi] = dx[x_base + fi] + gv * w[w_base + fi];
            }
        }
    }
    dx
}

pub fn backward_weight<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    groups: usize,
    og: &[T],
) -> Vec<T> {
    let (batch, fin) = (input.shape()[0], input.shape()[1]);
    let fout = weight.shape()[0];
    let (fin_g, fout_g) = (fin / groups, fout / groups);
    let x = input.data();
    let mut dw = vec![T::zero(); fout * fin_g];
    for n in 0..batch {
        for fo in 0..fout {
            let grp = fo / fout_g;
            let gv = og[n * fout + fo];
            let x_base = n * fin + grp * fin_g;
            let w_base = fo * fin_g;
            for fi in 0..fin_g {
                dw[w_base + fi] = dw[w_base + fi] + gv * x[x_base + fi];
            }
        }
    }
    dw
}
