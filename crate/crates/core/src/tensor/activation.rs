//! Elementwise activations, softmax variants, and the fused cross-entropy.

use super::{arg_err, shape_err, Tensor, TensorError};
use crate::element::Element;

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

fn sigmoid_scalar<T: Element>(x: T) -> T {
    // Split by sign so the exponential never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// Applies `f` to every fiber along `axis`. The fiber's element stride and
/// base offsets follow from the row-major layout.
fn for_fibers(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(/*base*/ usize, /*stride*/ usize),
) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

pub fn softmax<T: Element>(input: &Tensor<T>, axis: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(input.shape());
    let len = input.shape()[axis];
    let x = input.data();
    let o = out.data_mut();
    for_fibers(input.shape(), axis, |base, stride| {
        let mut max = x[base];
        for a in 1..len {
            let v = x[base + a * stride];
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for a in 0..len {
            let e = (x[base + a * stride] - max).exp();
            o[base + a * stride] = e;
            sum = sum + e;
        }
        for a in 0..len {
            o[base + a * stride] = o[base + a * stride] / sum;
        }
    });
    out
}

pub fn softmax_backward<T: Element>(y: &Tensor<T>, axis: usize, og: &[T]) -> Vec<T> {
    let len = y.shape()[axis];
    let s = y.data();
    let mut dx = vec![T::zero(); s.len()];
    for_fibers(y.shape(), axis, |base, stride| {
        let mut dot = T::zero();
        for a in 0..len {
            let i = base + a * stride;
            dot = dot + og[i] * s[i];
        }
        for a in 0..len {
            let i = base + a * stride;
            dx[i] = s[i] * (og[i] - dot);
        }
    });
    dx
}

pub fn validate_radix(
    shape: &[usize],
    radix: usize,
    cardinality: usize,
) -> Result<(), TensorError> {
    if shape.len() != 2 {
        return Err(shape_err(
            "radix_softmax",
            format!("input must be [N, C*radix], got {shape:?}"),
        ));
    }
    if radix == 0 || cardinality == 0 {
        return Err(arg_err(
            "radix_softmax",
            format!("radix {radix} and cardinality {cardinality} must be positive"),
        ));
    }
    let features = shape[1];
    if features % (radix * cardinality) != 0 {
        return Err(arg_err(
            "radix_softmax",
            format!(
                "feature count {features} not divisible by radix {radix} x cardinality {cardinality}"
            ),
        ));
    }
    Ok(())
}

/// Index helpers for the radix layout. The grouped dense layer emits
/// features ordered (group, radix, channel-in-group); attention weights are
/// consumed ordered (radix, group, channel-in-group) so each radix block
/// aligns with one feature split.
struct RadixLayout {
    radix: usize,
    chan_per_group: usize,
    features: usize,
}

impl RadixLayout {
    fn new(features: usize, radix: usize, cardinality: usize) -> Self {
        let channels = features / radix;
        Self { radix, chan_per_group: channels / cardinality, features }
    }

    fn input_index(&self, n: usize, k: usize, r: usize, c: usize) -> usize {
        n * self.features + k * (self.radix * self.chan_per_group) + r * self.chan_per_group + c
    }

    fn output_index(&self, n: usize, k: usize, r: usize, c: usize) -> usize {
        let channels = self.features / self.radix;
        n * self.features + r * channels + k * self.chan_per_group + c
    }
}

pub fn radix_softmax<T: Element>(input: &Tensor<T>, radix: usize, cardinality: usize) -> Tensor<T> {
    let (batch, features) = (input.shape()[0], input.shape()[1]);
    let layout = RadixLayout::new(features, radix, cardinality);
    let mut out = Tensor::zeros(input.shape());
    let x = input.data();
    let o = out.data_mut();
    for n in 0..batch {
        for k in 0..cardinality {
            for c in 0..layout.chan_per_group {
                if radix == 1 {
                    let i = layout.input_index(n, k, 0, c);
                    o[layout.output_index(n, k, 0, c)] = sigmoid_scalar(x[i]);
                    continue;
                }
                let mut max = x[layout.input_index(n, k, 0, c)];
                for r in 1..radix {
                    let v = x[layout.input_index(n, k, r, c)];
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for r in 0..radix {
                    let e = (x[layout.input_index(n, k, r, c)] - max).exp();
                    o[layout.output_index(n, k, r, c)] = e;
                    sum = sum + e;
                }
                for r in 0..radix {
                    let i = layout.output_index(n, k, r, c);
                    o[i] = o[i] / sum;
                }
            }
        }
    }
    out
}

pub fn radix_softmax_backward<T: Element>(
    y: &Tensor<T>,
    radix: usize,
    cardinality: usize,
    og: &[T],
) -> Vec<T> {
    let (batch, features) = (y.shape()[0], y.shape()[1]);
    let layout = RadixLayout::new(features, radix, cardinality);
    let s = y.data();
    let mut dx = vec![T::zero(); s.len()];
    for n in 0..batch {
        for k in 0..cardinality {
            for c in 0..layout.chan_per_group {
                if radix == 1 {
                    let o = layout.output_index(n, k, 0, c);
                    dx[layout.input_index(n, k, 0, c)] =
                        og[o] * s[o] * (T::one() - s[o]);
                    continue;
                }
                let mut dot = T::zero();
                for r in 0..radix {
                    let o = layout.output_index(n, k, r, c);
                    dot = dot + og[o] * s[o];
                }
                for r in 0..radix {
                    let o = layout.output_index(n, k, r, c);
                    dx[layout.input_index(n, k, r, c)] = s[o] * (og[o] - dot);
                }
            }
        }
    }
    dx
}

/// Mean negative log-softmax of the labeled class. Returns the loss and the
/// per-row softmax probabilities needed by backward.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> (T, Vec<T>) {
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    let x = logits.data();
    let mut probs = vec![T::zero(); x.len()];
    let mut total = 0.0f64;
    for n in 0..batch {
        let row = &x[n * classes..(n + 1) * classes];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[n * classes + j] = e;
            sum = sum + e;
        }
        for j in 0..classes {
            probs[n * classes + j] = probs[n * classes + j] / sum;
        }
        // -log p(label) = log(sum exp(z)) - z_label, with z = x - max.
        total += sum.ln().as_f64() - (row[labels[n]] - max).as_f64();
    }
    (T::from_f64(total / batch as f64), probs)
}
