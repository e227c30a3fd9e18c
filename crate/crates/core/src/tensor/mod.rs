//! Flat-storage tensors and tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]; node inputs always refer to
//! earlier nodes, so the tape is a topological order of the computation graph
//! and backward is a single reverse sweep. The op set is exactly what the
//! network needs: 3D convolution, batch normalization, activations, pooling,
//! grouped dense layers, a few elementwise helpers, and a fused
//! softmax-cross-entropy loss.
//!
//! Gradients are accumulated per node. A tape supports one backward pass per
//! forward construction; running backward twice is an error rather than a
//! silent double-accumulation.

mod activation;
mod conv;
mod dense;
mod norm;
mod pool;

use thiserror::Error;

use crate::element::Element;
pub use conv::ConvGeom;
pub use norm::RunningStats;
pub use pool::PoolGeom;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got tensor with {numel} elements")]
    NonScalarBackward { numel: usize },
    #[error("backward was already run on this tape; rebuild the graph before differentiating again")]
    BackwardConsumed,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn arg_err(op: &'static str, detail: String) -> TensorError {
    TensorError::InvalidArgument { op, detail }
}

/// Dense row-major tensor value. The last axis varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    /// Builds a tensor from a shape and matching row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(arg_err(
                "tensor",
                format!("shape {shape:?} must be non-empty with positive extents"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} implies {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    /// Zero-filled tensor. Panics on a zero extent; shapes are validated at
    /// the op boundary before this is reached.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "zeros: invalid shape {shape:?}"
        );
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    /// Scalar wrapped as a rank-1 tensor of length 1.
    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Element lookup by multi-index; intended for tests and small tensors.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (axis, &i) in index.iter().enumerate() {
            assert!(i < self.shape[axis], "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * self.shape[axis] + i;
        }
        self.data[flat]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Whether batch normalization uses batch statistics (training) or running
/// statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Recorded operation metadata needed by the backward sweep.
enum OpRecord<T> {
    Conv3d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        saved_mean: Vec<T>,
        saved_invstd: Vec<T>,
        train: bool,
    },
    Relu { input: TensorId },
    Sigmoid { input: TensorId },
    Softmax { input: TensorId, axis: usize },
    RadixSoftmax { input: TensorId, radix: usize, cardinality: usize },
    GlobalAvgPool { input: TensorId },
    AvgPool { input: TensorId, geom: PoolGeom },
    MaxPool { input: TensorId, argmax: Vec<usize> },
    Dense {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        groups: usize,
    },
    Add { lhs: TensorId, rhs: TensorId },
    Mul { lhs: TensorId, rhs: TensorId },
    Scale { input: TensorId, factor: T },
    ScaleChannels { input: TensorId, scales: TensorId },
    ChannelSlice { input: TensorId, from: usize },
    SumAll { input: TensorId },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        saved_probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<OpRecord<T>>,
    needs_grad: bool,
}

/// Computation tape: owns every tensor produced during a forward pass plus
/// the operation records required to differentiate it.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf tensor. Only leaves with `requires_grad` receive
    /// gradients from backward; intermediates track this transitively.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> TensorId {
        self.push(value, None, requires_grad)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. node `id`, if one was
    /// computed (node reachable from the loss and on a differentiable path).
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Option<OpRecord<T>>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn val(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ---- operations ------------------------------------------------------

    /// 3D convolution over `[N, C_in, D, H, W]` input with
    /// `[C_out, C_in/groups, kD, kH, kW]` weight, optional `[C_out]` bias,
    /// zero padding, and floor output sizing.
    pub fn conv3d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Result<TensorId, TensorError> {
        let geom = conv::validate(
            self.val(input).shape(),
            self.val(weight).shape(),
            bias.map(|b| self.val(b).shape()),
            stride,
            padding,
            groups,
        )?;
        let mut out = Tensor::zeros(&geom.out_shape());
        conv::forward(
            &geom,
            self.val(input).data(),
            self.val(weight).data(),
            bias.map(|b| self.val(b).data()),
            out.data_mut(),
        );
        let needs =
            self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Some(OpRecord::Conv3d { input, weight, bias, geom }), needs))
    }

    /// Batch normalization over the channel axis (axis 1). Training mode
    /// normalizes by batch statistics (biased variance) and folds them into
    /// `running` with the given momentum, storing the unbiased variance;
    /// eval mode normalizes by the running statistics.
    pub fn batchnorm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running: &mut RunningStats<T>,
        mode: Mode,
        momentum: T,
        eps: T,
    ) -> Result<TensorId, TensorError> {
        let shape = self.val(input).shape().to_vec();
        norm::validate(&shape, self.val(gamma).shape(), self.val(beta).shape(), running, mode)?;
        let mut out = Tensor::zeros(&shape);
        let (saved_mean, saved_invstd) = norm::forward(
            &shape,
            self.val(input).data(),
            self.val(gamma).data(),
            self.val(beta).data(),
            running,
            mode,
            momentum,
            eps,
            out.data_mut(),
        );
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let record = OpRecord::BatchNorm {
            input,
            gamma,
            beta,
            saved_mean,
            saved_invstd,
            train: mode == Mode::Train,
        };
        Ok(self.push(out, Some(record), needs))
    }

    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let out = activation::relu(self.val(input));
        let needs = self.needs(input);
        self.push(out, Some(OpRecord::Relu { input }), needs)
    }

    pub fn sigmoid(&mut self, input: TensorId) -> TensorId {
        let out = activation::sigmoid(self.val(input));
        let needs = self.needs(input);
        self.push(out, Some(OpRecord::Sigmoid { input }), needs)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, input: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let rank = self.val(input).rank();
        if axis >= rank {
            return Err(arg_err("softmax", format!("axis {axis} out of range for rank {rank}")));
        }
        let out = activation::softmax(self.val(input), axis);
        let needs = self.needs(input);
        Ok(self.push(out, Some(OpRecord::Softmax { input, axis }), needs))
    }

    /// Split-attention softmax: the input `[N, C*radix]` is laid out
    /// group-major (cardinal group, then radix, then channel-within-group,
    /// as produced by a grouped dense layer); the output is radix-major
    /// `[N, C*radix]` with the softmax taken across the radix positions of
    /// each (group, channel) pair. With `radix == 1` a sigmoid is applied
    /// instead and the layout is unchanged.
    pub fn radix_softmax(
        &mut self,
        input: TensorId,
        radix: usize,
        cardinality: usize,
    ) -> Result<TensorId, TensorError> {
        activation::validate_radix(self.val(input).shape(), radix, cardinality)?;
        let out = activation::radix_softmax(self.val(input), radix, cardinality);
        let needs = self.needs(input);
        Ok(self.push(out, Some(OpRecord::RadixSoftmax { input, radix, cardinality }), needs))
    }

    /// Mean over all spatial axes of `[N, C, ...]`, producing `[N, C]`.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.val(input).shape();
        if shape.len() < 3 {
            return Err(shape_err(
                "global_avg_pool",
                format!("expected [N, C, spatial...], got {shape:?}"),
            ));
        }
        let out = pool::global_avg(self.val(input));
        let needs = self.needs(input);
        Ok(self.push(out, Some(OpRecord::GlobalAvgPool { input }), needs))
    }

    /// Windowed average pool with floor output sizing and no padding.
    pub fn avg_pool3d(
        &mut self,
        input: TensorId,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Result<TensorId, TensorError> {
        self.avg_pool3d_opts(input, kernel, stride, [0, 0, 0], true, false)
    }

    /// Average pool with explicit zero padding, divisor policy, and output
    /// sizing mode. `count_include_pad` keeps the divisor at the full kernel
    /// volume; otherwise each window divides by its valid-element count.
    /// `ceil_mode` admits windows that start inside the input but overhang it.
    pub fn avg_pool3d_opts(
        &mut self,
        input: TensorId,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        count_include_pad: bool,
        ceil_mode: bool,
    ) -> Result<TensorId, TensorError> {
        let geom = pool::validate(
            "avg_pool3d",
            self.val(input).shape(),
            kernel,
            stride,
            padding,
            ceil_mode,
            count_include_pad,
        )?;
        let mut out = Tensor::zeros(&geom.out_shape());
        pool::avg_forward(&geom, self.val(input).data(), out.data_mut());
        let needs = self.needs(input);
        Ok(self.push(out, Some(OpRecord::AvgPool { input, geom }), needs))
    }

    /// Windowed max pool with floor output sizing and no padding. Ties within
    /// a window resolve to the first element in scan order.
    pub fn max_pool3d(
        &mut self,
        input: TensorId,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Result<TensorId, TensorError> {
        let geom = pool::validate(
            "max_pool3d",
            self.val(input).shape(),
            kernel,
            stride,
            [0, 0, 0],
            false,
            false,
        )?;
        let mut out = Tensor::zeros(&geom.out_shape());
        let argmax = pool::max_forward(&geom, self.val(input).data(), out.data_mut());
        let needs = self.needs(input);
        Ok(self.push(out, Some(OpRecord::MaxPool { input, argmax }), needs))
    }

    /// Fully connected layer `[N, F_in] x [F_out, F_in/groups] -> [N, F_out]`
    /// with optional `[F_out]` bias. With `groups > 1` both feature axes are
    /// partitioned into contiguous per-group blocks.
    pub fn dense(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        groups: usize,
    ) -> Result<TensorId, TensorError> {
        dense::validate(
            self.val(input).shape(),
            self.val(weight).shape(),
            bias.map(|b| self.val(b).shape()),
            groups,
        )?;
        let out = dense::forward(
            self.val(input),
            self.val(weight),
            bias.map(|b| self.val(b).data()),
            groups,
        );
        let needs =
            self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Some(OpRecord::Dense { input, weight, bias, groups }), needs))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        let (a, b) = (self.val(lhs), self.val(rhs));
        if a.shape() != b.shape() {
            return Err(shape_err(
                "add",
                format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor { shape: a.shape().to_vec(), data };
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(out, Some(OpRecord::Add { lhs, rhs }), needs))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId, TensorError> {
        let (a, b) = (self.val(lhs), self.val(rhs));
        if a.shape() != b.shape() {
            return Err(shape_err(
                "mul",
                format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor { shape: a.shape().to_vec(), data };
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(out, Some(OpRecord::Mul { lhs, rhs }), needs))
    }

    /// Multiplication by a compile-time constant (not a graph input).
    pub fn scale(&mut self, input: TensorId, factor: T) -> TensorId {
        let x = self.val(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let out = Tensor { shape: x.shape().to_vec(), data };
        let needs = self.needs(input);
        self.push(out, Some(OpRecord::Scale { input, factor }), needs)
    }

    /// Broadcast-multiplies `[N, C, ...]` features by per-channel scales
    /// `[N, C]`.
    pub fn scale_channels(
        &mut self,
        input: TensorId,
        scales: TensorId,
    ) -> Result<TensorId, TensorError> {
        let x = self.val(input);
        let s = self.val(scales);
        if x.rank() < 2 || s.shape() != &x.shape()[..2] {
            return Err(shape_err(
                "scale_channels",
                format!("features {:?} need matching [N, C] scales, got {:?}", x.shape(), s.shape()),
            ));
        }
        let spatial: usize = x.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(x.numel());
        for (nc, &sv) in s.data().iter().enumerate() {
            let base = nc * spatial;
            data.extend(x.data()[base..base + spatial].iter().map(|&v| v * sv));
        }
        let out = Tensor { shape: x.shape().to_vec(), data };
        let needs = self.needs(input) || self.needs(scales);
        Ok(self.push(out, Some(OpRecord::ScaleChannels { input, scales }), needs))
    }

    /// Copies the contiguous channel range `from..to` of `[N, C, ...]`.
    pub fn channel_slice(
        &mut self,
        input: TensorId,
        from: usize,
        to: usize,
    ) -> Result<TensorId, TensorError> {
        let x = self.val(input);
        if x.rank() < 2 {
            return Err(shape_err(
                "channel_slice",
                format!("expected [N, C, ...], got {:?}", x.shape()),
            ));
        }
        let channels = x.shape()[1];
        if from >= to || to > channels {
            return Err(arg_err(
                "channel_slice",
                format!("range {from}..{to} invalid for {channels} channels"),
            ));
        }
        let batch = x.shape()[0];
        let spatial: usize = x.shape()[2..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[1] = to - from;
        let mut data = Vec::with_capacity(batch * (to - from) * spatial);
        for n in 0..batch {
            let start = (n * channels + from) * spatial;
            data.extend_from_slice(&x.data()[start..start + (to - from) * spatial]);
        }
        let out = Tensor { shape, data };
        let needs = self.needs(input);
        Ok(self.push(out, Some(OpRecord::ChannelSlice { input, from }), needs))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum_all(&mut self, input: TensorId) -> TensorId {
        let total = self.val(input).data().iter().fold(T::zero(), |acc, &v| acc + v);
        let needs = self.needs(input);
        self.push(Tensor::scalar(total), Some(OpRecord::SumAll { input }), needs)
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class labels,
    /// computed with max-subtraction for stability. Returns a scalar node.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, TensorError> {
        let l = self.val(logits);
        if l.rank() != 2 {
            return Err(shape_err(
                "cross_entropy",
                format!("expected [N, C] logits, got {:?}", l.shape()),
            ));
        }
        let (n, c) = (l.shape()[0], l.shape()[1]);
        if labels.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(arg_err("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let (loss, probs) = activation::cross_entropy(l, labels);
        let needs = self.needs(logits);
        let record = OpRecord::CrossEntropy { logits, labels: labels.to_vec(), saved_probs: probs };
        Ok(self.push(Tensor::scalar(loss), Some(record), needs))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss` node. Gradients accumulate
    /// into every node on a differentiable path from a `requires_grad` leaf
    /// to the loss; nodes off those paths keep `grad() == None`.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardConsumed);
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(TensorError::NonScalarBackward { numel });
        }
        self.backward_done = true;

        // Mark nodes reachable from the loss; unreachable nodes are never
        // touched and keep their grads unset.
        let mut reachable = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        reachable[loss.0] = true;
        while let Some(i) = stack.pop() {
            if let Some(op) = &self.nodes[i].op {
                for input in op_inputs(op) {
                    if !reachable[input.0] {
                        reachable[input.0] = true;
                        stack.push(input.0);
                    }
                }
            }
        }

        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any requires_grad leaf; nothing to do.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);

        for i in (0..self.nodes.len()).rev() {
            if !reachable[i] || self.grads[i].is_none() || self.nodes[i].op.is_none() {
                continue;
            }
            // The record and output gradient are moved aside so node values
            // and gradient buffers can be borrowed independently.
            let op = self.nodes[i].op.take().expect("op checked above");
            let out_grad = self.grads[i].take().expect("grad checked above");
            propagate(&self.nodes, &mut self.grads, i, &op, &out_grad);
            self.grads[i] = Some(out_grad);
            self.nodes[i].op = Some(op);
        }
        Ok(())
    }
}

/// Zero-initialized gradient buffer for node `id`.
fn grad_buf<'a, T: Element>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    id: TensorId,
) -> &'a mut [T] {
    let numel = nodes[id.0].value.numel();
    grads[id.0].get_or_insert_with(|| vec![T::zero(); numel])
}

/// Routes the output gradient of one node into its inputs. Inputs whose
/// subgraph contains no `requires_grad` leaf are skipped entirely.
fn propagate<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    node: usize,
    op: &OpRecord<T>,
    og: &[T],
) {
    let needs = |id: TensorId| nodes[id.0].needs_grad;
    let value = |id: TensorId| &nodes[id.0].value;
    match op {
        OpRecord::Conv3d { input, weight, bias, geom } => {
            if needs(*input) {
                let w = value(*weight).data();
                conv::backward_input(geom, w, og, grad_buf(nodes, grads, *input));
            }
            if needs(*weight) {
                let x = value(*input).data();
                conv::backward_weight(geom, x, og, grad_buf(nodes, grads, *weight));
            }
            if let Some(b) = bias {
                if needs(*b) {
                    conv::backward_bias(geom, og, grad_buf(nodes, grads, *b));
                }
            }
        }
        OpRecord::BatchNorm { input, gamma, beta, saved_mean, saved_invstd, train } => {
            let (dx, dgamma, dbeta) = norm::backward(
                value(*input).shape(),
                value(*input).data(),
                value(*gamma).data(),
                saved_mean,
                saved_invstd,
                *train,
                og,
            );
            if needs(*input) {
                accumulate(grad_buf(nodes, grads, *input), &dx);
            }
            if needs(*gamma) {
                accumulate(grad_buf(nodes, grads, *gamma), &dgamma);
            }
            if needs(*beta) {
                accumulate(grad_buf(nodes, grads, *beta), &dbeta);
            }
        }
        OpRecord::Relu { input } => {
            if needs(*input) {
                let x = value(*input).data();
                let buf = grad_buf(nodes, grads, *input);
                for (i, (&xv, &gv)) in x.iter().zip(og).enumerate() {
                    if xv > T::zero() {
                        buf[i] = buf[i] + gv;
                    }
                }
            }
        }
        OpRecord::Sigmoid { input } => {
            if needs(*input) {
                let y = nodes[node].value.data();
                let buf = grad_buf(nodes, grads, *input);
                for (i, (&yv, &gv)) in y.iter().zip(og).enumerate() {
                    buf[i] = buf[i] + gv * yv * (T::one() - yv);
                }
            }
        }
        OpRecord::Softmax { input, axis } => {
            if needs(*input) {
                let dx = activation::softmax_backward(&nodes[node].value, *axis, og);
                accumulate(grad_buf(nodes, grads, *input), &dx);
            }
        }
        OpRecord::RadixSoftmax { input, radix, cardinality } => {
            if needs(*input) {
                let dx = activation::radix_softmax_backward(
                    &nodes[node].value,
                    *radix,
                    *cardinality,
                    og,
                );
                accumulate(grad_buf(nodes, grads, *input), &dx);
            }
        }
        OpRecord::GlobalAvgPool { input } => {
            if needs(*input) {
                let shape = value(*input).shape().to_vec();
                pool::global_avg_backward(&shape, og, grad_buf(nodes, grads, *input));
            }
        }
        OpRecord::AvgPool { input, geom } => {
            if needs(*input) {
                pool::avg_backward(geom, og, grad_buf(nodes, grads, *input));
            }
        }
        OpRecord::MaxPool { input, argmax, .. } => {
            if needs(*input) {
                let buf = grad_buf(nodes, grads, *input);
                for (o, &src) in argmax.iter().enumerate() {
                    buf[src] = buf[src] + og[o];
                }
            }
        }
        OpRecord::Dense { input, weight, bias, groups } => {
            if needs(*input) {
                let dx = dense::backward_input(value(*input), value(*weight), *groups, og);
                accumulate(grad_buf(nodes, grads, *input), &dx);
            }
            if needs(*weight) {
                let dw = dense::backward_weight(value(*input), value(*weight), *groups, og);
                accumulate(grad_buf(nodes, grads, *weight), &dw);
            }
            if let Some(b) = bias {
                if needs(*b) {
                    let fout = value(*weight).shape()[0];
                    let buf = grad_buf(nodes, grads, *b);
                    for (o, &gv) in og.iter().enumerate() {
                        buf[o % fout] = buf[o % fout] + gv;
                    }
                }
            }
        }
        OpRecord::Add { lhs, rhs } => {
            for id in [*lhs, *rhs] {
                if needs(id) {
                    accumulate(grad_buf(nodes, grads, id), og);
                }
            }
        }
        OpRecord::Mul { lhs, rhs } => {
            if needs(*lhs) {
                let r = value(*rhs).data();
                let buf = grad_buf(nodes, grads, *lhs);
                for (i, (&rv, &gv)) in r.iter().zip(og).enumerate() {
                    buf[i] = buf[i] + gv * rv;
                }
            }
            if needs(*rhs) {
                let l = value(*lhs).data();
                let buf = grad_buf(nodes, grads, *rhs);
                for (i, (&lv, &gv)) in l.iter().zip(og).enumerate() {
                    buf[i] = buf[i] + gv * lv;
                }
            }
        }
        OpRecord::Scale { input, factor } => {
            if needs(*input) {
                let buf = grad_buf(nodes, grads, *input);
                for (i, &gv) in og.iter().enumerate() {
                    buf[i] = buf[i] + gv * *factor;
                }
            }
        }
        OpRecord::ScaleChannels { input, scales } => {
            let spatial: usize = value(*input).shape()[2..].iter().product();
            if needs(*input) {
                let s = value(*scales).data();
                let buf = grad_buf(nodes, grads, *input);
                for (nc, &sv) in s.iter().enumerate() {
                    let base = nc * spatial;
                    for i in base..base + spatial {
                        buf[i] = buf[i] + og[i] * sv;
                    }
                }
            }
            if needs(*scales) {
                let x = value(*input).data();
                let count = value(*scales).numel();
                let buf = grad_buf(nodes, grads, *scales);
                for (nc, slot) in buf.iter_mut().enumerate().take(count) {
                    let base = nc * spatial;
                    let mut acc = T::zero();
                    for i in base..base + spatial {
                        acc = acc + og[i] * x[i];
                    }
                    *slot = *slot + acc;
                }
            }
        }
        OpRecord::ChannelSlice { input, from } => {
            if needs(*input) {
                let shape = value(*input).shape().to_vec();
                let (batch, channels) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let out_c = og.len() / (batch * spatial);
                let buf = grad_buf(nodes, grads, *input);
                for n in 0..batch {
                    let dst = (n * channels + from) * spatial;
                    let src = n * out_c * spatial;
                    for i in 0..out_c * spatial {
                        buf[dst + i] = buf[dst + i] + og[src + i];
                    }
                }
            }
        }
        OpRecord::SumAll { input } => {
            if needs(*input) {
                let g = og[0];
                let buf = grad_buf(nodes, grads, *input);
                for v in buf.iter_mut() {
                    *v = *v + g;
                }
            }
        }
        OpRecord::CrossEntropy { logits, labels, saved_probs } => {
            if needs(*logits) {
                let n = labels.len();
                let c = saved_probs.len() / n;
                let scale = og[0] / T::from_f64(n as f64);
                let buf = grad_buf(nodes, grads, *logits);
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let idx = row * c + j;
                        let indicator = if j == label { T::one() } else { T::zero() };
                        buf[idx] = buf[idx] + scale * (saved_probs[idx] - indicator);
                    }
                }
            }
        }
    }
}

fn op_inputs<T>(op: &OpRecord<T>) -> Vec<TensorId> {
    match op {
        OpRecord::Conv3d { input, weight, bias, .. } => {
            let mut v = vec![*input, *weight];
            v.extend(bias.iter().copied());
            v
        }
        OpRecord::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        OpRecord::Relu { input }
        | OpRecord::Sigmoid { input }
        | OpRecord::Softmax { input, .. }
        | OpRecord::RadixSoftmax { input, .. }
        | OpRecord::GlobalAvgPool { input }
        | OpRecord::AvgPool { input, .. }
        | OpRecord::MaxPool { input, .. }
        | OpRecord::Scale { input, .. }
        | OpRecord::ChannelSlice { input, .. }
        | OpRecord::SumAll { input } => vec![*input],
        OpRecord::Dense { input, weight, bias, .. } => {
            let mut v = vec![*input, *weight];
            v.extend(bias.iter().copied());
            v
        }
        OpRecord::Add { lhs, rhs } | OpRecord::Mul { lhs, rhs } => vec![*lhs, *rhs],
        OpRecord::ScaleChannels { input, scales } => vec![*input, *scales],
        OpRecord::CrossEntropy { logits, .. } => vec![*logits],
    }
}

fn accumulate<T: Element>(buf: &mut [T], delta: &[T]) {
    debug_assert_eq!(buf.len(), delta.len());
    for (b, &d) in buf.iter_mut().zip(delta) {
        *b = *b + d;
    }
}
