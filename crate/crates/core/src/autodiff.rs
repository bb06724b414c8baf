//! Reverse-mode differentiation over an append-only operation tape.
//!
//! A [`Tape`] owns every tensor produced while it records. Operations are
//! methods on the tape that take [`Var`] handles and return a new handle;
//! [`Tape::backward`] walks the recorded nodes in reverse order and writes
//! gradients into the grad slot of each leaf that requires one.
//!
//! ```
//! use olens::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(&[1.0, -2.0]).unwrap().with_requires_grad(true));
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
//! ```

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::kernels::{self, ConvGeometry};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// How relu propagates gradients during [`Tape::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReluBackwardMode {
    /// Pass gradient where the forward input was positive.
    #[default]
    Standard,
    /// Additionally zero out negative upstream gradients (guided backprop).
    Guided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Handle to a tensor recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Backward rule for operations defined outside this module (losses).
pub trait CustomBackward: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients w.r.t. each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernels: usize,
        bias: usize,
        geometry: ConvGeometry,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2d {
        input: usize,
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    Dense {
        input: usize,
        weights: usize,
        bias: usize,
    },
    /// Per-element multiplier: 0 for dropped, 1/(1-rate) for kept.
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
    Reduce {
        input: usize,
        mask: Option<Vec<bool>>,
        scale: f64,
    },
    Concat {
        first: usize,
        second: usize,
    },
    Reshape {
        input: usize,
    },
    Softmax {
        input: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: f64,
    },
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomBackward>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Upsample2d { .. } => "upsample2d_nearest",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Dense { .. } => "dense",
            Op::Dropout { .. } => "dropout",
            Op::Reduce { .. } => "reduce",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Custom { rule, .. } => rule.name(),
        }
    }

    fn operands(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => vec![*input, *kernels, *bias],
            Op::Dense {
                input,
                weights,
                bias,
            } => vec![*input, *weights, *bias],
            Op::MaxPool2d { input, .. }
            | Op::Upsample2d { input }
            | Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::Dropout { input, .. }
            | Op::Reduce { input, .. }
            | Op::Reshape { input }
            | Op::Softmax { input }
            | Op::Scale { input, .. } => vec![*input],
            Op::Concat { first, second } => vec![*first, *second],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of a computation. Single-writer; one tape per thread.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    relu_mode: ReluBackwardMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field(
                "nodes",
                &self.nodes.iter().map(|n| n.op.name()).collect::<Vec<_>>(),
            )
            .field("relu_mode", &self.relu_mode)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            relu_mode: ReluBackwardMode::Standard,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn relu_mode(&self) -> ReluBackwardMode {
        self.relu_mode
    }

    pub fn set_relu_mode(&mut self, mode: ReluBackwardMode) {
        self.relu_mode = mode;
    }

    /// Runs `f` with the relu mode temporarily set to `mode`; the previous mode
    /// is restored whether or not `f` fails.
    pub fn with_relu_mode<T>(
        &mut self,
        mode: ReluBackwardMode,
        f: impl FnOnce(&mut Tape) -> T,
    ) -> T {
        let previous = std::mem::replace(&mut self.relu_mode, mode);
        let out = f(self);
        self.relu_mode = previous;
        out
    }

    /// Records a leaf. Its gradient is populated by `backward` iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[self.check(var).expect("variable from another tape")].value
    }

    /// Gradient of a leaf written by the last `backward` call.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.check(var)
            .ok()
            .and_then(|i| self.nodes[i].value.grad())
    }

    pub fn owns(&self, var: Var) -> bool {
        self.check(var).is_ok()
    }

    fn var(&self, index: usize) -> Var {
        Var {
            tape: self.id,
            index,
        }
    }

    fn check(&self, var: Var) -> Result<usize, TensorError> {
        if var.tape == self.id && var.index < self.nodes.len() {
            Ok(var.index)
        } else {
            Err(TensorError::DetachedOutput)
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op.name()));
        }
        let needs_grad = op.operands().iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    /// 2-D cross-correlation of a `[C_in,H,W]` input with `[C_out,C_in,kH,kW]` kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (ii, ki, bi) = (self.check(input)?, self.check(kernels)?, self.check(bias)?);
        let (c, h, w) = self.nodes[ii].value.chw()?;
        let (co, ci, kh, kw) = match self.nodes[ki].value.shape() {
            &[co, ci, kh, kw] => (co, ci, kh, kw),
            other => {
                return Err(TensorError::ShapeMismatch(format!(
                    "kernels must be [C_out,C_in,kH,kW], got {other:?}"
                )))
            }
        };
        if ci != c {
            return Err(TensorError::ShapeMismatch(format!(
                "input has {c} channels but kernels expect {ci}"
            )));
        }
        if self.nodes[bi].value.shape() != [co] {
            return Err(TensorError::ShapeMismatch(format!(
                "bias must be [{co}], got {:?}",
                self.nodes[bi].value.shape()
            )));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument(
                "stride must be positive".into(),
            ));
        }
        let out_extent = |extent: usize, kernel: usize| -> Result<usize, TensorError> {
            let padded = extent + 2 * padding;
            if kernel > padded {
                return Err(TensorError::ShapeMismatch(format!(
                    "kernel extent {kernel} exceeds padded input extent {padded}"
                )));
            }
            if !(padded - kernel).is_multiple_of(stride) {
                return Err(TensorError::NonIntegralOutputSize {
                    extent,
                    padding,
                    kernel,
                    stride,
                });
            }
            Ok((padded - kernel) / stride + 1)
        };
        let geometry = ConvGeometry {
            in_channels: c,
            height: h,
            width: w,
            out_channels: co,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: out_extent(h, kh)?,
            out_w: out_extent(w, kw)?,
        };
        let data = kernels::conv2d_forward(
            &geometry,
            self.nodes[ii].value.data(),
            self.nodes[ki].value.data(),
            self.nodes[bi].value.data(),
        );
        self.push(
            vec![co, geometry.out_h, geometry.out_w],
            data,
            Op::Conv2d {
                input: ii,
                kernels: ki,
                bias: bi,
                geometry,
            },
        )
    }

    /// 2x2 max-pool with stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let (c, h, w) = self.nodes[ii].value.chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatialDim {
                height: h,
                width: w,
            });
        }
        let (data, argmax) = kernels::max_pool2d_forward(self.nodes[ii].value.data(), c, h, w);
        self.push(
            vec![c, h / 2, w / 2],
            data,
            Op::MaxPool2d { input: ii, argmax },
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2d_nearest(&mut self, input: Var) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let (c, h, w) = self.nodes[ii].value.chw()?;
        let data = kernels::upsample2d_forward(self.nodes[ii].value.data(), c, h, w);
        self.push(vec![c, 2 * h, 2 * w], data, Op::Upsample2d { input: ii })
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var, TensorError> {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        let shape = x.shape().to_vec();
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        self.push(shape, data, Op::Relu { input: ii })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| sigmoid(v)).collect();
        self.push(shape, data, Op::Sigmoid { input: ii })
    }

    /// `weights[M,N] · input[N] + bias[M]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var, TensorError> {
        let (ii, wi, bi) = (self.check(input)?, self.check(weights)?, self.check(bias)?);
        let n = self.nodes[ii].value.numel();
        let x_shape = self.nodes[ii].value.shape();
        if x_shape != [n] {
            return Err(TensorError::ShapeMismatch(format!(
                "dense input must be 1-D, got {x_shape:?}"
            )));
        }
        let m = match self.nodes[wi].value.shape() {
            &[m, cols] if cols == n => m,
            other => {
                return Err(TensorError::ShapeMismatch(format!(
                    "weights {other:?} incompatible with input of length {n}"
                )))
            }
        };
        if self.nodes[bi].value.shape() != [m] {
            return Err(TensorError::ShapeMismatch(format!(
                "bias must be [{m}], got {:?}",
                self.nodes[bi].value.shape()
            )));
        }
        let data = kernels::dense_forward(
            self.nodes[ii].value.data(),
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
        );
        self.push(
            vec![m],
            data,
            Op::Dense {
                input: ii,
                weights: wi,
                bias: bi,
            },
        )
    }

    /// Inverted dropout. When inactive the op is the identity and draws nothing
    /// from `rng`.
    pub fn dropout(
        &mut self,
        input: Var,
        rate: f64,
        rng: &mut RngStream,
        active: bool,
    ) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        let x = &self.nodes[ii].value;
        let shape = x.shape().to_vec();
        let mask: Vec<f64> = if active {
            let keep_scale = 1.0 / (1.0 - rate);
            (0..x.numel())
                .map(|_| {
                    if rng.uniform() < rate {
                        0.0
                    } else {
                        keep_scale
                    }
                })
                .collect()
        } else {
            vec![1.0; x.numel()]
        };
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(shape, data, Op::Dropout { input: ii, mask })
    }

    /// Sum or mean over the elements selected by `region` (all when `None`).
    pub fn reduce(
        &mut self,
        input: Var,
        kind: ReduceKind,
        region: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        if let Some(m) = region {
            if m.len() != x.numel() {
                return Err(TensorError::ShapeMismatch(format!(
                    "mask has {} elements, input has {}",
                    m.len(),
                    x.numel()
                )));
            }
        }
        let count = region.map_or(x.numel(), |m| m.iter().filter(|&&b| b).count());
        if count == 0 {
            return Err(TensorError::EmptyRegion);
        }
        let total: f64 = match region {
            Some(m) => x
                .data()
                .iter()
                .zip(m)
                .filter(|(_, &b)| b)
                .map(|(v, _)| v)
                .sum(),
            None => x.data().iter().sum(),
        };
        let scale = match kind {
            ReduceKind::Sum => 1.0,
            ReduceKind::Mean => 1.0 / count as f64,
        };
        let value = match kind {
            ReduceKind::Sum => total,
            ReduceKind::Mean => total / count as f64,
        };
        self.push(
            vec![1],
            vec![value],
            Op::Reduce {
                input: ii,
                mask: region.map(<[bool]>::to_vec),
                scale,
            },
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        self.reduce(input, ReduceKind::Sum, None)
    }

    /// Channel-wise concatenation of two `[C,H,W]` tensors with equal spatial dims.
    pub fn concat_channels(&mut self, first: Var, second: Var) -> Result<Var, TensorError> {
        let (fi, si) = (self.check(first)?, self.check(second)?);
        let (c1, h1, w1) = self.nodes[fi].value.chw()?;
        let (c2, h2, w2) = self.nodes[si].value.chw()?;
        if (h1, w1) != (h2, w2) {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot concatenate {h1}x{w1} with {h2}x{w2}"
            )));
        }
        let mut data = Vec::with_capacity((c1 + c2) * h1 * w1);
        data.extend_from_slice(self.nodes[fi].value.data());
        data.extend_from_slice(self.nodes[si].value.data());
        self.push(
            vec![c1 + c2, h1, w1],
            data,
            Op::Concat {
                first: fi,
                second: si,
            },
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let n = self.nodes[ii].value.numel();
        if shape.iter().product::<usize>() != n || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {n} elements to {shape:?}"
            )));
        }
        let data = self.nodes[ii].value.data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape { input: ii })
    }

    pub fn flatten(&mut self, input: Var) -> Result<Var, TensorError> {
        let n = self.value(input).numel();
        self.reshape(input, &[n])
    }

    /// Numerically stable softmax over a 1-D tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        if x.shape().len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "softmax expects a 1-D tensor, got {:?}",
                x.shape()
            )));
        }
        let shape = x.shape().to_vec();
        let data = softmax(x.data());
        self.push(shape, data, Op::Softmax { input: ii })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = self.same_shape(a, b)?;
        let data = zip(&self.nodes[ai].value, &self.nodes[bi].value, |x, y| x + y);
        let shape = self.nodes[ai].value.shape().to_vec();
        self.push(shape, data, Op::Add { a: ai, b: bi })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ai, bi) = self.same_shape(a, b)?;
        let data = zip(&self.nodes[ai].value, &self.nodes[bi].value, |x, y| x * y);
        let shape = self.nodes[ai].value.shape().to_vec();
        self.push(shape, data, Op::Mul { a: ai, b: bi })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var, TensorError> {
        let ii = self.check(input)?;
        let x = &self.nodes[ii].value;
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|v| v * factor).collect();
        self.push(shape, data, Op::Scale { input: ii, factor })
    }

    /// Records an externally computed output with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var, TensorError> {
        let inputs = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>, _>>()?;
        let (shape, data) = (output.shape().to_vec(), output.into_data());
        self.push(shape, data, Op::Custom { inputs, rule })
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(usize, usize), TensorError> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch(format!("{sa:?} vs {sb:?}")));
        }
        Ok((ai, bi))
    }

    /// Differentiates the scalar `output` with respect to every leaf that
    /// requires a gradient. Leaf gradients are overwritten, never accumulated;
    /// leaves unreachable from `output` receive zeros.
    pub fn backward(&mut self, output: Var) -> Result<(), TensorError> {
        let out = self.check(output)?;
        if !self.nodes[out].value.is_scalar() {
            return Err(TensorError::NotScalar(
                self.nodes[out].value.shape().to_vec(),
            ));
        }
        let adjoints = self.adjoints(out);
        for (node, adj) in self.nodes.iter_mut().zip(adjoints) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(adj.unwrap_or_else(|| vec![0.0; n]));
            }
        }
        Ok(())
    }

    fn adjoints(&self, out: usize) -> Vec<Option<Vec<f64>>> {
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[out] = Some(vec![1.0]);
        let guided = self.relu_mode == ReluBackwardMode::Guided;
        for k in (0..=out).rev() {
            let Some(g) = adj[k].take() else { continue };
            let node = &self.nodes[k];
            if !node.needs_grad {
                continue;
            }
            let wants = |i: usize| self.nodes[i].needs_grad;
            let val = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    adj[k] = Some(g);
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    geometry,
                } => {
                    let (gi, gk, gb) = kernels::conv2d_backward(
                        geometry,
                        val(*input).data(),
                        val(*kernels).data(),
                        &g,
                        [wants(*input), wants(*kernels), wants(*bias)],
                    );
                    accumulate(&mut adj, *input, gi);
                    accumulate(&mut adj, *kernels, gk);
                    accumulate(&mut adj, *bias, gb);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut gi = vec![0.0; val(*input).numel()];
                    for (&src, gv) in argmax.iter().zip(&g) {
                        gi[src] += gv;
                    }
                    accumulate(&mut adj, *input, Some(gi));
                }
                Op::Upsample2d { input } => {
                    let (c, h, w) = val(*input).chw().expect("validated at record time");
                    accumulate(
                        &mut adj,
                        *input,
                        Some(kernels::upsample2d_backward(&g, c, h, w)),
                    );
                }
                Op::Relu { input } => {
                    let gi = val(*input)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| {
                            if x > 0.0 && (!guided || gv > 0.0) {
                                gv
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut adj, *input, Some(gi));
                }
                Op::Sigmoid { input } => {
                    let gi = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut adj, *input, Some(gi));
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let x = val(*input).data();
                    let w = val(*weights).data();
                    let n = x.len();
                    if wants(*input) {
                        let mut gi = vec![0.0; n];
                        for (i, gv) in g.iter().enumerate() {
                            for (d, wv) in gi.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                                *d += wv * gv;
                            }
                        }
                        accumulate(&mut adj, *input, Some(gi));
                    }
                    if wants(*weights) {
                        let gw = g
                            .iter()
                            .flat_map(|gv| x.iter().map(move |xv| gv * xv))
                            .collect();
                        accumulate(&mut adj, *weights, Some(gw));
                    }
                    accumulate(&mut adj, *bias, Some(g.clone()));
                }
                Op::Dropout { input, mask } => {
                    let gi = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    accumulate(&mut adj, *input, Some(gi));
                }
                Op::Reduce { input, mask, scale } => {
                    let n = val(*input).numel();
                    let gi = match mask {
                        Some(m) => m
                            .iter()
                            .map(|&b| if b { g[0] * scale } else { 0.0 })
                            .collect(),
                        None => vec![g[0] * scale; n],
                    };
                    accumulate(&mut adj, *input, Some(gi));
                }
                Op::Concat { first, second } => {
                    let split = val(*first).numel();
                    accumulate(&mut adj, *first, Some(g[..split].to_vec()));
                    accumulate(&mut adj, *second, Some(g[split..].to_vec()));
                }
                Op::Reshape { input } => accumulate(&mut adj, *input, Some(g)),
                Op::Softmax { input } => {
                    let y = node.value.data();
                    let dot: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
                    let gi = y.iter().zip(&g).map(|(yv, gv)| yv * (gv - dot)).collect();
                    accumulate(&mut adj, *input, Some(gi));
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, *a, Some(g.clone()));
                    accumulate(&mut adj, *b, Some(g));
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    let ga = g.iter().zip(bv).map(|(gv, y)| gv * y).collect();
                    let gb = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                    accumulate(&mut adj, *a, Some(ga));
                    accumulate(&mut adj, *b, Some(gb));
                }
                Op::Scale { input, factor } => {
                    accumulate(
                        &mut adj,
                        *input,
                        Some(g.iter().map(|v| v * factor).collect()),
                    );
                }
                Op::Custom { inputs, rule } => {
                    let operands: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                    let grads = rule.backward(&operands, &node.value, &g);
                    for (&i, gi) in inputs.iter().zip(grads) {
                        accumulate(&mut adj, i, Some(gi));
                    }
                }
            }
            // Only leaves keep their adjoint; intermediates are dropped once consumed.
            if !matches!(node.op, Op::Leaf) {
                adj[k] = None;
            }
        }
        adj
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], index: usize, grad: Option<Vec<f64>>) {
    let Some(grad) = grad else { return };
    match &mut adj[index] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&grad) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
