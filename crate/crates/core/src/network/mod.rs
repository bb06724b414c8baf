//! Layer stacks for the two supported architectures: a 9-conv U-Net for binary
//! segmentation and a VGG-style classifier with a frozen feature stack.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, MAGIC,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("input {height}x{width} is not divisible by {divisor}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        divisor: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid layer {index}: {reason}")]
    InvalidLayer { index: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One step of a layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    #[serde(rename = "maxpool")]
    MaxPool,
    Upsample,
    /// Concatenates the output of an earlier layer after the current channels.
    ConcatSkip {
        source: usize,
    },
    Dropout {
        rate: f64,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Flatten,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            trainable: true,
        }
    }

    pub fn frozen(kind: LayerKind) -> Self {
        Self {
            kind,
            trainable: false,
        }
    }

    /// Shapes of this layer's parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerKind::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn is_weighted(&self) -> bool {
        !self.param_shapes().is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// All dropout disabled.
    Deterministic,
    /// Dropout masks sampled from the supplied stream.
    Stochastic,
}

/// What the network's output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// Per-pixel probabilities `[1,H,W]` behind a sigmoid.
    Segmentation,
    /// A probability simplex behind a softmax.
    Classification { classes: usize },
    /// Raw outputs with no squashing (linear probes, test networks).
    Raw,
}

/// Handles produced by a recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: Var,
    /// Pre-sigmoid / pre-softmax values; equal to `output` for raw networks.
    pub logits: Var,
    /// Parameter leaves, `params[layer][tensor]`.
    pub params: Vec<Vec<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: String,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor>>,
    seed: u64,
    epochs_trained: u64,
}

impl Network {
    /// Validates the layer chain and initializes parameters (He-normal weights,
    /// zero biases) from `seed`.
    pub fn new(
        arch: impl Into<String>,
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        infer_shapes(input_shape, &layers)?;
        let mut rng = RngStream::new(seed);
        let params = layers
            .iter()
            .map(|layer| {
                layer
                    .param_shapes()
                    .into_iter()
                    .enumerate()
                    .map(|(i, shape)| {
                        let numel: usize = shape.iter().product();
                        if i == 0 {
                            let fan_in: usize = shape[1..].iter().product();
                            let std = (2.0 / fan_in as f64).sqrt();
                            Tensor::from_parts(
                                shape,
                                (0..numel).map(|_| std * rng.normal()).collect(),
                            )
                        } else {
                            Tensor::zeros(&shape)
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            arch: arch.into(),
            input_shape,
            layers,
            params,
            seed,
            epochs_trained: 0,
        })
    }

    pub(crate) fn from_raw(
        arch: String,
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        params: Vec<Vec<Tensor>>,
        seed: u64,
        epochs_trained: u64,
    ) -> Result<Self, NetworkError> {
        infer_shapes(input_shape, &layers)?;
        let net = Self {
            arch,
            input_shape,
            layers,
            params,
            seed,
            epochs_trained,
        };
        net.check_params()?;
        Ok(net)
    }

    fn check_params(&self) -> Result<(), NetworkError> {
        if self.params.len() != self.layers.len() {
            return Err(NetworkError::ShapeMismatch(format!(
                "{} parameter sets for {} layers",
                self.params.len(),
                self.layers.len()
            )));
        }
        for (index, (layer, params)) in self.layers.iter().zip(&self.params).enumerate() {
            let expected = layer.param_shapes();
            let actual: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
            if expected != actual {
                return Err(NetworkError::InvalidLayer {
                    index,
                    reason: format!("expected parameter shapes {expected:?}, got {actual:?}"),
                });
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epochs_trained(&self) -> u64 {
        self.epochs_trained
    }

    pub fn set_epochs_trained(&mut self, epochs: u64) {
        self.epochs_trained = epochs;
    }

    pub fn output_shape(&self) -> Vec<usize> {
        infer_shapes(self.input_shape, &self.layers)
            .expect("validated at construction")
            .pop()
            .expect("validated at construction")
    }

    pub fn output_kind(&self) -> OutputKind {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Sigmoid) => OutputKind::Segmentation,
            Some(LayerKind::Softmax) => OutputKind::Classification {
                classes: self.output_shape()[0],
            },
            _ => OutputKind::Raw,
        }
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::Dropout { rate } if rate > 0.0))
    }

    pub fn set_trainable(&mut self, layer: usize, trainable: bool) {
        self.layers[layer].trainable = trainable;
    }

    /// Sets the trainable flag on every conv layer.
    pub fn set_conv_trainable(&mut self, trainable: bool) {
        for layer in &mut self.layers {
            if matches!(layer.kind, LayerKind::Conv { .. }) {
                layer.trainable = trainable;
            }
        }
    }

    /// Replaces one layer's parameters. Shapes must match the layer spec.
    pub fn set_params(&mut self, layer: usize, params: Vec<Tensor>) -> Result<(), NetworkError> {
        let expected = self.layers[layer].param_shapes();
        let actual: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
        if expected != actual {
            return Err(NetworkError::InvalidLayer {
                index: layer,
                reason: format!("expected parameter shapes {expected:?}, got {actual:?}"),
            });
        }
        self.params[layer] = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }

    /// Swaps the final dense layer for a freshly initialized one with
    /// `n_classes` outputs. Used after feature pre-training.
    pub fn replace_head(&mut self, n_classes: usize, seed: u64) -> Result<(), NetworkError> {
        let head = self
            .layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .ok_or_else(|| NetworkError::ShapeMismatch("network has no dense head".into()))?;
        let inputs = match self.layers[head].kind {
            LayerKind::Dense { inputs, .. } => inputs,
            _ => unreachable!(),
        };
        let mut layers = self.layers.clone();
        layers[head].kind = LayerKind::Dense {
            inputs,
            outputs: n_classes,
        };
        infer_shapes(self.input_shape, &layers)?;
        let fresh = Network::new(self.arch.clone(), self.input_shape, layers.clone(), seed)?;
        self.layers = layers;
        self.params[head] = fresh.params[head].clone();
        Ok(())
    }

    /// Forward pass without recording gradients.
    pub fn forward(
        &self,
        input: &Tensor,
        mode: ForwardMode,
        rng: &mut RngStream,
    ) -> Result<Tensor, NetworkError> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let trace = self.forward_on_tape(&mut tape, x, mode, rng, false)?;
        Ok(tape.value(trace.output).clone())
    }

    /// Forward pass returning both the squashed output and the pre-activation logits.
    pub fn forward_with_logits(
        &self,
        input: &Tensor,
        mode: ForwardMode,
        rng: &mut RngStream,
    ) -> Result<(Tensor, Tensor), NetworkError> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let trace = self.forward_on_tape(&mut tape, x, mode, rng, false)?;
        Ok((
            tape.value(trace.output).clone(),
            tape.value(trace.logits).clone(),
        ))
    }

    /// Records a differentiable forward pass on `tape`. Parameters are added as
    /// leaves that require gradients iff `param_grads`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: ForwardMode,
        rng: &mut RngStream,
        param_grads: bool,
    ) -> Result<ForwardTrace, NetworkError> {
        let in_shape = tape.value(input).shape();
        if in_shape != self.input_shape {
            return Err(NetworkError::ShapeMismatch(format!(
                "network expects input {:?}, got {in_shape:?}",
                self.input_shape
            )));
        }
        let params: Vec<Vec<Var>> = self
            .params
            .iter()
            .map(|ps| {
                ps.iter()
                    .map(|p| tape.leaf(p.clone().with_requires_grad(param_grads)))
                    .collect()
            })
            .collect();
        let stochastic = mode == ForwardMode::Stochastic;
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut current = input;
        let mut logits = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let p = &params[i];
            current = match layer.kind {
                LayerKind::Conv {
                    stride, padding, ..
                } => tape.conv2d(current, p[0], p[1], stride, padding)?,
                LayerKind::Relu => tape.relu(current)?,
                LayerKind::Sigmoid => {
                    logits = current;
                    tape.sigmoid(current)?
                }
                LayerKind::MaxPool => tape.max_pool2d(current)?,
                LayerKind::Upsample => tape.upsample2d_nearest(current)?,
                LayerKind::ConcatSkip { source } => {
                    tape.concat_channels(current, outputs[source])?
                }
                LayerKind::Dropout { rate } => tape.dropout(current, rate, rng, stochastic)?,
                LayerKind::Dense { .. } => tape.dense(current, p[0], p[1])?,
                LayerKind::Flatten => tape.flatten(current)?,
                LayerKind::Softmax => {
                    logits = current;
                    tape.softmax(current)?
                }
            };
            outputs.push(current);
        }
        if !matches!(
            self.layers.last().map(|l| &l.kind),
            Some(LayerKind::Sigmoid | LayerKind::Softmax)
        ) {
            logits = current;
        }
        Ok(ForwardTrace {
            output: current,
            logits,
            params,
        })
    }
}

/// Symbolic shape propagation; returns the output shape of every layer.
pub fn infer_shapes(
    input_shape: [usize; 3],
    layers: &[LayerSpec],
) -> Result<Vec<Vec<usize>>, NetworkError> {
    if input_shape.contains(&0) {
        return Err(NetworkError::ShapeMismatch(format!(
            "input shape {input_shape:?} has a zero dimension"
        )));
    }
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    let mut cur = input_shape.to_vec();
    for (index, layer) in layers.iter().enumerate() {
        let bad = |reason: String| NetworkError::InvalidLayer { index, reason };
        let chw = |s: &[usize]| -> Result<(usize, usize, usize), NetworkError> {
            match *s {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(bad(format!("expects a [C,H,W] input, got {s:?}"))),
            }
        };
        cur = match layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = chw(&cur)?;
                if c != in_channels {
                    return Err(bad(format!(
                        "expects {in_channels} input channels, got {c}"
                    )));
                }
                if stride == 0 || kernel == 0 || out_channels == 0 {
                    return Err(bad(
                        "kernel, stride and channel counts must be positive".into()
                    ));
                }
                let extent = |e: usize| -> Result<usize, NetworkError> {
                    let padded = e + 2 * padding;
                    if kernel > padded || !(padded - kernel).is_multiple_of(stride) {
                        return Err(bad(format!(
                            "kernel {kernel} stride {stride} padding {padding} does not tile extent {e}"
                        )));
                    }
                    Ok((padded - kernel) / stride + 1)
                };
                vec![out_channels, extent(h)?, extent(w)?]
            }
            LayerKind::Relu | LayerKind::Sigmoid => cur,
            LayerKind::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
                }
                cur
            }
            LayerKind::MaxPool => {
                let (c, h, w) = chw(&cur)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(bad(format!("cannot pool odd extent {h}x{w}")));
                }
                vec![c, h / 2, w / 2]
            }
            LayerKind::Upsample => {
                let (c, h, w) = chw(&cur)?;
                vec![c, 2 * h, 2 * w]
            }
            LayerKind::ConcatSkip { source } => {
                if source >= index {
                    return Err(bad(format!("skip source {source} is not an earlier layer")));
                }
                let (c, h, w) = chw(&cur)?;
                let (sc, sh, sw) = chw(&shapes[source])?;
                if (h, w) != (sh, sw) {
                    return Err(bad(format!("skip source is {sh}x{sw}, current is {h}x{w}")));
                }
                vec![c + sc, h, w]
            }
            LayerKind::Dense { inputs, outputs } => {
                if cur.len() != 1 || cur[0] != inputs {
                    return Err(bad(format!("dense expects [{inputs}], got {cur:?}")));
                }
                if outputs == 0 {
                    return Err(bad("dense needs at least one output".into()));
                }
                vec![outputs]
            }
            LayerKind::Flatten => vec![cur.iter().product()],
            LayerKind::Softmax => {
                if cur.len() != 1 {
                    return Err(bad(format!("softmax expects a 1-D input, got {cur:?}")));
                }
                cur
            }
        };
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

fn conv3(in_channels: usize, out_channels: usize) -> LayerKind {
    LayerKind::Conv {
        in_channels,
        out_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    }
}

fn check_divisible(input: [usize; 3], divisor: usize) -> Result<(), NetworkError> {
    let [_, height, width] = input;
    if height == 0 || width == 0 || height % divisor != 0 || width % divisor != 0 {
        return Err(NetworkError::IndivisibleInput {
            height,
            width,
            divisor,
        });
    }
    Ok(())
}

/// Two-level U-Net with nine weighted conv layers:
/// `enc(b) x2 | pool | enc(2b) x2 | pool | bottleneck(4b) x2 | up+skip | dec(2b) | up+skip | dec(b) | 1x1 head`.
/// Dropout follows every conv block; the head is a sigmoid.
pub fn build_unet(
    base_channels: usize,
    dropout_rate: f64,
    input_shape: [usize; 3],
    seed: u64,
) -> Result<Network, NetworkError> {
    check_divisible(input_shape, 4)?;
    let b = base_channels;
    let c_in = input_shape[0];
    let drop = LayerKind::Dropout { rate: dropout_rate };
    let kinds = vec![
        conv3(c_in, b), // 0
        LayerKind::Relu,
        conv3(b, b), // 2
        LayerKind::Relu,
        drop.clone(), // 4: first skip source
        LayerKind::MaxPool,
        conv3(b, 2 * b), // 6
        LayerKind::Relu,
        conv3(2 * b, 2 * b), // 8
        LayerKind::Relu,
        drop.clone(), // 10: second skip source
        LayerKind::MaxPool,
        conv3(2 * b, 4 * b), // 12
        LayerKind::Relu,
        conv3(4 * b, 4 * b), // 14
        LayerKind::Relu,
        drop.clone(),
        LayerKind::Upsample,
        LayerKind::ConcatSkip { source: 10 },
        conv3(6 * b, 2 * b), // 19
        LayerKind::Relu,
        drop.clone(),
        LayerKind::Upsample,
        LayerKind::ConcatSkip { source: 4 },
        conv3(3 * b, b), // 24
        LayerKind::Relu,
        drop,
        LayerKind::Conv {
            in_channels: b,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        },
        LayerKind::Sigmoid,
    ];
    Network::new(
        "unet",
        input_shape,
        kinds.into_iter().map(LayerSpec::new).collect(),
        seed,
    )
}

pub const CLASSIFIER_BASE_CHANNELS: usize = 8;

/// VGG-style classifier: three `conv-conv-pool` stages doubling channels, all
/// frozen, then `flatten | dropout | dense (trainable) | softmax`.
pub fn build_classifier(
    n_classes: usize,
    input_shape: [usize; 3],
    dropout_rate: f64,
    seed: u64,
) -> Result<Network, NetworkError> {
    check_divisible(input_shape, 8)?;
    if n_classes < 2 {
        return Err(NetworkError::ShapeMismatch(format!(
            "a classifier needs at least 2 classes, got {n_classes}"
        )));
    }
    let [c_in, h, w] = input_shape;
    let mut layers = Vec::new();
    let mut channels = c_in;
    let mut width = CLASSIFIER_BASE_CHANNELS;
    for _ in 0..3 {
        layers.push(LayerSpec::frozen(conv3(channels, width)));
        layers.push(LayerSpec::new(LayerKind::Relu));
        layers.push(LayerSpec::frozen(conv3(width, width)));
        layers.push(LayerSpec::new(LayerKind::Relu));
        layers.push(LayerSpec::new(LayerKind::MaxPool));
        channels = width;
        width *= 2;
    }
    let features = channels * (h / 8) * (w / 8);
    layers.push(LayerSpec::new(LayerKind::Flatten));
    layers.push(LayerSpec::new(LayerKind::Dropout { rate: dropout_rate }));
    layers.push(LayerSpec::new(LayerKind::Dense {
        inputs: features,
        outputs: n_classes,
    }));
    layers.push(LayerSpec::new(LayerKind::Softmax));
    Network::new("vgg_classifier", input_shape, layers, seed)
}

/// `flatten | dense` with the given weights: a linear function of the input.
pub fn build_linear_probe(
    input_shape: [usize; 3],
    weights: Tensor,
    bias: Tensor,
) -> Result<Network, NetworkError> {
    let n: usize = input_shape.iter().product();
    let m = match weights.shape() {
        &[m, cols] if cols == n => m,
        other => {
            return Err(NetworkError::ShapeMismatch(format!(
                "probe weights {other:?} incompatible with {n} inputs"
            )))
        }
    };
    let layers = vec![
        LayerSpec::new(LayerKind::Flatten),
        LayerSpec::new(LayerKind::Dense {
            inputs: n,
            outputs: m,
        }),
    ];
    let mut net = Network::new("linear_probe", input_shape, layers, 0)?;
    net.set_params(1, vec![weights, bias])?;
    Ok(net)
}
