//! Small convolutional networks with Monte-Carlo dropout uncertainty maps and
//! gradient-based saliency maps.

pub mod autodiff;
pub mod data;
mod kernels;
pub mod network;
pub mod pipeline;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod training;
pub mod uncertainty;

pub use autodiff::{Activation, ReduceKind, ReluBackwardMode, Tape, Var};
pub use network::{
    build_classifier, build_linear_probe, build_unet, ForwardMode, LayerKind, LayerSpec, Network,
    NetworkError, OutputKind,
};
pub use rng::RngStream;
pub use saliency::{Method, SaliencyError, SaliencyMap, SaliencyTarget};
pub use tensor::{Tensor, TensorError};
pub use training::{EpochReport, EvalReport, Example, LossKind, Target, TrainConfig, TrainError};
pub use uncertainty::{Decomposition, McSampleSet, UncertaintyError, UncertaintyResult};
