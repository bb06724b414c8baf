//! End-to-end recipes shared by the CLI, the acceptance suite and benches.

use serde::{Deserialize, Serialize};

use crate::data::synth::{
    gen_lesions, gen_vessels, LesionMode, LesionSample, SynthError, VesselSample,
};
use crate::network::{build_classifier, build_unet, Network, NetworkError};
use crate::training::{
    pretrain_features, train_with, EpochReport, Example, LossKind, TrainConfig, TrainError,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Segmentation setup for the vessel task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VesselRecipe {
    pub n: usize,
    pub size: usize,
    pub base_channels: usize,
    pub dropout: f64,
    pub data_seed: u64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Default for VesselRecipe {
    fn default() -> Self {
        Self {
            n: 200,
            size: 64,
            base_channels: 8,
            dropout: 0.1,
            data_seed: 7,
            init_seed: 1,
            train: TrainConfig {
                epochs: 30,
                batch_size: 8,
                learning_rate: 3e-3,
                loss: LossKind::Dice,
                ..TrainConfig::default()
            },
        }
    }
}

pub struct TrainedVessels {
    pub net: Network,
    pub reports: Vec<EpochReport>,
    pub samples: Vec<VesselSample>,
}

pub fn vessel_examples(samples: &[VesselSample]) -> Vec<Example> {
    samples.iter().map(VesselSample::example).collect()
}

pub fn train_vessels(
    recipe: &VesselRecipe,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainedVessels, PipelineError> {
    let samples = gen_vessels(recipe.n, recipe.size, recipe.data_seed)?;
    let mut net = build_unet(
        recipe.base_channels,
        recipe.dropout,
        [1, recipe.size, recipe.size],
        recipe.init_seed,
    )?;
    let reports = train_with(
        &mut net,
        &vessel_examples(&samples),
        &recipe.train,
        on_epoch,
    )?;
    Ok(TrainedVessels {
        net,
        reports,
        samples,
    })
}

/// Frozen-feature classifier: the conv stack is first trained on a lesion
/// presence pretext task, then frozen while a fresh head learns the target task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRecipe {
    pub size: usize,
    pub dropout: f64,
    pub init_seed: u64,
    pub pretext_n: usize,
    pub pretext_seed: u64,
    pub pretext: TrainConfig,
    pub n: usize,
    pub mode: LesionMode,
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl Default for ClassifierRecipe {
    fn default() -> Self {
        let ce = TrainConfig {
            loss: LossKind::CrossEntropy,
            ..TrainConfig::default()
        };
        Self {
            size: 32,
            dropout: 0.2,
            init_seed: 3,
            pretext_n: 240,
            pretext_seed: 101,
            pretext: TrainConfig {
                epochs: 8,
                learning_rate: 2e-3,
                ..ce.clone()
            },
            n: 400,
            mode: LesionMode::Quadrant,
            data_seed: 11,
            train: TrainConfig {
                epochs: 25,
                learning_rate: 3e-3,
                ..ce
            },
        }
    }
}

impl ClassifierRecipe {
    pub fn classes(&self) -> usize {
        match self.mode {
            LesionMode::Binary => 2,
            LesionMode::Quadrant => 4,
        }
    }
}

pub fn lesion_examples(samples: &[LesionSample]) -> Vec<Example> {
    samples.iter().map(LesionSample::example).collect()
}

/// Conv features trained on lesion presence; returns a binary classifier
/// whose conv layers are frozen.
pub fn pretrained_features(recipe: &ClassifierRecipe) -> Result<Network, PipelineError> {
    let shape = [1, recipe.size, recipe.size];
    let mut net = build_classifier(2, shape, recipe.dropout, recipe.init_seed)?;
    let pretext = gen_lesions(
        recipe.pretext_n,
        recipe.size,
        LesionMode::Binary,
        recipe.pretext_seed,
    )?;
    pretrain_features(&mut net, &lesion_examples(&pretext), &recipe.pretext)?;
    net.set_epochs_trained(0);
    Ok(net)
}

pub struct TrainedClassifier {
    pub net: Network,
    pub reports: Vec<EpochReport>,
    pub samples: Vec<LesionSample>,
}

/// Pretrains features, swaps in a head for the recipe's task and trains only that head.
pub fn train_classifier(
    recipe: &ClassifierRecipe,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainedClassifier, PipelineError> {
    let mut net = pretrained_features(recipe)?;
    net.replace_head(recipe.classes(), recipe.init_seed.wrapping_add(1))?;
    let samples = gen_lesions(recipe.n, recipe.size, recipe.mode, recipe.data_seed)?;
    let reports = train_with(
        &mut net,
        &lesion_examples(&samples),
        &recipe.train,
        on_epoch,
    )?;
    Ok(TrainedClassifier {
        net,
        reports,
        samples,
    })
}
