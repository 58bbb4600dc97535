//! Training recipes shared by the CLI, the pipeline and the experiments.

use serde::{Deserialize, Serialize};

use super::models::{fit_input, standardize, LandmarkNet};
use super::net::{Network, NetworkSpec};
use super::optim::OptimizerKind;
use super::train::{train, Dataset, Targets, TrainConfig, TrainLog};
use crate::augment::{augment_landmark_corpus, expand_descriptor_set, AugmentSpec};
use crate::error::{Error, Result};
use crate::evalkit::Side;
use crate::imgcore::{flip_horizontal, GrayImage};
use crate::landmarks::LandmarkSet;

fn with_rate(kind: OptimizerKind, rate: Option<f64>) -> OptimizerKind {
    match (kind, rate) {
        (OptimizerKind::Nesterov { momentum, .. }, Some(learning_rate)) => OptimizerKind::Nesterov { learning_rate, momentum },
        (OptimizerKind::Adam { beta1, beta2, epsilon, .. }, Some(learning_rate)) => OptimizerKind::Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        },
        (k, None) => k,
    }
}

fn push_image(inputs: &mut Vec<f32>, img: &GrayImage, size: usize) -> Result<()> {
    inputs.extend(standardize(&fit_input(img, size)?));
    Ok(())
}

/// Descriptor network settings. Defaults are a desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptorTraining {
    pub scale_factor: usize,
    pub input_size: usize,
    /// Augmented copies per image, on top of the image itself.
    pub augment_per_image: usize,
    pub epochs: usize,
    pub max_center_epochs: usize,
    pub patience_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub center_loss_weight: f64,
    pub seed: u64,
}

impl Default for DescriptorTraining {
    fn default() -> Self {
        DescriptorTraining {
            scale_factor: 8,
            input_size: 32,
            augment_per_image: 8,
            epochs: 25,
            max_center_epochs: 10,
            patience_epochs: 3,
            batch_size: 32,
            learning_rate: Some(1e-3),
            center_loss_weight: 0.003,
            seed: 0,
        }
    }
}

/// Drop a trailing classification head, keeping every other parameter.
pub fn without_head(net: &Network<f32>) -> Result<Network<f32>> {
    let mut spec = net.spec().clone();
    if spec.layers.last().map(|l| l.name.as_str()) != Some("head") {
        return Ok(net.clone());
    }
    spec.layers.pop();
    let mut out = Network::zeros(spec)?;
    let owned: Vec<(String, _)> = net.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    out.load_named(&owned)?;
    Ok(out)
}

/// Train on 128×128 normalized ears with subject labels `0..classes`;
/// returns the network without its head.
pub fn train_descriptor_net(images: &[GrayImage], labels: &[usize], opts: &DescriptorTraining) -> Result<(Network<f32>, TrainLog)> {
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let classes = labels.iter().max().map(|&m| m + 1).ok_or(Error::EmptyInput("descriptor training images"))?;
    if classes < 2 {
        return Err(Error::TooFewSamples("descriptor training needs at least 2 subjects".into()));
    }
    let size = opts.input_size;
    let extra = expand_descriptor_set(images, opts.augment_per_image, opts.seed)?;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (i, img) in images.iter().enumerate() {
        push_image(&mut inputs, img, size)?;
        targets.push(labels[i]);
        for copy in &extra[i * opts.augment_per_image..(i + 1) * opts.augment_per_image] {
            push_image(&mut inputs, copy, size)?;
            targets.push(labels[i]);
        }
    }
    let data = Dataset {
        sample_shape: [1, size, size],
        inputs,
        targets: Targets::Classes { classes, labels: targets },
    };
    let spec = NetworkSpec::descriptor(opts.scale_factor, size).with_head(classes);
    let net = Network::new(spec, opts.seed)?;
    let mut config = TrainConfig::descriptor(opts.epochs, opts.seed);
    config.optimizer = with_rate(config.optimizer, opts.learning_rate);
    config.batch_size = opts.batch_size;
    config.max_center_epochs = opts.max_center_epochs;
    config.patience_epochs = opts.patience_epochs;
    config.center_loss_weight = opts.center_loss_weight;
    let trained = train(net, &data, &config)?;
    Ok((without_head(&trained.net)?, trained.log))
}

/// Landmark regressor settings. Defaults are a desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkTraining {
    pub scale_factor: usize,
    pub input_size: usize,
    pub augment: AugmentSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub lr_decay: bool,
    pub seed: u64,
}

impl Default for LandmarkTraining {
    fn default() -> Self {
        LandmarkTraining {
            scale_factor: 8,
            input_size: 48,
            augment: AugmentSpec::stage1().with_out_size(48),
            epochs: 20,
            batch_size: 32,
            learning_rate: Some(0.01),
            lr_decay: true,
            seed: 0,
        }
    }
}

pub fn train_landmark_net(items: &[(GrayImage, LandmarkSet)], opts: &LandmarkTraining) -> Result<(LandmarkNet, TrainLog)> {
    let size = opts.input_size;
    let spec = opts.augment.with_out_size(size);
    let samples = augment_landmark_corpus(items, &spec, opts.seed)?;
    let mut inputs = Vec::with_capacity(samples.len() * size * size);
    let mut targets = Vec::with_capacity(samples.len() * 110);
    for s in &samples {
        inputs.extend(standardize(&s.image));
        targets.extend(s.targets.iter().map(|&v| v as f32));
    }
    let data = Dataset {
        sample_shape: [1, size, size],
        inputs,
        targets: Targets::Values { width: 110, data: targets },
    };
    let net = Network::new(NetworkSpec::landmark(opts.scale_factor, size), opts.seed)?;
    let mut config = TrainConfig::landmark(opts.epochs, opts.seed);
    config.optimizer = with_rate(config.optimizer, opts.learning_rate);
    config.batch_size = opts.batch_size;
    config.lr_decay = opts.lr_decay;
    let trained = train(net, &data, &config)?;
    Ok((LandmarkNet::new(trained.net)?, trained.log))
}

/// Side classifier settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SideTraining {
    pub scale_factor: usize,
    pub input_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Option<f64>,
    pub seed: u64,
}

impl Default for SideTraining {
    fn default() -> Self {
        SideTraining {
            scale_factor: 8,
            input_size: 32,
            epochs: 20,
            batch_size: 32,
            learning_rate: Some(1e-3),
            seed: 0,
        }
    }
}

/// Every labelled image also contributes its mirror with the other label.
pub fn train_side_net(items: &[(GrayImage, Side)], opts: &SideTraining) -> Result<(Network<f32>, TrainLog)> {
    let size = opts.input_size;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (img, side) in items {
        let label = match side {
            Side::Left => 0,
            Side::Right => 1,
            Side::Unknown => continue,
        };
        push_image(&mut inputs, img, size)?;
        labels.push(label);
        push_image(&mut inputs, &flip_horizontal(img), size)?;
        labels.push(1 - label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("side-labelled images"));
    }
    let data = Dataset {
        sample_shape: [1, size, size],
        inputs,
        targets: Targets::Classes { classes: 2, labels },
    };
    let net = Network::new(NetworkSpec::side_classifier(opts.scale_factor, size), opts.seed)?;
    let mut config = TrainConfig::side(opts.epochs, opts.seed);
    config.optimizer = with_rate(config.optimizer, opts.learning_rate);
    config.batch_size = opts.batch_size;
    let trained = train(net, &data, &config)?;
    Ok((trained.net, trained.log))
}
