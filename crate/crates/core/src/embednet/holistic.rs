use alloc::vec::Vec;

use super::arch::NetArch;
use super::network::{EmbedNetwork, Target};
use super::train::{train, Example, LossKind, TrainConfig, TrainingSet};
use crate::datamodel::{LabelSpec, Labels, Mode, PersonSample, Split};
use crate::image::Image;
use crate::rng;
use crate::{Error, Result};

/// Training settings for the whole-box network.
#[derive(Debug, Clone, PartialEq)]
pub struct HolisticConfig {
    /// Output width is replaced by the category count.
    pub arch: NetArch,
    /// The loss is chosen from the label mode.
    pub train: TrainConfig,
    /// Target value stored for unspecified attribute entries (never read by the loss).
    pub unspecified_fill: f64,
}

impl Default for HolisticConfig {
    fn default() -> Self {
        HolisticConfig {
            arch: NetArch::default(),
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::from_scratch()
            },
            unspecified_fill: 0.5,
        }
    }
}

/// Network inputs for an image: the patch-stream input (resized to the patch
/// side, per-channel mean removed) and the context-stream input (resized to
/// the context side, centered).
pub fn image_inputs(image: &Image, arch: &NetArch) -> Result<(Vec<f64>, Vec<f64>)> {
    if image.channels() != arch.in_channels {
        return Err(Error::shape(alloc::format!(
            "image has {} channels, network expects {}",
            image.channels(),
            arch.in_channels
        )));
    }
    Ok((
        normalize_patch(image.resize(arch.patch_side)?.into_data(), arch.in_channels),
        center(image.resize(arch.context_side)?.into_data()),
    ))
}

/// Removes each channel's mean, so the patch stream sees local structure
/// rather than overall brightness.
pub fn normalize_patch(mut pixels: Vec<f64>, channels: usize) -> Vec<f64> {
    let plane = pixels.len() / channels.max(1);
    for ch in pixels.chunks_mut(plane.max(1)) {
        let mean = ch.iter().sum::<f64>() / ch.len() as f64;
        ch.iter_mut().for_each(|p| *p -= mean);
    }
    pixels
}

/// Intensities are shifted from `[0, 1]` to `[-0.5, 0.5]` before entering a network.
pub fn center(mut pixels: Vec<f64>) -> Vec<f64> {
    for p in &mut pixels {
        *p -= 0.5;
    }
    pixels
}

/// Target of one sample under its label mode.
pub fn sample_target(sample: &PersonSample, fill: f64) -> Target {
    match &sample.labels {
        Labels::Action(c) => Target::Class(*c),
        Labels::Attribute(v) => Target::from_signed(v, fill),
    }
}

/// Trains the whole-box network on action (softmax) or attribute
/// (per-class cross-entropy) labels of the training split. Both streams see
/// the box: the patch stream at the patch side, the context stream at the
/// context side.
pub fn train_initial_holistic(samples: &[PersonSample], spec: &LabelSpec, cfg: &HolisticConfig) -> Result<EmbedNetwork> {
    if spec.num_classes() < 2 {
        return Err(Error::config("classes", "at least two categories are required"));
    }
    let arch = cfg.arch.with_outputs(spec.num_classes());
    let train_samples: Vec<&PersonSample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    if train_samples.is_empty() {
        return Err(Error::State("training split is empty".into()));
    }
    let mut inputs = Vec::with_capacity(train_samples.len());
    for s in &train_samples {
        s.validate(spec)?;
        inputs.push(image_inputs(&s.image, &arch)?);
    }
    let mut set = TrainingSet::default();
    for (i, (s, (patch, context))) in train_samples.iter().zip(&inputs).enumerate() {
        set.contexts.push(context);
        set.examples.push(Example {
            patch,
            context: i,
            target: sample_target(s, cfg.unspecified_fill),
        });
    }
    let train_cfg = TrainConfig {
        loss: match spec.mode() {
            Mode::Action => LossKind::Softmax,
            Mode::Attribute => LossKind::PerClassCrossEntropy,
        },
        ..cfg.train.clone()
    };
    let mut net = EmbedNetwork::init(&arch, cfg.train.seed ^ rng::tags::HOLISTIC_INIT)?;
    let history = train(&mut net, &set, &train_cfg)?;
    log::debug!("holistic network trained, final loss {:?}", history.final_loss());
    Ok(net)
}
