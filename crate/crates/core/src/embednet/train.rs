use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::network::{ConvCache, EmbedNetwork, Target};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax cross-entropy over mutually exclusive labels.
    Softmax,
    /// Independent sigmoid cross-entropy per output, skipping masked entries.
    PerClassCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Only the output layer is updated (the problem is then convex).
    pub final_layer_only: bool,
}

impl Default for TrainConfig {
    /// Fine-tuning settings: learning rate 1e-4, batch 100.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 100,
            epochs: 10,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss: LossKind::Softmax,
            seed: 0,
            final_layer_only: false,
        }
    }
}

impl TrainConfig {
    /// Settings for training the micro networks from random initialization.
    pub fn from_scratch() -> Self {
        TrainConfig {
            learning_rate: 0.02,
            batch_size: 32,
            epochs: 12,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0,1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// One supervised example. `context` indexes [`TrainingSet::contexts`], so
/// patches of the same box share one context-stream pass per minibatch.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub patch: &'a [f64],
    pub context: usize,
    pub target: Target,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingSet<'a> {
    pub contexts: Vec<&'a [f64]>,
    pub examples: Vec<Example<'a>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Mean example loss of each epoch, measured on the fly.
    pub epoch_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Minibatch SGD with momentum and weight decay (biases are not decayed).
///
/// Single-threaded and deterministic: the example order of each epoch comes
/// from the configured seed.
pub fn train(net: &mut EmbedNetwork, data: &TrainingSet<'_>, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.examples.is_empty() {
        return Err(Error::State("training set is empty".into()));
    }
    for ex in &data.examples {
        let ctx = data
            .contexts
            .get(ex.context)
            .ok_or_else(|| Error::shape("example references a missing context"))?;
        net.check_inputs(ex.patch, ctx)?;
        net.check_target(&ex.target)?;
        match (&ex.target, cfg.loss) {
            (Target::Class(_) | Target::Soft(_), LossKind::Softmax)
            | (Target::Multi { .. }, LossKind::PerClassCrossEntropy) => {}
            _ => return Err(Error::shape("target kind does not match the configured loss")),
        }
    }
    if cfg.loss == LossKind::PerClassCrossEntropy && data.examples.iter().all(|e| e.target.supervised_entries() == 0) {
        return Err(Error::State("no supervised entries: every target is unspecified".into()));
    }

    let n_params = net.param_count();
    let update: core::ops::Range<usize> = if cfg.final_layer_only {
        let last = net.layout().final_layer();
        last.weights.start..last.bias.end
    } else {
        0..n_params
    };
    let decay_mask: Vec<bool> = (0..n_params).map(|i| !net.layout().is_bias(i)).collect();
    let mut velocity = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..data.examples.len()).collect();
    let mut rng = rng::stream(cfg.seed, rng::tags::PATCH_TRAIN);
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let mut groups: Vec<(usize, Vec<ConvCache>, Vec<f64>, Vec<f64>)> = Vec::new();
            for &i in batch {
                let ex = &data.examples[i];
                let g = match groups.iter().position(|g| g.0 == ex.context) {
                    Some(g) => g,
                    None => {
                        let mut cache = Vec::new();
                        let feats = net.context_forward_cached(data.contexts[ex.context], &mut cache);
                        let zeros = vec![0.0; feats.len()];
                        groups.push((ex.context, cache, feats, zeros));
                        groups.len() - 1
                    }
                };
                let (loss, dctx) = net.example_backward(ex.patch, &groups[g].2, &ex.target, &mut grad);
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, loss });
                }
                total += loss;
                for (a, d) in groups[g].3.iter_mut().zip(&dctx) {
                    *a += d;
                }
            }
            for (_, cache, _, dctx) in groups {
                net.context_backward(&cache, dctx, &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            let params = net.params_mut();
            for i in update.clone() {
                let mut g = grad[i] * scale;
                if decay_mask[i] {
                    g += cfg.weight_decay * params[i];
                }
                velocity[i] = cfg.momentum * velocity[i] - cfg.learning_rate * g;
                params[i] += velocity[i];
            }
        }
        let mean = total / data.examples.len() as f64;
        if !mean.is_finite() || net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        history.epoch_losses.push(mean);
    }
    Ok(history)
}

/// Mean loss of the current network over a training set.
pub fn mean_loss(net: &EmbedNetwork, data: &TrainingSet<'_>) -> Result<f64> {
    if data.examples.is_empty() {
        return Err(Error::State("training set is empty".into()));
    }
    let mut total = 0.0;
    for ex in &data.examples {
        total += net.loss(ex.patch, data.contexts[ex.context], &ex.target)?;
    }
    Ok(total / data.examples.len() as f64)
}
