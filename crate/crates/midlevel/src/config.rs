//! Flat `key = value` configuration covering data generation and the
//! pipeline.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors. Keys not present keep their defaults. [`Config::to_text`]
//! writes every key, and parsing its output reproduces the configuration.

use std::fmt::{Display, Write as _};
use std::path::Path;
use std::str::FromStr;

use midlevel_core::datamodel::{LabelSpec, Mode, SynthConfig};
use midlevel_core::detectors::HarvestPolicy;
use midlevel_core::embednet::{ConvSpec, NetArch};
use midlevel_core::pipeline::PipelineConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Converts a core validation error, renaming its key into this file's
    /// namespace (`net.*` becomes `<arch_prefix>.*`).
    pub fn from_core(err: midlevel_core::Error, arch_prefix: &str, train_prefix: &str) -> Self {
        match err {
            midlevel_core::Error::Config { key, reason } => {
                let key = if let Some(rest) = key.strip_prefix("net.") {
                    format!("{arch_prefix}.{rest}")
                } else if let Some(rest) = key.strip_prefix("train.") {
                    format!("{train_prefix}.{rest}")
                } else if key == "classes" {
                    "spec.classes".to_string()
                } else {
                    key.to_string()
                };
                ConfigError { key, reason }
            }
            other => ConfigError::new("config", other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub mode: Mode,
    pub class_names: Vec<String>,
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            mode: Mode::Action,
            class_names: (0..4).map(|i| format!("c{i}")).collect(),
            synth: SynthConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| ConfigError::new(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(ConfigError::new(key, format!("expected true or false, got `{value}`"))),
    }
}

/// `kernel/out_channels/stride/pool` per layer, comma separated.
fn parse_stream(key: &str, value: &str) -> Result<Vec<ConvSpec>, ConfigError> {
    value
        .split(',')
        .map(|layer| {
            let parts: Vec<&str> = layer.trim().split('/').collect();
            if parts.len() != 4 {
                return Err(ConfigError::new(key, format!("layer `{layer}` is not kernel/out/stride/pool")));
            }
            Ok(ConvSpec::new(
                parse(key, parts[0])?,
                parse(key, parts[1])?,
                parse(key, parts[2])?,
                parse_bool(key, parts[3])?,
            ))
        })
        .collect()
}

fn stream_text(stream: &[ConvSpec]) -> String {
    stream
        .iter()
        .map(|c| format!("{}/{}/{}/{}", c.kernel, c.out_channels, c.stride, u8::from(c.pool)))
        .collect::<Vec<_>>()
        .join(",")
}

fn list_text<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn spec(&self) -> Result<LabelSpec, ConfigError> {
        LabelSpec::new(self.mode, self.class_names.clone()).map_err(|e| ConfigError::from_core(e, "arch", "train"))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut harvest: Option<&str> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::new(line, format!("line {} is not key = value", n + 1)));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::new(key, "key given more than once"));
            }
            if key == "harvest.percentile" || key == "harvest.threshold" {
                if let Some(other) = harvest {
                    return Err(ConfigError::new(key, format!("conflicts with `{other}`")));
                }
                harvest = Some(if key == "harvest.percentile" {
                    "harvest.percentile"
                } else {
                    "harvest.threshold"
                });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Config::parse(&text)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let s = &mut self.synth;
        let p = &mut self.pipeline;
        match key {
            "spec.mode" => {
                self.mode = match value {
                    "action" => Mode::Action,
                    "attribute" => Mode::Attribute,
                    _ => return Err(ConfigError::new(key, "expected action or attribute")),
                }
            }
            "spec.classes" => {
                self.class_names = match value.parse::<usize>() {
                    Ok(count) => (0..count).map(|i| format!("c{i}")).collect(),
                    Err(_) => value.split(',').map(|v| v.trim().to_string()).collect(),
                }
            }
            "synth.n_train" => s.n_train = parse(key, value)?,
            "synth.n_val" => s.n_val = parse(key, value)?,
            "synth.n_test" => s.n_test = parse(key, value)?,
            "synth.box_side" => s.box_side = parse(key, value)?,
            "synth.channels" => s.channels = parse(key, value)?,
            "synth.motifs_per_class" => s.motifs_per_class = parse(key, value)?,
            "synth.motifs_per_sample" => s.motifs_per_sample = parse(key, value)?,
            "synth.motif_side" => s.motif_side = parse(key, value)?,
            "synth.motif_period" => s.motif_period = parse(key, value)?,
            "synth.noise_sigma" => s.noise_sigma = parse(key, value)?,
            "synth.placement_step" => s.placement_step = parse(key, value)?,
            "synth.distractor_pool" => s.distractor_pool = parse(key, value)?,
            "synth.distractors_per_sample" => s.distractors_per_sample = parse(key, value)?,
            "synth.context_cue" => s.context_cue = parse(key, value)?,
            "synth.context_jitter" => s.context_jitter = parse(key, value)?,
            "synth.attribute_rate" => s.attribute_rate = parse(key, value)?,
            "synth.unspecified_rate" => s.unspecified_rate = parse(key, value)?,
            "synth.seed" => s.seed = parse(key, value)?,
            "grid.resize_side" => p.grid.resize_side = parse(key, value)?,
            "grid.scales" => p.grid.scales = parse_list(key, value)?,
            "grid.stride" => p.grid.stride = parse(key, value)?,
            "arch.in_channels" => p.arch.in_channels = parse(key, value)?,
            "arch.patch_side" => p.arch.patch_side = parse(key, value)?,
            "arch.context_side" => p.arch.context_side = parse(key, value)?,
            "arch.patch_stream" => p.arch.patch_stream = parse_stream(key, value)?,
            "arch.context_stream" => p.arch.context_stream = parse_stream(key, value)?,
            "arch.hidden" => p.arch.hidden = parse_list(key, value)?,
            "arch.embed_layer" => p.arch.embed_layer = parse(key, value)?,
            "train.learning_rate" => p.train.learning_rate = parse(key, value)?,
            "train.batch_size" => p.train.batch_size = parse(key, value)?,
            "train.epochs" => p.train.epochs = parse(key, value)?,
            "train.momentum" => p.train.momentum = parse(key, value)?,
            "train.weight_decay" => p.train.weight_decay = parse(key, value)?,
            "train.final_layer_only" => p.train.final_layer_only = parse_bool(key, value)?,
            "holistic.arch.patch_stream" => p.holistic.arch.patch_stream = parse_stream(key, value)?,
            "holistic.arch.context_stream" => p.holistic.arch.context_stream = parse_stream(key, value)?,
            "holistic.arch.hidden" => p.holistic.arch.hidden = parse_list(key, value)?,
            "holistic.arch.embed_layer" => p.holistic.arch.embed_layer = parse(key, value)?,
            "holistic.train.learning_rate" => p.holistic.train.learning_rate = parse(key, value)?,
            "holistic.train.batch_size" => p.holistic.train.batch_size = parse(key, value)?,
            "holistic.train.epochs" => p.holistic.train.epochs = parse(key, value)?,
            "holistic.train.momentum" => p.holistic.train.momentum = parse(key, value)?,
            "holistic.train.weight_decay" => p.holistic.train.weight_decay = parse(key, value)?,
            "mining.k" => p.mining.k = parse(key, value)?,
            "mining.min_support" => p.mining.min_support = parse(key, value)?,
            "mining.min_confidence" => p.mining.min_confidence = parse(key, value)?,
            "mining.max_itemset_size" => p.mining.max_itemset_size = parse(key, value)?,
            "mining.clusters_per_category" => p.mining.clusters_per_category = parse(key, value)?,
            "mining.merge_overlap_threshold" => p.mining.merge_overlap_threshold = parse(key, value)?,
            "mining.max_patterns" => p.mining.max_patterns = parse(key, value)?,
            "detectors.lambda_frac" => p.detectors.lambda_frac = parse(key, value)?,
            "detectors.max_negatives" => p.detectors.max_negatives = parse(key, value)?,
            "harvest.percentile" => p.harvest = HarvestPolicy::Percentile(parse(key, value)?),
            "harvest.threshold" => p.harvest = HarvestPolicy::Absolute(parse(key, value)?),
            "classifier.reg" => p.classifier.reg = parse(key, value)?,
            "classifier.epochs" => p.classifier.epochs = parse(key, value)?,
            "classifier.max_step" => p.classifier.max_step = parse(key, value)?,
            "pipeline.max_iterations" => p.max_iterations = parse(key, value)?,
            "pipeline.convergence_epsilon" => p.convergence_epsilon = parse(key, value)?,
            "pipeline.context_stream" => p.context_stream = parse_bool(key, value)?,
            "pipeline.warm_start" => p.warm_start = parse_bool(key, value)?,
            "pipeline.unspecified_fill" => p.unspecified_fill = parse(key, value)?,
            "pipeline.background_ratio" => p.background_ratio = parse(key, value)?,
            "pipeline.seed" => p.seed = parse(key, value)?,
            _ => return Err(ConfigError::new(key, "unknown key")),
        }
        Ok(())
    }

    /// Copies the input geometry shared by both networks and checks every
    /// invariant.
    pub fn validate(&mut self) -> Result<(), ConfigError> {
        let p = &mut self.pipeline;
        p.holistic.arch.in_channels = p.arch.in_channels;
        p.holistic.arch.patch_side = p.arch.patch_side;
        p.holistic.arch.context_side = p.arch.context_side;
        self.spec()?;
        self.synth
            .validate()
            .map_err(|e| ConfigError::from_core(e, "arch", "train"))?;
        if self.synth.channels != self.pipeline.arch.in_channels {
            return Err(ConfigError::new("arch.in_channels", "must equal synth.channels"));
        }
        let p = &self.pipeline;
        p.holistic
            .arch
            .layout()
            .map_err(|e| ConfigError::from_core(e, "holistic.arch", "holistic.train"))?;
        p.holistic
            .train
            .validate()
            .map_err(|e| ConfigError::from_core(e, "holistic.arch", "holistic.train"))?;
        p.validate().map_err(|e| ConfigError::from_core(e, "arch", "train"))
    }

    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let p = &self.pipeline;
        let (a, h) = (&p.arch, &p.holistic.arch);
        let (t, ht) = (&p.train, &p.holistic.train);
        let m = &p.mining;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("spec.mode", self.mode.as_str().into());
        kv("spec.classes", self.class_names.join(","));
        kv("synth.n_train", s.n_train.to_string());
        kv("synth.n_val", s.n_val.to_string());
        kv("synth.n_test", s.n_test.to_string());
        kv("synth.box_side", s.box_side.to_string());
        kv("synth.channels", s.channels.to_string());
        kv("synth.motifs_per_class", s.motifs_per_class.to_string());
        kv("synth.motifs_per_sample", s.motifs_per_sample.to_string());
        kv("synth.motif_side", s.motif_side.to_string());
        kv("synth.motif_period", s.motif_period.to_string());
        kv("synth.noise_sigma", s.noise_sigma.to_string());
        kv("synth.placement_step", s.placement_step.to_string());
        kv("synth.distractor_pool", s.distractor_pool.to_string());
        kv("synth.distractors_per_sample", s.distractors_per_sample.to_string());
        kv("synth.context_cue", s.context_cue.to_string());
        kv("synth.context_jitter", s.context_jitter.to_string());
        kv("synth.attribute_rate", s.attribute_rate.to_string());
        kv("synth.unspecified_rate", s.unspecified_rate.to_string());
        kv("synth.seed", s.seed.to_string());
        kv("grid.resize_side", p.grid.resize_side.to_string());
        kv("grid.scales", list_text(&p.grid.scales));
        kv("grid.stride", p.grid.stride.to_string());
        kv("arch.in_channels", a.in_channels.to_string());
        kv("arch.patch_side", a.patch_side.to_string());
        kv("arch.context_side", a.context_side.to_string());
        kv("arch.patch_stream", stream_text(&a.patch_stream));
        kv("arch.context_stream", stream_text(&a.context_stream));
        kv("arch.hidden", list_text(&a.hidden));
        kv("arch.embed_layer", a.embed_layer.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.final_layer_only", t.final_layer_only.to_string());
        kv("holistic.arch.patch_stream", stream_text(&h.patch_stream));
        kv("holistic.arch.context_stream", stream_text(&h.context_stream));
        kv("holistic.arch.hidden", list_text(&h.hidden));
        kv("holistic.arch.embed_layer", h.embed_layer.to_string());
        kv("holistic.train.learning_rate", ht.learning_rate.to_string());
        kv("holistic.train.batch_size", ht.batch_size.to_string());
        kv("holistic.train.epochs", ht.epochs.to_string());
        kv("holistic.train.momentum", ht.momentum.to_string());
        kv("holistic.train.weight_decay", ht.weight_decay.to_string());
        kv("mining.k", m.k.to_string());
        kv("mining.min_support", m.min_support.to_string());
        kv("mining.min_confidence", m.min_confidence.to_string());
        kv("mining.max_itemset_size", m.max_itemset_size.to_string());
        kv("mining.clusters_per_category", m.clusters_per_category.to_string());
        kv("mining.merge_overlap_threshold", m.merge_overlap_threshold.to_string());
        kv("mining.max_patterns", m.max_patterns.to_string());
        kv("detectors.lambda_frac", p.detectors.lambda_frac.to_string());
        kv("detectors.max_negatives", p.detectors.max_negatives.to_string());
        match p.harvest {
            HarvestPolicy::Percentile(q) => kv("harvest.percentile", q.to_string()),
            HarvestPolicy::Absolute(th) => kv("harvest.threshold", th.to_string()),
        }
        kv("classifier.reg", p.classifier.reg.to_string());
        kv("classifier.epochs", p.classifier.epochs.to_string());
        kv("classifier.max_step", p.classifier.max_step.to_string());
        kv("pipeline.max_iterations", p.max_iterations.to_string());
        kv("pipeline.convergence_epsilon", p.convergence_epsilon.to_string());
        kv("pipeline.context_stream", p.context_stream.to_string());
        kv("pipeline.warm_start", p.warm_start.to_string());
        kv("pipeline.unspecified_fill", p.unspecified_fill.to_string());
        kv("pipeline.background_ratio", p.background_ratio.to_string());
        kv("pipeline.seed", p.seed.to_string());
        out
    }
}

/// Architecture used by the gradient check: the configured patch network
/// with its output width fixed to the category count.
pub fn gradcheck_arch(cfg: &Config) -> NetArch {
    cfg.pipeline.arch.with_outputs(cfg.class_names.len())
}
