//! Human-readable `key = value` manifests written next to outputs.

use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use midlevel_core::datamodel::{LabelSpec, PersonSample, Split};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Record of one `run` invocation. The config echo alone reproduces the run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub version: String,
    pub config_text: String,
    pub seed: u64,
    pub deterministic: bool,
    pub data: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Validation metric per iteration, starting with iteration 0.
    pub metric_history: Vec<f64>,
    pub selected_iteration: usize,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version = {}", self.version);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "deterministic = {}", self.deterministic);
        let _ = writeln!(out, "data = {}", self.data);
        let _ = writeln!(out, "started_unix = {}", self.started_unix);
        let _ = writeln!(out, "finished_unix = {}", self.finished_unix);
        for (i, m) in self.metric_history.iter().enumerate() {
            let _ = writeln!(out, "metric.iteration{i} = {m}");
        }
        let _ = writeln!(out, "selected_iteration = {}", self.selected_iteration);
        let _ = writeln!(out, "outputs = {}", self.outputs.join(","));
        out.push_str("# configuration\n");
        for line in self.config_text.lines() {
            let _ = writeln!(out, "config.{line}");
        }
        out
    }
}

pub fn dataset_manifest(samples: &[PersonSample], spec: &LabelSpec, seed: u64, config_text: &str) -> String {
    let count = |split| samples.iter().filter(|s| s.split == split).count();
    let mut out = String::new();
    let _ = writeln!(out, "version = {VERSION}");
    let _ = writeln!(out, "mode = {}", spec.mode().as_str());
    let _ = writeln!(out, "classes = {}", spec.class_names().join(","));
    let _ = writeln!(out, "seed = {seed}");
    let _ = writeln!(out, "samples = {}", samples.len());
    for split in [Split::Train, Split::Val, Split::Test] {
        let _ = writeln!(out, "samples.{} = {}", split.as_str(), count(split));
    }
    out.push_str("# configuration\n");
    for line in config_text.lines() {
        let _ = writeln!(out, "config.{line}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_manifest_lists_history_and_config() {
        let m = RunManifest {
            version: VERSION.into(),
            config_text: "pipeline.seed = 4\n".into(),
            seed: 4,
            deterministic: true,
            data: "d".into(),
            started_unix: 1,
            finished_unix: 2,
            metric_history: vec![0.5, 0.75],
            selected_iteration: 1,
            outputs: vec!["bundle.bin".into(), "eval.csv".into()],
        };
        let text = m.to_text();
        assert!(text.contains("metric.iteration1 = 0.75\n"));
        assert!(text.contains("outputs = bundle.bin,eval.csv\n"));
        assert!(text.contains("config.pipeline.seed = 4\n"));
        assert!(text.starts_with("version = v"));
    }
}
