//! The subcommands behind the `midlevel` binary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use midlevel_core::datamodel::{generate_synthetic_dataset, Split};
use midlevel_core::rng::{tags, uniform_values};
use midlevel_core::detectors::score_patches;
use midlevel_core::embednet::{compare_with_finite_differences, EmbedNetwork, Target};
use midlevel_core::pipeline::{holistic_baseline, Observer, Pipeline, Stage};

use crate::config::{gradcheck_arch, Config, ConfigError};
use crate::container::ContainerError;
use crate::manifest::{dataset_manifest, unix_now, RunManifest, VERSION};
use crate::{csv, persist};

pub const DATASET_FILE: &str = "dataset.bin";
pub const BUNDLE_FILE: &str = "bundle.bin";

/// Failure of one command, carrying its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Collapse(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => 2,
            CliError::Config(_) => 3,
            CliError::Collapse(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}

impl From<midlevel_core::Error> for CliError {
    fn from(e: midlevel_core::Error) -> Self {
        match e {
            midlevel_core::Error::Collapse { .. } | midlevel_core::Error::NoClusters { .. } => {
                CliError::Collapse(e.to_string())
            }
            midlevel_core::Error::Config { .. } => CliError::Config(ConfigError::from_core(e, "arch", "train")),
            other => CliError::Failed(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    if e.kind() == io::ErrorKind::NotFound {
        CliError::MissingFile(path.to_path_buf())
    } else {
        CliError::Failed(format!("{}: {e}", path.display()))
    }
}

fn container_err(path: &Path, e: ContainerError) -> CliError {
    match e {
        ContainerError::Io(e) => io_err(path, e),
        ContainerError::Format(m) => CliError::Failed(format!("{}: {m}", path.display())),
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn load_config(path: &Path) -> Result<Config, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(Config::parse(&text)?)
}

/// Accepts a dataset file or a directory holding `dataset.bin`.
fn dataset_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(DATASET_FILE)
    } else {
        data.to_path_buf()
    }
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Writer { dir, written: Vec::new() })
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }
}

pub fn gen_data(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let spec = cfg.spec()?;
    let (samples, oracle) = generate_synthetic_dataset(&cfg.synth, &spec)?;
    let mut w = Writer::new(out)?;
    let path = out.join(DATASET_FILE);
    persist::save_dataset(&path, &samples, &spec, &oracle).map_err(|e| container_err(&path, e))?;
    w.text(
        "dataset_manifest.txt",
        &dataset_manifest(&samples, &spec, cfg.synth.seed, &cfg.to_text()),
    )?;
    log::info!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

/// Logs one structured line per completed stage.
struct ProgressLog {
    start: Instant,
}

impl Observer for ProgressLog {
    fn stage(&mut self, iteration: usize, stage: Stage, metric: Option<f64>) {
        let metric = metric.map_or_else(String::new, |m| format!("{m}"));
        log::info!(
            "iteration={iteration} stage={} wall_s={:.3} metric={metric}",
            stage.as_str(),
            self.start.elapsed().as_secs_f64()
        );
    }
}

pub fn run(config: &Path, data: &Path, out: &Path, deterministic: bool) -> Result<(), CliError> {
    let started_unix = unix_now();
    require(config)?;
    let data_file = dataset_path(data);
    require(&data_file)?;
    let cfg = load_config(config)?;
    let (samples, spec, oracle) = persist::load_dataset(&data_file).map_err(|e| container_err(&data_file, e))?;
    if deterministic {
        log::info!("deterministic mode: every stage runs on one thread");
    }

    let mut pipeline = Pipeline::new(&samples, &spec, &cfg.pipeline)?.with_oracle(&oracle);
    let outcome = pipeline.run(&mut ProgressLog { start: Instant::now() })?;
    let bundle = &outcome.bundle;

    let mut w = Writer::new(out)?;
    let bundle_path = out.join(BUNDLE_FILE);
    persist::save_bundle(&bundle_path, bundle).map_err(|e| container_err(&bundle_path, e))?;
    w.written.push(BUNDLE_FILE.to_string());

    let names = spec.class_names();
    w.text("eval_iterations.csv", &csv::eval_reports(names, &outcome.reports))?;
    let has_test = samples.iter().any(|s| s.split == Split::Test);
    if has_test {
        let test = bundle.evaluate(&samples, Split::Test, Some(&oracle))?;
        w.text("eval_test.csv", &csv::eval_reports(names, &[test]))?;
        let holistic = pipeline
            .holistic()
            .ok_or_else(|| CliError::Failed("pipeline has no holistic network".into()))?;
        let baseline = holistic_baseline(
            &samples,
            &spec,
            holistic,
            &cfg.pipeline.classifier,
            cfg.pipeline.seed,
            Split::Test,
        )?;
        w.text("baseline_test.csv", &csv::eval_reports(names, &[baseline]))?;
        let test_samples: Vec<_> = samples.iter().filter(|s| s.split == Split::Test).collect();
        let owned: Vec<_> = test_samples.iter().map(|s| (*s).clone()).collect();
        let reps = bundle.represent_all(&owned)?;
        w.text("representations_test.csv", &csv::representations(&test_samples, &reps))?;
    }
    w.text("cluster_membership.csv", &csv::membership(&bundle.clusters))?;
    let scores = score_patches(&outcome.best.models(), &outcome.best.features)?;
    w.text(
        "cluster_scores.csv",
        &csv::cluster_scores(&bundle.clusters, &outcome.best.features, &scores),
    )?;

    let mut history = vec![outcome.best.initial_metric];
    history.extend(outcome.reports.iter().skip(1).filter_map(|r| r.map));
    let manifest = RunManifest {
        version: VERSION.to_string(),
        config_text: cfg.to_text(),
        seed: cfg.pipeline.seed,
        deterministic,
        data: data_file.display().to_string(),
        started_unix,
        finished_unix: unix_now(),
        metric_history: history,
        selected_iteration: bundle.iteration,
        outputs: w.written.clone(),
    };
    w.text("run_manifest.txt", &manifest.to_text())?;
    log::info!(
        "selected iteration {} with validation metric {}",
        bundle.iteration,
        bundle.validation_metric
    );
    Ok(())
}

/// Returns the EvalReport CSV of `split`.
pub fn eval(bundle: &Path, data: &Path, split: Split) -> Result<String, CliError> {
    require(bundle)?;
    let data_file = dataset_path(data);
    require(&data_file)?;
    let b = persist::load_bundle(bundle).map_err(|e| container_err(bundle, e))?;
    let (samples, spec, oracle) = persist::load_dataset(&data_file).map_err(|e| container_err(&data_file, e))?;
    if spec != b.spec {
        return Err(CliError::Failed("dataset categories differ from the bundle's".into()));
    }
    let report = b.evaluate(&samples, split, Some(&oracle))?;
    Ok(csv::eval_reports(spec.class_names(), &[report]))
}

pub fn export_clusters(bundle: &Path, out: &Path) -> Result<(), CliError> {
    use std::fmt::Write as _;
    require(bundle)?;
    let b = persist::load_bundle(bundle).map_err(|e| container_err(bundle, e))?;
    let mut w = Writer::new(out)?;
    let names = b.spec.class_names();
    let mut report = String::new();
    for c in &b.clusters {
        let _ = writeln!(report, "cluster {}", c.id);
        let _ = writeln!(report, "  category: {}", names.get(c.category).map_or("?", String::as_str));
        let _ = writeln!(report, "  members: {}", c.members.len());
        for p in &c.patterns {
            let _ = writeln!(
                report,
                "  pattern: items={:?} support={} confidence={}",
                p.itemset, p.support, p.confidence
            );
        }
        let top: Vec<String> = b
            .exemplars
            .iter()
            .filter(|e| e.cluster == c.id)
            .map(|e| format!("{} ({})", e.patch, e.score))
            .collect();
        let _ = writeln!(report, "  top members: {}", top.join(", "));
    }
    w.text("clusters.txt", &report)?;
    w.text("cluster_membership.csv", &csv::membership(&b.clusters))?;

    let tiles = out.join("tiles");
    fs::create_dir_all(&tiles).map_err(|e| io_err(&tiles, e))?;
    let arch = b.network.arch();
    let side = arch.patch_side;
    let mut rank = std::collections::BTreeMap::new();
    for e in &b.exemplars {
        let r = rank.entry(e.cluster).or_insert(0usize);
        // channels stacked vertically, one grid row per line
        let mut grid = String::new();
        for row in e.pixels.chunks(side) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(grid, "{}", cells.join(","));
        }
        w.text(&format!("tiles/cluster{}_rank{}.csv", e.cluster, r), &grid)?;
        *r += 1;
    }
    Ok(())
}

/// Largest relative error between analytic and central-difference
/// gradients, over up to `per_block` parameters of every weight and bias
/// block, for both loss kinds.
pub fn gradcheck(config: &Path, per_block: usize) -> Result<f64, CliError> {
    let cfg = load_config(config)?;
    let arch = gradcheck_arch(&cfg);
    let net = EmbedNetwork::init(&arch, cfg.pipeline.seed)?;
    // a generic input point: clipped pixels put ReLU and max-pool kinks
    // within reach of the finite-difference step
    let seed = cfg.pipeline.seed;
    let patch = uniform_values(seed, tags::GRADCHECK_INPUTS, arch.patch_input_len(), -1.0, 1.0);
    let context = uniform_values(seed, tags::GRADCHECK_INPUTS + 1, arch.context_input_len(), -1.0, 1.0);

    let layout = net.layout();
    let mut blocks = layout.conv_ranges();
    for d in &layout.head {
        blocks.push(d.weights.clone());
        blocks.push(d.bias.clone());
    }
    let mut indices = Vec::new();
    for b in blocks {
        let n = b.len();
        let take = per_block.min(n).max(1);
        indices.extend((0..take).map(|i| b.start + i * n / take));
    }
    indices.sort_unstable();
    indices.dedup();

    let classes = arch.outputs;
    let signed: Vec<i8> = (0..classes).map(|i| [1, -1, 0][i % 3]).collect();
    let mut worst: f64 = 0.0;
    for (name, target) in [
        ("softmax", Target::Class(classes - 1)),
        ("per_class_cross_entropy", Target::from_signed(&signed, cfg.pipeline.unspecified_fill)),
    ] {
        let (_, grad) = net.loss_and_gradient(&patch, &context, &target)?;
        let err = compare_with_finite_differences(&net, &patch, &context, &target, &grad, &indices, 1e-5)?;
        log::info!("loss={name} parameters_checked={} max_relative_error={err:e}", indices.len());
        worst = worst.max(err);
    }
    Ok(worst)
}
