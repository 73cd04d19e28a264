//! The iterative loop.
//!
//! Iteration 0 embeds every training patch with the whole-box network,
//! mines clusters per category, fits detectors and harvests. Each later
//! iteration trains a patch network on the current cluster labels,
//! re-extracts features, reassigns patches to clusters, refits detectors and
//! harvests again. The validation metric (mAP of the final encoder trained on
//! the training split) decides when to stop and which iteration to keep.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::datamodel::{
    AttributeLabel, LabelSpec, Labels, Mode, MotifLabel, MotifOracle, PatchId, PersonSample, SampleId, Split, ABSENT,
    PRESENT, UNSPECIFIED,
};
use crate::detectors::{
    harvest, score_patches, subsample, train_lda, ClusterDetector, DetectorConfig, HarvestPolicy, LdaModel, ScoreMatrix,
};
use crate::embednet::{
    extract_embeddings, image_inputs, normalize_patch, train, train_initial_holistic, EmbedInputs, EmbedNetwork,
    Example, HolisticConfig, LossKind, NetArch, PatchFeatures, Target, TrainConfig, TrainingSet,
};
use crate::encoder::{encode, train_classifier, ClassifierConfig, LinearClassifier};
use crate::metrics::{accuracy, average_precision, mean_average_precision, nmi, purity, EvalReport};
use crate::mining::{binarize, mine_patterns, patterns_to_clusters, update_clusters, ClusterId, MiningConfig, PatternCluster};
use crate::patchgrid::{extract_patches, GridConfig, Window};
use crate::rng::{self, tags};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    /// Patch network; the output width follows the cluster count.
    pub arch: NetArch,
    pub train: TrainConfig,
    pub holistic: HolisticConfig,
    pub mining: MiningConfig,
    pub detectors: DetectorConfig,
    pub harvest: HarvestPolicy,
    pub classifier: ClassifierConfig,
    pub max_iterations: usize,
    /// Smallest validation gain over the previous trained iteration that
    /// continues the loop.
    pub convergence_epsilon: f64,
    /// When false the patch network sees an all-zero context input.
    pub context_stream: bool,
    /// Start each patch network from the previous one (all but the output layer).
    pub warm_start: bool,
    /// Value stored in targets for unspecified attribute entries.
    pub unspecified_fill: f64,
    /// Unclustered training patches added to the patch network's training
    /// set, as a multiple of the member count. They are trained toward no
    /// cluster: a uniform softmax target, or absent for every attribute cluster.
    pub background_ratio: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: GridConfig::default(),
            arch: NetArch::default(),
            train: TrainConfig::from_scratch(),
            holistic: HolisticConfig::default(),
            mining: MiningConfig::default(),
            detectors: DetectorConfig::default(),
            harvest: HarvestPolicy::default(),
            classifier: ClassifierConfig::default(),
            max_iterations: 3,
            convergence_epsilon: 0.002,
            context_stream: true,
            warm_start: false,
            unspecified_fill: 0.5,
            background_ratio: 1.0,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.arch.layout()?;
        self.holistic.arch.layout()?;
        self.train.validate()?;
        self.holistic.train.validate()?;
        self.mining.validate()?;
        self.detectors.validate()?;
        self.harvest.validate()?;
        self.classifier.validate()?;
        if self.max_iterations == 0 {
            return Err(Error::config("pipeline.max_iterations", "must be at least 1"));
        }
        if !(self.background_ratio >= 0.0) || !self.background_ratio.is_finite() {
            return Err(Error::config("pipeline.background_ratio", "must be finite and non-negative"));
        }
        if !(self.convergence_epsilon >= 0.0) {
            return Err(Error::config("pipeline.convergence_epsilon", "must be non-negative"));
        }
        let (a, h) = (&self.arch, &self.holistic.arch);
        if a.in_channels != h.in_channels || a.patch_side != h.patch_side || a.context_side != h.context_side {
            return Err(Error::config(
                "arch.patch_side",
                "patch and holistic networks must share channels and input sides",
            ));
        }
        if self.mining.k > a.embed_dim() || self.mining.k > h.embed_dim() {
            return Err(Error::config("mining.k", "exceeds the embedding dimension"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Holistic,
    Features,
    Mining,
    Detectors,
    Harvest,
    TrainNetwork,
    UpdateClusters,
    Validation,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Holistic => "holistic",
            Stage::Features => "features",
            Stage::Mining => "mining",
            Stage::Detectors => "detectors",
            Stage::Harvest => "harvest",
            Stage::TrainNetwork => "train_network",
            Stage::UpdateClusters => "update_clusters",
            Stage::Validation => "validation",
        }
    }
}

/// Receives one call per completed stage.
pub trait Observer {
    fn stage(&mut self, iteration: usize, stage: Stage, metric: Option<f64>);
}

impl Observer for () {
    fn stage(&mut self, _: usize, _: Stage, _: Option<f64>) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pub iteration: usize,
    pub network: EmbedNetwork,
    /// Embeddings of every training patch under `network`.
    pub features: PatchFeatures,
    /// Sorted by id; ids are `0..clusters.len()`.
    pub clusters: Vec<PatternCluster>,
    /// Parallel to `clusters`.
    pub detectors: Vec<ClusterDetector>,
    pub eliminated: BTreeSet<PatchId>,
    pub classifier: LinearClassifier,
    /// Validation metric of iteration 0.
    pub initial_metric: f64,
    /// Validation metric of iterations `1..=iteration`.
    pub history: Vec<f64>,
    /// Old → new cluster ids applied at the end of each iteration.
    pub id_maps: Vec<BTreeMap<ClusterId, ClusterId>>,
    /// Validation report per iteration, starting with iteration 0.
    pub reports: Vec<EvalReport>,
}

impl PipelineState {
    pub fn metric(&self) -> f64 {
        self.history.last().copied().unwrap_or(self.initial_metric)
    }

    pub fn models(&self) -> Vec<LdaModel> {
        self.detectors.iter().map(|d| d.model.clone()).collect()
    }
}

/// Patch and box inputs of every sample, prepared once.
struct Inputs {
    windows: Vec<Window>,
    /// Per sample, per window: normalized patch at the network's patch side.
    patches: Vec<Vec<Vec<f64>>>,
    /// Per sample: centered box at the patch side and the context side.
    boxes: Vec<(Vec<f64>, Vec<f64>)>,
    zero_context: Vec<f64>,
}

fn sample_patch_inputs(sample: &PersonSample, grid: &GridConfig, arch: &NetArch) -> Result<Vec<Vec<f64>>> {
    extract_patches(sample, grid)?
        .into_iter()
        .map(|p| Ok(normalize_patch(p.pixels.resize(arch.patch_side)?.into_data(), arch.in_channels)))
        .collect()
}

/// Label of a sample for one category as `{+1, -1, 0}`.
fn signed(labels: &Labels, category: usize) -> AttributeLabel {
    match labels {
        Labels::Action(c) => {
            if *c == category {
                PRESENT
            } else {
                ABSENT
            }
        }
        Labels::Attribute(v) => v[category],
    }
}

/// Features of all windows of the listed samples, sample by sample.
fn patch_features(
    net: &EmbedNetwork,
    inputs_patches: &[&Vec<Vec<f64>>],
    contexts: Vec<&[f64]>,
    ids: &[SampleId],
) -> Result<PatchFeatures> {
    let mut inputs = EmbedInputs {
        contexts,
        items: Vec::new(),
    };
    for (k, patches) in inputs_patches.iter().enumerate() {
        for (local, p) in patches.iter().enumerate() {
            inputs.items.push((PatchId::new(ids[k], local as u32), p.as_slice(), k));
        }
    }
    extract_embeddings(net, &inputs)
}

/// Pyramid representation of each listed sample. Feature rows must be
/// grouped by sample in window order, as [`patch_features`] produces them.
fn represent_rows(
    scores: &ScoreMatrix,
    windows: &[Window],
    holistic: &[&[f64]],
    side: usize,
) -> Result<Vec<Vec<f64>>> {
    let k = scores.cluster_ids().len();
    let w = windows.len();
    holistic
        .iter()
        .enumerate()
        .map(|(s, h)| Ok(encode(windows, &scores.data()[s * w * k..(s + 1) * w * k], k, h, side)?.to_vec()))
        .collect()
}

/// Per-class AP, mAP and (action mode) accuracy of class scores.
fn score_report(spec: &LabelSpec, labels: &[&Labels], scores: &[Vec<f64>]) -> Result<(Vec<Option<f64>>, Option<f64>, Option<f64>)> {
    let mut aps = Vec::with_capacity(spec.num_classes());
    for c in 0..spec.num_classes() {
        let mut s = Vec::new();
        let mut pos = Vec::new();
        for (l, sc) in labels.iter().zip(scores) {
            match signed(l, c) {
                PRESENT => pos.push(true),
                ABSENT => pos.push(false),
                _ => continue,
            }
            s.push(sc[c]);
        }
        aps.push(if pos.iter().any(|p| *p) { Some(average_precision(&s, &pos)?) } else { None });
    }
    let acc = match spec.mode() {
        Mode::Action => {
            let pred: Vec<usize> = scores.iter().map(|s| crate::encoder::argmax(s)).collect();
            let truth: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Labels::Action(c) => *c,
                    Labels::Attribute(_) => 0,
                })
                .collect();
            Some(accuracy(&pred, &truth)?)
        }
        Mode::Attribute => None,
    };
    let map = mean_average_precision(&aps);
    Ok((aps, map, acc))
}

/// NMI and purity of cluster memberships against the planted motifs. Each
/// (cluster, member) pair counts once.
pub fn cluster_quality(
    clusters: &[PatternCluster],
    oracle: &MotifOracle,
    grid: &GridConfig,
) -> Result<Option<(f64, f64)>> {
    let windows = grid.windows()?;
    let mut assignment = Vec::new();
    let mut reference: Vec<MotifLabel> = Vec::new();
    for c in clusters {
        for m in &c.members {
            let w = windows
                .get(m.local() as usize)
                .ok_or_else(|| Error::shape(format!("patch {m} is outside the grid")))?;
            assignment.push(c.id);
            reference.push(oracle.label_window(m.sample(), w.row, w.col, w.scale, grid.resize_side));
        }
    }
    if assignment.is_empty() {
        return Ok(None);
    }
    Ok(Some((nmi(&assignment, &reference)?, purity(&assignment, &reference)?)))
}

/// Highest-scoring members of one cluster, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub cluster: ClusterId,
    pub patch: PatchId,
    pub score: f64,
    /// Patch pixels in `[0, 1]`, `channels × side × side`.
    pub pixels: Vec<f64>,
}

/// Exemplars stored per cluster.
pub const EXEMPLARS_PER_CLUSTER: usize = 5;

/// Everything needed to encode and classify new samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub spec: LabelSpec,
    pub grid: GridConfig,
    pub context_stream: bool,
    pub holistic: EmbedNetwork,
    pub network: EmbedNetwork,
    pub clusters: Vec<PatternCluster>,
    pub detectors: Vec<ClusterDetector>,
    pub classifier: LinearClassifier,
    pub iteration: usize,
    pub validation_metric: f64,
    pub exemplars: Vec<Exemplar>,
}

impl ModelBundle {
    pub fn represent(&self, sample: &PersonSample) -> Result<Vec<f64>> {
        Ok(self.represent_all(core::slice::from_ref(sample))?.remove(0))
    }

    pub fn represent_all(&self, samples: &[PersonSample]) -> Result<Vec<Vec<f64>>> {
        let arch = self.network.arch();
        let windows = self.grid.windows()?;
        let zero = vec![0.0; arch.context_input_len()];
        let mut patches = Vec::with_capacity(samples.len());
        let mut boxes = Vec::with_capacity(samples.len());
        for s in samples {
            s.validate(&self.spec)?;
            patches.push(sample_patch_inputs(s, &self.grid, arch)?);
            boxes.push(image_inputs(&s.image, self.holistic.arch())?);
        }
        let contexts: Vec<&[f64]> = boxes
            .iter()
            .map(|b| if self.context_stream { b.1.as_slice() } else { zero.as_slice() })
            .collect();
        let ids: Vec<SampleId> = samples.iter().map(|s| s.id).collect();
        let refs: Vec<&Vec<Vec<f64>>> = patches.iter().collect();
        let features = patch_features(&self.network, &refs, contexts, &ids)?;
        let models: Vec<LdaModel> = self.detectors.iter().map(|d| d.model.clone()).collect();
        let scores = score_patches(&models, &features)?;
        let holistic = boxes
            .iter()
            .map(|(p, c)| Ok(self.holistic.forward(p, c)?.embedding))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let h: Vec<&[f64]> = holistic.iter().map(Vec::as_slice).collect();
        represent_rows(&scores, &windows, &h, self.grid.resize_side)
    }

    /// Class scores of one sample.
    pub fn predict(&self, sample: &PersonSample) -> Result<Vec<f64>> {
        self.classifier.predict(&self.represent(sample)?)
    }

    /// Report on the samples of `split`; cluster quality needs the oracle.
    pub fn evaluate(&self, samples: &[PersonSample], split: Split, oracle: Option<&MotifOracle>) -> Result<EvalReport> {
        let chosen: Vec<PersonSample> = samples.iter().filter(|s| s.split == split).cloned().collect();
        if chosen.is_empty() {
            return Err(Error::State(format!("{} split is empty", split.as_str())));
        }
        let reps = self.represent_all(&chosen)?;
        let scores = reps
            .iter()
            .map(|r| self.classifier.predict(r))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let labels: Vec<&Labels> = chosen.iter().map(|s| &s.labels).collect();
        let (class_ap, map, acc) = score_report(&self.spec, &labels, &scores)?;
        let quality = match oracle {
            Some(o) => cluster_quality(&self.clusters, o, &self.grid)?,
            None => None,
        };
        Ok(EvalReport {
            iteration: self.iteration,
            mode: self.spec.mode(),
            class_ap,
            map,
            accuracy: acc,
            cluster_nmi: quality.map(|q| q.0),
            cluster_purity: quality.map(|q| q.1),
        })
    }
}

/// Outcome of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// State after iteration 0.
    pub initial: PipelineState,
    /// State of the iteration with the best validation metric.
    pub best: PipelineState,
    /// Number of iterations executed after iteration 0.
    pub iterations: usize,
    /// Validation reports of every executed iteration, from iteration 0.
    pub reports: Vec<EvalReport>,
    pub bundle: ModelBundle,
}

/// Data, labels and configuration of one run.
pub struct Pipeline<'a> {
    samples: &'a [PersonSample],
    spec: &'a LabelSpec,
    cfg: PipelineConfig,
    oracle: Option<&'a MotifOracle>,
    holistic: Option<EmbedNetwork>,
    inputs: Inputs,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    index: BTreeMap<SampleId, usize>,
    /// Holistic embedding per sample.
    holistic_embeddings: Vec<Vec<f64>>,
}

impl<'a> Pipeline<'a> {
    pub fn new(samples: &'a [PersonSample], spec: &'a LabelSpec, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut index = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            s.validate(spec)?;
            if index.insert(s.id, i).is_some() {
                return Err(Error::State(format!("duplicate sample id {}", s.id)));
            }
        }
        let train_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].split == Split::Train).collect();
        let val_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].split == Split::Val).collect();
        if train_idx.is_empty() {
            return Err(Error::State("training split is empty".into()));
        }
        if val_idx.is_empty() {
            return Err(Error::State("validation split is empty".into()));
        }
        let mut patches = Vec::with_capacity(samples.len());
        let mut boxes = Vec::with_capacity(samples.len());
        for s in samples {
            if matches!(s.split, Split::Train | Split::Val) {
                patches.push(sample_patch_inputs(s, &cfg.grid, &cfg.arch)?);
                boxes.push(image_inputs(&s.image, &cfg.arch)?);
            } else {
                patches.push(Vec::new());
                boxes.push((Vec::new(), Vec::new()));
            }
        }
        let mut holistic = cfg.holistic.clone();
        holistic.train.seed = cfg.seed;
        holistic.unspecified_fill = cfg.unspecified_fill;
        let cfg = PipelineConfig {
            holistic,
            ..cfg.clone()
        };
        Ok(Pipeline {
            samples,
            spec,
            inputs: Inputs {
                windows: cfg.grid.windows()?,
                patches,
                boxes,
                zero_context: vec![0.0; cfg.arch.context_input_len()],
            },
            cfg,
            oracle: None,
            holistic: None,
            train_idx,
            val_idx,
            index,
            holistic_embeddings: Vec::new(),
        })
    }

    /// Adds planted-motif ground truth to the per-iteration reports.
    pub fn with_oracle(mut self, oracle: &'a MotifOracle) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Whole-box network, once [`Pipeline::initialize`] has run.
    pub fn holistic(&self) -> Option<&EmbedNetwork> {
        self.holistic.as_ref()
    }

    fn contexts(&self, idx: &[usize], context_stream: bool) -> Vec<&[f64]> {
        idx.iter()
            .map(|&i| {
                if context_stream {
                    self.inputs.boxes[i].1.as_slice()
                } else {
                    self.inputs.zero_context.as_slice()
                }
            })
            .collect()
    }

    /// Initial patch features come from the whole-box network with a neutral
    /// (all-zero) context, so they describe the patch alone.
    fn uses_context(&self, iteration: usize) -> bool {
        iteration > 0 && self.cfg.context_stream
    }

    fn features_of(&self, net: &EmbedNetwork, idx: &[usize], context_stream: bool) -> Result<PatchFeatures> {
        let patches: Vec<&Vec<Vec<f64>>> = idx.iter().map(|&i| &self.inputs.patches[i]).collect();
        let ids: Vec<SampleId> = idx.iter().map(|&i| self.samples[i].id).collect();
        patch_features(net, &patches, self.contexts(idx, context_stream), &ids)
    }

    fn labels_of(&self, patch: PatchId) -> &Labels {
        &self.samples[self.index[&patch.sample()]].labels
    }

    /// Negative pool of a category: patches of samples labelled absent, plus
    /// patches of present samples outside every cluster of the category.
    fn negative_pool(&self, features: &PatchFeatures, category: usize, clusters: &[PatternCluster]) -> Vec<PatchId> {
        let clustered: BTreeSet<PatchId> = clusters
            .iter()
            .filter(|c| c.category == category)
            .flat_map(|c| c.members.iter().copied())
            .collect();
        features
            .ids()
            .iter()
            .copied()
            .filter(|p| match signed(self.labels_of(*p), category) {
                ABSENT => true,
                PRESENT => !clustered.contains(p),
                _ => false,
            })
            .collect()
    }

    /// One LDA detector per cluster. Clusters whose detector cannot be fit
    /// are dropped.
    fn fit_detectors(
        &self,
        features: &PatchFeatures,
        clusters: Vec<PatternCluster>,
        stream_tag: u64,
    ) -> Result<(Vec<PatternCluster>, Vec<LdaModel>)> {
        let mut rng = rng::stream(self.cfg.seed, stream_tag);
        let mut pools: BTreeMap<usize, Vec<PatchId>> = BTreeMap::new();
        let mut kept = Vec::new();
        let mut models = Vec::new();
        for c in clusters {
            let pool = pools
                .entry(c.category)
                .or_insert_with(|| self.negative_pool(features, c.category, &[]));
            // members of the cluster itself never serve as negatives
            let members: BTreeSet<PatchId> = c.members.iter().copied().collect();
            let candidates: Vec<PatchId> = pool.iter().copied().filter(|p| !members.contains(p)).collect();
            let negatives = subsample(&candidates, self.cfg.detectors.max_negatives, &mut rng);
            match train_lda(features, c.id, &c.members, &negatives, self.cfg.detectors.lambda_frac) {
                Ok(m) => {
                    models.push(m);
                    kept.push(c);
                }
                Err(Error::DegenerateCluster { cluster, reason }) => {
                    log::warn!("dropping cluster {cluster}: {reason}");
                }
                Err(e) => return Err(e),
            }
        }
        Ok((kept, models))
    }

    /// Detectors, scores and harvest on `features`; returns renumbered
    /// clusters, their detectors, the newly eliminated patches and the id map.
    fn detect_and_harvest(
        &self,
        features: &PatchFeatures,
        clusters: Vec<PatternCluster>,
        stream_tag: u64,
        iteration: usize,
        observer: &mut dyn Observer,
    ) -> Result<(Vec<PatternCluster>, Vec<ClusterDetector>, Vec<PatchId>, BTreeMap<ClusterId, ClusterId>)> {
        let (clusters, models) = self.fit_detectors(features, clusters, stream_tag)?;
        observer.stage(iteration, Stage::Detectors, None);
        let scores = score_patches(&models, features)?;
        let outcome = harvest(&clusters, &scores, self.cfg.harvest)?;
        observer.stage(iteration, Stage::Harvest, None);
        let by_id: BTreeMap<ClusterId, &LdaModel> = models.iter().map(|m| (m.cluster_id, m)).collect();
        let mut out_clusters = Vec::new();
        let mut detectors = Vec::new();
        let mut map = BTreeMap::new();
        let mut surviving = outcome.clusters;
        surviving.sort_by_key(|c| (c.category, c.id));
        for (new, mut c) in surviving.into_iter().enumerate() {
            let new = new as ClusterId;
            let mut model = by_id[&c.id].clone();
            map.insert(c.id, new);
            detectors.push(ClusterDetector {
                threshold: outcome.thresholds[&c.id],
                model: {
                    model.cluster_id = new;
                    model
                },
            });
            c.id = new;
            out_clusters.push(c);
        }
        Ok((out_clusters, detectors, outcome.eliminated, map))
    }

    fn holistic_rows(&self, idx: &[usize]) -> Vec<&[f64]> {
        idx.iter().map(|&i| self.holistic_embeddings[i].as_slice()).collect()
    }

    /// Trains the encoder classifier on the training split and reports on
    /// the validation split.
    fn validate_state(
        &self,
        network: &EmbedNetwork,
        train_features: &PatchFeatures,
        clusters: &[PatternCluster],
        detectors: &[ClusterDetector],
        iteration: usize,
    ) -> Result<(LinearClassifier, EvalReport)> {
        let models: Vec<LdaModel> = detectors.iter().map(|d| d.model.clone()).collect();
        let side = self.cfg.grid.resize_side;
        let train_scores = score_patches(&models, train_features)?;
        let train_reps = represent_rows(
            &train_scores,
            &self.inputs.windows,
            &self.holistic_rows(&self.train_idx),
            side,
        )?;
        let train_labels: Vec<Labels> = self.train_idx.iter().map(|&i| self.samples[i].labels.clone()).collect();
        let classifier = train_classifier(
            &train_reps,
            &train_labels,
            self.spec.mode(),
            self.spec.num_classes(),
            &ClassifierConfig {
                seed: rng::derive(self.cfg.seed, tags::CLASSIFIER),
                ..self.cfg.classifier.clone()
            },
        )?;
        let val_features = self.features_of(network, &self.val_idx, self.uses_context(iteration))?;
        let val_scores = score_patches(&models, &val_features)?;
        let val_reps = represent_rows(&val_scores, &self.inputs.windows, &self.holistic_rows(&self.val_idx), side)?;
        let scores = val_reps
            .iter()
            .map(|r| classifier.predict(r))
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let labels: Vec<&Labels> = self.val_idx.iter().map(|&i| &self.samples[i].labels).collect();
        let (class_ap, map, acc) = score_report(self.spec, &labels, &scores)?;
        let quality = match self.oracle {
            Some(o) => cluster_quality(clusters, o, &self.cfg.grid)?,
            None => None,
        };
        Ok((
            classifier,
            EvalReport {
                iteration,
                mode: self.spec.mode(),
                class_ap,
                map,
                accuracy: acc,
                cluster_nmi: quality.map(|q| q.0),
                cluster_purity: quality.map(|q| q.1),
            },
        ))
    }

    fn metric_of(report: &EvalReport) -> Result<f64> {
        report
            .map
            .ok_or_else(|| Error::Undefined("validation split has no positive for any class".into()))
    }

    /// Holistic network, initial features, mining, detectors and harvest.
    pub fn initialize(&mut self, observer: &mut dyn Observer) -> Result<PipelineState> {
        let holistic = train_initial_holistic(self.samples, self.spec, &self.cfg.holistic)?;
        self.holistic_embeddings = self
            .inputs
            .boxes
            .iter()
            .map(|(p, c)| {
                if p.is_empty() {
                    Ok(Vec::new())
                } else {
                    Ok(holistic.forward(p, c)?.embedding)
                }
            })
            .collect::<Result<_>>()?;
        self.holistic = Some(holistic.clone());
        observer.stage(0, Stage::Holistic, None);

        let features = self.features_of(&holistic, &self.train_idx, self.uses_context(0))?;
        observer.stage(0, Stage::Features, None);

        let mut clusters = Vec::new();
        for category in 0..self.spec.num_classes() {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for (r, id) in features.ids().iter().enumerate() {
                // attribute mining compares present (1) against absent (0)
                let label = match (self.spec.mode(), self.labels_of(*id)) {
                    (Mode::Action, Labels::Action(c)) => *c,
                    (_, l) => match signed(l, category) {
                        PRESENT => 1,
                        ABSENT => 0,
                        _ => continue,
                    },
                };
                rows.push(r);
                labels.push(label);
            }
            let target = match self.spec.mode() {
                Mode::Action => category,
                Mode::Attribute => 1,
            };
            let ids: Vec<PatchId> = rows.iter().map(|&r| features.ids()[r]).collect();
            let subset = features.select(&ids)?;
            let transactions = binarize(&subset, self.cfg.mining.k, &labels)?;
            let patterns = mine_patterns(&transactions, target, &self.cfg.mining);
            if patterns.is_empty() {
                log::warn!("no patterns for category {}", self.spec.class_names()[category]);
            }
            let mut found = patterns_to_clusters(&patterns, &transactions, category, &self.cfg.mining);
            let offset = clusters.len() as ClusterId;
            found.iter_mut().for_each(|c| c.id += offset);
            clusters.extend(found);
        }
        observer.stage(0, Stage::Mining, None);

        let (clusters, detectors, eliminated, map) =
            self.detect_and_harvest(&features, clusters, tags::NEGATIVES, 0, observer)?;
        for category in 0..self.spec.num_classes() {
            if !clusters.iter().any(|c| c.category == category) {
                return Err(Error::NoClusters {
                    category: self.spec.class_names()[category].clone(),
                });
            }
        }
        let (classifier, report) = self.validate_state(&holistic, &features, &clusters, &detectors, 0)?;
        let metric = Self::metric_of(&report)?;
        observer.stage(0, Stage::Validation, Some(metric));
        Ok(PipelineState {
            iteration: 0,
            network: holistic,
            features,
            clusters,
            detectors,
            eliminated: eliminated.into_iter().collect(),
            classifier,
            initial_metric: metric,
            history: Vec::new(),
            id_maps: vec![map],
            reports: vec![report],
        })
    }

    fn training_targets(&self, clusters: &[PatternCluster]) -> BTreeMap<PatchId, Target> {
        let mut out = BTreeMap::new();
        match self.spec.mode() {
            Mode::Action => {
                for c in clusters {
                    for m in &c.members {
                        out.entry(*m).or_insert(Target::Class(c.id as usize));
                    }
                }
            }
            Mode::Attribute => {
                let mut own: BTreeMap<PatchId, BTreeSet<ClusterId>> = BTreeMap::new();
                for c in clusters {
                    for m in &c.members {
                        own.entry(*m).or_default().insert(c.id);
                    }
                }
                for (patch, mine) in own {
                    let labels = self.labels_of(patch);
                    let signed_targets: Vec<AttributeLabel> = clusters
                        .iter()
                        .map(|c| {
                            if mine.contains(&c.id) {
                                PRESENT
                            } else if signed(labels, c.category) == UNSPECIFIED {
                                UNSPECIFIED
                            } else {
                                ABSENT
                            }
                        })
                        .collect();
                    out.insert(patch, Target::from_signed(&signed_targets, self.cfg.unspecified_fill));
                }
            }
        }
        out
    }

    /// Samples unclustered, non-eliminated training patches and gives them
    /// "no cluster" targets.
    fn add_background(&self, targets: &mut BTreeMap<PatchId, Target>, state: &PipelineState, iteration: usize) {
        let wanted = libm::round(self.cfg.background_ratio * targets.len() as f64) as usize;
        if wanted == 0 {
            return;
        }
        let pool: Vec<PatchId> = self
            .train_idx
            .iter()
            .flat_map(|&i| {
                let id = self.samples[i].id;
                (0..self.inputs.patches[i].len()).map(move |l| PatchId::new(id, l as u32))
            })
            .filter(|p| !targets.contains_key(p) && !state.eliminated.contains(p))
            .collect();
        let mut rng = rng::stream(self.cfg.seed, tags::BACKGROUND + iteration as u64);
        let k = state.clusters.len();
        for patch in subsample(&pool, wanted, &mut rng) {
            let target = match self.spec.mode() {
                Mode::Action => Target::Soft(vec![1.0 / k as f64; k]),
                Mode::Attribute => {
                    let labels = self.labels_of(patch);
                    let signed_targets: Vec<AttributeLabel> = state
                        .clusters
                        .iter()
                        .map(|c| if signed(labels, c.category) == UNSPECIFIED { UNSPECIFIED } else { ABSENT })
                        .collect();
                    Target::from_signed(&signed_targets, self.cfg.unspecified_fill)
                }
            };
            targets.insert(patch, target);
        }
    }

    /// Trains a patch network whose outputs are the current clusters.
    fn train_patch_network(&self, state: &PipelineState, iteration: usize) -> Result<EmbedNetwork> {
        let arch = self.cfg.arch.with_outputs(state.clusters.len());
        let mut net = EmbedNetwork::init(&arch, rng::derive(self.cfg.seed, tags::PATCH_INIT + iteration as u64))?;
        let prev = state.network.arch();
        if self.cfg.warm_start && prev.with_outputs(arch.outputs) == arch {
            let keep = net.layout().final_layer().weights.start;
            net.params_mut()[..keep].copy_from_slice(&state.network.params()[..keep]);
        }
        let mut targets = self.training_targets(&state.clusters);
        self.add_background(&mut targets, state, iteration);
        let contexts = self.contexts(&self.train_idx, self.cfg.context_stream);
        let position: BTreeMap<SampleId, usize> =
            self.train_idx.iter().enumerate().map(|(k, &i)| (self.samples[i].id, k)).collect();
        let mut set = TrainingSet {
            contexts,
            examples: Vec::with_capacity(targets.len()),
        };
        for (patch, target) in targets {
            let i = self.index[&patch.sample()];
            set.examples.push(Example {
                patch: &self.inputs.patches[i][patch.local() as usize],
                context: position[&patch.sample()],
                target,
            });
        }
        let cfg = TrainConfig {
            loss: match self.spec.mode() {
                Mode::Action => LossKind::Softmax,
                Mode::Attribute => LossKind::PerClassCrossEntropy,
            },
            seed: rng::derive(self.cfg.seed, tags::PATCH_TRAIN + iteration as u64),
            ..self.cfg.train.clone()
        };
        let history = train(&mut net, &set, &cfg)?;
        log::debug!("iteration {iteration}: patch network loss {:?}", history.final_loss());
        Ok(net)
    }

    /// Train network, extract features, update clusters, fit detectors,
    /// score and harvest, then validate.
    pub fn run_iteration(&self, state: &PipelineState, observer: &mut dyn Observer) -> Result<PipelineState> {
        if state.clusters.is_empty() {
            return Err(Error::State("no clusters to train on".into()));
        }
        let iteration = state.iteration + 1;
        let network = self.train_patch_network(state, iteration)?;
        observer.stage(iteration, Stage::TrainNetwork, None);
        let features = self.features_of(&network, &self.train_idx, self.uses_context(iteration))?;
        observer.stage(iteration, Stage::Features, None);

        // Embedding spaces of successive networks are unrelated, so the
        // previous clusters get detectors on the new features first.
        let (previous, models) = self.fit_detectors(
            &features,
            state.clusters.clone(),
            tags::NEGATIVES + 2 * iteration as u64,
        )?;
        let scores = score_patches(&models, &features)?;
        let refit: Vec<ClusterDetector> = previous
            .iter()
            .zip(models)
            .map(|(c, model)| {
                let col = scores.column_of(c.id).expect("scored above");
                let member_scores: Vec<f64> = c
                    .members
                    .iter()
                    .map(|m| scores.get(features.index_of(*m).expect("training patch"), col))
                    .collect();
                ClusterDetector {
                    threshold: self.cfg.harvest.threshold(&member_scores),
                    model,
                }
            })
            .collect();
        let candidates: Vec<(PatchId, usize)> = features
            .ids()
            .iter()
            .filter(|p| !state.eliminated.contains(p))
            .flat_map(|p| {
                let labels = self.labels_of(*p);
                (0..self.spec.num_classes())
                    .filter(move |&c| signed(labels, c) == PRESENT)
                    .map(move |c| (*p, c))
            })
            .collect();
        let updated = if refit.is_empty() {
            Vec::new()
        } else {
            update_clusters(
                &features,
                &previous,
                &refit,
                &candidates,
                self.cfg.mining.merge_overlap_threshold,
            )?
        };
        observer.stage(iteration, Stage::UpdateClusters, None);
        if updated.is_empty() {
            return Err(Error::Collapse {
                iteration,
                diagnostics: format!(
                    "{} clusters before update, {} with detectors, {} candidate patches, none assigned",
                    state.clusters.len(),
                    previous.len(),
                    candidates.len()
                ),
            });
        }

        let (clusters, detectors, newly_eliminated, map) = self.detect_and_harvest(
            &features,
            updated,
            tags::NEGATIVES + 2 * iteration as u64 + 1,
            iteration,
            observer,
        )?;
        if clusters.is_empty() {
            return Err(Error::Collapse {
                iteration,
                diagnostics: String::from("every cluster fell below two members after harvesting"),
            });
        }
        let mut eliminated = state.eliminated.clone();
        eliminated.extend(newly_eliminated);
        let (classifier, report) = self.validate_state(&network, &features, &clusters, &detectors, iteration)?;
        let metric = Self::metric_of(&report)?;
        observer.stage(iteration, Stage::Validation, Some(metric));
        let mut history = state.history.clone();
        history.push(metric);
        let mut id_maps = state.id_maps.clone();
        id_maps.push(map);
        let mut reports = state.reports.clone();
        reports.push(report);
        Ok(PipelineState {
            iteration,
            network,
            features,
            clusters,
            detectors,
            eliminated,
            classifier,
            initial_metric: state.initial_metric,
            history,
            id_maps,
            reports,
        })
    }

    /// Iterates until the validation gain drops below the configured epsilon
    /// or the iteration budget is spent, keeping the best iteration.
    pub fn run(&mut self, observer: &mut dyn Observer) -> Result<RunOutcome> {
        let initial = self.initialize(observer)?;
        let mut state = initial.clone();
        let mut best: Option<PipelineState> = None;
        for _ in 0..self.cfg.max_iterations {
            // iteration 0 is never selected, so it does not end the loop either
            let previous = (state.iteration > 0).then(|| state.metric());
            state = self.run_iteration(&state, observer)?;
            let metric = state.metric();
            if best.as_ref().is_none_or(|b| metric > b.metric()) {
                best = Some(state.clone());
            }
            if previous.is_some_and(|p| metric - p < self.cfg.convergence_epsilon) {
                break;
            }
        }
        let best = best.expect("at least one iteration runs");
        let bundle = self.bundle(&best)?;
        Ok(RunOutcome {
            initial,
            iterations: state.iteration,
            reports: state.reports.clone(),
            best,
            bundle,
        })
    }

    /// Packages a state for persistence and prediction.
    pub fn bundle(&self, state: &PipelineState) -> Result<ModelBundle> {
        let holistic = self
            .holistic
            .clone()
            .ok_or_else(|| Error::State("pipeline is not initialized".into()))?;
        let models = state.models();
        let scores = score_patches(&models, &state.features)?;
        let mut exemplars = Vec::new();
        for (j, c) in state.clusters.iter().enumerate() {
            let mut ranked: Vec<(f64, PatchId)> = c
                .members
                .iter()
                .map(|m| (scores.get(state.features.index_of(*m).expect("training patch"), j), *m))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (score, patch) in ranked.into_iter().take(EXEMPLARS_PER_CLUSTER) {
                let i = self.index[&patch.sample()];
                let pixels = self.inputs.patches[i][patch.local() as usize].iter().map(|v| v + 0.5).collect();
                exemplars.push(Exemplar {
                    cluster: c.id,
                    patch,
                    score,
                    pixels,
                });
            }
        }
        Ok(ModelBundle {
            spec: self.spec.clone(),
            grid: self.cfg.grid.clone(),
            context_stream: self.uses_context(state.iteration),
            holistic,
            network: state.network.clone(),
            clusters: state.clusters.clone(),
            detectors: state.detectors.clone(),
            classifier: state.classifier.clone(),
            iteration: state.iteration,
            validation_metric: state.metric(),
            exemplars,
        })
    }
}

/// Convenience wrapper: builds a [`Pipeline`] and runs it.
pub fn run(
    samples: &[PersonSample],
    spec: &LabelSpec,
    cfg: &PipelineConfig,
    oracle: Option<&MotifOracle>,
    observer: &mut dyn Observer,
) -> Result<RunOutcome> {
    let mut p = Pipeline::new(samples, spec, cfg)?;
    if let Some(o) = oracle {
        p = p.with_oracle(o);
    }
    p.run(observer)
}

/// Linear classifier on the whole-box embedding alone, trained on the
/// training split and evaluated on `split`.
pub fn holistic_baseline(
    samples: &[PersonSample],
    spec: &LabelSpec,
    holistic: &EmbedNetwork,
    classifier: &ClassifierConfig,
    seed: u64,
    split: Split,
) -> Result<EvalReport> {
    let embed = |s: &PersonSample| -> Result<Vec<f64>> {
        let (p, c) = image_inputs(&s.image, holistic.arch())?;
        Ok(holistic.forward(&p, &c)?.embedding)
    };
    let train_set: Vec<&PersonSample> = samples.iter().filter(|s| s.split == Split::Train).collect();
    let eval_set: Vec<&PersonSample> = samples.iter().filter(|s| s.split == split).collect();
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::State("baseline needs training and evaluation samples".into()));
    }
    let rows = train_set.iter().map(|s| embed(s)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<Labels> = train_set.iter().map(|s| s.labels.clone()).collect();
    let clf = train_classifier(
        &rows,
        &labels,
        spec.mode(),
        spec.num_classes(),
        &ClassifierConfig {
            seed: rng::derive(seed, tags::CLASSIFIER),
            ..classifier.clone()
        },
    )?;
    let scores = eval_set
        .iter()
        .map(|s| clf.predict(&embed(s)?))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<&Labels> = eval_set.iter().map(|s| &s.labels).collect();
    let (class_ap, map, acc) = score_report(spec, &labels, &scores)?;
    Ok(EvalReport {
        iteration: 0,
        mode: spec.mode(),
        class_ap,
        map,
        accuracy: acc,
        cluster_nmi: None,
        cluster_purity: None,
    })
}
