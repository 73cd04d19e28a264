//! Shared records and the seeded synthetic person-box generator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::image::Image;
use crate::rng::{self, tags};
use crate::{Error, Result};

/// Whether categories are mutually exclusive actions or independent attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Action,
    Attribute,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Action => "action",
            Mode::Attribute => "attribute",
        }
    }
}

/// Ordered category names for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpec {
    mode: Mode,
    class_names: Vec<String>,
}

impl LabelSpec {
    pub fn new(mode: Mode, class_names: Vec<String>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::config("classes", "at least two categories are required"));
        }
        for (i, name) in class_names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::config("classes", "category names must be non-empty"));
            }
            if class_names[..i].contains(name) {
                return Err(Error::config("classes", format!("duplicate category `{name}`")));
            }
        }
        Ok(LabelSpec { mode, class_names })
    }

    /// `count` categories named `c0`, `c1`, ...
    pub fn numbered(mode: Mode, count: usize) -> Result<Self> {
        Self::new(mode, (0..count).map(|i| format!("c{i}")).collect())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Split> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Attribute annotation: present, absent or unspecified.
pub type AttributeLabel = i8;
pub const PRESENT: AttributeLabel = 1;
pub const ABSENT: AttributeLabel = -1;
pub const UNSPECIFIED: AttributeLabel = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    /// Index of the single action category.
    Action(usize),
    /// One entry per attribute, each in `{+1, -1, 0}`.
    Attribute(Vec<AttributeLabel>),
}

pub type SampleId = u32;

/// Identifier of one patch: the source sample and the patch's position in
/// that sample's scale-major, row-major grid order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchId(pub u64);

impl PatchId {
    pub fn new(sample: SampleId, local: u32) -> Self {
        PatchId(((sample as u64) << 32) | local as u64)
    }

    pub fn sample(self) -> SampleId {
        (self.0 >> 32) as SampleId
    }

    pub fn local(self) -> u32 {
        self.0 as u32
    }
}

impl core::fmt::Display for PatchId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}:{}", self.sample(), self.local())
    }
}

/// One person bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonSample {
    pub id: SampleId,
    pub image: Image,
    pub labels: Labels,
    pub split: Split,
}

impl PersonSample {
    pub fn validate(&self, spec: &LabelSpec) -> Result<()> {
        match (&self.labels, spec.mode()) {
            (Labels::Action(c), Mode::Action) if *c < spec.num_classes() => {}
            (Labels::Attribute(v), Mode::Attribute)
                if v.len() == spec.num_classes()
                    && v.iter().all(|l| matches!(*l, PRESENT | ABSENT | UNSPECIFIED)) => {}
            _ => {
                return Err(Error::State(format!(
                    "sample {} labels do not match the {} label spec",
                    self.id,
                    spec.mode().as_str()
                )))
            }
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::State(format!("sample {} has intensities outside [0,1]", self.id)));
        }
        Ok(())
    }

    pub fn action_label(&self) -> Option<usize> {
        match self.labels {
            Labels::Action(c) => Some(c),
            Labels::Attribute(_) => None,
        }
    }

    /// Label of this sample for `category`: `+1`, `-1` or `0`. In action
    /// mode a sample is present for its own class and absent for the rest.
    pub fn label_for(&self, category: usize) -> AttributeLabel {
        match &self.labels {
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
}

/// A square window of a resized person box.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchInstance {
    pub id: PatchId,
    pub sample_id: SampleId,
    pub row: usize,
    pub col: usize,
    pub scale: usize,
    pub pixels: Image,
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub box_side: usize,
    pub channels: usize,
    pub motifs_per_class: usize,
    /// Motifs of its class stamped into each action sample.
    pub motifs_per_sample: usize,
    pub motif_side: usize,
    /// Shortest grating period in pixels; half of the patterns use twice this period.
    pub motif_period: usize,
    pub noise_sigma: f64,
    /// Stamp corners are multiples of this step (1 places anywhere).
    pub placement_step: usize,
    /// Class-agnostic clutter patterns shared by all categories.
    pub distractor_pool: usize,
    pub distractors_per_sample: usize,
    /// Action mode: class-dependent shift of the background level, spread
    /// evenly over `[-context_cue, +context_cue]` across classes.
    pub context_cue: f64,
    /// Per-sample Gaussian jitter of the background level.
    pub context_jitter: f64,
    /// Attribute mode: probability that an attribute is present.
    pub attribute_rate: f64,
    /// Attribute mode: probability that an attribute label is withheld (0).
    pub unspecified_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 48,
            n_val: 32,
            n_test: 48,
            box_side: 64,
            channels: 1,
            motifs_per_class: 2,
            motifs_per_sample: 2,
            motif_side: 16,
            motif_period: 4,
            noise_sigma: 0.15,
            placement_step: 8,
            distractor_pool: 4,
            distractors_per_sample: 2,
            context_cue: 0.05,
            context_jitter: 0.03,
            attribute_rate: 0.5,
            unspecified_rate: 0.15,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("synth.n_train", self.n_train),
            ("synth.n_val", self.n_val),
            ("synth.n_test", self.n_test),
            ("synth.box_side", self.box_side),
            ("synth.channels", self.channels),
            ("synth.motifs_per_class", self.motifs_per_class),
            ("synth.motifs_per_sample", self.motifs_per_sample),
            ("synth.motif_side", self.motif_side),
            ("synth.placement_step", self.placement_step),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.motifs_per_sample > self.motifs_per_class {
            return Err(Error::config("synth.motifs_per_sample", "must not exceed motifs_per_class"));
        }
        if self.motif_period < 2 {
            return Err(Error::config("synth.motif_period", "must be at least 2"));
        }
        if self.motif_side >= self.box_side {
            return Err(Error::config("synth.motif_side", "must be smaller than box_side"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("synth.noise_sigma", "must be finite and non-negative"));
        }
        if !(self.context_cue >= 0.0 && self.context_jitter >= 0.0) {
            return Err(Error::config("synth.context_cue", "cue and jitter must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.attribute_rate) {
            return Err(Error::config("synth.attribute_rate", "must lie in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.unspecified_rate) {
            return Err(Error::config("synth.unspecified_rate", "must lie in [0,1)"));
        }
        if self.distractors_per_sample > 0 && self.distractor_pool == 0 {
            return Err(Error::config(
                "synth.distractor_pool",
                "must be at least 1 when distractors are stamped",
            ));
        }
        Ok(())
    }
}

/// Ground-truth identity of the pattern inside a patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MotifLabel {
    Background,
    Motif { category: u16, index: u16 },
}

/// One class motif stamped into a sample, in box coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stamp {
    pub category: u16,
    pub index: u16,
    pub row: usize,
    pub col: usize,
    pub side: usize,
}

/// Planted-motif ground truth.
///
/// Patch labels are derived from the stamp table, so the oracle answers for
/// any patch grid: a patch carries a motif identity when it fully contains
/// that motif's stamp, otherwise it is background.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MotifOracle {
    pub box_side: usize,
    pub stamps: BTreeMap<SampleId, Vec<Stamp>>,
}

impl MotifOracle {
    pub fn stamps_of(&self, sample: SampleId) -> &[Stamp] {
        self.stamps.get(&sample).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Label of the window `(row, col, scale)` given in coordinates of the box
    /// resized to `resize_side`. When several stamps fit, the one whose center
    /// is nearest the window center wins (ties: lower identity).
    pub fn label_window(
        &self,
        sample: SampleId,
        row: usize,
        col: usize,
        scale: usize,
        resize_side: usize,
    ) -> MotifLabel {
        let f = resize_side as f64 / self.box_side as f64;
        let (r0, c0) = (row as f64, col as f64);
        let (r1, c1) = (r0 + scale as f64, c0 + scale as f64);
        let (pr, pc) = (r0 + scale as f64 / 2.0, c0 + scale as f64 / 2.0);
        let mut best: Option<(f64, MotifLabel)> = None;
        for s in self.stamps_of(sample) {
            let (sr0, sc0) = (s.row as f64 * f, s.col as f64 * f);
            let (sr1, sc1) = ((s.row + s.side) as f64 * f, (s.col + s.side) as f64 * f);
            if sr0 >= r0 && sc0 >= c0 && sr1 <= r1 && sc1 <= c1 {
                let (cr, cc) = ((sr0 + sr1) / 2.0, (sc0 + sc1) / 2.0);
                let d = (cr - pr) * (cr - pr) + (cc - pc) * (cc - pc);
                let label = MotifLabel::Motif {
                    category: s.category,
                    index: s.index,
                };
                let better = match best {
                    None => true,
                    Some((bd, bl)) => d < bd || (d == bd && label < bl),
                };
                if better {
                    best = Some((d, label));
                }
            }
        }
        best.map(|(_, l)| l).unwrap_or(MotifLabel::Background)
    }

    pub fn label_patch(&self, patch: &PatchInstance, resize_side: usize) -> MotifLabel {
        self.label_window(patch.sample_id, patch.row, patch.col, patch.scale, resize_side)
    }

    /// Distinct motif identities present in the stamp table.
    pub fn motif_identities(&self) -> Vec<MotifLabel> {
        let mut ids: Vec<MotifLabel> = self
            .stamps
            .values()
            .flatten()
            .map(|s| MotifLabel::Motif {
                category: s.category,
                index: s.index,
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

const MOTIF_LO: f64 = 0.05;
const MOTIF_HI: f64 = 0.95;
const PLACEMENT_TRIES: usize = 64;

/// Square-wave grating: high and low stripes of equal width.
fn draw_grating(side: usize, angle: f64, period: f64, phase: f64) -> Vec<f64> {
    let (sin, cos) = (libm::sin(angle), libm::cos(angle));
    (0..side * side)
        .map(|p| {
            let (y, x) = ((p / side) as f64, (p % side) as f64);
            let t = (x * cos + y * sin) / period + phase;
            if t - libm::floor(t) < 0.5 {
                MOTIF_HI
            } else {
                MOTIF_LO
            }
        })
        .collect()
}

/// Distinct gratings for all motifs followed by the clutter pool: every
/// pattern has its own (orientation, period) pair, assigned at random.
fn draw_patterns(rng: &mut rng::Rng, count: usize, side: usize, period: usize) -> Vec<Vec<f64>> {
    let orientations = count.div_ceil(2).max(1);
    let mut kinds: Vec<(usize, usize)> = (0..orientations).flat_map(|o| [(o, 1), (o, 2)]).collect();
    kinds.shuffle(rng);
    kinds
        .into_iter()
        .take(count)
        .map(|(o, mult)| {
            let angle = core::f64::consts::PI * o as f64 / orientations as f64;
            let phase = rng.random::<f64>();
            draw_grating(side, angle, (period * mult) as f64, phase)
        })
        .collect()
}

fn overlaps(a: (usize, usize), b: (usize, usize), side: usize) -> bool {
    a.0 < b.0 + side && b.0 < a.0 + side && a.1 < b.1 + side && b.1 < a.1 + side
}

fn place(
    rng: &mut rng::Rng,
    limit: usize,
    step: usize,
    side: usize,
    taken: &[(usize, usize)],
    must: bool,
) -> Option<(usize, usize)> {
    for _ in 0..PLACEMENT_TRIES {
        let p = (rng.random_range(0..=limit / step) * step, rng.random_range(0..=limit / step) * step);
        if taken.iter().all(|&t| !overlaps(p, t, side)) {
            return Some(p);
        }
    }
    if must {
        Some((rng.random_range(0..=limit / step) * step, rng.random_range(0..=limit / step) * step))
    } else {
        None
    }
}

/// Generates train/val/test person boxes with planted class motifs.
///
/// Action samples are assigned classes round-robin within each split and
/// receive `motifs_per_sample` distinct motifs of their class; the first
/// motif index cycles, so every `(class, index)` pair appears once a split
/// holds `C * motifs_per_class` samples. Attribute samples get one motif
/// per present attribute. Clutter stamps drawn from a shared pool are added
/// without labels.
pub fn generate_synthetic_dataset(
    cfg: &SynthConfig,
    spec: &LabelSpec,
) -> Result<(Vec<PersonSample>, MotifOracle)> {
    cfg.validate()?;
    let classes = spec.num_classes();
    let mut rng = rng::stream(cfg.seed, tags::SYNTH);
    let side = cfg.motif_side;
    let m = cfg.motifs_per_class;
    let mut patterns = draw_patterns(&mut rng, classes * m + cfg.distractor_pool, side, cfg.motif_period);
    let clutter = patterns.split_off(classes * m);
    let motifs: Vec<&[Vec<f64>]> = patterns.chunks(m).collect();
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|_| Error::config("synth.noise_sigma", "invalid normal distribution"))?;
    let jitter = Normal::new(0.0, cfg.context_jitter)
        .map_err(|_| Error::config("synth.context_jitter", "invalid normal distribution"))?;
    let limit = cfg.box_side - side;

    let mut samples = Vec::new();
    let mut oracle = MotifOracle {
        box_side: cfg.box_side,
        stamps: BTreeMap::new(),
    };
    let mut next_id: SampleId = 0;
    for (split, count) in [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val), (Split::Test, cfg.n_test)] {
        for i in 0..count {
            let id = next_id;
            next_id += 1;
            let level = match spec.mode() {
                Mode::Action => {
                    let class = i % classes;
                    let shift = cfg.context_cue * (2.0 * class as f64 / (classes - 1) as f64 - 1.0);
                    0.5 + shift + jitter.sample(&mut rng)
                }
                Mode::Attribute => 0.5,
            };
            let mut canvas = vec![level; cfg.box_side * cfg.box_side];
            let mut taken: Vec<(usize, usize)> = Vec::new();
            let mut stamps = Vec::new();
            let labels = match spec.mode() {
                Mode::Action => {
                    let class = i % classes;
                    let first = (i / classes) % m;
                    for j in 0..cfg.motifs_per_sample {
                        let (row, col) = place(&mut rng, limit, cfg.placement_step, side, &taken, true).unwrap_or((0, 0));
                        taken.push((row, col));
                        stamps.push(Stamp {
                            category: class as u16,
                            index: ((first + j) % m) as u16,
                            row,
                            col,
                            side,
                        });
                    }
                    Labels::Action(class)
                }
                Mode::Attribute => {
                    let mut labels = Vec::with_capacity(classes);
                    for a in 0..classes {
                        let present = rng.random_bool(cfg.attribute_rate);
                        let hidden = rng.random_bool(cfg.unspecified_rate);
                        let index = rng.random_range(0..cfg.motifs_per_class);
                        if present {
                            let (row, col) = place(&mut rng, limit, cfg.placement_step, side, &taken, true).unwrap_or((0, 0));
                            taken.push((row, col));
                            stamps.push(Stamp {
                                category: a as u16,
                                index: index as u16,
                                row,
                                col,
                                side,
                            });
                        }
                        labels.push(match (hidden, present) {
                            (true, _) => UNSPECIFIED,
                            (false, true) => PRESENT,
                            (false, false) => ABSENT,
                        });
                    }
                    Labels::Attribute(labels)
                }
            };
            let mut clutter_at = Vec::new();
            for _ in 0..cfg.distractors_per_sample {
                let which = rng.random_range(0..cfg.distractor_pool);
                if let Some(p) = place(&mut rng, limit, cfg.placement_step, side, &taken, false) {
                    taken.push(p);
                    clutter_at.push((which, p));
                }
            }
            for s in &stamps {
                blit(&mut canvas, cfg.box_side, &motifs[s.category as usize][s.index as usize], side, s.row, s.col);
            }
            for &(which, (row, col)) in &clutter_at {
                blit(&mut canvas, cfg.box_side, &clutter[which], side, row, col);
            }
            let mut data = Vec::with_capacity(cfg.channels * canvas.len());
            for _ in 0..cfg.channels {
                for &v in &canvas {
                    data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
            samples.push(PersonSample {
                id,
                image: Image::new(cfg.channels, cfg.box_side, data)?,
                labels,
                split,
            });
            oracle.stamps.insert(id, stamps);
        }
    }
    Ok((samples, oracle))
}

fn blit(canvas: &mut [f64], box_side: usize, pattern: &[f64], side: usize, row: usize, col: usize) {
    for r in 0..side {
        let dst = (row + r) * box_side + col;
        canvas[dst..dst + side].copy_from_slice(&pattern[r * side..(r + 1) * side]);
    }
}
