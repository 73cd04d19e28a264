//! Spatial-pyramid image representation and the final linear classifiers.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::datamodel::{AttributeLabel, Labels, Mode, ABSENT, PRESENT};
use crate::patchgrid::Window;
use crate::rng::{self, tags};
use crate::{Error, Result};

/// 1×1 plus 2×2 partition of the box.
pub const REGIONS: usize = 5;

/// Score given to regions without patches: this far below the detector's
/// minimum score on the image.
pub const EMPTY_REGION_MARGIN: f64 = 1.0;

/// Pyramid length for `clusters` detectors.
pub fn pyramid_len(clusters: usize) -> usize {
    REGIONS * clusters
}

/// Index of the 2×2 cell (1..=4) holding a point; points on a midline go to
/// the bottom/right cell.
pub fn quadrant(center: (f64, f64), side: usize) -> usize {
    let half = side as f64 / 2.0;
    let r = usize::from(center.0 >= half);
    let c = usize::from(center.1 >= half);
    1 + 2 * r + c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRepresentation {
    /// Region-major: entry `r * clusters + j` is region `r`, detector `j`.
    pub pyramid: Vec<f64>,
    pub holistic: Vec<f64>,
}

impl ImageRepresentation {
    pub fn len(&self) -> usize {
        self.pyramid.len() + self.holistic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.pyramid.clone();
        v.extend_from_slice(&self.holistic);
        v
    }
}

/// Max-pools detector scores over the pyramid regions. `scores` holds one
/// row of `clusters` values per window.
pub fn encode(
    windows: &[Window],
    scores: &[f64],
    clusters: usize,
    holistic: &[f64],
    side: usize,
) -> Result<ImageRepresentation> {
    if windows.is_empty() {
        return Err(Error::shape("cannot encode an image without patches"));
    }
    if scores.len() != windows.len() * clusters {
        return Err(Error::shape(format!(
            "{} windows with {clusters} detectors need {} scores, got {}",
            windows.len(),
            windows.len() * clusters,
            scores.len()
        )));
    }
    let mut pyramid = vec![f64::NEG_INFINITY; pyramid_len(clusters)];
    let mut minimum = vec![f64::INFINITY; clusters];
    for (w, row) in windows.iter().zip(scores.chunks_exact(clusters.max(1))) {
        let q = quadrant(w.center(), side);
        for (j, &s) in row.iter().enumerate() {
            minimum[j] = minimum[j].min(s);
            for r in [0, q] {
                let e = &mut pyramid[r * clusters + j];
                *e = e.max(s);
            }
        }
    }
    for (i, e) in pyramid.iter_mut().enumerate() {
        if *e == f64::NEG_INFINITY {
            *e = minimum[i % clusters] - EMPTY_REGION_MARGIN;
        }
    }
    Ok(ImageRepresentation {
        pyramid,
        holistic: holistic.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    /// L2 regularization strength.
    pub reg: f64,
    pub epochs: usize,
    /// Largest SGD step; steps decay as `1 / (reg·t)`.
    pub max_step: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            reg: 1e-3,
            epochs: 60,
            max_step: 0.1,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg > 0.0 && self.reg.is_finite()) {
            return Err(Error::config("classifier.reg", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("classifier.epochs", "must be at least 1"));
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return Err(Error::config("classifier.max_step", "must be positive"));
        }
        Ok(())
    }
}

/// One-vs-rest (action) or per-attribute linear scorers over standardized
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub mode: Mode,
    pub mean: Vec<f64>,
    /// Reciprocal standard deviation per input (1 for constant inputs).
    pub inv_std: Vec<f64>,
    /// Class-major, `classes × dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    /// False for attributes skipped for lack of positives or negatives.
    pub trained: Vec<bool>,
    pub reg: f64,
    pub warnings: Vec<String>,
}

fn signed_label(labels: &Labels, class: usize) -> AttributeLabel {
    match labels {
        Labels::Action(c) => {
            if *c == class {
                PRESENT
            } else {
                ABSENT
            }
        }
        Labels::Attribute(v) => v[class],
    }
}

/// Hinge-loss SGD per class on standardized rows. Attribute entries labelled
/// 0 take no part in that attribute's training.
pub fn train_classifier(
    rows: &[Vec<f64>],
    labels: &[Labels],
    mode: Mode,
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<LinearClassifier> {
    cfg.validate()?;
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::shape("one label per representation is required"));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("representations differ in length"));
    }
    for l in labels {
        match (l, mode) {
            (Labels::Action(c), Mode::Action) if *c < classes => {}
            (Labels::Attribute(v), Mode::Attribute) if v.len() == classes => {}
            _ => return Err(Error::shape("labels do not match the classifier mode")),
        }
    }
    if mode == Mode::Action {
        let mut seen = vec![false; classes];
        for l in labels {
            if let Labels::Action(c) = l {
                seen[*c] = true;
            }
        }
        if seen.iter().filter(|s| **s).count() < 2 {
            return Err(Error::Undefined("action classifier needs at least two classes".into()));
        }
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        var.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = libm::sqrt(s / n);
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    let x: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&inv_std).map(|((v, m), s)| (v - m) * s).collect())
        .collect();

    let mut weights = vec![0.0; classes * dim];
    let mut biases = vec![0.0; classes];
    let mut trained = vec![false; classes];
    let mut warnings = Vec::new();
    for class in 0..classes {
        let mut examples: Vec<(usize, f64)> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match signed_label(l, class) {
                PRESENT => Some((i, 1.0)),
                ABSENT => Some((i, -1.0)),
                _ => None,
            })
            .collect();
        let pos = examples.iter().filter(|e| e.1 > 0.0).count();
        if pos == 0 || pos == examples.len() {
            let msg = format!("class {class} skipped: needs positive and negative examples");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        trained[class] = true;
        let w = &mut weights[class * dim..(class + 1) * dim];
        let b = &mut biases[class];
        let mut rng = rng::stream(cfg.seed ^ tags::CLASSIFIER, class as u64);
        let mut t = 0usize;
        for _ in 0..cfg.epochs {
            examples.shuffle(&mut rng);
            for &(i, y) in &examples {
                let eta = cfg.max_step.min(1.0 / (cfg.reg * (t + 1) as f64));
                let margin = y * (dot(w, &x[i]) + *b);
                let decay = 1.0 - eta * cfg.reg;
                w.iter_mut().for_each(|v| *v *= decay);
                if margin < 1.0 {
                    w.iter_mut().zip(&x[i]).for_each(|(v, xi)| *v += eta * y * xi);
                    *b += eta * y;
                }
                t += 1;
            }
        }
    }
    Ok(LinearClassifier {
        mode,
        mean,
        inv_std,
        weights,
        biases,
        trained,
        reg: cfg.reg,
        warnings,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearClassifier {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn classes(&self) -> usize {
        self.biases.len()
    }

    /// Affine score per class.
    pub fn predict(&self, representation: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if representation.len() != d {
            return Err(Error::shape(format!(
                "representation has length {}, classifier expects {d}",
                representation.len()
            )));
        }
        let x: Vec<f64> = representation
            .iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        Ok((0..self.classes())
            .map(|c| dot(&self.weights[c * d..(c + 1) * d], &x) + self.biases[c])
            .collect())
    }

    /// Highest-scoring class (ties: lower index).
    pub fn predict_label(&self, representation: &[f64]) -> Result<usize> {
        let s = self.predict(representation)?;
        Ok(argmax(&s))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
