//! Per-cluster LDA detectors, patch scoring and score-threshold harvesting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;

use crate::datamodel::PatchId;
use crate::embednet::PatchFeatures;
use crate::mining::{ClusterId, PatternCluster, MIN_CLUSTER_SIZE};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub cluster_id: ClusterId,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Ridge added to the pooled covariance diagonal.
    pub shrinkage: f64,
}

impl LdaModel {
    pub fn score(&self, f: &[f64]) -> f64 {
        dot(&self.weights, f) + self.bias
    }
}

/// A detector together with the score threshold its last harvest applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDetector {
    pub model: LdaModel,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Shrinkage as a fraction of the mean covariance diagonal.
    pub lambda_frac: f64,
    /// Negatives beyond this count are uniformly subsampled.
    pub max_negatives: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            lambda_frac: 0.1,
            max_negatives: 2000,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_frac >= 0.0 && self.lambda_frac.is_finite()) {
            return Err(Error::config("detectors.lambda_frac", "must be finite and non-negative"));
        }
        if self.max_negatives < 2 {
            return Err(Error::config("detectors.max_negatives", "must be at least 2"));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_of(features: &PatchFeatures, ids: &[PatchId]) -> Result<Vec<f64>> {
    let mut mu = alloc::vec![0.0; features.dim()];
    for id in ids {
        let row = features
            .row_of(*id)
            .ok_or_else(|| Error::shape(format!("patch {id} has no features")))?;
        mu.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= ids.len() as f64);
    Ok(mu)
}

/// Fits `w = Σ'⁻¹(μ₊ − μ₋)`, `b = −w·(μ₊ + μ₋)/2` where `Σ'` is the pooled
/// within-class covariance plus `λI`, `λ = lambda_frac · trace(Σ)/d`. A
/// zero-trace covariance is replaced by the identity. The system is solved by
/// Cholesky factorization.
pub fn train_lda(
    features: &PatchFeatures,
    cluster_id: ClusterId,
    positives: &[PatchId],
    negatives: &[PatchId],
    lambda_frac: f64,
) -> Result<LdaModel> {
    if positives.len() < 2 {
        return Err(Error::DegenerateCluster {
            cluster: cluster_id,
            reason: format!("{} positive(s), at least 2 required", positives.len()),
        });
    }
    if negatives.len() < 2 {
        return Err(Error::DegenerateCluster {
            cluster: cluster_id,
            reason: format!("{} negative(s), at least 2 required", negatives.len()),
        });
    }
    let d = features.dim();
    let mu_p = mean_of(features, positives)?;
    let mu_n = mean_of(features, negatives)?;
    // upper triangle of the scatter matrix, row-major
    let mut upper = alloc::vec![0.0; d * d];
    let mut centered = alloc::vec![0.0; d];
    for (ids, mu) in [(positives, &mu_p), (negatives, &mu_n)] {
        for id in ids {
            let row = features.row_of(*id).expect("checked by mean_of");
            centered.iter_mut().zip(row.iter().zip(mu)).for_each(|(c, (v, m))| *c = v - m);
            for i in 0..d {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                let dst = &mut upper[i * d + i..(i + 1) * d];
                dst.iter_mut().zip(&centered[i..]).for_each(|(a, cj)| *a += ci * cj);
            }
        }
    }
    let denom = (positives.len() + negatives.len() - 2).max(1) as f64;
    let mut cov = DMatrix::<f64>::from_fn(d, d, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        upper[a * d + b] / denom
    });
    let trace = cov.trace();
    let shrinkage = if trace > 0.0 {
        let lambda = lambda_frac * trace / d as f64;
        for i in 0..d {
            cov[(i, i)] += lambda;
        }
        lambda
    } else {
        cov = DMatrix::identity(d, d);
        0.0
    };
    let diff = DVector::from_iterator(d, mu_p.iter().zip(&mu_n).map(|(p, n)| p - n));
    let chol = cov.cholesky().ok_or_else(|| Error::DegenerateCluster {
        cluster: cluster_id,
        reason: "regularized covariance is not positive definite".into(),
    })?;
    let w = chol.solve(&diff);
    let weights: Vec<f64> = w.iter().copied().collect();
    let mid: Vec<f64> = mu_p.iter().zip(&mu_n).map(|(p, n)| (p + n) / 2.0).collect();
    let bias = -dot(&weights, &mid);
    if !bias.is_finite() || weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateCluster {
            cluster: cluster_id,
            reason: "non-finite detector".into(),
        });
    }
    Ok(LdaModel {
        cluster_id,
        weights,
        bias,
        shrinkage,
    })
}

/// Keeps at most `cap` elements of `pool`, chosen uniformly, in pool order.
pub fn subsample(pool: &[PatchId], cap: usize, rng: &mut Rng) -> Vec<PatchId> {
    if pool.len() <= cap {
        return pool.to_vec();
    }
    let mut picked = index::sample(rng, pool.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i]).collect()
}

/// Scores of every patch under every detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    patch_ids: Vec<PatchId>,
    cluster_ids: Vec<ClusterId>,
    data: Vec<f64>,
    columns: BTreeMap<ClusterId, usize>,
}

impl ScoreMatrix {
    pub fn patch_ids(&self) -> &[PatchId] {
        &self.patch_ids
    }

    pub fn cluster_ids(&self) -> &[ClusterId] {
        &self.cluster_ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cluster_ids.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let k = self.cluster_ids.len();
        &self.data[row * k..(row + 1) * k]
    }

    pub fn column_of(&self, cluster: ClusterId) -> Option<usize> {
        self.columns.get(&cluster).copied()
    }
}

pub fn score_patches(models: &[LdaModel], features: &PatchFeatures) -> Result<ScoreMatrix> {
    let d = features.dim();
    let mut columns = BTreeMap::new();
    for (j, m) in models.iter().enumerate() {
        if m.weights.len() != d {
            return Err(Error::shape(format!(
                "detector {} has dimension {}, features have {d}",
                m.cluster_id,
                m.weights.len()
            )));
        }
        if columns.insert(m.cluster_id, j).is_some() {
            return Err(Error::shape(format!("duplicate detector for cluster {}", m.cluster_id)));
        }
    }
    let mut data = Vec::with_capacity(features.rows() * models.len());
    for i in 0..features.rows() {
        let f = features.row(i);
        data.extend(models.iter().map(|m| m.score(f)));
    }
    Ok(ScoreMatrix {
        patch_ids: features.ids().to_vec(),
        cluster_ids: models.iter().map(|m| m.cluster_id).collect(),
        data,
        columns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HarvestPolicy {
    /// Drop members scoring strictly below the q-th percentile of their
    /// cluster's member scores.
    Percentile(f64),
    Absolute(f64),
}

impl Default for HarvestPolicy {
    fn default() -> Self {
        HarvestPolicy::Percentile(10.0)
    }
}

impl HarvestPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HarvestPolicy::Percentile(q) if !(0.0..100.0).contains(&q) => {
                Err(Error::config("harvest.percentile", "must lie in [0,100)"))
            }
            HarvestPolicy::Absolute(th) if th.is_nan() => Err(Error::config("harvest.threshold", "must not be NaN")),
            _ => Ok(()),
        }
    }

    /// Threshold this policy applies to a cluster with the given member scores.
    pub fn threshold(&self, scores: &[f64]) -> f64 {
        match *self {
            HarvestPolicy::Percentile(q) => percentile(scores, q),
            HarvestPolicy::Absolute(th) => th,
        }
    }
}

/// Linearly interpolated percentile (`q` in [0,100]) of a non-empty sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarvestOutcome {
    pub clusters: Vec<PatternCluster>,
    /// Members removed for scoring below their cluster's threshold.
    pub eliminated: Vec<PatchId>,
    /// Applied threshold per input cluster, including deleted ones.
    pub thresholds: BTreeMap<ClusterId, f64>,
}

/// Removes low-scoring members from each cluster under its own detector.
/// Clusters left with fewer than two members are deleted.
pub fn harvest(clusters: &[PatternCluster], scores: &ScoreMatrix, policy: HarvestPolicy) -> Result<HarvestOutcome> {
    let rows: BTreeMap<PatchId, usize> = scores.patch_ids.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let mut kept = Vec::new();
    let mut eliminated = BTreeSet::new();
    let mut thresholds = BTreeMap::new();
    for c in clusters {
        let col = scores
            .column_of(c.id)
            .ok_or_else(|| Error::State(format!("cluster {} has no score column", c.id)))?;
        let member_scores = c
            .members
            .iter()
            .map(|m| {
                rows.get(m)
                    .map(|&r| scores.get(r, col))
                    .ok_or_else(|| Error::State(format!("member {m} has no score row")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let th = if member_scores.is_empty() {
            policy.threshold(&[f64::MIN])
        } else {
            policy.threshold(&member_scores)
        };
        thresholds.insert(c.id, th);
        let mut members = Vec::with_capacity(c.members.len());
        for (m, s) in c.members.iter().zip(&member_scores) {
            if *s >= th {
                members.push(*m);
            } else {
                eliminated.insert(*m);
            }
        }
        if members.len() >= MIN_CLUSTER_SIZE {
            kept.push(PatternCluster {
                members,
                ..c.clone()
            });
        }
    }
    Ok(HarvestOutcome {
        clusters: kept,
        eliminated: eliminated.into_iter().collect(),
        thresholds,
    })
}
