//! Average precision, accuracy and cluster-quality measures.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::datamodel::Mode;
use crate::{Error, Result};

/// Mean over positives of the precision at each positive's rank, ranking by
/// descending score. Tied scores place negatives first.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let n_pos = positives.iter().filter(|p| **p).count();
    if n_pos == 0 {
        return Err(Error::Undefined("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(positives[a].cmp(&positives[b]))
            .then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Mean of the defined entries; `None` if there are none.
pub fn mean_average_precision(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::shape("prediction and truth differ in length"));
    }
    if truth.is_empty() {
        return Err(Error::Undefined("accuracy of an empty set".into()));
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * libm::log(p)
        })
        .sum()
}

/// Normalized mutual information, `I(A;B) / ((H(A) + H(B)) / 2)`. Zero when
/// both labelings are constant.
pub fn nmi<A: Ord, B: Ord>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("assignments differ in length"));
    }
    if a.is_empty() {
        return Err(Error::Undefined("NMI of an empty set".into()));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(&A, &B), usize> = BTreeMap::new();
    let mut ca: BTreeMap<&A, usize> = BTreeMap::new();
    let mut cb: BTreeMap<&B, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ha + hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|((x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * libm::log(pxy * n * n / (ca[x] as f64 * cb[y] as f64))
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Fraction of elements whose reference label is the majority label of
/// their cluster.
pub fn purity<A: Ord, B: Ord>(assignment: &[A], reference: &[B]) -> Result<f64> {
    if assignment.len() != reference.len() {
        return Err(Error::shape("assignments differ in length"));
    }
    if assignment.is_empty() {
        return Err(Error::Undefined("purity of an empty set".into()));
    }
    let mut table: BTreeMap<&A, BTreeMap<&B, usize>> = BTreeMap::new();
    for (x, y) in assignment.iter().zip(reference) {
        *table.entry(x).or_default().entry(y).or_default() += 1;
    }
    let majority: usize = table.values().map(|row| row.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / assignment.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub iteration: usize,
    pub mode: Mode,
    /// Per-class (action) or per-attribute AP; `None` when undefined on the split.
    pub class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    /// Action mode only.
    pub accuracy: Option<f64>,
    pub cluster_nmi: Option<f64>,
    pub cluster_purity: Option<f64>,
}

fn cell(out: &mut String, v: Option<f64>) {
    out.push(',');
    if let Some(v) = v {
        let _ = write!(out, "{v}");
    }
}

impl EvalReport {
    /// `iteration,mode,map,accuracy,nmi,purity,ap_<class>...`
    pub fn csv_header(class_names: &[String]) -> String {
        let mut h = String::from("iteration,mode,map,accuracy,nmi,purity");
        for name in class_names {
            let _ = write!(h, ",ap_{name}");
        }
        h
    }

    /// Undefined values are empty cells.
    pub fn csv_row(&self) -> String {
        let mut r = String::new();
        let _ = write!(r, "{},{}", self.iteration, self.mode.as_str());
        for v in [self.map, self.accuracy, self.cluster_nmi, self.cluster_purity] {
            cell(&mut r, v);
        }
        for ap in &self.class_ap {
            cell(&mut r, *ap);
        }
        r
    }
}
