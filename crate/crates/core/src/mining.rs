//! Discriminative pattern mining over binarized embeddings.
//!
//! Each patch embedding becomes a transaction holding the indices of its
//! top-k dimensions. Frequent itemsets of a category's transactions
//! (representativeness) whose occurrences fall mostly inside that category
//! (discriminativeness) become association patterns. Patches sharing a
//! pattern form a provisional cluster; overlapping clusters are merged.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::datamodel::PatchId;
use crate::detectors::ClusterDetector;
use crate::embednet::PatchFeatures;
use crate::{Error, Result};

pub type Item = u32;
pub type ClusterId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub patch: PatchId,
    /// Sorted embedding-dimension indices.
    pub items: Vec<Item>,
    /// Category of the source sample, or `1`/`0` for positive/negative in
    /// per-attribute mining.
    pub label: usize,
}

impl AsRef<[Item]> for Transaction {
    fn as_ref(&self) -> &[Item] {
        &self.items
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationPattern {
    pub itemset: Vec<Item>,
    /// Transaction label the pattern predicts.
    pub target: usize,
    /// Fraction of target transactions containing the itemset.
    pub support: f64,
    /// Fraction of all transactions containing the itemset that are target transactions.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternCluster {
    pub id: ClusterId,
    pub category: usize,
    /// Provenance: the patterns merged into this cluster.
    pub patterns: Vec<AssociationPattern>,
    /// Sorted member patches.
    pub members: Vec<PatchId>,
}

impl PatternCluster {
    fn best_confidence(&self) -> f64 {
        self.patterns.iter().map(|p| p.confidence).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    /// Items per transaction.
    pub k: usize,
    pub min_support: f64,
    pub min_confidence: f64,
    pub max_itemset_size: usize,
    /// Clusters kept per category after merging.
    pub clusters_per_category: usize,
    pub merge_overlap_threshold: f64,
    /// Only the best-ranked patterns of a category seed provisional clusters.
    pub max_patterns: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 20,
            min_support: 0.01,
            min_confidence: 0.7,
            max_itemset_size: 3,
            clusters_per_category: 8,
            merge_overlap_threshold: 0.5,
            max_patterns: 300,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("mining.k", "must be at least 1"));
        }
        if !(self.min_support > 0.0 && self.min_support <= 1.0) {
            return Err(Error::config("mining.min_support", "must lie in (0,1]"));
        }
        if !(self.min_confidence > 0.0 && self.min_confidence <= 1.0) {
            return Err(Error::config("mining.min_confidence", "must lie in (0,1]"));
        }
        if self.max_itemset_size == 0 {
            return Err(Error::config("mining.max_itemset_size", "must be at least 1"));
        }
        if self.clusters_per_category == 0 {
            return Err(Error::config("mining.clusters_per_category", "must be at least 1"));
        }
        if !(self.merge_overlap_threshold > 0.0 && self.merge_overlap_threshold <= 1.0) {
            return Err(Error::config("mining.merge_overlap_threshold", "must lie in (0,1]"));
        }
        if self.max_patterns == 0 {
            return Err(Error::config("mining.max_patterns", "must be at least 1"));
        }
        Ok(())
    }
}

/// Top-`k` dimensions of every row (ties: lower index first). `labels` is
/// parallel to the rows.
pub fn binarize(features: &PatchFeatures, k: usize, labels: &[usize]) -> Result<Vec<Transaction>> {
    if k > features.dim() {
        return Err(Error::config(
            "mining.k",
            format!("k = {k} exceeds embedding dimension {}", features.dim()),
        ));
    }
    if labels.len() != features.rows() {
        return Err(Error::shape("one label per feature row is required"));
    }
    let mut order: Vec<usize> = Vec::with_capacity(features.dim());
    Ok((0..features.rows())
        .map(|r| {
            let row = features.row(r);
            order.clear();
            order.extend(0..row.len());
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut items: Vec<Item> = order[..k].iter().map(|&i| i as Item).collect();
            items.sort_unstable();
            Transaction {
                patch: features.ids()[r],
                items,
                label: labels[r],
            }
        })
        .collect())
}

/// Fixed-size bitset over transaction indices.
#[derive(Debug, Clone, PartialEq, Eq)]
struct TidSet(Vec<u64>);

impl TidSet {
    fn empty(n: usize) -> Self {
        TidSet(vec![0; n.div_ceil(64)])
    }

    fn insert(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn and(&self, other: &TidSet) -> TidSet {
        TidSet(self.0.iter().zip(&other.0).map(|(a, b)| a & b).collect())
    }

    fn count(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(w, &bits)| {
            (0..64).filter(move |b| bits & (1 << b) != 0).map(move |b| w * 64 + b)
        })
    }
}

fn item_tidsets<T: AsRef<[Item]>>(transactions: &[T]) -> BTreeMap<Item, TidSet> {
    let mut map: BTreeMap<Item, TidSet> = BTreeMap::new();
    for (t, tx) in transactions.iter().enumerate() {
        for &item in tx.as_ref() {
            map.entry(item).or_insert_with(|| TidSet::empty(transactions.len())).insert(t);
        }
    }
    map
}

fn tidset_of(itemset: &[Item], tids: &BTreeMap<Item, TidSet>, n: usize) -> TidSet {
    let mut acc: Option<TidSet> = None;
    for item in itemset {
        let Some(t) = tids.get(item) else {
            return TidSet::empty(n);
        };
        acc = Some(match acc {
            None => t.clone(),
            Some(a) => a.and(t),
        });
    }
    acc.unwrap_or_else(|| {
        let mut all = TidSet::empty(n);
        (0..n).for_each(|i| all.insert(i));
        all
    })
}

fn is_frequent(count: usize, n: usize, min_support: f64) -> bool {
    count as f64 / n as f64 >= min_support
}

/// Level-wise Apriori search. Returns every itemset of size
/// `1..=max_itemset_size` whose support reaches `min_support`, ordered by
/// size and then lexicographically.
pub fn mine_frequent_itemsets<T: AsRef<[Item]>>(transactions: &[T], cfg: &MiningConfig) -> Vec<(Vec<Item>, f64)> {
    let n = transactions.len();
    if n == 0 {
        return Vec::new();
    }
    let tids = item_tidsets(transactions);
    let mut out = Vec::new();
    let mut level: Vec<(Vec<Item>, TidSet)> = tids
        .iter()
        .filter(|(_, t)| is_frequent(t.count(), n, cfg.min_support))
        .map(|(&i, t)| (vec![i], t.clone()))
        .collect();
    let mut size = 1;
    while !level.is_empty() {
        out.extend(level.iter().map(|(s, t)| (s.clone(), t.count() as f64 / n as f64)));
        if size == cfg.max_itemset_size {
            break;
        }
        let known: BTreeSet<&[Item]> = level.iter().map(|(s, _)| s.as_slice()).collect();
        let mut next = Vec::new();
        for a in 0..level.len() {
            for b in a + 1..level.len() {
                let (sa, ta) = &level[a];
                let (sb, _) = &level[b];
                if sa[..size - 1] != sb[..size - 1] {
                    // level is sorted, so no later b shares a's prefix
                    break;
                }
                let mut cand = sa.clone();
                cand.push(sb[size - 1]);
                let closed = (0..cand.len()).all(|skip| {
                    let sub: Vec<Item> = cand
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i != skip)
                        .map(|(_, &x)| x)
                        .collect();
                    known.contains(sub.as_slice())
                });
                if !closed {
                    continue;
                }
                let t = ta.and(&tids[&sb[size - 1]]);
                if is_frequent(t.count(), n, cfg.min_support) {
                    next.push((cand, t));
                }
            }
        }
        level = next;
        size += 1;
    }
    out
}

fn pattern_order(a: &AssociationPattern, b: &AssociationPattern) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(b.support.total_cmp(&a.support))
        .then_with(|| a.itemset.cmp(&b.itemset))
}

/// Frequent itemsets of the `target` transactions that reach
/// `min_confidence` over all transactions, best first.
pub fn mine_patterns(transactions: &[Transaction], target: usize, cfg: &MiningConfig) -> Vec<AssociationPattern> {
    let targets: Vec<&Transaction> = transactions.iter().filter(|t| t.label == target).collect();
    if targets.is_empty() {
        return Vec::new();
    }
    let frequent = mine_frequent_itemsets(&targets, cfg);
    let all_tids = item_tidsets(transactions);
    let n_all = transactions.len();
    let mut patterns: Vec<AssociationPattern> = frequent
        .into_iter()
        .filter_map(|(itemset, support)| {
            let hits = tidset_of(&itemset, &all_tids, n_all);
            let in_target = hits.iter().filter(|&i| transactions[i].label == target).count();
            let confidence = in_target as f64 / hits.count() as f64;
            (confidence >= cfg.min_confidence).then_some(AssociationPattern {
                itemset,
                target,
                support,
                confidence,
            })
        })
        .collect();
    patterns.sort_by(pattern_order);
    patterns
}

/// Clusters smaller than this cannot train a detector and are dropped.
pub const MIN_CLUSTER_SIZE: usize = 2;

/// One provisional cluster per pattern (the target transactions containing
/// its itemset), merged, truncated to the largest `clusters_per_category`,
/// and finally made exclusive: a patch stays only in the first (largest)
/// cluster that holds it. Cluster ids are local, in output order.
pub fn patterns_to_clusters(
    patterns: &[AssociationPattern],
    transactions: &[Transaction],
    category: usize,
    cfg: &MiningConfig,
) -> Vec<PatternCluster> {
    let Some(first) = patterns.first() else {
        return Vec::new();
    };
    let target = first.target;
    let targets: Vec<&Transaction> = transactions.iter().filter(|t| t.label == target).collect();
    let tids = item_tidsets(&targets);
    let provisional: Vec<PatternCluster> = patterns
        .iter()
        .filter(|p| p.target == target)
        .take(cfg.max_patterns)
        .enumerate()
        .map(|(i, p)| {
            let mut members: Vec<PatchId> = tidset_of(&p.itemset, &tids, targets.len())
                .iter()
                .map(|t| targets[t].patch)
                .collect();
            members.sort_unstable();
            PatternCluster {
                id: i as ClusterId,
                category,
                patterns: vec![p.clone()],
                members,
            }
        })
        .collect();
    let mut merged = merge_clusters(provisional, cfg.merge_overlap_threshold);
    merged.sort_by(|a, b| {
        b.members
            .len()
            .cmp(&a.members.len())
            .then(b.best_confidence().total_cmp(&a.best_confidence()))
            .then(a.id.cmp(&b.id))
    });
    merged.truncate(cfg.clusters_per_category);
    let mut seen: BTreeSet<PatchId> = BTreeSet::new();
    let mut out = Vec::new();
    for mut c in merged {
        c.members.retain(|m| seen.insert(*m));
        if c.members.len() >= MIN_CLUSTER_SIZE {
            c.id = out.len() as ClusterId;
            out.push(c);
        }
    }
    out
}

fn intersection_len(a: &[PatchId], b: &[PatchId]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `|A ∩ B| / min(|A|, |B|)`, zero if either is empty.
pub fn overlap(a: &[PatchId], b: &[PatchId]) -> f64 {
    let m = a.len().min(b.len());
    if m == 0 {
        0.0
    } else {
        intersection_len(a, b) as f64 / m as f64
    }
}

fn union(a: &[PatchId], b: &[PatchId]) -> Vec<PatchId> {
    let mut out: Vec<PatchId> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Greedy merging: repeatedly merges the pair with the largest overlap
/// (ties: smallest id pair) while it reaches `threshold`. The merged cluster
/// keeps the smaller id and the union of members and patterns. Output is
/// sorted by id, so the result does not depend on input order.
pub fn merge_clusters(clusters: Vec<PatternCluster>, threshold: f64) -> Vec<PatternCluster> {
    let mut slots: Vec<Option<PatternCluster>> = clusters.into_iter().map(Some).collect();
    slots.sort_by_key(|c| c.as_ref().map(|c| c.id));
    let n = slots.len();
    let mut ov = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (slots[i].as_ref().unwrap(), slots[j].as_ref().unwrap());
            ov[i * n + j] = overlap(&a.members, &b.members);
        }
    }
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if slots[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if slots[j].is_none() {
                    continue;
                }
                let o = ov[i * n + j];
                if o >= threshold && best.is_none_or(|(bo, _, _)| o > bo) {
                    best = Some((o, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        let b = slots[j].take().unwrap();
        let a = slots[i].as_mut().unwrap();
        a.members = union(&a.members, &b.members);
        a.patterns.extend(b.patterns);
        a.patterns.sort_by(pattern_order);
        a.patterns.dedup_by(|x, y| x.itemset == y.itemset && x.target == y.target);
        a.id = a.id.min(b.id);
        for k in 0..n {
            if k == i || slots[k].is_none() {
                continue;
            }
            let o = overlap(&slots[i].as_ref().unwrap().members, &slots[k].as_ref().unwrap().members);
            let (lo, hi) = if k < i { (k, i) } else { (i, k) };
            ov[lo * n + hi] = o;
        }
    }
    let mut out: Vec<PatternCluster> = slots.into_iter().flatten().collect();
    out.sort_by_key(|c| c.id);
    out
}

/// Reassigns patches to the current clusters using their detectors.
///
/// Each candidate `(patch, category)` is scored by every detector of its
/// category and joins the argmax cluster (ties: lower id) when that score
/// reaches the detector's threshold. Clusters left with fewer than
/// [`MIN_CLUSTER_SIZE`] members are dropped; survivors of each category are
/// then merged. Patterns are carried over unchanged.
pub fn update_clusters(
    features: &PatchFeatures,
    clusters: &[PatternCluster],
    detectors: &[ClusterDetector],
    candidates: &[(PatchId, usize)],
    overlap_threshold: f64,
) -> Result<Vec<PatternCluster>> {
    if detectors.is_empty() {
        return Err(Error::State("cluster update needs trained detectors".into()));
    }
    let by_id: BTreeMap<ClusterId, &ClusterDetector> = detectors.iter().map(|d| (d.model.cluster_id, d)).collect();
    let mut per_category: BTreeMap<usize, Vec<(&PatternCluster, &ClusterDetector)>> = BTreeMap::new();
    for c in clusters {
        let d = by_id
            .get(&c.id)
            .ok_or_else(|| Error::State(format!("cluster {} has no detector", c.id)))?;
        if d.model.weights.len() != features.dim() {
            return Err(Error::shape("detector dimension differs from features"));
        }
        per_category.entry(c.category).or_default().push((c, d));
    }
    let mut assigned: BTreeMap<ClusterId, Vec<PatchId>> = BTreeMap::new();
    for &(patch, category) in candidates {
        let Some(group) = per_category.get(&category) else {
            continue;
        };
        let f = features
            .row_of(patch)
            .ok_or_else(|| Error::shape(format!("patch {patch} has no features")))?;
        let mut best: Option<(f64, ClusterId, f64)> = None;
        for (c, d) in group {
            let s = d.model.score(f);
            if best.is_none_or(|(bs, bid, _)| s > bs || (s == bs && c.id < bid)) {
                best = Some((s, c.id, d.threshold));
            }
        }
        if let Some((s, id, th)) = best {
            if s >= th {
                assigned.entry(id).or_default().push(patch);
            }
        }
    }
    let mut out = Vec::new();
    for (category, group) in per_category {
        let mut updated = Vec::new();
        for (c, _) in group {
            let mut members = assigned.remove(&c.id).unwrap_or_default();
            members.sort_unstable();
            if members.len() >= MIN_CLUSTER_SIZE {
                updated.push(PatternCluster {
                    id: c.id,
                    category,
                    patterns: c.patterns.clone(),
                    members,
                });
            }
        }
        out.extend(merge_clusters(updated, overlap_threshold));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embednet::FeatureMatrix;

    fn pid(i: u32) -> PatchId {
        PatchId::new(0, i)
    }

    fn cluster(id: ClusterId, members: &[u32]) -> PatternCluster {
        PatternCluster {
            id,
            category: 0,
            patterns: vec![AssociationPattern {
                itemset: vec![id],
                target: 0,
                support: 0.5,
                confidence: 0.9,
            }],
            members: members.iter().map(|&m| pid(m)).collect(),
        }
    }

    #[test]
    fn binarize_top_k() {
        let fm = FeatureMatrix::new(vec![pid(0), pid(1)], 4, vec![0.9, 0.1, 0.5, 0.7, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let tx = binarize(&fm, 2, &[0, 1]).unwrap();
        assert_eq!(tx[0].items, vec![0, 3]);
        assert_eq!(tx[1].items, vec![0, 1]);
        assert!(matches!(binarize(&fm, 5, &[0, 1]), Err(Error::Config { .. })));
    }

    #[test]
    fn worked_apriori_example() {
        let tx: Vec<Vec<Item>> = vec![vec![0, 1], vec![0, 1], vec![0, 2]];
        let cfg = MiningConfig {
            min_support: 0.6,
            max_itemset_size: 2,
            ..MiningConfig::default()
        };
        let got = mine_frequent_itemsets(&tx, &cfg);
        assert_eq!(got, vec![(vec![0], 1.0), (vec![1], 2.0 / 3.0), (vec![0, 1], 2.0 / 3.0)]);
    }

    #[test]
    fn full_support_keeps_only_universal_itemsets() {
        let tx: Vec<Vec<Item>> = vec![vec![0, 1, 2], vec![0, 2], vec![0, 2, 3]];
        let cfg = MiningConfig {
            min_support: 1.0,
            ..MiningConfig::default()
        };
        let got: Vec<Vec<Item>> = mine_frequent_itemsets(&tx, &cfg).into_iter().map(|x| x.0).collect();
        assert_eq!(got, vec![vec![0], vec![2], vec![0, 2]]);
    }

    #[test]
    fn disjoint_singletons_have_no_frequent_sets() {
        let tx: Vec<Vec<Item>> = (0..5).map(|i| vec![i]).collect();
        let cfg = MiningConfig {
            min_support: 0.25,
            ..MiningConfig::default()
        };
        assert!(mine_frequent_itemsets(&tx, &cfg).is_empty());
    }

    fn tx(patch: u32, items: &[Item], label: usize) -> Transaction {
        Transaction {
            patch: pid(patch),
            items: items.to_vec(),
            label,
        }
    }

    #[test]
    fn perfectly_discriminative_item() {
        let mut all = Vec::new();
        for i in 0..10 {
            all.push(tx(i, &[5, 1 + (i % 3)], 0));
            all.push(tx(100 + i, &[7, 1 + (i % 3)], 1));
        }
        let pats = mine_patterns(&all, 0, &MiningConfig::default());
        assert_eq!(
            pats[0],
            AssociationPattern {
                itemset: vec![5],
                target: 0,
                support: 1.0,
                confidence: 1.0
            }
        );
    }

    #[test]
    fn shared_item_fails_confidence() {
        let mut all = Vec::new();
        for i in 0..10 {
            all.push(tx(i, &[3], 0));
            all.push(tx(100 + i, &[3], 1));
        }
        // confidence = 10 / 20 = 0.5 < 0.6
        assert!(mine_patterns(&all, 0, &MiningConfig::default()).is_empty());
        let lenient = MiningConfig {
            min_confidence: 0.5,
            ..MiningConfig::default()
        };
        assert_eq!(mine_patterns(&all, 0, &lenient)[0].confidence, 0.5);
    }

    #[test]
    fn merge_rules() {
        // identical sets
        let m = merge_clusters(vec![cluster(0, &[1, 2, 3]), cluster(1, &[1, 2, 3])], 0.5);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].patterns.len(), 2);
        // containment overlap is 1
        let m = merge_clusters(vec![cluster(0, &[1, 2]), cluster(1, &[1, 2, 3, 4, 5])], 1.0);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].members.len(), 5);
        // disjoint
        let m = merge_clusters(vec![cluster(0, &[1, 2]), cluster(1, &[3, 4]), cluster(2, &[5, 6])], 0.5);
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn chain_merges_into_one() {
        // A~B = 3/5, B~C = 3/5, A~C = 0
        let a = cluster(0, &[1, 2, 3, 4, 5]);
        let b = cluster(1, &[3, 4, 5, 6, 7, 8, 20, 21]);
        let c = cluster(2, &[6, 7, 8, 9, 10]);
        assert_eq!(overlap(&a.members, &b.members), 0.6);
        assert_eq!(overlap(&b.members, &c.members), 0.6);
        assert_eq!(overlap(&a.members, &c.members), 0.0);
        let m = merge_clusters(vec![c.clone(), a.clone(), b.clone()], 0.5);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].id, 0);
        assert_eq!(m, merge_clusters(vec![a, b, c], 0.5));
    }

    #[test]
    fn truncation_keeps_largest() {
        let mut all = Vec::new();
        for i in 0..20 {
            let mut items = vec![];
            if i < 12 {
                items.push(1);
            }
            if i >= 12 {
                items.push(2);
            }
            all.push(tx(i, &items, 0));
            all.push(tx(100 + i, &[9], 1));
        }
        let cfg = MiningConfig {
            clusters_per_category: 1,
            ..MiningConfig::default()
        };
        let pats = mine_patterns(&all, 0, &cfg);
        let cl = patterns_to_clusters(&pats, &all, 0, &cfg);
        assert_eq!(cl.len(), 1);
        assert_eq!(cl[0].members.len(), 12);
        assert_eq!(cl[0].patterns[0].itemset, vec![1]);
    }
}
