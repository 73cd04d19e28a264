use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use super::network::EmbedNetwork;
use crate::datamodel::PatchId;
use crate::{Error, Result};

/// Row-major embedding matrix keyed by row identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<K: Ord + Copy = PatchId> {
    ids: Vec<K>,
    dim: usize,
    data: Vec<f64>,
    index: BTreeMap<K, usize>,
}

impl<K: Ord + Copy + core::fmt::Debug> FeatureMatrix<K> {
    pub fn new(ids: Vec<K>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::shape(format!(
                "{} rows of dimension {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::State("feature matrix entries must be finite".into()));
        }
        let mut index = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(*id, i).is_some() {
                return Err(Error::shape(format!("duplicate row id {id:?}")));
            }
        }
        Ok(FeatureMatrix { ids, dim, data, index })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[K] {
        &self.ids
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: K) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn row_of(&self, id: K) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.row(i))
    }

    /// Copy of the listed rows, in the given order.
    pub fn select(&self, ids: &[K]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let row = self
                .row_of(*id)
                .ok_or_else(|| Error::shape(format!("row {id:?} not in feature matrix")))?;
            data.extend_from_slice(row);
        }
        Self::new(ids.to_vec(), self.dim, data)
    }
}

/// Items to embed. Each item names its context by index so the context
/// stream runs once per distinct box.
#[derive(Debug, Clone)]
pub struct EmbedInputs<'a, K> {
    pub contexts: Vec<&'a [f64]>,
    pub items: Vec<(K, &'a [f64], usize)>,
}

impl<'a, K> Default for EmbedInputs<'a, K> {
    fn default() -> Self {
        EmbedInputs {
            contexts: Vec::new(),
            items: Vec::new(),
        }
    }
}

/// Embedding of every item, rows in input order.
pub fn extract_embeddings<K: Ord + Copy + core::fmt::Debug>(
    net: &EmbedNetwork,
    inputs: &EmbedInputs<'_, K>,
) -> Result<FeatureMatrix<K>> {
    let mut cached: Vec<Option<Vec<f64>>> = alloc::vec![None; inputs.contexts.len()];
    let dim = net.arch().embed_dim();
    let mut data = Vec::with_capacity(inputs.items.len() * dim);
    let mut ids = Vec::with_capacity(inputs.items.len());
    for &(id, patch, ctx) in &inputs.items {
        let context = *inputs
            .contexts
            .get(ctx)
            .ok_or_else(|| Error::shape("item references a missing context"))?;
        net.check_inputs(patch, context)?;
        let feats = cached[ctx].get_or_insert_with(|| net.context_features(context));
        let out = net.forward_with_context(patch, feats);
        data.extend_from_slice(&out.embedding);
        ids.push(id);
    }
    FeatureMatrix::new(ids, dim, data)
}
