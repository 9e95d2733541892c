//! Counts-based Markov scorer.

use std::collections::BTreeMap;

use crate::corpus::{item_popularity, InteractionDataset, ItemId};
use crate::error::{Error, Result};

/// Smoothed transition counts over fixed-length contexts, backing off to
/// global popularity for contexts never seen in training. Fully
/// deterministic, which makes it the reference oracle for exact zero-recall
/// checks.
#[derive(Debug, Clone)]
pub struct MarkovScorer {
    vocab_size: usize,
    order: usize,
    smoothing: f64,
    // context -> (next item -> count); BTreeMaps keep serialization stable
    contexts: BTreeMap<Vec<ItemId>, BTreeMap<ItemId, u32>>,
    popularity: Vec<u64>,
    pop_total: u64,
    inference_mode: bool,
}

impl MarkovScorer {
    pub fn train(ds: &InteractionDataset, order: usize, smoothing: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("markov order must be >= 1".into()));
        }
        if !(smoothing > 0.0) {
            return Err(Error::InvalidArgument(
                "markov smoothing must be positive".into(),
            ));
        }
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut contexts: BTreeMap<Vec<ItemId>, BTreeMap<ItemId, u32>> = BTreeMap::new();
        for seq in &ds.sequences {
            let items = &seq.items;
            if items.len() <= order {
                continue;
            }
            for end in order..items.len() {
                let ctx = items[end - order..end].to_vec();
                *contexts.entry(ctx).or_default().entry(items[end]).or_insert(0) += 1;
            }
        }
        let popularity = item_popularity(ds);
        let pop_total = popularity.iter().sum();
        Ok(Self {
            vocab_size: ds.vocab_size,
            order,
            smoothing,
            contexts,
            popularity,
            pop_total,
            inference_mode: true,
        })
    }

    pub(crate) fn from_parts(
        vocab_size: usize,
        order: usize,
        smoothing: f64,
        contexts: BTreeMap<Vec<ItemId>, BTreeMap<ItemId, u32>>,
        popularity: Vec<u64>,
    ) -> Self {
        let pop_total = popularity.iter().sum();
        Self {
            vocab_size,
            order,
            smoothing,
            contexts,
            popularity,
            pop_total,
            inference_mode: true,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn inference_mode(&self) -> bool {
        self.inference_mode
    }

    pub(crate) fn contexts(&self) -> &BTreeMap<Vec<ItemId>, BTreeMap<ItemId, u32>> {
        &self.contexts
    }

    pub(crate) fn popularity(&self) -> &[u64] {
        &self.popularity
    }

    /// Log-smoothed next-item scores for a prefix.
    pub fn score(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("prefix must be non-empty".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "item {bad} out of vocabulary (size {})",
                self.vocab_size
            )));
        }
        let s = self.smoothing;
        let v = self.vocab_size as f64;

        let ctx_counts = if prefix.len() >= self.order {
            self.contexts.get(&prefix[prefix.len() - self.order..])
        } else {
            None
        };

        let mut scores = vec![0.0f64; self.vocab_size];
        match ctx_counts {
            Some(counts) => {
                let total: u32 = counts.values().sum();
                let log_z = (total as f64 + s * v).ln();
                let base = s.ln() - log_z;
                scores.fill(base);
                for (&item, &c) in counts {
                    scores[item as usize] = (c as f64 + s).ln() - log_z;
                }
            }
            None => {
                // unseen context: popularity backoff
                let log_z = (self.pop_total as f64 + s * v).ln();
                for (j, &c) in self.popularity.iter().enumerate() {
                    scores[j] = (c as f64 + s).ln() - log_z;
                }
            }
        }
        Ok(scores)
    }
}
