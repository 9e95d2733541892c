//! Next-item scorers behind a model-agnostic interface.
//!
//! Two implementations: a counts-based Markov scorer (deterministic oracle
//! stand-in) and a small causal self-attention network trained from scratch
//! by gradient descent. Both expose `prefix -> score vector over items`.

mod checkpoint;
mod gradcheck;
mod markov;
mod neural;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::gradient_check;
pub use markov::MarkovScorer;
pub use neural::NeuralScorer;

use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionDataset, ItemId, Query};
use crate::error::{Error, Result};

/// Which scorer implementation a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Markov,
    Neural,
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScorerKind::Markov => write!(f, "markov"),
            ScorerKind::Neural => write!(f, "neural"),
        }
    }
}

/// Gradient descent flavor used by neural training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain momentum-free gradient descent with a fixed learning rate.
    #[default]
    Sgd,
    /// Adam (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    Adam,
}

/// Neural training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_context: usize,
    pub l2: f64,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Opt-in parallel gradient accumulation across a batch. Forfeits bitwise
    /// reproducibility (summation order depends on thread scheduling).
    #[serde(default)]
    pub parallel_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            learning_rate: 0.5,
            batch_size: 32,
            embed_dim: 32,
            num_layers: 1,
            num_heads: 2,
            max_context: 50,
            l2: 0.0,
            seed: 0,
            optimizer: Optimizer::Sgd,
            parallel_batches: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.embed_dim < 4 {
            return Err(Error::InvalidArgument("embed_dim must be >= 4".into()));
        }
        if self.max_context < 2 {
            return Err(Error::InvalidArgument("max_context must be >= 2".into()));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidArgument("num_layers must be >= 1".into()));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "num_heads ({}) must divide embed_dim ({})",
                self.num_heads, self.embed_dim
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) && self.learning_rate != 0.0 {
            return Err(Error::InvalidArgument(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.l2 < 0.0 {
            return Err(Error::InvalidArgument("l2 must be >= 0".into()));
        }
        Ok(())
    }
}

/// A trained next-item scorer (`prefix -> score vector over all items`).
#[derive(Debug, Clone)]
pub enum ScorerModel {
    Markov(MarkovScorer),
    Neural(NeuralScorer),
}

impl ScorerModel {
    pub fn kind(&self) -> ScorerKind {
        match self {
            ScorerModel::Markov(_) => ScorerKind::Markov,
            ScorerModel::Neural(_) => ScorerKind::Neural,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            ScorerModel::Markov(m) => m.vocab_size(),
            ScorerModel::Neural(m) => m.vocab_size(),
        }
    }

    pub fn inference_mode(&self) -> bool {
        match self {
            ScorerModel::Markov(m) => m.inference_mode(),
            ScorerModel::Neural(m) => m.inference_mode(),
        }
    }

    /// Score every item given a non-empty prefix. Deterministic in
    /// inference mode; only the trailing `max_context` items influence the
    /// neural output.
    pub fn score(&self, prefix: &[ItemId]) -> Result<Vec<f64>> {
        match self {
            ScorerModel::Markov(m) => m.score(prefix),
            ScorerModel::Neural(m) => m.score(prefix),
        }
    }

    pub fn as_neural(&self) -> Result<&NeuralScorer> {
        match self {
            ScorerModel::Neural(m) => Ok(m),
            ScorerModel::Markov(_) => Err(Error::Checkpoint(
                "expected a neural model, got markov".into(),
            )),
        }
    }
}

/// Train the counts-based Markov scorer.
///
/// `score(prefix)[j]` is the log of the smoothed transition frequency from
/// the last `order` items to `j`, backing off to popularity for unseen
/// contexts.
pub fn train_markov(
    ds: &InteractionDataset,
    order: usize,
    smoothing: f64,
) -> Result<ScorerModel> {
    Ok(ScorerModel::Markov(MarkovScorer::train(
        ds, order, smoothing,
    )?))
}

/// Train the causal self-attention scorer, returning the epoch snapshot with
/// the best validation Recall@10 over `validation` (the final epoch when
/// `validation` is empty).
pub fn train_neural(
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    validation: &[Query],
) -> Result<ScorerModel> {
    Ok(ScorerModel::Neural(NeuralScorer::train(
        ds, cfg, None, validation,
    )?))
}

/// As [`train_neural`] with per-sequence loss weights (the weighted-loss
/// alternative to duplicating sequences in the training set).
pub fn train_neural_weighted(
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    weights: &[f64],
    validation: &[Query],
) -> Result<ScorerModel> {
    if weights.len() != ds.sequences.len() {
        return Err(Error::InvalidArgument(format!(
            "weights length {} != number of sequences {}",
            weights.len(),
            ds.sequences.len()
        )));
    }
    Ok(ScorerModel::Neural(NeuralScorer::train(
        ds,
        cfg,
        Some(weights),
        validation,
    )?))
}

/// The `m` lowest-scored items, ties broken toward the smaller id, returned
/// in ascending id order.
pub fn bottom_m(scores: &[f64], m: usize) -> Result<Vec<ItemId>> {
    if m == 0 || m > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "M = {m} out of range 1..={}",
            scores.len()
        )));
    }
    for (j, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteScore { item: j });
        }
    }
    let mut idx: Vec<ItemId> = (0..scores.len() as ItemId).collect();
    idx.sort_by(|&a, &b| {
        scores[a as usize]
            .partial_cmp(&scores[b as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = idx[..m].to_vec();
    out.sort_unstable();
    Ok(out)
}
