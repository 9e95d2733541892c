//! Finite-difference validation of the hand-rolled training gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::ItemId;
use crate::error::{Error, Result};

use super::neural::batch_loss_grad;
use super::ScorerModel;

/// Compare the analytic gradient of the training loss on one random batch
/// against central finite differences at `num_params` randomly chosen
/// parameters. Returns the maximum relative error, with the denominator
/// floored at `max(|analytic|, |numeric|, 1e-8)` so degenerate zero-gradient
/// parameters stay finite.
pub fn gradient_check(
    model: &ScorerModel,
    num_params: usize,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    let neural = model.as_neural()?;
    if num_params == 0 {
        return Err(Error::InvalidArgument("num_params must be >= 1".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let cfg = neural.config().clone();
    let layout = neural.layout();
    let vocab = neural.vocab_size() as ItemId;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq_len = cfg.max_context.min(12) + 1;
    let batch_tokens: Vec<Vec<ItemId>> = (0..4)
        .map(|_| (0..seq_len).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    let batch: Vec<(&[ItemId], f64)> = batch_tokens.iter().map(|s| (s.as_slice(), 1.0)).collect();

    let mut params = neural.params().to_vec();
    let mut grad = vec![0.0f64; params.len()];
    batch_loss_grad(&params, layout, &cfg, &batch, Some(&mut grad));

    let total = params.len();
    let picks = num_params.min(total);
    let mut indices = Vec::with_capacity(picks);
    let mut seen = std::collections::HashSet::new();
    while indices.len() < picks {
        let idx = rng.random_range(0..total);
        if seen.insert(idx) {
            indices.push(idx);
        }
    }

    let mut max_rel = 0.0f64;
    for &idx in &indices {
        let original = params[idx];
        params[idx] = original + epsilon;
        let plus = batch_loss_grad(&params, layout, &cfg, &batch, None);
        params[idx] = original - epsilon;
        let minus = batch_loss_grad(&params, layout, &cfg, &batch, None);
        params[idx] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grad[idx];
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
