//! Watermark-removal attack simulators.
//!
//! Both attacks touch the target model only through its query interface:
//! distillation trains a fresh surrogate on autoregressively generated
//! sequences, fine-tuning continues gradient descent on a copy of the victim
//! using attacker data. Neither mutates the input model.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    leave_one_out_split, save_dataset_with_comment, InteractionDataset, ItemId, UserSequence,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scorer::{train_neural, ScorerModel, TrainConfig};

/// How the next item is drawn from the target's scores during generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    /// Always follow the argmax (ties to the smaller id).
    Greedy,
    /// Softmax over the `k` highest-scored items at the given temperature.
    TopKSoftmax { k: usize, temperature: f64 },
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy::TopKSoftmax {
            k: 100,
            temperature: 1.0,
        }
    }
}

/// How each generated sequence's first item is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StartItemPolicy {
    /// Uniform over the vocabulary — the attacker probes arbitrary catalog
    /// items as seeds.
    #[default]
    Uniform,
    /// Proportional to interaction counts supplied by the caller.
    PopularitySampled,
}

/// Attacker parameters shared by distillation and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub num_sequences: usize,
    /// Upper bound on generated sequence length; each sequence's length is
    /// drawn uniformly from `[min(5, max_length), max_length]`.
    pub max_length: usize,
    pub sampling: SamplingPolicy,
    pub start_item_policy: StartItemPolicy,
    /// Training epochs for the surrogate / fine-tune run; 0 inherits the
    /// surrogate config's epochs (distill) or the victim's original training
    /// epochs (finetune).
    pub epochs: usize,
    /// Learning configuration echo for the attacker-side training runs.
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            num_sequences: 1000,
            max_length: 50,
            sampling: SamplingPolicy::default(),
            start_item_policy: StartItemPolicy::default(),
            epochs: 0,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 {
            return Err(Error::InvalidArgument(
                "num_sequences must be >= 1".into(),
            ));
        }
        if self.max_length < 2 {
            return Err(Error::InvalidArgument("max_length must be >= 2".into()));
        }
        if let SamplingPolicy::TopKSoftmax { k, temperature } = self.sampling {
            if k == 0 {
                return Err(Error::InvalidArgument("sampling k must be >= 1".into()));
            }
            if !(temperature > 0.0) {
                return Err(Error::InvalidArgument(
                    "sampling temperature must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Attacker-generated sequences plus the query budget they consumed (one
/// target query per extension step).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub dataset: InteractionDataset,
    pub queries_issued: u64,
}

fn argmax_smallest_id(scores: &[f64]) -> ItemId {
    let mut best = 0usize;
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = j;
        }
    }
    best as ItemId
}

fn top_k_softmax_draw(
    scores: &[f64],
    k: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> ItemId {
    let k = k.min(scores.len());
    let mut idx: Vec<ItemId> = (0..scores.len() as ItemId).collect();
    idx.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    let top = &idx[..k];
    let max = scores[top[0] as usize];
    let weights: Vec<f64> = top
        .iter()
        .map(|&i| ((scores[i as usize] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut dart = rng.random_range(0.0..total);
    for (&item, &w) in top.iter().zip(&weights) {
        dart -= w;
        if dart <= 0.0 {
            return item;
        }
    }
    top[k - 1]
}

/// Generate attacker sequences by repeatedly querying the target.
///
/// `start_popularity` supplies interaction counts for
/// [`StartItemPolicy::PopularitySampled`]; pass `None` for uniform starts.
/// Deterministic given the config seed (each sequence runs on its own
/// sub-stream, so generation can run in parallel workers).
pub fn autoregressive_generate(
    target: &ScorerModel,
    cfg: &AttackConfig,
    start_popularity: Option<&[u64]>,
) -> Result<GeneratedData> {
    cfg.validate()?;
    if !target.inference_mode() {
        return Err(Error::InvalidArgument(
            "target must be in inference mode".into(),
        ));
    }
    let vocab = target.vocab_size();
    if vocab == 0 {
        return Err(Error::InvalidArgument("target has an empty vocabulary".into()));
    }

    let start_cum: Option<Vec<f64>> = match cfg.start_item_policy {
        StartItemPolicy::Uniform => None,
        StartItemPolicy::PopularitySampled => {
            let counts = start_popularity.ok_or_else(|| {
                Error::InvalidArgument(
                    "popularity-sampled starts require popularity counts".into(),
                )
            })?;
            if counts.len() != vocab {
                return Err(Error::VocabMismatch {
                    expected: vocab,
                    actual: counts.len(),
                });
            }
            let mut acc = 0.0f64;
            let cum: Vec<f64> = counts
                .iter()
                .map(|&c| {
                    acc += c as f64;
                    acc
                })
                .collect();
            if acc <= 0.0 {
                return Err(Error::InvalidArgument(
                    "popularity counts sum to zero".into(),
                ));
            }
            Some(cum)
        }
    };

    let min_len = 5usize.min(cfg.max_length);
    let results: Result<Vec<(Vec<ItemId>, u64)>> = (0..cfg.num_sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let len = rng.random_range(min_len..=cfg.max_length);
            let start = match &start_cum {
                None => rng.random_range(0..vocab as ItemId),
                Some(cum) => {
                    let total = *cum.last().unwrap();
                    let dart: f64 = rng.random_range(0.0..total);
                    cum.partition_point(|&c| c <= dart).min(vocab - 1) as ItemId
                }
            };
            let mut items = vec![start];
            let mut queries = 0u64;
            while items.len() < len {
                let scores = target.score(&items)?;
                queries += 1;
                let next = match cfg.sampling {
                    SamplingPolicy::Greedy => argmax_smallest_id(&scores),
                    SamplingPolicy::TopKSoftmax { k, temperature } => {
                        top_k_softmax_draw(&scores, k, temperature, &mut rng)
                    }
                };
                items.push(next);
            }
            Ok((items, queries))
        })
        .collect();
    let results = results?;

    let mut sequences = Vec::with_capacity(cfg.num_sequences);
    let mut queries_issued = 0u64;
    for (i, (items, queries)) in results.into_iter().enumerate() {
        sequences.push(UserSequence {
            user_id: i as u64,
            items,
        });
        queries_issued += queries;
    }
    Ok(GeneratedData {
        dataset: InteractionDataset {
            sequences,
            vocab_size: vocab,
        },
        queries_issued,
    })
}

/// Persist attacker data in the corpus format, recording the checkpoint hash
/// of the model that produced it.
pub fn save_generated(
    data: &GeneratedData,
    path: impl AsRef<std::path::Path>,
    target_checkpoint_hash: &str,
) -> Result<()> {
    save_dataset_with_comment(
        &data.dataset,
        path,
        Some(&format!("generated_by={target_checkpoint_hash}")),
    )
}

/// Train a fresh neural surrogate on attacker data by next-item
/// cross-entropy, leave-one-out splitting the data for snapshot selection.
pub fn train_surrogate(data: &InteractionDataset, cfg: &AttackConfig) -> Result<ScorerModel> {
    let split = leave_one_out_split(data);
    let mut train_cfg = cfg.train.clone();
    if cfg.epochs > 0 {
        train_cfg.epochs = cfg.epochs;
    }
    train_cfg.seed = derive_seed(cfg.seed, "distill-train");
    train_neural(&split.train, &train_cfg, &split.validation)
}

/// Black-box model extraction: generate sequences from the target, then train
/// a surrogate on them.
pub fn distill(
    target: &ScorerModel,
    cfg: &AttackConfig,
    start_popularity: Option<&[u64]>,
) -> Result<ScorerModel> {
    let generated = autoregressive_generate(target, cfg, start_popularity)?;
    train_surrogate(&generated.dataset, cfg)
}

/// Fine-tune a copy of the victim on attacker data for `cfg.epochs` epochs
/// (the victim's original epoch count when 0). The victim itself is
/// untouched.
pub fn finetune(
    victim: &ScorerModel,
    data: &InteractionDataset,
    cfg: &AttackConfig,
) -> Result<ScorerModel> {
    let neural = victim.as_neural()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut tune_cfg = cfg.train.clone();
    tune_cfg.epochs = if cfg.epochs > 0 {
        cfg.epochs
    } else {
        neural.trained_epochs()
    };
    tune_cfg.seed = derive_seed(cfg.seed, "finetune");
    let tuned = neural.finetuned(data, &tune_cfg, neural.trained_epochs() + 1)?;
    Ok(ScorerModel::Neural(tuned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{item_popularity, synth_generate, SyntheticConfig};
    use crate::scorer::train_markov;

    fn desc_oracle(vocab: usize) -> ScorerModel {
        // popularity vocab - j for item j, order too large to match contexts:
        // every score query returns the same descending ranking
        let sequences = (0..vocab as ItemId)
            .flat_map(|item| std::iter::repeat_n(item, vocab - item as usize))
            .enumerate()
            .map(|(u, item)| UserSequence {
                user_id: u as u64,
                items: vec![item],
            })
            .collect();
        let ds = InteractionDataset {
            sequences,
            vocab_size: vocab,
        };
        train_markov(&ds, 2, 0.5).unwrap()
    }

    #[test]
    fn greedy_follows_argmax() {
        let oracle = desc_oracle(6);
        let cfg = AttackConfig {
            num_sequences: 3,
            max_length: 5,
            sampling: SamplingPolicy::Greedy,
            start_item_policy: StartItemPolicy::Uniform,
            seed: 8,
            ..Default::default()
        };
        let gen = autoregressive_generate(&oracle, &cfg, None).unwrap();
        for seq in &gen.dataset.sequences {
            // after the start item, greedy always lands on item 0
            assert!(seq.items[1..].iter().all(|&i| i == 0), "{:?}", seq.items);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let oracle = desc_oracle(20);
        let cfg = AttackConfig {
            num_sequences: 12,
            max_length: 9,
            seed: 3,
            ..Default::default()
        };
        let a = autoregressive_generate(&oracle, &cfg, None).unwrap();
        let b = autoregressive_generate(&oracle, &cfg, None).unwrap();
        assert_eq!(a, b);
        let c = autoregressive_generate(
            &oracle,
            &AttackConfig { seed: 4, ..cfg },
            None,
        )
        .unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn query_budget_matches_lengths() {
        let oracle = desc_oracle(20);
        let cfg = AttackConfig {
            num_sequences: 25,
            max_length: 11,
            seed: 5,
            ..Default::default()
        };
        let gen = autoregressive_generate(&oracle, &cfg, None).unwrap();
        assert_eq!(gen.dataset.sequences.len(), 25);
        let total: usize = gen.dataset.num_interactions();
        assert_eq!(gen.queries_issued, (total - 25) as u64);
        // lengths honor the documented [5, max_length] draw
        assert!(gen
            .dataset
            .sequences
            .iter()
            .all(|s| (5..=11).contains(&s.items.len())));
    }

    #[test]
    fn popularity_starts_require_counts() {
        let oracle = desc_oracle(10);
        let cfg = AttackConfig {
            num_sequences: 4,
            max_length: 6,
            start_item_policy: StartItemPolicy::PopularitySampled,
            seed: 1,
            ..Default::default()
        };
        assert!(autoregressive_generate(&oracle, &cfg, None).is_err());
        let counts: Vec<u64> = (0..10).map(|j| (10 - j) as u64).collect();
        let gen = autoregressive_generate(&oracle, &cfg, Some(&counts)).unwrap();
        assert_eq!(gen.dataset.sequences.len(), 4);
    }

    #[test]
    fn generated_file_carries_provenance_comment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.txt");
        let oracle = desc_oracle(10);
        let cfg = AttackConfig {
            num_sequences: 3,
            max_length: 6,
            seed: 2,
            ..Default::default()
        };
        let gen = autoregressive_generate(&oracle, &cfg, None).unwrap();
        save_generated(&gen, &path, "abc123").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("#generated_by=abc123"));
        let loaded = crate::corpus::load_dataset(&path).unwrap();
        assert_eq!(loaded, gen.dataset);
    }

    #[test]
    fn finetune_with_zero_learning_rate_is_identity() {
        let synth = SyntheticConfig {
            vocab_size: 50,
            num_users: 60,
            mean_length: 8.0,
            seed: 7,
            ..Default::default()
        };
        let ds = synth_generate(&synth).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            embed_dim: 8,
            max_context: 8,
            ..Default::default()
        };
        let victim = train_neural(&ds, &cfg, &[]).unwrap();
        let attack = AttackConfig {
            num_sequences: 5,
            max_length: 6,
            epochs: 2,
            train: TrainConfig {
                learning_rate: 0.0,
                ..cfg.clone()
            },
            seed: 9,
            ..Default::default()
        };
        let data = autoregressive_generate(&victim, &attack, None).unwrap();
        let tuned = finetune(&victim, &data.dataset, &attack).unwrap();
        for prefix in [vec![0u32], vec![3, 7], vec![11, 4, 2]] {
            assert_eq!(
                victim.score(&prefix).unwrap(),
                tuned.score(&prefix).unwrap()
            );
        }
    }

    #[test]
    fn attacks_do_not_mutate_inputs() {
        use rand::Rng;
        let synth = SyntheticConfig {
            vocab_size: 50,
            num_users: 80,
            mean_length: 8.0,
            seed: 17,
            ..Default::default()
        };
        let ds = synth_generate(&synth).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            embed_dim: 8,
            max_context: 8,
            ..Default::default()
        };
        let victim = train_neural(&ds, &cfg, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let prefixes: Vec<Vec<ItemId>> = (0..100)
            .map(|_| {
                let len = rng.random_range(1usize..6);
                (0..len).map(|_| rng.random_range(0u32..50)).collect()
            })
            .collect();
        let before: Vec<Vec<f64>> = prefixes.iter().map(|p| victim.score(p).unwrap()).collect();

        let attack = AttackConfig {
            num_sequences: 30,
            max_length: 8,
            epochs: 1,
            train: TrainConfig {
                epochs: 1,
                ..cfg.clone()
            },
            seed: 4,
            ..Default::default()
        };
        let _surrogate = distill(&victim, &attack, None).unwrap();
        let data = autoregressive_generate(&victim, &attack, None).unwrap();
        let _tuned = finetune(&victim, &data.dataset, &attack).unwrap();

        for (prefix, expected) in prefixes.iter().zip(&before) {
            assert_eq!(&victim.score(prefix).unwrap(), expected);
        }
    }

    #[test]
    fn distilled_surrogate_beats_popularity_on_its_own_data() {
        let synth = SyntheticConfig {
            vocab_size: 60,
            num_users: 200,
            mean_length: 10.0,
            seed: 21,
            concentration: 64.0,
            ..Default::default()
        };
        let ds = synth_generate(&synth).unwrap();
        let target = train_markov(&ds, 1, 0.5).unwrap();
        let attack = AttackConfig {
            num_sequences: 150,
            max_length: 10,
            epochs: 6,
            train: TrainConfig {
                epochs: 6,
                learning_rate: 0.5,
                embed_dim: 16,
                max_context: 10,
                ..Default::default()
            },
            seed: 11,
            ..Default::default()
        };
        let surrogate = distill(&target, &attack, None).unwrap();
        let split = leave_one_out_split(&ds);
        let report =
            crate::metrics::evaluate(&surrogate, &split.validation, &[10]).unwrap();
        let pop = item_popularity(&ds);
        let pop_report = crate::metrics::evaluate_fn(
            |_| Ok(pop.iter().map(|&c| c as f64).collect()),
            &split.validation,
            &[10],
        )
        .unwrap();
        assert!(
            report.recall(10).unwrap() > pop_report.recall(10).unwrap(),
            "surrogate {} <= popularity {}",
            report.recall(10).unwrap(),
            pop_report.recall(10).unwrap()
        );
    }
}
