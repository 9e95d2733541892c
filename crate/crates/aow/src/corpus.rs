//! Interaction datasets: loading, synthesis, splitting, persistence.
//!
//! The on-disk format is UTF-8 text, one sequence per line:
//! `user_id<TAB>id1,id2,...`, with an optional first line `#vocab=<N>`
//! overriding the inferred vocabulary size. Other lines starting with `#`
//! (e.g. `#generated_by=<hash>` on attacker-generated data) are treated as
//! comments.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::poisson;

/// Dense item index; valid ids satisfy `id < vocab_size`.
pub type ItemId = u32;

/// A `(context, target)` next-item prediction query.
pub type Query = (Vec<ItemId>, ItemId);

/// Sequences longer than this are truncated at load time, keeping the most
/// recent items.
pub const DEFAULT_MAX_SEQ_LEN: usize = 200;

/// One user's interaction history, ordered oldest to newest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: u64,
    pub items: Vec<ItemId>,
}

/// A set of user interaction sequences over a dense item vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub sequences: Vec<UserSequence>,
    pub vocab_size: usize,
}

impl InteractionDataset {
    pub fn new(sequences: Vec<UserSequence>, vocab_size: usize) -> Self {
        Self {
            sequences,
            vocab_size,
        }
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    /// Total number of interactions across all sequences.
    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Remap item ids to a dense `0..n` range ordered by first appearance.
    ///
    /// Returns the compacted dataset and the table mapping each dense id back
    /// to the original one. Useful when ingesting data with sparse raw ids;
    /// datasets produced by [`synth_generate`] are already dense.
    pub fn compact(&self) -> (InteractionDataset, Vec<ItemId>) {
        let mut remap = vec![ItemId::MAX; self.vocab_size];
        let mut dense_to_raw = Vec::new();
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                let items = s
                    .items
                    .iter()
                    .map(|&i| {
                        let slot = &mut remap[i as usize];
                        if *slot == ItemId::MAX {
                            *slot = dense_to_raw.len() as ItemId;
                            dense_to_raw.push(i);
                        }
                        *slot
                    })
                    .collect();
                UserSequence {
                    user_id: s.user_id,
                    items,
                }
            })
            .collect();
        let vocab_size = dense_to_raw.len();
        (
            InteractionDataset {
                sequences,
                vocab_size,
            },
            dense_to_raw,
        )
    }
}

/// Persist a dense-to-original id table produced by
/// [`InteractionDataset::compact`]; line `i` holds the original id of dense
/// item `i`.
pub fn save_remap(remap: &[ItemId], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for id in remap {
        text.push_str(&format!("{id}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_remap(path: impl AsRef<Path>) -> Result<Vec<ItemId>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .enumerate()
        .map(|(idx, line)| {
            line.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("invalid item id `{line}`"),
            })
        })
        .collect()
}

/// Leave-one-out split of a dataset.
///
/// For each source sequence of length `L >= 3`: the test query targets item
/// `L` given items `1..L-1`, the validation query targets item `L-1` given
/// items `1..L-2`, and the train portion is items `1..L-2`. Length-2
/// sequences contribute only a test query; length-1 sequences are skipped and
/// tallied.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub train: InteractionDataset,
    pub validation: Vec<Query>,
    pub test: Vec<Query>,
    /// Number of sequences too short to contribute anything.
    pub skipped: usize,
}

/// Parameters of the planted-Markov synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    pub num_users: usize,
    pub mean_length: f64,
    pub markov_order: usize,
    /// Peakedness of the planted transition table; larger values concentrate
    /// each context's next-item distribution on fewer items, raising the
    /// ceiling a learned model can reach over the popularity baseline.
    pub concentration: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 500,
            num_users: 2000,
            mean_length: 20.0,
            markov_order: 1,
            concentration: 64.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 50 {
            return Err(Error::InvalidArgument(format!(
                "synthetic vocab_size must be >= 50, got {}",
                self.vocab_size
            )));
        }
        if self.num_users < 10 {
            return Err(Error::InvalidArgument(format!(
                "synthetic num_users must be >= 10, got {}",
                self.num_users
            )));
        }
        if self.mean_length < 4.0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic mean_length must be >= 4, got {}",
                self.mean_length
            )));
        }
        if self.markov_order == 0 {
            return Err(Error::InvalidArgument(
                "synthetic markov_order must be >= 1".into(),
            ));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::InvalidArgument(
                "synthetic concentration must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Load a dataset from the text format, truncating sequences to
/// [`DEFAULT_MAX_SEQ_LEN`] most recent items.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<InteractionDataset> {
    load_dataset_capped(path, DEFAULT_MAX_SEQ_LEN)
}

/// Load with an explicit maximum sequence length.
pub fn load_dataset_capped(path: impl AsRef<Path>, max_len: usize) -> Result<InteractionDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_dataset(&text, &path.display().to_string(), max_len)
}

/// Parse the text format. Exposed for in-memory round-trip testing.
pub fn parse_dataset(text: &str, path: &str, max_len: usize) -> Result<InteractionDataset> {
    let mut sequences = Vec::new();
    let mut vocab_override: Option<usize> = None;
    let mut max_item: Option<ItemId> = None;
    let mut seen_users = HashSet::new();

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_string(),
            line: lineno,
            msg,
        };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(value) = rest.strip_prefix("vocab=") {
                if lineno != 1 {
                    return Err(parse_err("#vocab header only allowed on line 1".into()));
                }
                let v: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(format!("invalid #vocab value `{value}`")))?;
                vocab_override = Some(v);
            }
            // other # lines are comments (e.g. #generated_by=...)
            continue;
        }
        let (user_part, items_part) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `user_id<TAB>items`".into()))?;
        let user_id: u64 = user_part
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("invalid user id `{user_part}`")))?;
        if !seen_users.insert(user_id) {
            return Err(parse_err(format!("duplicate user id {user_id}")));
        }
        let mut items = Vec::new();
        for tok in items_part.split(',') {
            let item: ItemId = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("invalid item id `{tok}`")))?;
            max_item = Some(max_item.map_or(item, |m: ItemId| m.max(item)));
            items.push(item);
        }
        if items.is_empty() {
            return Err(parse_err("empty item list".into()));
        }
        if items.len() > max_len {
            items.drain(..items.len() - max_len);
        }
        sequences.push(UserSequence { user_id, items });
    }

    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let inferred = max_item.map_or(0, |m| m as usize + 1);
    let vocab_size = match vocab_override {
        Some(v) => {
            if v < inferred {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: 1,
                    msg: format!("#vocab={v} smaller than max item id + 1 = {inferred}"),
                });
            }
            v
        }
        None => inferred,
    };
    Ok(InteractionDataset {
        sequences,
        vocab_size,
    })
}

/// Serialize a dataset to the text format.
pub fn format_dataset(ds: &InteractionDataset) -> String {
    format_dataset_with_comment(ds, None)
}

pub(crate) fn format_dataset_with_comment(
    ds: &InteractionDataset,
    extra_comment: Option<&str>,
) -> String {
    if ds.sequences.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    out.push_str(&format!("#vocab={}\n", ds.vocab_size));
    if let Some(comment) = extra_comment {
        out.push_str(&format!("#{comment}\n"));
    }
    for seq in &ds.sequences {
        let items: Vec<String> = seq.items.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("{}\t{}\n", seq.user_id, items.join(",")));
    }
    out
}

/// Write a dataset; round-trips bit-identically through [`load_dataset`].
pub fn save_dataset(ds: &InteractionDataset, path: impl AsRef<Path>) -> Result<()> {
    save_dataset_with_comment(ds, path, None)
}

pub(crate) fn save_dataset_with_comment(
    ds: &InteractionDataset,
    path: impl AsRef<Path>,
    extra_comment: Option<&str>,
) -> Result<()> {
    let path = path.as_ref();
    let text = format_dataset_with_comment(ds, extra_comment);
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Leave-one-out split (last item → test, second-to-last → validation).
pub fn leave_one_out_split(ds: &InteractionDataset) -> SplitBundle {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut skipped = 0usize;

    for seq in &ds.sequences {
        let items = &seq.items;
        match items.len() {
            0 | 1 => skipped += 1,
            2 => {
                test.push((items[..1].to_vec(), items[1]));
            }
            len => {
                test.push((items[..len - 1].to_vec(), items[len - 1]));
                validation.push((items[..len - 2].to_vec(), items[len - 2]));
                train.push(UserSequence {
                    user_id: seq.user_id,
                    items: items[..len - 2].to_vec(),
                });
            }
        }
    }

    SplitBundle {
        train: InteractionDataset {
            sequences: train,
            vocab_size: ds.vocab_size,
        },
        validation,
        test,
        skipped,
    }
}

/// Per-item interaction counts; items never seen have count 0.
pub fn item_popularity(ds: &InteractionDataset) -> Vec<u64> {
    let mut counts = vec![0u64; ds.vocab_size];
    for seq in &ds.sequences {
        for &item in &seq.items {
            counts[item as usize] += 1;
        }
    }
    counts
}

// Unit uniform derived from a hashed (seed, context, slot) triple; lets the
// planted transition table be evaluated lazily for any context without
// materializing vocab^order rows.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn hashed_unit(seed: u64, context: &[ItemId], slot: u64) -> f64 {
    let mut h = splitmix64(seed ^ 0xA0F1_5EED);
    for &item in context {
        h = splitmix64(h ^ u64::from(item));
    }
    h = splitmix64(h ^ slot);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Generate a seeded dataset from a planted Markov chain.
///
/// Identical configs (including the seed) produce byte-identical datasets.
pub fn synth_generate(cfg: &SyntheticConfig) -> Result<InteractionDataset> {
    cfg.validate()?;
    let vocab = cfg.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Harmonic initial-item weights over a seeded permutation, so interaction
    // counts spread enough to make cold/pop items distinct.
    let mut perm: Vec<usize> = (0..vocab).collect();
    perm.shuffle(&mut rng);
    let mut initial_cum = Vec::with_capacity(vocab);
    let mut acc = 0.0f64;
    let mut rank_of_item = vec![0usize; vocab];
    for (pos, &item) in perm.iter().enumerate() {
        rank_of_item[item] = pos;
    }
    for &rank in rank_of_item.iter() {
        acc += 1.0 / (1.0 + rank as f64);
        initial_cum.push(acc);
    }
    let initial_total = acc;

    let mut weights = vec![0.0f64; vocab];
    let mut sequences = Vec::with_capacity(cfg.num_users);
    for user in 0..cfg.num_users {
        let len = poisson(&mut rng, cfg.mean_length).max(2);
        let mut items: Vec<ItemId> = Vec::with_capacity(len);

        let draw: f64 = rng.random_range(0.0..initial_total);
        let first = initial_cum.partition_point(|&c| c <= draw).min(vocab - 1);
        items.push(first as ItemId);

        while items.len() < len {
            let start = items.len().saturating_sub(cfg.markov_order);
            let context = &items[start..];
            let mut total = 0.0f64;
            for (j, w) in weights.iter_mut().enumerate() {
                let u = hashed_unit(cfg.seed, context, j as u64);
                *w = (cfg.concentration * u).exp();
                total += *w;
            }
            let mut dart: f64 = rng.random_range(0.0..total);
            let mut chosen = vocab - 1;
            for (j, &w) in weights.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    chosen = j;
                    break;
                }
            }
            items.push(chosen as ItemId);
        }
        sequences.push(UserSequence {
            user_id: user as u64,
            items,
        });
    }

    Ok(InteractionDataset {
        sequences,
        vocab_size: vocab,
    })
}
