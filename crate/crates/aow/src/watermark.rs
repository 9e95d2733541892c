//! Autoregressive out-of-distribution watermarks.
//!
//! A watermark sequence starts from a chosen initial item and grows by
//! querying an oracle scorer with the current prefix and drawing the next
//! item from the oracle's lowest-ranked items. The generating oracle is then
//! guaranteed to rank every watermark target outside its top `vocab - M`,
//! so verification against it reports exactly zero Recall@k / NDCG@k for all
//! `k <= vocab - M`; a model that memorized the sequence scores highly
//! instead.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{item_popularity, InteractionDataset, ItemId, Query, UserSequence};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::scorer::ScorerModel;

/// How the first watermark item is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialPolicy {
    /// Item with the fewest interactions (ties to the smaller id).
    Cold,
    /// Item with the most interactions (ties to the smaller id).
    Pop,
    /// A caller-chosen item.
    Explicit(ItemId),
}

impl fmt::Display for InitialPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialPolicy::Cold => write!(f, "cold"),
            InitialPolicy::Pop => write!(f, "pop"),
            InitialPolicy::Explicit(i) => write!(f, "explicit:{i}"),
        }
    }
}

/// Which end of the oracle's ranking the next item is drawn from.
///
/// `Top` exists only as a diagnostic for the selection-range study: top-range
/// sequences are in-distribution and will generally be detectable in
/// independently trained models, which is exactly why production watermarks
/// draw from the bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRange {
    Bottom,
    Top,
}

/// Watermark generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSpec {
    /// Sequence length (>= 2).
    pub n: usize,
    /// Size of the bottom-score candidate range.
    pub m: usize,
    pub initial_policy: InitialPolicy,
    /// Watermark-to-data ratio used at injection time.
    pub wdr: f64,
    pub seed: u64,
    /// Allow an item to appear more than once in the sequence.
    #[serde(default)]
    pub allow_repeats: bool,
}

impl Default for WatermarkSpec {
    fn default() -> Self {
        Self {
            n: 5,
            m: 100,
            initial_policy: InitialPolicy::Cold,
            wdr: 0.1,
            seed: 0,
            allow_repeats: false,
        }
    }
}

impl WatermarkSpec {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!(
                "watermark length n must be >= 2, got {}",
                self.n
            )));
        }
        if self.m == 0 || self.m > vocab_size {
            return Err(Error::InvalidArgument(format!(
                "M = {} out of range 1..={vocab_size}",
                self.m
            )));
        }
        if !(self.wdr >= 0.0) {
            return Err(Error::InvalidArgument("wdr must be >= 0".into()));
        }
        if !self.allow_repeats && self.n > vocab_size {
            return Err(Error::InvalidArgument(format!(
                "n = {} exceeds vocab {vocab_size} with repeats disallowed",
                self.n
            )));
        }
        Ok(())
    }
}

/// Where each generated item ranked under the generating oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepProvenance {
    /// Length of the prefix that produced this step's scores.
    pub prefix_len: usize,
    /// 1-based rank of the chosen item in those scores.
    pub rank: usize,
}

/// A generated watermark sequence with its spec echo and per-step provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkSequence {
    pub items: Vec<ItemId>,
    pub spec: WatermarkSpec,
    pub provenance: Vec<StepProvenance>,
}

/// Verification output: metrics over the `n - 1` truncations plus the raw
/// per-truncation ranks for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub metrics: MetricsReport,
    pub ranks: Vec<usize>,
}

/// Resolve the initial watermark item for a dataset.
pub fn select_initial_item(ds: &InteractionDataset, policy: InitialPolicy) -> Result<ItemId> {
    if ds.is_empty() || ds.vocab_size == 0 {
        return Err(Error::EmptyDataset);
    }
    match policy {
        InitialPolicy::Explicit(item) => {
            if item as usize >= ds.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "explicit initial item {item} out of vocabulary (size {})",
                    ds.vocab_size
                )));
            }
            Ok(item)
        }
        InitialPolicy::Cold | InitialPolicy::Pop => {
            let counts = item_popularity(ds);
            let mut best = 0usize;
            for (j, &c) in counts.iter().enumerate() {
                let better = match policy {
                    InitialPolicy::Cold => c < counts[best],
                    _ => c > counts[best],
                };
                if better {
                    best = j;
                }
            }
            Ok(best as ItemId)
        }
    }
}

// Items ordered by the scoring rank (descending score, ties to smaller id).
// Position p (0-based) holds the item of rank p + 1, so the slice
// `[vocab - m..]` is exactly the set of items ranked outside the top
// `vocab - m` — the pool whose members can never enter a top-k list for
// k <= vocab - m. For tie-free scores this coincides with `bottom_m`.
fn rank_order(scores: &[f64]) -> Result<Vec<ItemId>> {
    for (j, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteScore { item: j });
        }
    }
    let mut idx: Vec<ItemId> = (0..scores.len() as ItemId).collect();
    idx.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(idx)
}

/// Generate a watermark by drawing each next item from the oracle's bottom-M
/// range. Deterministic given `(oracle, spec, ds)`.
pub fn generate_watermark(
    oracle: &ScorerModel,
    spec: &WatermarkSpec,
    ds: &InteractionDataset,
) -> Result<WatermarkSequence> {
    generate_watermark_in_range(oracle, spec, ds, SelectionRange::Bottom)
}

/// As [`generate_watermark`] with caller-pinned steps: `overrides[j]`, when
/// set, fixes the item appended after prefix length `j + 1` instead of a
/// seeded draw. The override must still lie in that step's candidate pool, so
/// pinned sequences keep the zero-detection guarantee; model owners can use
/// this to carve a recognizable pattern into the watermark.
pub fn generate_watermark_with_overrides(
    oracle: &ScorerModel,
    spec: &WatermarkSpec,
    ds: &InteractionDataset,
    overrides: &[Option<ItemId>],
) -> Result<WatermarkSequence> {
    generate_impl(oracle, spec, ds, SelectionRange::Bottom, overrides)
}

/// Generation with an explicit selection range. `SelectionRange::Top` is a
/// diagnostic mode for the range study and must not be used for production
/// watermarks (top-range sequences carry no zero-detection guarantee).
pub fn generate_watermark_in_range(
    oracle: &ScorerModel,
    spec: &WatermarkSpec,
    ds: &InteractionDataset,
    range: SelectionRange,
) -> Result<WatermarkSequence> {
    generate_impl(oracle, spec, ds, range, &[])
}

fn generate_impl(
    oracle: &ScorerModel,
    spec: &WatermarkSpec,
    ds: &InteractionDataset,
    range: SelectionRange,
    overrides: &[Option<ItemId>],
) -> Result<WatermarkSequence> {
    let vocab = oracle.vocab_size();
    spec.validate(vocab)?;
    if !oracle.inference_mode() {
        return Err(Error::InvalidArgument(
            "oracle must be in inference mode".into(),
        ));
    }
    if ds.vocab_size != vocab {
        return Err(Error::VocabMismatch {
            expected: vocab,
            actual: ds.vocab_size,
        });
    }

    let initial = select_initial_item(ds, spec.initial_policy)?;
    let mut items = vec![initial];
    let mut used = vec![false; vocab];
    used[initial as usize] = true;
    let mut provenance = Vec::with_capacity(spec.n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    while items.len() < spec.n {
        let scores = oracle.score(&items)?;
        let order = rank_order(&scores)?;
        let band = match range {
            SelectionRange::Bottom => &order[vocab - spec.m..],
            SelectionRange::Top => &order[..spec.m],
        };
        // canonical ascending-id candidate list so the seeded draw does not
        // depend on score perturbations inside the band
        let mut candidates: Vec<ItemId> = band
            .iter()
            .copied()
            .filter(|&i| spec.allow_repeats || !used[i as usize])
            .collect();
        candidates.sort_unstable();
        if candidates.is_empty() {
            return Err(Error::ExhaustedCandidates {
                step: items.len(),
                m: spec.m,
            });
        }
        let chosen = match overrides.get(items.len() - 1).copied().flatten() {
            Some(pinned) => {
                if !candidates.contains(&pinned) {
                    return Err(Error::InvalidArgument(format!(
                        "override item {pinned} at step {} is outside the candidate pool",
                        items.len()
                    )));
                }
                pinned
            }
            None => candidates[rng.random_range(0..candidates.len())],
        };
        let rank = 1 + order.iter().position(|&i| i == chosen).unwrap();
        provenance.push(StepProvenance {
            prefix_len: items.len(),
            rank,
        });
        used[chosen as usize] = true;
        items.push(chosen);
    }

    Ok(WatermarkSequence {
        items,
        spec: spec.clone(),
        provenance,
    })
}

/// The `n - 1` prefix truncations: pair `j` has context `items[..j]` and
/// target `items[j]`.
pub fn truncations(wm: &WatermarkSequence) -> Vec<Query> {
    (1..wm.items.len())
        .map(|j| (wm.items[..j].to_vec(), wm.items[j]))
        .collect()
}

/// Round-half-up duplicate count used at injection time.
pub fn duplication_count(num_sequences: usize, wdr: f64) -> usize {
    (wdr * num_sequences as f64 + 0.5).floor() as usize
}

/// Append `round(wdr * |train|)` copies of the watermark sequence as new
/// synthetic users. The original sequences are untouched.
pub fn inject(
    train: &InteractionDataset,
    wm: &WatermarkSequence,
    wdr: f64,
) -> InteractionDataset {
    let copies = duplication_count(train.sequences.len(), wdr);
    let mut sequences = train.sequences.clone();
    let next_user = train
        .sequences
        .iter()
        .map(|s| s.user_id + 1)
        .max()
        .unwrap_or(0);
    for c in 0..copies {
        sequences.push(UserSequence {
            user_id: next_user + c as u64,
            items: wm.items.clone(),
        });
    }
    let wm_vocab = wm.items.iter().map(|&i| i as usize + 1).max().unwrap_or(0);
    InteractionDataset {
        sequences,
        vocab_size: train.vocab_size.max(wm_vocab),
    }
}

/// Evaluate watermark validity: metrics over the truncations plus
/// per-truncation ranks.
pub fn verify(model: &ScorerModel, wm: &WatermarkSequence, ks: &[usize]) -> Result<ValidityReport> {
    if !model.inference_mode() {
        return Err(Error::InvalidArgument(
            "model must be in inference mode".into(),
        ));
    }
    let wm_vocab = wm.items.iter().map(|&i| i as usize + 1).max().unwrap_or(0);
    if wm_vocab > model.vocab_size() {
        return Err(Error::VocabMismatch {
            expected: model.vocab_size(),
            actual: wm_vocab,
        });
    }
    let queries = truncations(wm);
    let metrics = metrics::evaluate(model, &queries, ks)?.with_label("validity");
    let ranks = metrics::query_ranks_fn(&|p: &[ItemId]| model.score(p), &queries)?;
    Ok(ValidityReport { metrics, ranks })
}

/// Re-derive provenance independently: true iff every non-initial item ranks
/// within the bottom M under `oracle` at its own prefix.
pub fn audit_watermark(oracle: &ScorerModel, wm: &WatermarkSequence) -> Result<bool> {
    if !oracle.inference_mode() {
        return Err(Error::InvalidArgument(
            "oracle must be in inference mode".into(),
        ));
    }
    let vocab = oracle.vocab_size();
    for j in 1..wm.items.len() {
        let scores = oracle.score(&wm.items[..j])?;
        let rank = crate::metrics::rank_of(&scores, wm.items[j])?;
        if rank <= vocab - wm.spec.m {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Write the watermark file: a spec echo line, the item line, then one
/// `prefix_len,rank` provenance line per generated step.
pub fn save_watermark(wm: &WatermarkSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_watermark(wm))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn format_watermark(wm: &WatermarkSequence) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "n={};M={};policy={};wdr={};seed={}\n",
        wm.spec.n, wm.spec.m, wm.spec.initial_policy, wm.spec.wdr, wm.spec.seed
    ));
    let items: Vec<String> = wm.items.iter().map(|i| i.to_string()).collect();
    out.push_str(&items.join(","));
    out.push('\n');
    for p in &wm.provenance {
        out.push_str(&format!("{},{}\n", p.prefix_len, p.rank));
    }
    out
}

pub fn load_watermark(path: impl AsRef<Path>) -> Result<WatermarkSequence> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_watermark(&text, &path.display().to_string())
}

pub fn parse_watermark(text: &str, path: &str) -> Result<WatermarkSequence> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let mut spec = WatermarkSpec::default();
    for field in header.split(';') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| err(1, format!("malformed header field `{field}`")))?;
        match key {
            "n" => spec.n = value.parse().map_err(|_| err(1, format!("bad n `{value}`")))?,
            "M" => spec.m = value.parse().map_err(|_| err(1, format!("bad M `{value}`")))?,
            "policy" => {
                spec.initial_policy = match value {
                    "cold" => InitialPolicy::Cold,
                    "pop" => InitialPolicy::Pop,
                    other => match other.strip_prefix("explicit:") {
                        Some(id) => InitialPolicy::Explicit(
                            id.parse().map_err(|_| err(1, format!("bad policy `{other}`")))?,
                        ),
                        None => return Err(err(1, format!("bad policy `{other}`"))),
                    },
                }
            }
            "wdr" => {
                spec.wdr = value
                    .parse()
                    .map_err(|_| err(1, format!("bad wdr `{value}`")))?
            }
            "seed" => {
                spec.seed = value
                    .parse()
                    .map_err(|_| err(1, format!("bad seed `{value}`")))?
            }
            other => return Err(err(1, format!("unknown header key `{other}`"))),
        }
    }
    let items_line = lines.next().ok_or_else(|| err(2, "missing item line".into()))?;
    let items: Vec<ItemId> = items_line
        .split(',')
        .map(|tok| tok.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(2, "invalid item id".into()))?;
    if items.len() != spec.n {
        return Err(err(2, format!("expected {} items, found {}", spec.n, items.len())));
    }
    let mut provenance = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| err(i + 3, "expected `prefix_len,rank`".into()))?;
        provenance.push(StepProvenance {
            prefix_len: a.trim().parse().map_err(|_| err(i + 3, "bad prefix_len".into()))?,
            rank: b.trim().parse().map_err(|_| err(i + 3, "bad rank".into()))?,
        });
    }
    if provenance.len() != spec.n - 1 {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 3,
            msg: format!(
                "expected {} provenance lines, found {}",
                spec.n - 1,
                provenance.len()
            ),
        });
    }
    Ok(WatermarkSequence {
        items,
        spec,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SyntheticConfig};
    use crate::scorer::train_markov;

    fn ds(seqs: Vec<Vec<ItemId>>, vocab: usize) -> InteractionDataset {
        InteractionDataset {
            sequences: seqs
                .into_iter()
                .enumerate()
                .map(|(u, items)| UserSequence {
                    user_id: u as u64,
                    items,
                })
                .collect(),
            vocab_size: vocab,
        }
    }

    #[test]
    fn initial_item_selection() {
        // counts: item 1 -> 5, item 2 -> 1, item 3 -> 3
        let d = ds(
            vec![vec![1, 1, 1, 1, 1], vec![2], vec![3, 3, 3]],
            4,
        );
        assert_eq!(select_initial_item(&d, InitialPolicy::Cold).unwrap(), 0);
        // item 0 has count 0 — make it present to match the intended case
        let d = ds(vec![vec![1, 1, 1, 1, 1], vec![2], vec![3, 3, 3], vec![0]], 4);
        // counts: 0->1, 1->5, 2->1, 3->3; cold tie between 0 and 2 -> 0
        assert_eq!(select_initial_item(&d, InitialPolicy::Cold).unwrap(), 0);
        assert_eq!(select_initial_item(&d, InitialPolicy::Pop).unwrap(), 1);
        assert_eq!(
            select_initial_item(&d, InitialPolicy::Explicit(3)).unwrap(),
            3
        );
        assert!(select_initial_item(&d, InitialPolicy::Explicit(7)).is_err());
    }

    #[test]
    fn all_equal_counts_tie_to_item_zero() {
        let d = ds(vec![vec![0, 1, 2, 3]], 4);
        assert_eq!(select_initial_item(&d, InitialPolicy::Cold).unwrap(), 0);
        assert_eq!(select_initial_item(&d, InitialPolicy::Pop).unwrap(), 0);
    }

    /// Oracle whose scores always descend with item id: popularity counts
    /// vocab - j for item j and an order too large to ever match a context,
    /// so every query backs off to the same ranking 0, 1, ..., vocab - 1.
    fn descending_oracle(vocab: usize) -> (crate::scorer::ScorerModel, InteractionDataset) {
        let mut seqs = Vec::new();
        for item in 0..vocab as ItemId {
            for _ in 0..(vocab as u32 - item) {
                seqs.push(vec![item]);
            }
        }
        let d = ds(seqs, vocab);
        (train_markov(&d, 2, 0.5).unwrap(), d)
    }

    #[test]
    fn hand_traced_generation_with_m1_repeats() {
        // with M = 1 and repeats allowed, the single lowest-ranked item (4)
        // is forced at every step
        let (oracle, d) = descending_oracle(5);
        let spec = WatermarkSpec {
            n: 4,
            m: 1,
            initial_policy: InitialPolicy::Explicit(0),
            wdr: 0.1,
            seed: 9,
            allow_repeats: true,
        };
        let wm = generate_watermark(&oracle, &spec, &d).unwrap();
        assert_eq!(wm.items, vec![0, 4, 4, 4]);
        assert!(wm.provenance.iter().all(|p| p.rank > 5 - 1));
    }

    #[test]
    fn hand_traced_generation_no_repeats() {
        // M = 2 band is always {3, 4}; without repeats the two steps must
        // exhaust it in some seeded order, and every pick stays in the band
        let (oracle, d) = descending_oracle(5);
        let spec = WatermarkSpec {
            n: 3,
            m: 2,
            initial_policy: InitialPolicy::Explicit(0),
            wdr: 0.1,
            seed: 9,
            allow_repeats: false,
        };
        let wm = generate_watermark(&oracle, &spec, &d).unwrap();
        let mut tail = wm.items[1..].to_vec();
        tail.sort_unstable();
        assert_eq!(wm.items[0], 0);
        assert_eq!(tail, vec![3, 4]);
        assert!(wm.provenance.iter().all(|p| p.rank > 5 - 2));
    }

    #[test]
    fn generation_is_deterministic() {
        let synth = SyntheticConfig {
            vocab_size: 60,
            num_users: 80,
            mean_length: 8.0,
            seed: 3,
            ..Default::default()
        };
        let d = synth_generate(&synth).unwrap();
        let oracle = train_markov(&d, 1, 0.5).unwrap();
        let spec = WatermarkSpec {
            n: 6,
            m: 12,
            seed: 41,
            ..Default::default()
        };
        let a = generate_watermark(&oracle, &spec, &d).unwrap();
        let b = generate_watermark(&oracle, &spec, &d).unwrap();
        assert_eq!(a, b);
        let c = generate_watermark(
            &oracle,
            &WatermarkSpec { seed: 42, ..spec },
            &d,
        )
        .unwrap();
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn provenance_ranks_stay_in_bottom_band() {
        let synth = SyntheticConfig {
            vocab_size: 80,
            num_users: 60,
            mean_length: 10.0,
            seed: 8,
            ..Default::default()
        };
        let d = synth_generate(&synth).unwrap();
        let oracle = train_markov(&d, 1, 0.5).unwrap();
        let spec = WatermarkSpec {
            n: 10,
            m: 20,
            seed: 5,
            ..Default::default()
        };
        let wm = generate_watermark(&oracle, &spec, &d).unwrap();
        for p in &wm.provenance {
            assert!(p.rank > 80 - 20, "rank {} within top band", p.rank);
        }
        // no repeated items with allow_repeats = false
        let mut seen = std::collections::HashSet::new();
        assert!(wm.items.iter().all(|&i| seen.insert(i)));
        assert!(audit_watermark(&oracle, &wm).unwrap());
    }

    #[test]
    fn audit_rejects_tampered_sequence() {
        let synth = SyntheticConfig {
            vocab_size: 60,
            num_users: 60,
            mean_length: 8.0,
            seed: 12,
            ..Default::default()
        };
        let d = synth_generate(&synth).unwrap();
        let oracle = train_markov(&d, 1, 0.5).unwrap();
        let spec = WatermarkSpec {
            n: 5,
            m: 10,
            seed: 2,
            ..Default::default()
        };
        let mut wm = generate_watermark(&oracle, &spec, &d).unwrap();
        // swap one item to the oracle's top-1 at that prefix
        let scores = oracle.score(&wm.items[..2]).unwrap();
        let order = rank_order(&scores).unwrap();
        wm.items[2] = order[0];
        assert!(!audit_watermark(&oracle, &wm).unwrap());
    }

    #[test]
    fn exhausted_pool_advises_larger_m() {
        let d = ds(vec![vec![0, 1, 2]], 3);
        let oracle = train_markov(&d, 1, 0.5).unwrap();
        let spec = WatermarkSpec {
            n: 3,
            m: 1,
            initial_policy: InitialPolicy::Explicit(0),
            seed: 0,
            ..Default::default()
        };
        // vocab 3, M = 1: the bottom-rank slot holds item 2 at both prefixes,
        // so after it is used the pool empties
        let err = generate_watermark(&oracle, &spec, &d).unwrap_err();
        match err {
            Error::ExhaustedCandidates { step, m } => {
                assert_eq!(step, 2);
                assert_eq!(m, 1);
            }
            other => panic!("expected ExhaustedCandidates, got {other:?}"),
        }
    }

    #[test]
    fn per_step_overrides_pin_items() {
        let (oracle, d) = descending_oracle(6);
        let spec = WatermarkSpec {
            n: 4,
            m: 3,
            initial_policy: InitialPolicy::Explicit(0),
            seed: 1,
            ..Default::default()
        };
        // band is always ranks {4,5,6} = items {3,4,5}
        let wm = generate_watermark_with_overrides(
            &oracle,
            &spec,
            &d,
            &[Some(4), None, Some(3)],
        )
        .unwrap();
        assert_eq!(wm.items[1], 4);
        assert_eq!(wm.items[3], 3);
        assert!(audit_watermark(&oracle, &wm).unwrap());
        // pinning an in-band duplicate or a top item is rejected
        assert!(generate_watermark_with_overrides(&oracle, &spec, &d, &[Some(0)]).is_err());
        assert!(
            generate_watermark_with_overrides(&oracle, &spec, &d, &[Some(4), Some(4)]).is_err()
        );
    }

    #[test]
    fn truncation_enumeration() {
        let wm = WatermarkSequence {
            items: vec![7, 4, 9],
            spec: WatermarkSpec {
                n: 3,
                ..Default::default()
            },
            provenance: vec![
                StepProvenance { prefix_len: 1, rank: 10 },
                StepProvenance { prefix_len: 2, rank: 11 },
            ],
        };
        assert_eq!(
            truncations(&wm),
            vec![(vec![7], 4), (vec![7, 4], 9)]
        );
        let targets: Vec<ItemId> = truncations(&wm).iter().map(|q| q.1).collect();
        assert_eq!(targets, wm.items[1..].to_vec());
    }

    #[test]
    fn injection_counts() {
        let spec = WatermarkSpec::default();
        let wm = WatermarkSequence {
            items: vec![0, 1, 2, 3, 4],
            spec,
            provenance: vec![
                StepProvenance { prefix_len: 1, rank: 5 },
                StepProvenance { prefix_len: 2, rank: 5 },
                StepProvenance { prefix_len: 3, rank: 5 },
                StepProvenance { prefix_len: 4, rank: 5 },
            ],
        };
        // 6040 sequences at wdr 0.1 -> 604 copies, 6644 total
        let train = ds((0..6040).map(|_| vec![0, 1]).collect(), 5);
        let injected = inject(&train, &wm, 0.1);
        assert_eq!(injected.sequences.len(), 6644);
        assert_eq!(duplication_count(6040, 0.1), 604);
        // round-half-up
        assert_eq!(duplication_count(10, 0.25), 3);
        // wdr 0 leaves the dataset unchanged
        let unchanged = inject(&train, &wm, 0.0);
        assert_eq!(unchanged, train);
        // fresh user ids, originals untouched
        assert_eq!(injected.sequences[..6040], train.sequences[..]);
        let ids: std::collections::HashSet<u64> =
            injected.sequences.iter().map(|s| s.user_id).collect();
        assert_eq!(ids.len(), 6644);
    }

    #[test]
    fn verify_zero_on_generating_oracle() {
        let synth = SyntheticConfig {
            vocab_size: 100,
            num_users: 100,
            mean_length: 10.0,
            seed: 21,
            ..Default::default()
        };
        let d = synth_generate(&synth).unwrap();
        let oracle = train_markov(&d, 1, 0.5).unwrap();
        let spec = WatermarkSpec {
            n: 8,
            m: 30,
            seed: 77,
            ..Default::default()
        };
        let wm = generate_watermark(&oracle, &spec, &d).unwrap();
        let report = verify(&oracle, &wm, &[1, 5, 10, 70]).unwrap();
        assert_eq!(report.metrics.num_queries, 7);
        assert_eq!(report.ranks.len(), 7);
        for k in [1, 5, 10, 70] {
            assert_eq!(report.metrics.recall(k).unwrap(), 0.0, "recall@{k}");
            assert_eq!(report.metrics.ndcg(k).unwrap(), 0.0, "ndcg@{k}");
        }
    }

    #[test]
    fn verify_perfect_on_memorizing_model() {
        // a markov model trained on many copies of the watermark memorizes it
        let base = ds(vec![vec![0, 1], vec![1, 2], vec![2, 3]], 40);
        let oracle = train_markov(&base, 1, 0.5).unwrap();
        let spec = WatermarkSpec {
            n: 4,
            m: 10,
            initial_policy: InitialPolicy::Explicit(0),
            seed: 3,
            ..Default::default()
        };
        let wm = generate_watermark(&oracle, &spec, &base).unwrap();
        let injected = inject(&base, &wm, 40.0);
        let memorizer = train_markov(&injected, 1, 0.5).unwrap();
        let report = verify(&memorizer, &wm, &[1, 10]).unwrap();
        assert_eq!(report.metrics.recall(1).unwrap(), 1.0);
        // n = 2 edge: single truncation
        let spec2 = WatermarkSpec { n: 2, ..spec };
        let wm2 = generate_watermark(&oracle, &spec2, &base).unwrap();
        let report2 = verify(&oracle, &wm2, &[1]).unwrap();
        assert_eq!(report2.metrics.num_queries, 1);
    }

    #[test]
    fn verify_vocab_mismatch_rejected() {
        let d = ds(vec![vec![0, 1, 2]], 3);
        let small = train_markov(&d, 1, 0.5).unwrap();
        let wm = WatermarkSequence {
            items: vec![0, 9],
            spec: WatermarkSpec {
                n: 2,
                m: 2,
                ..Default::default()
            },
            provenance: vec![StepProvenance { prefix_len: 1, rank: 3 }],
        };
        assert!(matches!(
            verify(&small, &wm, &[1]),
            Err(Error::VocabMismatch { .. })
        ));
    }

    #[test]
    fn watermark_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wm.txt");
        let wm = WatermarkSequence {
            items: vec![3, 17, 9],
            spec: WatermarkSpec {
                n: 3,
                m: 25,
                initial_policy: InitialPolicy::Explicit(3),
                wdr: 0.25,
                seed: 99,
                allow_repeats: false,
            },
            provenance: vec![
                StepProvenance { prefix_len: 1, rank: 80 },
                StepProvenance { prefix_len: 2, rank: 93 },
            ],
        };
        save_watermark(&wm, &path).unwrap();
        let loaded = load_watermark(&path).unwrap();
        assert_eq!(wm, loaded);
        // cold/pop policies round-trip too
        for policy in [InitialPolicy::Cold, InitialPolicy::Pop] {
            let wm2 = WatermarkSequence {
                spec: WatermarkSpec {
                    initial_policy: policy,
                    ..wm.spec.clone()
                },
                ..wm.clone()
            };
            save_watermark(&wm2, &path).unwrap();
            assert_eq!(load_watermark(&path).unwrap().spec.initial_policy, policy);
        }
    }

    #[test]
    fn malformed_watermark_file_errors() {
        assert!(parse_watermark("", "t").is_err());
        assert!(parse_watermark("n=2;M=5;policy=cold;wdr=0.1;seed=1\n0\n", "t").is_err());
        assert!(parse_watermark("n=2;M=5;policy=weird;wdr=0.1;seed=1\n0,1\n1,9\n", "t").is_err());
    }

    #[test]
    fn top_range_diagnostic_sequences_differ() {
        let synth = SyntheticConfig {
            vocab_size: 80,
            num_users: 80,
            mean_length: 10.0,
            seed: 31,
            ..Default::default()
        };
        let d = synth_generate(&synth).unwrap();
        let oracle = train_markov(&d, 1, 0.5).unwrap();
        let spec = WatermarkSpec {
            n: 6,
            m: 15,
            seed: 4,
            ..Default::default()
        };
        let bottom = generate_watermark_in_range(&oracle, &spec, &d, SelectionRange::Bottom)
            .unwrap();
        let top =
            generate_watermark_in_range(&oracle, &spec, &d, SelectionRange::Top).unwrap();
        assert_ne!(bottom.items[1..], top.items[1..]);
        // top-range items rank inside the top band at generation time
        for p in &top.provenance {
            assert!(p.rank <= 15, "rank {}", p.rank);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            // zero-detection is exact for any generated watermark against its
            // generating oracle, for every k <= vocab - M (m >= n keeps the
            // candidate pool from exhausting even if every step reuses one
            // band)
            #[test]
            fn exact_zero_detection(seed in 0u64..5000, n in 2usize..9, m in 10usize..20) {
                let synth = SyntheticConfig {
                    vocab_size: 60,
                    num_users: 40,
                    mean_length: 8.0,
                    seed,
                    ..Default::default()
                };
                let d = synth_generate(&synth).unwrap();
                let oracle = train_markov(&d, 1, 0.5).unwrap();
                let spec = WatermarkSpec {
                    n,
                    m,
                    seed,
                    ..Default::default()
                };
                let wm = generate_watermark(&oracle, &spec, &d).unwrap();
                let ks: Vec<usize> = vec![1, 5, 60 - m];
                let report = verify(&oracle, &wm, &ks).unwrap();
                for &k in &ks {
                    prop_assert_eq!(report.metrics.recall(k).unwrap(), 0.0);
                    prop_assert_eq!(report.metrics.ndcg(k).unwrap(), 0.0);
                }
                prop_assert!(audit_watermark(&oracle, &wm).unwrap());
            }

            #[test]
            fn injection_count_arithmetic(len in 0usize..5000, wdr_mil in 0u32..3_000_000) {
                let wdr = wdr_mil as f64 / 1_000_000.0;
                let copies = duplication_count(len, wdr);
                let exact = wdr * len as f64;
                prop_assert!((copies as f64 - exact).abs() <= 0.5 + 1e-9);
            }
        }
    }
}
