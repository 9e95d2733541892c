//! Experiment configuration: flat `key = value` text with dotted sections.
//!
//! Parsing is strict: unknown keys are errors (with a nearest-key
//! suggestion), values are range-checked, and every default is documented in
//! the key table below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, SamplingPolicy, StartItemPolicy};
use crate::corpus::{SyntheticConfig, DEFAULT_MAX_SEQ_LEN};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scorer::{Optimizer, ScorerKind, TrainConfig};
use crate::watermark::{InitialPolicy, WatermarkSpec};

/// Where the experiment's interaction data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic(SyntheticConfig),
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetSource,
    pub dataset_max_len: usize,
    pub oracle_kind: ScorerKind,
    pub train: TrainConfig,
    pub markov_order: usize,
    pub markov_smoothing: f64,
    pub watermark: WatermarkSpec,
    /// Train the watermarked model with a single weighted watermark sequence
    /// instead of duplicating it.
    pub weighted_loss: bool,
    pub distill: Option<AttackConfig>,
    pub finetune: Option<AttackConfig>,
    pub ks: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/run"),
            dataset: DatasetSource::Synthetic(SyntheticConfig::default()),
            dataset_max_len: DEFAULT_MAX_SEQ_LEN,
            oracle_kind: ScorerKind::Neural,
            train: TrainConfig::default(),
            markov_order: 1,
            markov_smoothing: 0.5,
            watermark: WatermarkSpec::default(),
            weighted_loss: false,
            distill: None,
            finetune: None,
            ks: vec![1, 5, 10, 20, 100],
        }
    }
}

/// Known keys with their documented defaults; `--help` and error suggestions
/// both draw from this table.
pub const KNOWN_KEYS: &[(&str, &str)] = &[
    ("seed", "global seed; per-stage sub-seeds derive from it (default 0)"),
    ("out", "output directory (default runs/run)"),
    ("ks", "comma-separated metric cutoffs (default 1,5,10,20,100)"),
    ("dataset.path", "load interactions from this file instead of synthesizing"),
    ("dataset.max_len", "keep at most this many most-recent items per sequence (default 200)"),
    ("synth.vocab_size", "synthetic vocabulary size (default 500)"),
    ("synth.num_users", "synthetic user count (default 2000)"),
    ("synth.mean_length", "synthetic mean sequence length (default 20)"),
    ("synth.markov_order", "planted chain order (default 1)"),
    ("synth.concentration", "planted transition peakedness (default 64)"),
    ("synth.seed", "synthetic data seed (default: derived from seed)"),
    ("train.kind", "oracle kind: neural | markov (default neural)"),
    ("train.epochs", "training epochs (default 12)"),
    ("train.learning_rate", "learning rate (default 0.5)"),
    ("train.batch_size", "sequences per gradient step (default 32)"),
    ("train.embed_dim", "embedding width (default 32)"),
    ("train.num_layers", "attention blocks (default 1)"),
    ("train.num_heads", "attention heads (default 2)"),
    ("train.max_context", "context window (default 50)"),
    ("train.l2", "L2 penalty (default 0)"),
    ("train.optimizer", "sgd | adam (default sgd)"),
    ("markov.order", "markov oracle order (default 1)"),
    ("markov.smoothing", "markov smoothing (default 0.5)"),
    ("watermark.n", "watermark length (default 5)"),
    ("watermark.m", "bottom-M range size (default 100)"),
    ("watermark.initial", "initial item: cold | pop | explicit:<id> (default cold)"),
    ("watermark.wdr", "watermark-to-data ratio (default 0.1)"),
    ("watermark.allow_repeats", "allow repeated items in the watermark (default false)"),
    ("watermark.seed", "watermark draw seed (default: derived from seed)"),
    ("watermark.weighted_loss", "weight a single watermark copy instead of duplicating (default false)"),
    ("attack.distill.num_sequences", "surrogate training sequences (default 1000; section enables the attack)"),
    ("attack.distill.max_length", "generated sequence length cap (default 50)"),
    ("attack.distill.sampling", "greedy | topk:<k>:<temperature> (default topk:100:1)"),
    ("attack.distill.start", "uniform | popularity (default uniform)"),
    ("attack.distill.epochs", "surrogate epochs; 0 inherits train.epochs (default 0)"),
    ("attack.finetune.num_sequences", "fine-tuning sequences (default 20; section enables the attack)"),
    ("attack.finetune.max_length", "generated sequence length cap (default 50)"),
    ("attack.finetune.sampling", "greedy | topk:<k>:<temperature> (default topk:100:1)"),
    ("attack.finetune.start", "uniform | popularity (default uniform)"),
    ("attack.finetune.epochs", "fine-tune epochs; 0 inherits the victim's (default 0)"),
];

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
            // transposition
            if i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1] {
                cur[j] = cur[j].min(prev[j - 1]);
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn suggest_key(unknown: &str) -> Option<&'static str> {
    let mut best: Option<(&str, usize)> = None;
    for &(key, _) in KNOWN_KEYS {
        // compare against the full key and its final component
        let tail = key.rsplit('.').next().unwrap_or(key);
        let d = edit_distance(unknown, key).min(edit_distance(unknown, tail));
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((key, d));
        }
    }
    match best {
        Some((key, d)) if d <= 2 => Some(key),
        _ => None,
    }
}

struct RawConfig {
    entries: Vec<(String, String)>,
}

impl RawConfig {
    fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: idx + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        let pos = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(pos).1)
    }

    fn has_section(&self, prefix: &str) -> bool {
        self.entries.iter().any(|(k, _)| k.starts_with(prefix))
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("invalid value `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::config(key, format!("expected a boolean, got `{other}`"))),
    }
}

fn parse_sampling(key: &str, value: &str) -> Result<SamplingPolicy> {
    if value == "greedy" {
        return Ok(SamplingPolicy::Greedy);
    }
    if let Some(rest) = value.strip_prefix("topk:") {
        let mut parts = rest.split(':');
        let k = parts
            .next()
            .ok_or_else(|| Error::config(key, "missing k in topk:<k>:<temperature>"))?;
        let temp = parts.next().unwrap_or("1.0");
        if parts.next().is_some() {
            return Err(Error::config(key, "too many fields in topk:<k>:<temperature>"));
        }
        return Ok(SamplingPolicy::TopKSoftmax {
            k: parse_value(key, k)?,
            temperature: parse_value(key, temp)?,
        });
    }
    Err(Error::config(
        key,
        format!("expected `greedy` or `topk:<k>:<temperature>`, got `{value}`"),
    ))
}

fn parse_initial(key: &str, value: &str) -> Result<InitialPolicy> {
    match value {
        "cold" => Ok(InitialPolicy::Cold),
        "pop" => Ok(InitialPolicy::Pop),
        other => match other.strip_prefix("explicit:") {
            Some(id) => Ok(InitialPolicy::Explicit(parse_value(key, id)?)),
            None => Err(Error::config(
                key,
                format!("expected cold | pop | explicit:<id>, got `{other}`"),
            )),
        },
    }
}

fn parse_attack_section(
    raw: &mut RawConfig,
    section: &str,
    base_train: &TrainConfig,
    default_num_sequences: usize,
    global_seed: u64,
) -> Result<Option<AttackConfig>> {
    let prefix = format!("attack.{section}.");
    if !raw.has_section(&prefix) {
        return Ok(None);
    }
    let mut cfg = AttackConfig {
        num_sequences: default_num_sequences,
        train: base_train.clone(),
        seed: derive_seed(global_seed, &format!("attack-{section}")),
        ..Default::default()
    };
    let key = |name: &str| format!("attack.{section}.{name}");
    if let Some(v) = raw.take(&key("num_sequences")) {
        cfg.num_sequences = parse_value(&key("num_sequences"), &v)?;
    }
    if let Some(v) = raw.take(&key("max_length")) {
        cfg.max_length = parse_value(&key("max_length"), &v)?;
    }
    if let Some(v) = raw.take(&key("sampling")) {
        cfg.sampling = parse_sampling(&key("sampling"), &v)?;
    }
    if let Some(v) = raw.take(&key("start")) {
        cfg.start_item_policy = match v.as_str() {
            "uniform" => StartItemPolicy::Uniform,
            "popularity" => StartItemPolicy::PopularitySampled,
            other => {
                return Err(Error::config(
                    key("start"),
                    format!("expected uniform | popularity, got `{other}`"),
                ))
            }
        };
    }
    if let Some(v) = raw.take(&key("epochs")) {
        cfg.epochs = parse_value(&key("epochs"), &v)?;
    }
    cfg.validate()
        .map_err(|e| Error::config(format!("attack.{section}"), e.to_string()))?;
    Ok(Some(cfg))
}

/// Parse a config file. Unknown keys are errors; all defaults are listed in
/// [`KNOWN_KEYS`].
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config_str(&text, &path.display().to_string())
}

pub fn parse_config_str(text: &str, path: &str) -> Result<ExperimentConfig> {
    let mut raw = RawConfig::parse(text, path)?;
    let mut cfg = ExperimentConfig::default();

    if let Some(v) = raw.take("seed") {
        cfg.seed = parse_value("seed", &v)?;
    }
    if let Some(v) = raw.take("out") {
        cfg.out_dir = PathBuf::from(v);
    }

    // dataset source: explicit path wins over synthetic settings
    let dataset_path = raw.take("dataset.path");
    if let Some(v) = raw.take("dataset.max_len") {
        cfg.dataset_max_len = parse_value("dataset.max_len", &v)?;
        if cfg.dataset_max_len == 0 {
            return Err(Error::config("dataset.max_len", "must be >= 1"));
        }
    }
    let mut synth = SyntheticConfig {
        seed: derive_seed(cfg.seed, "synth"),
        ..Default::default()
    };
    let had_synth = raw.has_section("synth.");
    if let Some(v) = raw.take("synth.vocab_size") {
        synth.vocab_size = parse_value("synth.vocab_size", &v)?;
    }
    if let Some(v) = raw.take("synth.num_users") {
        synth.num_users = parse_value("synth.num_users", &v)?;
    }
    if let Some(v) = raw.take("synth.mean_length") {
        synth.mean_length = parse_value("synth.mean_length", &v)?;
    }
    if let Some(v) = raw.take("synth.markov_order") {
        synth.markov_order = parse_value("synth.markov_order", &v)?;
    }
    if let Some(v) = raw.take("synth.concentration") {
        synth.concentration = parse_value("synth.concentration", &v)?;
    }
    if let Some(v) = raw.take("synth.seed") {
        synth.seed = parse_value("synth.seed", &v)?;
    }
    cfg.dataset = match dataset_path {
        Some(p) => {
            if had_synth {
                return Err(Error::config(
                    "dataset.path",
                    "dataset.path and synth.* are mutually exclusive",
                ));
            }
            DatasetSource::Path(PathBuf::from(p))
        }
        None => {
            synth
                .validate()
                .map_err(|e| Error::config("synth", e.to_string()))?;
            DatasetSource::Synthetic(synth)
        }
    };

    if let Some(v) = raw.take("train.kind") {
        cfg.oracle_kind = match v.as_str() {
            "neural" => ScorerKind::Neural,
            "markov" => ScorerKind::Markov,
            other => {
                return Err(Error::config(
                    "train.kind",
                    format!("expected neural | markov, got `{other}`"),
                ))
            }
        };
    }
    if let Some(v) = raw.take("train.epochs") {
        cfg.train.epochs = parse_value("train.epochs", &v)?;
    }
    if let Some(v) = raw.take("train.learning_rate") {
        cfg.train.learning_rate = parse_value("train.learning_rate", &v)?;
    }
    if let Some(v) = raw.take("train.batch_size") {
        cfg.train.batch_size = parse_value("train.batch_size", &v)?;
    }
    if let Some(v) = raw.take("train.embed_dim") {
        cfg.train.embed_dim = parse_value("train.embed_dim", &v)?;
    }
    if let Some(v) = raw.take("train.num_layers") {
        cfg.train.num_layers = parse_value("train.num_layers", &v)?;
    }
    if let Some(v) = raw.take("train.num_heads") {
        cfg.train.num_heads = parse_value("train.num_heads", &v)?;
    }
    if let Some(v) = raw.take("train.max_context") {
        cfg.train.max_context = parse_value("train.max_context", &v)?;
    }
    if let Some(v) = raw.take("train.l2") {
        cfg.train.l2 = parse_value("train.l2", &v)?;
    }
    if let Some(v) = raw.take("train.optimizer") {
        cfg.train.optimizer = match v.as_str() {
            "sgd" => Optimizer::Sgd,
            "adam" => Optimizer::Adam,
            other => {
                return Err(Error::config(
                    "train.optimizer",
                    format!("expected sgd | adam, got `{other}`"),
                ))
            }
        };
    }
    cfg.train
        .validate()
        .map_err(|e| Error::config("train", e.to_string()))?;

    if let Some(v) = raw.take("markov.order") {
        cfg.markov_order = parse_value("markov.order", &v)?;
        if cfg.markov_order == 0 {
            return Err(Error::config("markov.order", "must be >= 1"));
        }
    }
    if let Some(v) = raw.take("markov.smoothing") {
        cfg.markov_smoothing = parse_value("markov.smoothing", &v)?;
        if !(cfg.markov_smoothing > 0.0) {
            return Err(Error::config("markov.smoothing", "must be positive"));
        }
    }

    cfg.watermark.seed = derive_seed(cfg.seed, "watermark");
    if let Some(v) = raw.take("watermark.n") {
        cfg.watermark.n = parse_value("watermark.n", &v)?;
    }
    if let Some(v) = raw.take("watermark.m") {
        cfg.watermark.m = parse_value("watermark.m", &v)?;
    }
    if let Some(v) = raw.take("watermark.initial") {
        cfg.watermark.initial_policy = parse_initial("watermark.initial", &v)?;
    }
    if let Some(v) = raw.take("watermark.wdr") {
        cfg.watermark.wdr = parse_value("watermark.wdr", &v)?;
        if !(cfg.watermark.wdr >= 0.0) {
            return Err(Error::config("watermark.wdr", "must be >= 0"));
        }
    }
    if let Some(v) = raw.take("watermark.allow_repeats") {
        cfg.watermark.allow_repeats = parse_bool("watermark.allow_repeats", &v)?;
    }
    if let Some(v) = raw.take("watermark.seed") {
        cfg.watermark.seed = parse_value("watermark.seed", &v)?;
    }
    if let Some(v) = raw.take("watermark.weighted_loss") {
        cfg.weighted_loss = parse_bool("watermark.weighted_loss", &v)?;
    }
    if cfg.watermark.n < 2 {
        return Err(Error::config("watermark.n", "must be >= 2"));
    }
    if cfg.watermark.m == 0 {
        return Err(Error::config("watermark.m", "must be >= 1"));
    }

    if let Some(v) = raw.take("ks") {
        let ks: Result<Vec<usize>> = v
            .split(',')
            .map(|tok| parse_value::<usize>("ks", tok.trim()))
            .collect();
        cfg.ks = ks?;
        if cfg.ks.is_empty() || cfg.ks.contains(&0) {
            return Err(Error::config("ks", "cutoffs must be >= 1"));
        }
    }
    let mut sorted = cfg.ks.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted != cfg.ks {
        eprintln!(
            "warning: ks normalized from {:?} to {:?}",
            cfg.ks, sorted
        );
        cfg.ks = sorted;
    }

    cfg.distill = parse_attack_section(&mut raw, "distill", &cfg.train, 1000, cfg.seed)?;
    cfg.finetune = parse_attack_section(&mut raw, "finetune", &cfg.train, 20, cfg.seed)?;

    if cfg.weighted_loss && cfg.oracle_kind == ScorerKind::Markov {
        return Err(Error::config(
            "watermark.weighted_loss",
            "weighted loss requires train.kind = neural",
        ));
    }
    if cfg.finetune.is_some() && cfg.oracle_kind == ScorerKind::Markov {
        return Err(Error::config(
            "attack.finetune",
            "fine-tuning requires train.kind = neural",
        ));
    }

    if let Some((key, _)) = raw.entries.first() {
        let msg = match suggest_key(key) {
            Some(suggestion) => format!("unknown key; did you mean `{suggestion}`?"),
            None => "unknown key".to_string(),
        };
        return Err(Error::config(key.clone(), msg));
    }

    Ok(cfg)
}
