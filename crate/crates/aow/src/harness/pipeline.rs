//! End-to-end experiment pipeline.
//!
//! Stage order: dataset → split → train-oracle → gen-watermark → train-wm →
//! eval → configured attacks → report. Every stage reads and writes file
//! artifacts under the output directory so stages can be rerun independently;
//! the manifest records config echo, per-stage wall clock, artifact hashes,
//! and all metric reports. Runs are fully reproducible from (config, seed).

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    autoregressive_generate, finetune, save_generated, train_surrogate, AttackConfig,
    StartItemPolicy,
};
use crate::corpus::{
    item_popularity, leave_one_out_split, load_dataset_capped, save_dataset, synth_generate,
    InteractionDataset, Query, SplitBundle, UserSequence,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::rng::derive_seed;
use crate::scorer::{
    save_checkpoint, train_markov, train_neural, train_neural_weighted, ScorerKind, ScorerModel,
};
use crate::watermark::{
    audit_watermark, duplication_count, generate_watermark, inject, save_watermark, truncations,
    verify, WatermarkSequence,
};

use super::config::{DatasetSource, ExperimentConfig};
use super::report;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// One-line run summary: watermark validity, model utilities, and
/// post-attack validities at the headline cutoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub validity_r1: Option<f64>,
    pub oracle_r10: Option<f64>,
    pub wm_r10: Option<f64>,
    pub distill_r10: Option<f64>,
    pub finetune_r10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactRecord>,
    pub reports: Vec<MetricsReport>,
    /// Per-truncation ranks for each validity report.
    pub validity_ranks: Vec<(String, Vec<usize>)>,
    pub summary: SummaryRow,
}

impl RunManifest {
    pub fn report(&self, label: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.label == label)
    }
}

/// SHA-256 of a file, hex-encoded.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

/// Check that every artifact referenced by a manifest exists and
/// hash-matches.
pub fn verify_manifest(manifest: &RunManifest, base_dir: impl AsRef<Path>) -> Result<()> {
    let base = base_dir.as_ref();
    for artifact in &manifest.artifacts {
        let path = base.join(&artifact.path);
        let actual = sha256_file(&path)?;
        if actual != artifact.sha256 {
            return Err(Error::InvalidArgument(format!(
                "artifact `{}` hash mismatch: manifest {}, file {}",
                artifact.path, artifact.sha256, actual
            )));
        }
    }
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("invalid manifest {}: {e}", path.display())))
}

/// Mutable run state threaded through the stages.
pub(crate) struct RunContext {
    pub out_dir: PathBuf,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactRecord>,
}

impl RunContext {
    pub fn new(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)
            .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            stages: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(name))?;
        self.stages.push(StageRecord {
            name: name.to_string(),
            wall_ms: start.elapsed().as_millis() as u64,
        });
        Ok(out)
    }

    pub fn record_artifact(&mut self, name: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        let sha256 = sha256_file(&path)?;
        self.artifacts.push(ArtifactRecord {
            name: name.to_string(),
            path: name.to_string(),
            sha256,
        });
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

pub(crate) fn dataset_label(cfg: &ExperimentConfig) -> String {
    match &cfg.dataset {
        DatasetSource::Path(p) => p.display().to_string(),
        DatasetSource::Synthetic(s) => format!(
            "synthetic(vocab={},users={},seed={})",
            s.vocab_size, s.num_users, s.seed
        ),
    }
}

/// Materialize the experiment dataset and persist it as `dataset.txt`.
pub(crate) fn stage_dataset(
    cfg: &ExperimentConfig,
    ctx: &mut RunContext,
) -> Result<InteractionDataset> {
    ctx.stage("dataset", |ctx| {
        let ds = match &cfg.dataset {
            DatasetSource::Path(p) => load_dataset_capped(p, cfg.dataset_max_len)?,
            DatasetSource::Synthetic(s) => synth_generate(s)?,
        };
        save_dataset(&ds, ctx.path("dataset.txt"))?;
        ctx.record_artifact("dataset.txt")?;
        Ok(ds)
    })
}

pub(crate) fn stage_split(ds: &InteractionDataset, ctx: &mut RunContext) -> Result<SplitBundle> {
    ctx.stage("split", |_| {
        let split = leave_one_out_split(ds);
        if split.skipped > 0 {
            eprintln!("skipped {} sequences too short to split", split.skipped);
        }
        Ok(split)
    })
}

pub(crate) fn stage_train_oracle(
    cfg: &ExperimentConfig,
    split: &SplitBundle,
    ctx: &mut RunContext,
) -> Result<ScorerModel> {
    ctx.stage("train-oracle", |ctx| {
        let oracle = match cfg.oracle_kind {
            ScorerKind::Markov => {
                train_markov(&split.train, cfg.markov_order, cfg.markov_smoothing)?
            }
            ScorerKind::Neural => {
                let mut tc = cfg.train.clone();
                tc.seed = derive_seed(cfg.seed, "train-oracle");
                train_neural(&split.train, &tc, &split.validation)?
            }
        };
        save_checkpoint(&oracle, ctx.path("oracle.ckpt"))?;
        ctx.record_artifact("oracle.ckpt")?;
        Ok(oracle)
    })
}

/// Regular validation queries plus watermark truncations duplicated to carry
/// the same total weight as the validation set.
pub(crate) fn combined_validation(
    validation: &[Query],
    wm: &WatermarkSequence,
) -> Vec<Query> {
    let truncs = truncations(wm);
    let mut combined = validation.to_vec();
    if truncs.is_empty() {
        return combined;
    }
    let repeat = ((validation.len() as f64 / truncs.len() as f64) + 0.5).floor() as usize;
    for _ in 0..repeat.max(1) {
        combined.extend(truncs.iter().cloned());
    }
    combined
}

pub(crate) struct PhaseOutput {
    pub reports: Vec<MetricsReport>,
    pub validity_ranks: Vec<(String, Vec<usize>)>,
}

/// Watermark generation, watermarked training, evaluation, and attacks.
pub(crate) fn watermark_phase(
    cfg: &ExperimentConfig,
    split: &SplitBundle,
    oracle: &ScorerModel,
    ctx: &mut RunContext,
) -> Result<PhaseOutput> {
    let mut reports = Vec::new();
    let mut validity_ranks = Vec::new();

    if let Some(&max_k) = cfg.ks.iter().max() {
        let vocab = oracle.vocab_size();
        if max_k > vocab.saturating_sub(cfg.watermark.m) {
            eprintln!(
                "warning: k={max_k} exceeds vocab-M = {}; the zero-detection guarantee does not cover it",
                vocab.saturating_sub(cfg.watermark.m)
            );
        }
    }

    let wm = ctx.stage("gen-watermark", |ctx| {
        let wm = generate_watermark(oracle, &cfg.watermark, &split.train)?;
        debug_assert!(audit_watermark(oracle, &wm)?);
        save_watermark(&wm, ctx.path("watermark.wm"))?;
        ctx.record_artifact("watermark.wm")?;
        Ok(wm)
    })?;

    let wm_model = ctx.stage("train-wm", |ctx| {
        let model = train_watermarked(cfg, split, &wm)?;
        save_checkpoint(&model, ctx.path("wm_model.ckpt"))?;
        ctx.record_artifact("wm_model.ckpt")?;
        Ok(model)
    })?;

    ctx.stage("eval", |_| {
        reports.push(evaluate(oracle, &split.test, &cfg.ks)?.with_label("utility_oracle"));
        reports.push(evaluate(&wm_model, &split.test, &cfg.ks)?.with_label("utility_wm"));
        let v = verify(&wm_model, &wm, &cfg.ks)?;
        validity_ranks.push(("validity_wm".to_string(), v.ranks));
        reports.push(v.metrics.with_label("validity_wm"));
        let vo = verify(oracle, &wm, &cfg.ks)?;
        validity_ranks.push(("validity_oracle".to_string(), vo.ranks));
        reports.push(vo.metrics.with_label("validity_oracle"));
        Ok(())
    })?;

    let wm_model_hash = sha256_file(ctx.path("wm_model.ckpt"))?;
    let popularity = item_popularity(&split.train);

    if let Some(attack) = &cfg.distill {
        ctx.stage("attack-distill", |ctx| {
            let pop = start_popularity(attack, &popularity);
            let generated = autoregressive_generate(&wm_model, attack, pop)?;
            eprintln!(
                "distillation issued {} target queries",
                generated.queries_issued
            );
            save_generated(&generated, ctx.path("distill_data.txt"), &wm_model_hash)?;
            ctx.record_artifact("distill_data.txt")?;
            let surrogate = train_surrogate(&generated.dataset, attack)?;
            save_checkpoint(&surrogate, ctx.path("distill.ckpt"))?;
            ctx.record_artifact("distill.ckpt")?;
            reports
                .push(evaluate(&surrogate, &split.test, &cfg.ks)?.with_label("utility_distill"));
            let v = verify(&surrogate, &wm, &cfg.ks)?;
            validity_ranks.push(("validity_distill".to_string(), v.ranks));
            reports.push(v.metrics.with_label("validity_distill"));
            Ok(())
        })?;
    }

    if let Some(attack) = &cfg.finetune {
        ctx.stage("attack-finetune", |ctx| {
            let pop = start_popularity(attack, &popularity);
            let generated = autoregressive_generate(&wm_model, attack, pop)?;
            eprintln!(
                "fine-tuning data issued {} target queries",
                generated.queries_issued
            );
            save_generated(&generated, ctx.path("finetune_data.txt"), &wm_model_hash)?;
            ctx.record_artifact("finetune_data.txt")?;
            let tuned = finetune(&wm_model, &generated.dataset, attack)?;
            save_checkpoint(&tuned, ctx.path("finetune.ckpt"))?;
            ctx.record_artifact("finetune.ckpt")?;
            reports.push(evaluate(&tuned, &split.test, &cfg.ks)?.with_label("utility_finetune"));
            let v = verify(&tuned, &wm, &cfg.ks)?;
            validity_ranks.push(("validity_finetune".to_string(), v.ranks));
            reports.push(v.metrics.with_label("validity_finetune"));
            Ok(())
        })?;
    }

    Ok(PhaseOutput {
        reports,
        validity_ranks,
    })
}

/// Train the watermarked model: duplication by default, a single weighted
/// copy when `weighted_loss` is set.
pub(crate) fn train_watermarked(
    cfg: &ExperimentConfig,
    split: &SplitBundle,
    wm: &WatermarkSequence,
) -> Result<ScorerModel> {
    match cfg.oracle_kind {
        ScorerKind::Markov => {
            let injected = inject(&split.train, wm, cfg.watermark.wdr);
            train_markov(&injected, cfg.markov_order, cfg.markov_smoothing)
        }
        ScorerKind::Neural => {
            let mut tc = cfg.train.clone();
            tc.seed = derive_seed(cfg.seed, "train-wm");
            let validation = combined_validation(&split.validation, wm);
            if cfg.weighted_loss {
                let copies = duplication_count(split.train.sequences.len(), cfg.watermark.wdr);
                let mut ds = split.train.clone();
                let next_user = ds.sequences.iter().map(|s| s.user_id + 1).max().unwrap_or(0);
                ds.sequences.push(UserSequence {
                    user_id: next_user,
                    items: wm.items.clone(),
                });
                let mut weights = vec![1.0; ds.sequences.len()];
                *weights.last_mut().unwrap() = copies as f64;
                train_neural_weighted(&ds, &tc, &weights, &validation)
            } else {
                let injected = inject(&split.train, wm, cfg.watermark.wdr);
                train_neural(&injected, &tc, &validation)
            }
        }
    }
}

fn start_popularity<'a>(attack: &AttackConfig, popularity: &'a [u64]) -> Option<&'a [u64]> {
    match attack.start_item_policy {
        StartItemPolicy::PopularitySampled => Some(popularity),
        StartItemPolicy::Uniform => None,
    }
}

fn build_summary(cfg: &ExperimentConfig, reports: &[MetricsReport]) -> SummaryRow {
    let get = |label: &str, k: usize| {
        reports
            .iter()
            .find(|r| r.label == label)
            .and_then(|r| r.recall(k))
    };
    SummaryRow {
        dataset: dataset_label(cfg),
        validity_r1: get("validity_wm", 1),
        oracle_r10: get("utility_oracle", 10),
        wm_r10: get("utility_wm", 10),
        distill_r10: get("validity_distill", 10),
        finetune_r10: get("validity_finetune", 10),
    }
}

/// One independently rerunnable pipeline stage; each reads its prerequisites
/// from (and writes its outputs to) the config's output directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageCommand {
    Synth,
    TrainOracle,
    GenWatermark,
    TrainWm,
    Eval,
    AttackDistill,
    AttackFinetune,
}

fn require_artifact(ctx: &RunContext, name: &str) -> Result<PathBuf> {
    let path = ctx.path(name);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!(
            "missing `{}`; run the producing stage first",
            path.display()
        )));
    }
    Ok(path)
}

// Stage commands reuse dataset.txt when a previous stage wrote it, so a
// pipeline can be rerun piecewise without re-synthesizing.
fn stage_or_cached_dataset(
    cfg: &ExperimentConfig,
    ctx: &mut RunContext,
) -> Result<InteractionDataset> {
    let cached = ctx.path("dataset.txt");
    if cached.exists() {
        return load_dataset_capped(&cached, cfg.dataset_max_len);
    }
    stage_dataset(cfg, ctx)
}

/// Run one pipeline stage against the artifacts in `cfg.out_dir`.
pub fn run_stage(cfg: &ExperimentConfig, stage: StageCommand) -> Result<()> {
    let mut ctx = RunContext::new(&cfg.out_dir)?;
    match stage {
        StageCommand::Synth => {
            if !matches!(cfg.dataset, DatasetSource::Synthetic(_)) {
                return Err(Error::config(
                    "dataset.path",
                    "synth requires a synthetic dataset source",
                ));
            }
            let ds = stage_dataset(cfg, &mut ctx)?;
            eprintln!(
                "wrote {} sequences ({} interactions, vocab {}) to {}",
                ds.num_sequences(),
                ds.num_interactions(),
                ds.vocab_size,
                ctx.path("dataset.txt").display()
            );
        }
        StageCommand::TrainOracle => {
            let ds = stage_or_cached_dataset(cfg, &mut ctx)?;
            let split = stage_split(&ds, &mut ctx)?;
            let oracle = stage_train_oracle(cfg, &split, &mut ctx)?;
            let report = evaluate(&oracle, &split.test, &cfg.ks)
                .map_err(|e| e.in_stage("train-oracle"))?
                .with_label("utility_oracle");
            for score in &report.per_k {
                eprintln!(
                    "oracle test recall@{} = {:.4}, ndcg@{} = {:.4}",
                    score.k, score.recall, score.k, score.ndcg
                );
            }
        }
        StageCommand::GenWatermark => {
            let ds = stage_or_cached_dataset(cfg, &mut ctx)?;
            let split = stage_split(&ds, &mut ctx)?;
            let oracle = crate::scorer::load_checkpoint(require_artifact(&ctx, "oracle.ckpt")?)?;
            ctx.stage("gen-watermark", |ctx| {
                let wm = generate_watermark(&oracle, &cfg.watermark, &split.train)?;
                if !audit_watermark(&oracle, &wm)? {
                    return Err(Error::InvalidArgument(
                        "generated watermark failed its own audit".into(),
                    ));
                }
                save_watermark(&wm, ctx.path("watermark.wm"))?;
                eprintln!("watermark items: {:?}", wm.items);
                Ok(())
            })?;
        }
        StageCommand::TrainWm => {
            let ds = stage_or_cached_dataset(cfg, &mut ctx)?;
            let split = stage_split(&ds, &mut ctx)?;
            let wm = crate::watermark::load_watermark(require_artifact(&ctx, "watermark.wm")?)?;
            ctx.stage("train-wm", |ctx| {
                let model = train_watermarked(cfg, &split, &wm)?;
                save_checkpoint(&model, ctx.path("wm_model.ckpt"))?;
                Ok(())
            })?;
        }
        StageCommand::Eval => {
            let ds = stage_or_cached_dataset(cfg, &mut ctx)?;
            let split = stage_split(&ds, &mut ctx)?;
            let oracle = crate::scorer::load_checkpoint(require_artifact(&ctx, "oracle.ckpt")?)?;
            let wm_model =
                crate::scorer::load_checkpoint(require_artifact(&ctx, "wm_model.ckpt")?)?;
            let wm = crate::watermark::load_watermark(require_artifact(&ctx, "watermark.wm")?)?;
            let mut reports = Vec::new();
            let mut validity_ranks = Vec::new();
            ctx.stage("eval", |_| {
                reports.push(evaluate(&oracle, &split.test, &cfg.ks)?.with_label("utility_oracle"));
                reports.push(evaluate(&wm_model, &split.test, &cfg.ks)?.with_label("utility_wm"));
                let v = verify(&wm_model, &wm, &cfg.ks)?;
                validity_ranks.push(("validity_wm".to_string(), v.ranks));
                reports.push(v.metrics.with_label("validity_wm"));
                let vo = verify(&oracle, &wm, &cfg.ks)?;
                validity_ranks.push(("validity_oracle".to_string(), vo.ranks));
                reports.push(vo.metrics.with_label("validity_oracle"));
                Ok(())
            })?;
            let summary = build_summary(cfg, &reports);
            let manifest = RunManifest {
                seed: cfg.seed,
                config: cfg.clone(),
                stages: ctx.stages.clone(),
                artifacts: ctx.artifacts.clone(),
                reports,
                validity_ranks,
                summary,
            };
            report::emit_report(&manifest, &ctx.out_dir, report::ReportFormat::Csv)?;
            report::emit_report(&manifest, &ctx.out_dir, report::ReportFormat::Text)?;
            println!("{}", report::render_summary_text(&manifest));
        }
        StageCommand::AttackDistill | StageCommand::AttackFinetune => {
            let ds = stage_or_cached_dataset(cfg, &mut ctx)?;
            let split = stage_split(&ds, &mut ctx)?;
            let wm_model =
                crate::scorer::load_checkpoint(require_artifact(&ctx, "wm_model.ckpt")?)?;
            let wm = crate::watermark::load_watermark(require_artifact(&ctx, "watermark.wm")?)?;
            let wm_model_hash = sha256_file(ctx.path("wm_model.ckpt"))?;
            let popularity = item_popularity(&split.train);
            let (stage_name, attack, data_file, ckpt_file) = match stage {
                StageCommand::AttackDistill => (
                    "attack-distill",
                    cfg.distill.as_ref().ok_or_else(|| {
                        Error::config("attack.distill", "attack not configured")
                    })?,
                    "distill_data.txt",
                    "distill.ckpt",
                ),
                _ => (
                    "attack-finetune",
                    cfg.finetune.as_ref().ok_or_else(|| {
                        Error::config("attack.finetune", "attack not configured")
                    })?,
                    "finetune_data.txt",
                    "finetune.ckpt",
                ),
            };
            ctx.stage(stage_name, |ctx| {
                let pop = start_popularity(attack, &popularity);
                let generated = autoregressive_generate(&wm_model, attack, pop)?;
                eprintln!("attack issued {} target queries", generated.queries_issued);
                save_generated(&generated, ctx.path(data_file), &wm_model_hash)?;
                let attacked = match stage {
                    StageCommand::AttackDistill => train_surrogate(&generated.dataset, attack)?,
                    _ => finetune(&wm_model, &generated.dataset, attack)?,
                };
                save_checkpoint(&attacked, ctx.path(ckpt_file))?;
                let v = verify(&attacked, &wm, &cfg.ks)?;
                for score in &v.metrics.per_k {
                    eprintln!(
                        "post-attack validity recall@{} = {:.4}, ndcg@{} = {:.4}",
                        score.k, score.recall, score.k, score.ndcg
                    );
                }
                Ok(())
            })?;
        }
    }
    Ok(())
}

/// Execute the full pipeline, returning (and persisting) the run manifest.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let mut ctx = RunContext::new(&cfg.out_dir)?;
    let ds = stage_dataset(cfg, &mut ctx)?;
    let split = stage_split(&ds, &mut ctx)?;
    let oracle = stage_train_oracle(cfg, &split, &mut ctx)?;
    let phase = watermark_phase(cfg, &split, &oracle, &mut ctx)?;

    let summary = build_summary(cfg, &phase.reports);
    let mut manifest = RunManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        stages: ctx.stages.clone(),
        artifacts: ctx.artifacts.clone(),
        reports: phase.reports,
        validity_ranks: phase.validity_ranks,
        summary,
    };

    ctx.stage("report", |ctx| {
        report::emit_report(&manifest, &ctx.out_dir, report::ReportFormat::Csv)?;
        report::emit_report(&manifest, &ctx.out_dir, report::ReportFormat::Text)?;
        Ok(())
    })?;
    manifest.stages = ctx.stages.clone();

    let manifest_path = ctx.path("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidArgument(format!("manifest serialization failed: {e}")))?;
    std::fs::write(&manifest_path, json)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest)
}
