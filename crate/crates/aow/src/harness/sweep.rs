//! Hyperparameter sweeps over a shared oracle.
//!
//! The oracle depends only on the dataset and the training seed, so every
//! axis (watermark length, WDR, M, initial item) reuses one trained oracle;
//! each axis value then runs the watermark phase in its own subdirectory.
//! Results are emitted as a long-format CSV: `axis,value,metric,k,score`.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::watermark::InitialPolicy;

use super::config::ExperimentConfig;
use super::pipeline::{
    stage_dataset, stage_split, stage_train_oracle, watermark_phase, RunContext,
};

/// Sweep axis with its values.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    N(Vec<usize>),
    Wdr(Vec<f64>),
    M(Vec<usize>),
    Initial(Vec<InitialPolicy>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::N(_) => "n",
            SweepAxis::Wdr(_) => "wdr",
            SweepAxis::M(_) => "m",
            SweepAxis::Initial(_) => "initial",
        }
    }

    /// Default grids: n over {2, 5, 10, 20}, wdr over
    /// {0.05, 0.1, 0.5, 1.0, 2.0}, M over {50, 100, 200}, initial over
    /// {cold, pop}.
    pub fn default_for(name: &str) -> Result<Self> {
        match name {
            "n" => Ok(SweepAxis::N(vec![2, 5, 10, 20])),
            "wdr" => Ok(SweepAxis::Wdr(vec![0.05, 0.1, 0.5, 1.0, 2.0])),
            "m" => Ok(SweepAxis::M(vec![50, 100, 200])),
            "initial" => Ok(SweepAxis::Initial(vec![
                InitialPolicy::Cold,
                InitialPolicy::Pop,
            ])),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep axis `{other}` (expected n | wdr | m | initial)"
            ))),
        }
    }

    fn values(&self) -> Vec<String> {
        match self {
            SweepAxis::N(vs) => vs.iter().map(|v| v.to_string()).collect(),
            SweepAxis::Wdr(vs) => vs.iter().map(|v| v.to_string()).collect(),
            SweepAxis::M(vs) => vs.iter().map(|v| v.to_string()).collect(),
            SweepAxis::Initial(vs) => vs.iter().map(|v| v.to_string()).collect(),
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig, index: usize) {
        match self {
            SweepAxis::N(vs) => cfg.watermark.n = vs[index],
            SweepAxis::Wdr(vs) => cfg.watermark.wdr = vs[index],
            SweepAxis::M(vs) => cfg.watermark.m = vs[index],
            SweepAxis::Initial(vs) => cfg.watermark.initial_policy = vs[index],
        }
    }
}

/// Run one pipeline per axis value (sharing the oracle) and write
/// `sweep.csv`. Returns the CSV path.
pub fn sweep(cfg: &ExperimentConfig, axis: &SweepAxis) -> Result<PathBuf> {
    let values = axis.values();
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep axis has no values".into()));
    }

    let mut ctx = RunContext::new(&cfg.out_dir)?;
    let ds = stage_dataset(cfg, &mut ctx)?;
    let split = stage_split(&ds, &mut ctx)?;
    let oracle = stage_train_oracle(cfg, &split, &mut ctx)?;

    let mut rows: Vec<[String; 5]> = Vec::new();
    for (index, value) in values.iter().enumerate() {
        let mut run_cfg = cfg.clone();
        axis.apply(&mut run_cfg, index);
        let subdir = cfg.out_dir.join(format!("sweep_{}_{}", axis.name(), value));
        let mut sub_ctx = RunContext::new(&subdir)?;
        let phase = watermark_phase(&run_cfg, &split, &oracle, &mut sub_ctx)
            .map_err(|e| e.in_stage(&format!("sweep {}={}", axis.name(), value)))?;
        for report in &phase.reports {
            for score in &report.per_k {
                rows.push([
                    axis.name().to_string(),
                    value.clone(),
                    format!("{}_recall", report.label),
                    score.k.to_string(),
                    format!("{:.6}", score.recall),
                ]);
                rows.push([
                    axis.name().to_string(),
                    value.clone(),
                    format!("{}_ndcg", report.label),
                    score.k.to_string(),
                    format!("{:.6}", score.ndcg),
                ]);
            }
        }
    }

    let path = cfg.out_dir.join("sweep.csv");
    let mut writer = csv::Writer::from_path(&path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    writer
        .write_record(["axis", "value", "metric", "k", "score"])
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    for row in &rows {
        writer
            .write_record(row)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}
