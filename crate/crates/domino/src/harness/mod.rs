//! Pipelines: model-based training, model-free training, evaluation,
//! the MI benchmark runner and embedding analysis.

mod config;
mod embeddings;
mod eval;
mod mi;
mod model_based;
mod model_free;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::ad::checkpoint;
use crate::ad::Tensor;
use crate::{Error, Result};

pub use config::{Ablation, EvalAgent, ExperimentConfig};
pub use embeddings::{
    analyze_embeddings, export_embeddings, pca_project, read_embeddings_csv, silhouette, trajectory_means, write_embeddings_csv,
    EmbeddingAnalysis, EmbeddingRow, Projection,
};
pub use eval::{evaluate, run_episodes, EpisodeResult, EvalSummary};
pub use mi::{run_mi_bench, MiBenchSummary};
pub use model_based::{heldout_mse, train_model_based, IterationRow, ModelBasedRun};
pub use model_free::{train_model_free, EvalRow, ModelFreeRun, UpdateRow};

/// File names inside a run's output directory.
pub mod files {
    pub const CONFIG: &str = "config.txt";
    pub const MODEL_BASED_CKPT: &str = "model_based.ckpt";
    pub const MODEL_BASED_METRICS: &str = "mb_metrics.csv";
    pub const MODEL_BASED_SUMMARY: &str = "mb_summary.json";
    pub const MODEL_FREE_CKPT: &str = "model_free.ckpt";
    pub const MODEL_FREE_UPDATES: &str = "mf_updates.csv";
    pub const MODEL_FREE_EVAL: &str = "mf_eval.csv";
    pub const MODEL_FREE_SUMMARY: &str = "mf_summary.json";
    pub const MI_RESULTS: &str = "mi_results.csv";
    pub const MI_SUMMARY: &str = "mi_summary.json";
    pub const EMBEDDINGS_PCA: &str = "embeddings_pca.csv";
    pub const EMBEDDINGS_SUMMARY: &str = "embeddings_summary.json";

    pub fn eval_episodes(split: crate::envs::Split) -> String {
        format!("eval_{split}.csv")
    }

    pub fn eval_summary(split: crate::envs::Split) -> String {
        format!("eval_{split}.json")
    }

    pub fn embeddings(split: crate::envs::Split) -> String {
        format!("embeddings_{split}.csv")
    }
}

/// Maps an error to the process exit code of the command-line tool.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::MissingPrerequisite(_) => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

pub(crate) fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(files::CONFIG), cfg.to_text())?;
    Ok(())
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one row, writing the header only when the file is new.
pub(crate) struct CsvLog {
    writer: csv::Writer<fs::File>,
}

impl CsvLog {
    pub(crate) fn create(path: &Path) -> Result<Self> {
        Ok(Self { writer: csv::Writer::from_path(path)? })
    }

    pub(crate) fn push<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub(crate) fn load_checkpoint(path: &Path, producer: &str) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!("{} not found; run `domino {producer}` first", path.display())));
    }
    checkpoint::load(path)
}

/// Where `train-mf`, `eval` and `export-embeddings` look for the encoder.
pub fn model_based_checkpoint(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    if cfg.encoder_checkpoint.is_empty() {
        out.join(files::MODEL_BASED_CKPT)
    } else {
        PathBuf::from(&cfg.encoder_checkpoint)
    }
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingPrerequisite("x".into())), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
        assert_eq!(exit_code(&Error::Format("x".into())), 1);
    }

    #[test]
    fn missing_checkpoint_names_the_producer() {
        let e = load_checkpoint(Path::new("/nonexistent/model_based.ckpt"), "train-mb").unwrap_err();
        assert!(matches!(&e, Error::MissingPrerequisite(m) if m.contains("train-mb")), "{e}");
    }

    #[test]
    fn population_statistics() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert!(mean_std(&[]).0.is_nan());
    }
}
