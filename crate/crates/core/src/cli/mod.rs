//! Experiment harness behind the `normlab` binary: configuration, training
//! with early stopping, evaluation, checkpoints and metrics files.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod model;
pub mod train;

use std::path::Path;

pub use checkpoint::{
    apply_values, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest,
};
pub use config::{ExperimentConfig, OptimizerName, Task};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter, HEADER};
pub use model::{evaluate, Dataset, Model, Score, Split};
pub use train::{summarize, train, train_seed, SeedOutcome, SeedStatus, Summary, TrainReport};

use crate::data::io::{write_fewshot, write_sqoop};
use crate::data::{gen_fewshot_universe, gen_sqoop, FewShotConfig, SqoopConfig};
use crate::error::{Error, Result};

/// Loads a checkpoint, rebuilds its model and scores it on `split`.
///
/// `dataset` overrides the dataset recorded in the checkpoint's config.
pub fn evaluate_checkpoint(dir: &Path, split: Split, dataset: Option<&Path>) -> Result<MetricsRow> {
    let ck = load_checkpoint(dir)?;
    let mut cfg = ck.manifest.config.clone();
    if let Some(d) = dataset {
        cfg.dataset_path = Some(d.to_path_buf());
    }
    let data = Dataset::load(&cfg)?;
    if data.in_channels() != ck.manifest.in_channels || data.vocab_size() != ck.manifest.vocab_size
    {
        return Err(Error::Checkpoint(format!(
            "dataset has {} channels and vocabulary {}, checkpoint expects {} and {}",
            data.in_channels(),
            data.vocab_size(),
            ck.manifest.in_channels,
            ck.manifest.vocab_size
        )));
    }
    let mut model = Model::build(
        &cfg,
        ck.manifest.in_channels,
        ck.manifest.vocab_size,
        ck.manifest.seed,
    )?;
    apply_values(&mut model, &ck.values)?;
    let s = evaluate(&mut model, &data, &cfg, split)?;
    Ok(MetricsRow {
        run_id: cfg.run_id.clone(),
        seed: ck.manifest.seed,
        step: ck.manifest.step,
        split: split.name().into(),
        loss: s.loss,
        accuracy: s.accuracy,
        wall_time_s: 0.0,
    })
}

/// Generates a dataset from a JSON config of the given kind and writes it to `out`.
pub fn gen_data(task: Task, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    fn load<T: Default + for<'de> serde::Deserialize<'de>>(path: Option<&Path>) -> Result<T> {
        match path {
            None => Ok(T::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }
    match task {
        Task::Sqoop => {
            let mut cfg: SqoopConfig = load(config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            write_sqoop(&gen_sqoop(&cfg)?, out)
        }
        Task::Fewshot => {
            let mut cfg: FewShotConfig = load(config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            write_fewshot(&gen_fewshot_universe(&cfg)?, out)
        }
    }
}
