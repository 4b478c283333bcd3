use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{FewShotConfig, SqoopConfig};
use crate::error::{Error, Result};
use crate::nn::{FilmConfig, NormVariant, OptimizerKind, ProtoConfig};
use crate::norm::{DEFAULT_EPS, DEFAULT_GROUPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sqoop,
    Fewshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

/// Everything a `train` run needs. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub task: Task,
    pub norm_variant: NormVariant,
    pub groups: usize,
    pub eps: f64,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_updates: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub eval_interval: usize,
    pub seeds: Vec<u64>,
    /// Directory written by `gen-data`; when absent the data is generated
    /// from `sqoop` / `fewshot`.
    pub dataset_path: Option<PathBuf>,
    pub sqoop: SqoopConfig,
    pub fewshot: FewShotConfig,
    pub width: usize,
    pub stem_layers: usize,
    pub num_blocks: usize,
    pub classifier_width: usize,
    pub fc_width: usize,
    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub coord_maps: bool,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub task_dim: usize,
    pub ten_hidden: usize,
    /// Episodes per few-shot evaluation.
    pub eval_episodes: usize,
    /// Training samples scored at each evaluation (0 = all).
    pub train_eval_samples: usize,
    /// Stop a seed once its training accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Record elapsed seconds; when false the column is zero so that
    /// repeated runs produce identical files.
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "run".into(),
            task: Task::Sqoop,
            norm_variant: NormVariant::AllBn,
            groups: DEFAULT_GROUPS,
            eps: DEFAULT_EPS,
            optimizer: OptimizerName::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-5,
            momentum: 0.9,
            batch_size: 32,
            max_updates: 20_000,
            patience: 10,
            eval_interval: 500,
            seeds: vec![0, 1, 2],
            dataset_path: None,
            sqoop: SqoopConfig::default(),
            fewshot: FewShotConfig::default(),
            width: 16,
            stem_layers: 2,
            num_blocks: 4,
            classifier_width: 32,
            fc_width: 32,
            embed_dim: 16,
            gru_hidden: 32,
            coord_maps: true,
            ways: 5,
            shots: 5,
            queries: 5,
            task_dim: 16,
            ten_hidden: 16,
            eval_episodes: 100,
            train_eval_samples: 1000,
            target_accuracy: None,
            wall_clock: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.groups == 0 {
            return err("groups must be positive".into());
        }
        let widths: &[(&str, usize)] = match self.task {
            Task::Sqoop => &[("width", self.width), ("fc_width", self.fc_width)],
            Task::Fewshot => &[("width", self.width)],
        };
        for &(name, w) in widths {
            if w == 0 || w % self.groups != 0 {
                return err(format!("groups ({}) must divide {name} ({w})", self.groups));
            }
        }
        if !(self.eps > 0.0) {
            return err(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.lr > 0.0) {
            return err(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return err("batch_size and eval_interval must be positive".into());
        }
        if self.seeds.is_empty() {
            return err("at least one seed is required".into());
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return err(format!("target_accuracy must lie in [0, 1], got {t}"));
            }
        }
        if self.task == Task::Fewshot && (self.ways < 2 || self.shots == 0 || self.queries == 0) {
            return err("few-shot episodes need ways >= 2 and positive shots and queries".into());
        }
        if let Some(p) = &self.dataset_path {
            if !p.exists() {
                return err(format!("dataset_path {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerName::Adam => OptimizerKind::Adam {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            OptimizerName::Sgd => OptimizerKind::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            },
        }
    }

    /// Network shape for SQOOP given the dataset's image channels and vocabulary.
    pub fn film_config(&self, in_channels: usize, vocab_size: usize) -> FilmConfig {
        FilmConfig {
            in_channels,
            stem_layers: self.stem_layers,
            width: self.width,
            num_blocks: self.num_blocks,
            classifier_width: self.classifier_width,
            fc_width: self.fc_width,
            num_answers: 2,
            vocab_size,
            embed_dim: self.embed_dim,
            gru_hidden: self.gru_hidden,
            groups: self.groups,
            eps: self.eps,
            variant: self.norm_variant,
            coord_maps: self.coord_maps,
        }
    }

    /// Few-shot embedding network; Batch statistics only for `all_bn`.
    pub fn proto_config(&self, in_channels: usize) -> ProtoConfig {
        ProtoConfig {
            in_channels,
            width: self.width,
            num_blocks: self.num_blocks,
            task_dim: self.task_dim,
            ten_hidden: self.ten_hidden,
            groups: self.groups,
            eps: self.eps,
            batch_norm: self.norm_variant == NormVariant::AllBn,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
