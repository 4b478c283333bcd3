use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::checkpoint::{apply_values, snapshot};
use super::config::{ExperimentConfig, Task};
use crate::data::fewshot::{sample_episode, ClassSplit, EpisodeConfig, FewShotPool};
use crate::data::io::{read_fewshot, read_sqoop};
use crate::data::sqoop::{self, SqoopDataset, SqoopSample};
use crate::data::{gen_fewshot_universe, gen_sqoop};
use crate::error::{Error, Result};
use crate::nn::{accuracy, softmax_xent, FilmNetwork, ProtoHead, Support};
use crate::param::{Ctx, Mode, Module, Param};
use crate::tensor::Tape;

const EVAL_CHUNK: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|v| v.name() == s)
    }

    fn class_split(self) -> ClassSplit {
        match self {
            Split::Train => ClassSplit::Train,
            Split::Val => ClassSplit::Val,
            Split::Test => ClassSplit::Test,
        }
    }
}

pub enum Dataset {
    Sqoop(SqoopDataset),
    Fewshot(FewShotPool),
}

#[derive(Deserialize)]
struct Kind {
    kind: String,
}

impl Dataset {
    /// Reads `dataset_path` when set, otherwise generates from the nested config.
    pub fn load(cfg: &ExperimentConfig) -> Result<Dataset> {
        match &cfg.dataset_path {
            Some(dir) => Self::read(dir, cfg.task),
            None => match cfg.task {
                Task::Sqoop => Ok(Dataset::Sqoop(gen_sqoop(&cfg.sqoop)?)),
                Task::Fewshot => Ok(Dataset::Fewshot(gen_fewshot_universe(&cfg.fewshot)?)),
            },
        }
    }

    pub fn read(dir: &Path, task: Task) -> Result<Dataset> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kind: Kind = serde_json::from_str(&text)?;
        let d = match kind.kind.as_str() {
            "sqoop" => Dataset::Sqoop(read_sqoop(dir)?),
            "fewshot" => Dataset::Fewshot(read_fewshot(dir)?),
            other => {
                return Err(Error::Data(format!(
                    "{}: unknown dataset kind `{other}`",
                    path.display()
                )))
            }
        };
        if d.task() != task {
            return Err(Error::Config(format!(
                "task is {task:?} but {} holds a {} dataset",
                dir.display(),
                kind.kind
            )));
        }
        Ok(d)
    }

    pub fn task(&self) -> Task {
        match self {
            Dataset::Sqoop(_) => Task::Sqoop,
            Dataset::Fewshot(_) => Task::Fewshot,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Dataset::Sqoop(d) => d.config.channels(),
            Dataset::Fewshot(p) => p.config.channels,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Dataset::Sqoop(d) => d.config.vocab_size(),
            Dataset::Fewshot(_) => 0,
        }
    }
}

pub enum Model {
    Film(FilmNetwork),
    Proto(ProtoHead),
}

impl Model {
    pub fn build(
        cfg: &ExperimentConfig,
        in_channels: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match cfg.task {
            Task::Sqoop => Model::Film(FilmNetwork::new(
                cfg.film_config(in_channels, vocab_size),
                &mut rng,
            )?),
            Task::Fewshot => Model::Proto(ProtoHead::new(cfg.proto_config(in_channels), &mut rng)?),
        })
    }

    fn inner(&self) -> &dyn Module {
        match self {
            Model::Film(m) => m,
            Model::Proto(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Module {
        match self {
            Model::Film(m) => m,
            Model::Proto(m) => m,
        }
    }
}

impl Module for Model {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.inner().visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.inner_mut().visit_mut(f)
    }

    fn set_mode(&mut self, mode: Mode) {
        self.inner_mut().set_mode(mode)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub loss: f64,
    pub accuracy: f64,
}

/// Episode seeds for evaluation are fixed per split so every evaluation of
/// a run scores the same episodes.
fn eval_episode(split: Split, i: usize) -> u64 {
    ((split as u64 + 1) << 40) | i as u64
}

fn score_sqoop(net: &mut FilmNetwork, samples: &[SqoopSample], alphabet: usize) -> Result<Score> {
    let (mut loss, mut hits, mut n) = (0.0, 0.0, 0usize);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&SqoopSample> = chunk.iter().collect();
        let (x, q, y) = sqoop::batch(&refs, alphabet)?;
        let tape = Tape::new();
        let ctx = Ctx::no_grad(&tape);
        let logits = net.forward(&ctx, &x, &q)?.value();
        loss += softmax_xent(&logits, &y)? * y.len() as f64;
        hits += accuracy(&logits, &y) * y.len() as f64;
        n += y.len();
    }
    if n == 0 {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    Ok(Score {
        loss: loss / n as f64,
        accuracy: hits / n as f64,
    })
}

fn score_fewshot(
    head: &mut ProtoHead,
    pool: &FewShotPool,
    cfg: &ExperimentConfig,
    split: Split,
) -> Result<Score> {
    let (mut loss, mut acc) = (0.0, 0.0);
    let episodes = cfg.eval_episodes.max(1);
    for i in 0..episodes {
        let ep = sample_episode(
            pool,
            &EpisodeConfig {
                ways: cfg.ways,
                shots: cfg.shots,
                queries: cfg.queries,
                split: split.class_split(),
                seed: eval_episode(split, i),
            },
        )?;
        let tape = Tape::new();
        let ctx = Ctx::no_grad(&tape);
        let support = Support {
            images: &ep.support,
            labels: &ep.support_labels,
            ways: cfg.ways,
        };
        let logits = head.logits(&ctx, &support, &ep.query)?.value();
        loss += softmax_xent(&logits, &ep.query_labels)?;
        acc += accuracy(&logits, &ep.query_labels);
    }
    Ok(Score {
        loss: loss / episodes as f64,
        accuracy: acc / episodes as f64,
    })
}

fn score(model: &mut Model, data: &Dataset, cfg: &ExperimentConfig, split: Split) -> Result<Score> {
    match (model, data) {
        (Model::Film(net), Dataset::Sqoop(d)) => {
            let samples = match split {
                Split::Train if cfg.train_eval_samples > 0 => {
                    &d.train[..cfg.train_eval_samples.min(d.train.len())]
                }
                Split::Train => &d.train[..],
                Split::Val => &d.val[..],
                Split::Test => &d.test[..],
            };
            score_sqoop(net, samples, d.config.alphabet)
        }
        (Model::Proto(head), Dataset::Fewshot(pool)) => score_fewshot(head, pool, cfg, split),
        _ => Err(Error::Config(
            "model and dataset belong to different tasks".into(),
        )),
    }
}

/// Scores `model` on `split` in Eval mode, restoring Train mode afterwards.
///
/// For SQOOP the train split is limited to its first `train_eval_samples`
/// samples; few-shot splits are scored on `eval_episodes` fixed episodes.
pub fn evaluate(
    model: &mut Model,
    data: &Dataset,
    cfg: &ExperimentConfig,
    split: Split,
) -> Result<Score> {
    model.set_mode(Mode::Eval);
    let out = score(model, data, cfg, split);
    model.set_mode(Mode::Train);
    out
}

/// Like [`evaluate`], but a model whose Batch layers have not yet seen a
/// training batch is scored with per-chunk batch statistics. All
/// parameters and buffers are restored afterwards.
pub fn evaluate_untrained(
    model: &mut Model,
    data: &Dataset,
    cfg: &ExperimentConfig,
    split: Split,
) -> Result<Score> {
    match evaluate(model, data, cfg, split) {
        Err(Error::MissingRunningStats(_)) => {
            let saved = snapshot(model);
            let out = score(model, data, cfg, split);
            apply_values(model, &saved)?;
            out
        }
        r => r,
    }
}
