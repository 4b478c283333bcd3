use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{apply_values, save_checkpoint, snapshot};
use super::config::ExperimentConfig;
use super::metrics::{merge_metrics, MetricsRow, MetricsWriter};
use super::model::{evaluate, evaluate_untrained, Dataset, Model, Score, Split};
use crate::data::fewshot::{sample_episode_with, ClassSplit, EpisodeConfig};
use crate::data::sqoop::{self, SqoopSample};
use crate::error::{Error, Result};
use crate::nn::{Optimizer, Support};
use crate::param::Ctx;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStatus {
    Completed,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub status: SeedStatus,
    /// Updates actually performed.
    pub updates: u64,
    /// Step of the kept (best-validation) parameters.
    pub best_step: u64,
    pub best_val_accuracy: f64,
    /// Training accuracy recorded at `best_step`.
    pub train_accuracy: f64,
    /// Highest training accuracy seen at any evaluation.
    pub max_train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Training accuracy at the last evaluation before stopping.
    pub final_train_accuracy: f64,
    /// Test accuracy of the parameters at stopping time (not the kept ones).
    pub final_test_accuracy: f64,
    pub message: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn summarize(values: &[f64]) -> Option<Summary> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary { mean, std, n })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run_id: String,
    pub config_hash: String,
    pub seeds: Vec<SeedOutcome>,
    /// Over completed seeds only; `None` when every seed diverged.
    pub test_accuracy: Option<Summary>,
    pub train_accuracy: Option<Summary>,
}

impl TrainReport {
    pub fn all_diverged(&self) -> bool {
        self.seeds.iter().all(|s| s.status == SeedStatus::Diverged)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.seeds {
            match s.status {
                SeedStatus::Completed => out.push_str(&format!(
                    "seed {}: best step {} val {:.4} train {:.4} test {:.4}\n",
                    s.seed, s.best_step, s.best_val_accuracy, s.train_accuracy, s.test_accuracy
                )),
                SeedStatus::Diverged => out.push_str(&format!(
                    "seed {}: diverged after {} updates ({})\n",
                    s.seed,
                    s.updates,
                    s.message.as_deref().unwrap_or("non-finite loss")
                )),
            }
        }
        match self.test_accuracy {
            Some(t) => out.push_str(&format!(
                "test accuracy {:.4} ± {:.4} (n = {})\n",
                t.mean, t.std, t.n
            )),
            None => out.push_str("test accuracy unavailable: every seed diverged\n"),
        }
        out
    }
}

pub fn metrics_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("metrics_seed{seed}.csv"))
}

pub fn checkpoint_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("checkpoint_seed{seed}"))
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::NonFiniteGradient(_))
}

/// Number of seeds trained concurrently: `NORMLAB_THREADS` if set, else the
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("NORMLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One optimisation step; returns the training loss.
fn train_step(
    model: &mut Model,
    data: &Dataset,
    cfg: &ExperimentConfig,
    opt: &mut Optimizer,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let loss = match (&mut *model, data) {
        (Model::Film(net), Dataset::Sqoop(d)) => {
            let refs: Vec<&SqoopSample> = (0..cfg.batch_size)
                .map(|_| &d.train[rng.random_range(0..d.train.len())])
                .collect();
            let (x, q, y) = sqoop::batch(&refs, d.config.alphabet)?;
            net.forward(&ctx, &x, &q)?.softmax_xent(&y)?
        }
        (Model::Proto(head), Dataset::Fewshot(pool)) => {
            let ep = sample_episode_with(
                pool,
                &EpisodeConfig {
                    ways: cfg.ways,
                    shots: cfg.shots,
                    queries: cfg.queries,
                    split: ClassSplit::Train,
                    seed: 0,
                },
                rng,
            )?;
            let support = Support {
                images: &ep.support,
                labels: &ep.support_labels,
                ways: cfg.ways,
            };
            head.logits(&ctx, &support, &ep.query)?
                .softmax_xent(&ep.query_labels)?
        }
        _ => {
            return Err(Error::Config(
                "model and dataset belong to different tasks".into(),
            ))
        }
    };
    let value = loss.value().data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite {
            op: "training loss",
        });
    }
    let grads = tape.backward(loss)?;
    opt.step(model, &ctx.param_grads(&grads))?;
    Ok(value)
}

struct Best {
    step: u64,
    val: f64,
    train: f64,
    values: BTreeMap<String, Tensor>,
}

/// Trains one seed, writing `metrics_seed{seed}.csv` and `checkpoint_seed{seed}/` under `out`.
///
/// Evaluates at step 0, every `eval_interval` updates and after the last
/// update. The kept parameters are those with the highest validation
/// accuracy (earliest on ties); training stops after `patience` evaluations
/// without improvement or once training accuracy reaches `target_accuracy`.
pub fn train_seed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
    out: &Path,
) -> Result<SeedOutcome> {
    let start = Instant::now();
    let elapsed = || {
        if cfg.wall_clock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let mut metrics = MetricsWriter::create(&metrics_path(out, seed))?;
    let mut model = Model::build(cfg, data.in_channels(), data.vocab_size(), seed)?;
    let mut opt = Optimizer::new(cfg.optimizer_kind());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut row = |step: u64, split: Split, s: Score, wall: f64| -> Result<()> {
        metrics.write(&MetricsRow {
            run_id: cfg.run_id.clone(),
            seed,
            step,
            split: split.name().into(),
            loss: s.loss,
            accuracy: s.accuracy,
            wall_time_s: wall,
        })
    };

    let mut best: Option<Best> = None;
    let mut max_train = 0.0f64;
    let mut last_train;
    let mut stale = 0usize;
    let mut step = 0u64;
    let mut failure = None;
    loop {
        let (train, val) = if step == 0 {
            (
                evaluate_untrained(&mut model, data, cfg, Split::Train)?,
                evaluate_untrained(&mut model, data, cfg, Split::Val)?,
            )
        } else {
            (
                evaluate(&mut model, data, cfg, Split::Train)?,
                evaluate(&mut model, data, cfg, Split::Val)?,
            )
        };
        let wall = elapsed();
        row(step, Split::Train, train, wall)?;
        row(step, Split::Val, val, wall)?;
        max_train = max_train.max(train.accuracy);
        last_train = train.accuracy;
        if best.as_ref().is_none_or(|b| val.accuracy > b.val) {
            best = Some(Best {
                step,
                val: val.accuracy,
                train: train.accuracy,
                values: snapshot(&model),
            });
            stale = 0;
        } else {
            stale += 1;
        }
        let reached = cfg.target_accuracy.is_some_and(|t| train.accuracy >= t);
        if reached || stale >= cfg.patience.max(1) || step as usize >= cfg.max_updates {
            break;
        }
        let next =
            ((step as usize / cfg.eval_interval + 1) * cfg.eval_interval).min(cfg.max_updates);
        while (step as usize) < next {
            match train_step(&mut model, data, cfg, &mut opt, &mut rng) {
                Ok(_) => step += 1,
                Err(e) if is_divergence(&e) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if failure.is_some() {
            break;
        }
    }

    if let Some(message) = failure {
        return Ok(SeedOutcome {
            seed,
            status: SeedStatus::Diverged,
            updates: step,
            best_step: 0,
            best_val_accuracy: f64::NAN,
            train_accuracy: f64::NAN,
            max_train_accuracy: max_train,
            test_loss: f64::NAN,
            test_accuracy: f64::NAN,
            final_train_accuracy: last_train,
            final_test_accuracy: f64::NAN,
            message: Some(message),
        });
    }

    let final_test = evaluate_untrained(&mut model, data, cfg, Split::Test)?;
    let best = best.expect("at least one evaluation");
    apply_values(&mut model, &best.values)?;
    let test = evaluate_untrained(&mut model, data, cfg, Split::Test)?;
    row(best.step, Split::Test, test, elapsed())?;
    save_checkpoint(
        &checkpoint_dir(out, seed),
        &model,
        cfg,
        data.in_channels(),
        data.vocab_size(),
        seed,
        best.step,
    )?;
    Ok(SeedOutcome {
        seed,
        status: SeedStatus::Completed,
        updates: step,
        best_step: best.step,
        best_val_accuracy: best.val,
        train_accuracy: best.train,
        max_train_accuracy: max_train,
        test_loss: test.loss,
        test_accuracy: test.accuracy,
        final_train_accuracy: last_train,
        final_test_accuracy: final_test.accuracy,
        message: None,
    })
}

/// Trains every configured seed (concurrently up to [`thread_cap`]), then
/// merges metrics into `metrics.csv` and writes `report.json`.
pub fn train(cfg: &ExperimentConfig, out: &Path, emit_plotdata: bool) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = Dataset::load(cfg)?;
    if data.task() != cfg.task {
        return Err(Error::Config(
            "dataset does not match the configured task".into(),
        ));
    }

    let seeds = &cfg.seeds;
    let results: Mutex<Vec<Option<Result<SeedOutcome>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = thread_cap().min(seeds.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = train_seed(cfg, &data, seeds[i], out);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });

    let mut outcomes = Vec::new();
    for r in results.into_inner().expect("results lock") {
        outcomes.push(r.expect("every seed ran")?);
    }
    let parts: Vec<PathBuf> = seeds.iter().map(|&s| metrics_path(out, s)).collect();
    merge_metrics(&parts, &out.join("metrics.csv"))?;
    if emit_plotdata {
        write_plotdata(&parts, &out.join("plotdata.csv"))?;
    }

    let done: Vec<&SeedOutcome> = outcomes
        .iter()
        .filter(|o| o.status == SeedStatus::Completed)
        .collect();
    let report = TrainReport {
        run_id: cfg.run_id.clone(),
        config_hash: cfg.hash(),
        test_accuracy: summarize(&done.iter().map(|o| o.test_accuracy).collect::<Vec<_>>()),
        train_accuracy: summarize(&done.iter().map(|o| o.train_accuracy).collect::<Vec<_>>()),
        seeds: outcomes,
    };
    let path = out.join("report.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Per-step accuracy curves: `seed,step,train_accuracy,val_accuracy`.
fn write_plotdata(parts: &[PathBuf], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "step", "train_accuracy", "val_accuracy"])?;
    for p in parts {
        let mut curves: BTreeMap<(u64, u64), (f64, f64)> = BTreeMap::new();
        for r in super::metrics::read_metrics(p)? {
            let e = curves
                .entry((r.seed, r.step))
                .or_insert((f64::NAN, f64::NAN));
            match r.split.as_str() {
                "train" => e.0 = r.accuracy,
                "val" => e.1 = r.accuracy,
                _ => {}
            }
        }
        for ((seed, step), (tr, va)) in curves {
            if tr.is_nan() && va.is_nan() {
                continue;
            }
            w.write_record([
                seed.to_string(),
                step.to_string(),
                tr.to_string(),
                va.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
