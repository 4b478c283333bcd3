//! Procedural image classes for episodic few-shot classification.
//!
//! Every class is a coloured shape at a class-specific position and size.
//! Samples add a random brightness scale and pixel noise, both with standard
//! deviation `jitter`.

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disk,
    Ring,
    Cross,
    HBars,
    VBars,
    Diagonal,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 8] = [
        Shape::Square,
        Shape::Disk,
        Shape::Ring,
        Shape::Cross,
        Shape::HBars,
        Shape::VBars,
        Shape::Diagonal,
        Shape::Triangle,
    ];

    /// Coverage at offset `(dy, dx)` from the centre, scaled by radius `r`.
    fn covers(self, dy: f64, dx: f64, r: f64) -> bool {
        let (u, v) = (dy / r, dx / r);
        let inside = u.abs() <= 1.0 && v.abs() <= 1.0;
        match self {
            Shape::Square => inside,
            Shape::Disk => u * u + v * v <= 1.0,
            Shape::Ring => (0.45..=1.0).contains(&(u * u + v * v)),
            Shape::Cross => inside && (u.abs() <= 0.35 || v.abs() <= 0.35),
            Shape::HBars => inside && ((dy.round() as i64).rem_euclid(2) == 0),
            Shape::VBars => inside && ((dx.round() as i64).rem_euclid(2) == 0),
            Shape::Diagonal => inside && (u - v).abs() <= 0.45,
            Shape::Triangle => inside && v.abs() <= (u + 1.0) / 2.0,
        }
    }
}

/// Parameters of one procedural class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub shape: Shape,
    pub color: Vec<f64>,
    /// Centre `(row, col)` in pixels.
    pub center: (f64, f64),
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub jitter: f64,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            n_classes: 64,
            per_class: 30,
            channels: 3,
            size: 12,
            jitter: 0.1,
            train_classes: 40,
            val_classes: 12,
            test_classes: 12,
            seed: 0,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        let needed = self.train_classes + self.val_classes + self.test_classes;
        if needed > self.n_classes {
            return Err(Error::Config(format!(
                "class splits need {needed} classes but n_classes is {}",
                self.n_classes
            )));
        }
        if self.per_class == 0 || self.channels == 0 || self.size < 4 {
            return Err(Error::Config(
                "per_class and channels must be positive and size at least 4".into(),
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!(
                "jitter must be finite and non-negative, got {}",
                self.jitter
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSplit {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotPool {
    pub config: FewShotConfig,
    pub classes: Vec<ClassSpec>,
    /// `images[c][i]` is sample `i` of class `c`, shaped `[C, H, W]`.
    pub images: Vec<Vec<Tensor>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl FewShotPool {
    pub fn split(&self, s: ClassSplit) -> &[usize] {
        match s {
            ClassSplit::Train => &self.train,
            ClassSplit::Val => &self.val,
            ClassSplit::Test => &self.test,
        }
    }
}

/// Noise-free rendering of a class.
pub fn render_class(spec: &ClassSpec, channels: usize, size: usize) -> Result<Tensor> {
    let plane = size * size;
    Tensor::from_fn([channels, size, size], |k| {
        let (c, y, x) = (k / plane, (k / size) % size, k % size);
        let on = spec.shape.covers(
            y as f64 - spec.center.0,
            x as f64 - spec.center.1,
            spec.radius,
        );
        if on {
            spec.color[c]
        } else {
            0.0
        }
    })
}

fn random_class<R: Rng + ?Sized>(channels: usize, size: usize, rng: &mut R) -> ClassSpec {
    let s = size as f64;
    let radius = rng.random_range(0.2 * s..0.35 * s);
    let lo = radius.min(s / 2.0 - 0.5);
    let hi = (s - 1.0 - radius).max(lo + 1e-9);
    ClassSpec {
        shape: *Shape::ALL.choose(rng).expect("non-empty"),
        color: (0..channels).map(|_| rng.random_range(0.2..1.0)).collect(),
        center: (rng.random_range(lo..hi), rng.random_range(lo..hi)),
        radius,
    }
}

/// Generates the pool. Pixel values are rounded to 32-bit precision so that
/// the pool survives serialization unchanged.
pub fn gen_fewshot_universe(cfg: &FewShotConfig) -> Result<FewShotPool> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let min_dist = 0.5 * ((cfg.channels * cfg.size * cfg.size) as f64).sqrt() * 0.25;
    let mut classes = Vec::with_capacity(cfg.n_classes);
    let mut protos: Vec<Tensor> = Vec::with_capacity(cfg.n_classes);
    let mut attempts = 0;
    while classes.len() < cfg.n_classes {
        let spec = random_class(cfg.channels, cfg.size, &mut rng);
        let proto = render_class(&spec, cfg.channels, cfg.size)?;
        attempts += 1;
        let dist = |p: &Tensor| {
            p.data()
                .iter()
                .zip(proto.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        // keep classes apart; relax after many rejections so generation always ends
        if attempts < 100 * cfg.n_classes && protos.iter().any(|p| dist(p) < min_dist) {
            continue;
        }
        classes.push(spec);
        protos.push(proto);
    }
    let images = protos
        .iter()
        .map(|proto| {
            (0..cfg.per_class)
                .map(|_| {
                    let scale = 1.0 + cfg.jitter * noise.sample(&mut rng);
                    let data = proto
                        .data()
                        .iter()
                        .map(|&v| {
                            let px = if cfg.jitter > 0.0 {
                                v * scale + cfg.jitter * noise.sample(&mut rng)
                            } else {
                                v
                            };
                            px as f32 as f64
                        })
                        .collect();
                    Tensor::new(proto.shape().to_vec(), data)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..cfg.n_classes).collect();
    order.shuffle(&mut rng);
    let (a, b) = (cfg.train_classes, cfg.train_classes + cfg.val_classes);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(FewShotPool {
        config: cfg.clone(),
        classes,
        images,
        train: sorted(&order[..a]),
        val: sorted(&order[a..b]),
        test: sorted(&order[b..b + cfg.test_classes]),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub split: ClassSplit,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Pool class ids; episode label `m` refers to `classes[m]`.
    pub classes: Vec<usize>,
    /// `[ways * shots, C, H, W]`, class-major.
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub support_index: Vec<(usize, usize)>,
    /// `[ways * queries, C, H, W]`.
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub query_index: Vec<(usize, usize)>,
}

pub fn sample_episode(pool: &FewShotPool, cfg: &EpisodeConfig) -> Result<Episode> {
    sample_episode_with(pool, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Draws classes and samples uniformly without replacement.
pub fn sample_episode_with<R: Rng + ?Sized>(
    pool: &FewShotPool,
    cfg: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    let split = pool.split(cfg.split);
    if cfg.ways == 0 || cfg.shots == 0 || cfg.queries == 0 {
        return Err(Error::Config(
            "ways, shots and queries must be positive".into(),
        ));
    }
    if cfg.ways > split.len() {
        return Err(Error::Data(format!(
            "{}-way episode from a split of {} classes",
            cfg.ways,
            split.len()
        )));
    }
    let need = cfg.shots + cfg.queries;
    let mut classes = Vec::with_capacity(cfg.ways);
    for i in index::sample(rng, split.len(), cfg.ways) {
        classes.push(split[i]);
    }
    let mut support_index = Vec::new();
    let mut query_index = Vec::new();
    for &c in &classes {
        let have = pool.images[c].len();
        if have < need {
            return Err(Error::Data(format!(
                "class {c} has {have} samples, episode needs {need}"
            )));
        }
        let picks = index::sample(rng, have, need).into_vec();
        support_index.extend(picks[..cfg.shots].iter().map(|&i| (c, i)));
        query_index.extend(picks[cfg.shots..].iter().map(|&i| (c, i)));
    }
    let gather = |idx: &[(usize, usize)]| -> Result<Tensor> {
        let items: Vec<&Tensor> = idx.iter().map(|&(c, i)| &pool.images[c][i]).collect();
        Tensor::stack(&items)
    };
    let label = |idx: &[(usize, usize)]| -> Vec<usize> {
        idx.iter()
            .map(|(c, _)| classes.iter().position(|x| x == c).expect("episode class"))
            .collect()
    };
    Ok(Episode {
        support: gather(&support_index)?,
        support_labels: label(&support_index),
        query: gather(&query_index)?,
        query_labels: label(&query_index),
        classes,
        support_index,
        query_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(jitter: f64) -> FewShotConfig {
        FewShotConfig {
            n_classes: 6,
            per_class: 4,
            channels: 3,
            size: 8,
            jitter,
            train_classes: 2,
            val_classes: 2,
            test_classes: 2,
            seed: 1,
        }
    }

    #[test]
    fn zero_jitter_gives_identical_samples() {
        let pool = gen_fewshot_universe(&tiny(0.0)).unwrap();
        for class in &pool.images {
            assert!(class.iter().all(|t| t == &class[0]));
        }
    }

    #[test]
    fn insufficient_classes_rejected() {
        let cfg = FewShotConfig {
            n_classes: 5,
            ..tiny(0.1)
        };
        assert!(gen_fewshot_universe(&cfg).is_err());
    }

    #[test]
    fn one_shot_two_way() {
        let pool = gen_fewshot_universe(&tiny(0.1)).unwrap();
        let cfg = EpisodeConfig {
            ways: 2,
            shots: 1,
            queries: 2,
            split: ClassSplit::Train,
            seed: 3,
        };
        let ep = sample_episode(&pool, &cfg).unwrap();
        assert_eq!(ep.support_labels, vec![0, 1]);
        assert_eq!(ep.support.shape(), &[2, 3, 8, 8]);
        assert_eq!(ep.query_labels.len(), 4);
        let too_many = EpisodeConfig { queries: 4, ..cfg };
        assert!(sample_episode(&pool, &too_many).is_err());
    }
}
