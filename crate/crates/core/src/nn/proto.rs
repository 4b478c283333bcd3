//! Task-conditioned prototype classifier for episodic few-shot learning.
//!
//! 1. Embed the support set without conditioning (`c = 0`) and average per
//!    class to get prototypes.
//! 2. A task embedding network maps the mean prototype to a conditioning
//!    vector `Γ`.
//! 3. Re-embed support and query with conditioning `Γ`; logits are
//!    `-alpha * ||e(query) - p'_m||^2` with a learned `alpha > 0`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::film::FilmBlock;
use super::layers::{Conv2d, Linear};
use crate::error::{Error, Result};
use crate::norm::{AffineKind, NormLayer, StatDomain, DEFAULT_EPS, DEFAULT_GROUPS};
use crate::param::{Ctx, Mode, Module, Param};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoConfig {
    pub in_channels: usize,
    pub width: usize,
    pub num_blocks: usize,
    /// Dimension of the task conditioning vector.
    pub task_dim: usize,
    pub ten_hidden: usize,
    pub groups: usize,
    pub eps: f64,
    /// `true` for batch statistics, `false` for group statistics.
    pub batch_norm: bool,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        ProtoConfig {
            in_channels: 3,
            width: 16,
            num_blocks: 2,
            task_dim: 16,
            ten_hidden: 16,
            groups: DEFAULT_GROUPS,
            eps: DEFAULT_EPS,
            batch_norm: false,
        }
    }
}

/// Conditioned convolutional embedding `f_phi(x, c)`, globally average-pooled.
#[derive(Clone, Debug)]
pub struct EmbeddingNet {
    pub stem: Conv2d,
    pub stem_norm: NormLayer,
    pub blocks: Vec<FilmBlock>,
    pub task_dim: usize,
}

impl EmbeddingNet {
    pub fn forward<'t>(
        &mut self,
        ctx: &Ctx<'t>,
        images: &Tensor,
        cond: Var<'t>,
    ) -> Result<Var<'t>> {
        let n = images.shape()[0];
        let h = self.stem.forward(ctx, ctx.input(images.clone()))?;
        let mut x = self.stem_norm.forward(ctx, h, None)?.relu()?;
        for b in &mut self.blocks {
            x = b.forward(ctx, x, cond)?;
        }
        let width = self.stem.out_channels();
        x.mean(&[2, 3])?.reshape(&[n, width])
    }
}

#[derive(Clone, Debug)]
pub struct ProtoHead {
    pub config: ProtoConfig,
    pub embed: EmbeddingNet,
    pub ten_hidden: Linear,
    pub ten_out: Linear,
    /// `alpha = softplus(alpha_raw)`.
    pub alpha_raw: Param,
}

/// One support set with labels `0..ways`.
pub struct Support<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
    pub ways: usize,
}

impl ProtoHead {
    pub fn new<R: Rng + ?Sized>(config: ProtoConfig, rng: &mut R) -> Result<Self> {
        let c = &config;
        let domain = if c.batch_norm {
            StatDomain::Batch
        } else {
            StatDomain::Group(c.groups)
        };
        let embed = EmbeddingNet {
            stem: Conv2d::without_bias("embed.stem", c.in_channels, c.width, 3, rng)?,
            stem_norm: NormLayer::new(
                "embed.stem_norm",
                c.width,
                domain,
                c.eps,
                AffineKind::Fixed,
            )?,
            blocks: (0..c.num_blocks)
                .map(|i| {
                    FilmBlock::new(
                        &format!("embed.blocks.{i}"),
                        c.width,
                        c.task_dim,
                        domain,
                        c.eps,
                        false,
                        rng,
                    )
                })
                .collect::<Result<_>>()?,
            task_dim: c.task_dim,
        };
        Ok(ProtoHead {
            ten_hidden: Linear::new("ten.hidden", c.width, c.ten_hidden, 1.0, rng)?,
            ten_out: Linear::new("ten.out", c.ten_hidden, c.task_dim, 1.0, rng)?,
            // softplus(ln(e - 1)) = 1
            alpha_raw: Param::new(
                "alpha_raw",
                Tensor::scalar((std::f64::consts::E - 1.0).ln()),
            ),
            config,
            embed,
        })
    }

    pub fn alpha(&self) -> f64 {
        let r = self.alpha_raw.value.data()[0];
        if r > 30.0 {
            r
        } else {
            r.exp().ln_1p()
        }
    }

    /// Per-class mean embeddings `[ways, E]`.
    fn prototypes<'t>(emb: Var<'t>, support: &Support<'_>) -> Result<Var<'t>> {
        let protos = (0..support.ways)
            .map(|m| {
                let rows: Vec<usize> = (0..support.labels.len())
                    .filter(|&i| support.labels[i] == m)
                    .collect();
                emb.index_select(&rows)?.mean(&[0])
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&protos, 0)
    }

    fn check_support(support: &Support<'_>) -> Result<()> {
        let n = support.images.shape()[0];
        if support.labels.len() != n {
            return Err(Error::Data(format!(
                "{n} support images but {} labels",
                support.labels.len()
            )));
        }
        let mut counts = vec![0usize; support.ways];
        for &l in support.labels {
            *counts.get_mut(l).ok_or(Error::IndexOutOfRange {
                index: l,
                extent: support.ways,
            })? += 1;
        }
        if let Some(m) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Data(format!("class {m} has no support samples")));
        }
        if counts.iter().any(|&k| k != counts[0]) {
            return Err(Error::Data(format!("unequal shots per class: {counts:?}")));
        }
        Ok(())
    }

    /// Task embedding `Γ` `[1, task_dim]` from unconditioned prototypes.
    pub fn task_embedding<'t>(&mut self, ctx: &Ctx<'t>, support: &Support<'_>) -> Result<Var<'t>> {
        Self::check_support(support)?;
        let zero = ctx.input(Tensor::zeros([self.config.task_dim])?);
        let emb = self.embed.forward(ctx, support.images, zero)?;
        let mean_proto = Self::prototypes(emb, support)?.mean(&[0])?;
        let h = self.ten_hidden.forward(ctx, mean_proto)?.relu()?;
        self.ten_out.forward(ctx, h)
    }

    /// Logits `[Q, ways]` for the query images.
    pub fn logits<'t>(
        &mut self,
        ctx: &Ctx<'t>,
        support: &Support<'_>,
        query: &Tensor,
    ) -> Result<Var<'t>> {
        let gamma = self.task_embedding(ctx, support)?;
        let protos = Self::prototypes(self.embed.forward(ctx, support.images, gamma)?, support)?;
        let q = query.shape()[0];
        let eq = self.embed.forward(ctx, query, gamma)?;
        let e = eq.shape()[1];
        let m = support.ways;
        let diff = eq.reshape(&[q, 1, e])?.sub(protos.reshape(&[1, m, e])?)?;
        let dist = diff.square()?.sum(&[2])?.reshape(&[q, m])?;
        let alpha = ctx.param(&self.alpha_raw).softplus()?.reshape(&[1, 1])?;
        dist.mul(alpha)?.neg()
    }
}

impl Module for ProtoHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.embed.stem.visit(f);
        self.embed.stem_norm.visit(f);
        for b in &self.embed.blocks {
            b.visit(f);
        }
        self.ten_hidden.visit(f);
        self.ten_out.visit(f);
        f(&self.alpha_raw);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.embed.stem.visit_mut(f);
        self.embed.stem_norm.visit_mut(f);
        for b in &mut self.embed.blocks {
            b.visit_mut(f);
        }
        self.ten_hidden.visit_mut(f);
        self.ten_out.visit_mut(f);
        f(&mut self.alpha_raw);
    }

    fn set_mode(&mut self, mode: Mode) {
        self.embed.stem_norm.set_mode(mode);
        for b in &mut self.embed.blocks {
            b.set_mode(mode);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ProtoConfig {
        ProtoConfig {
            in_channels: 1,
            width: 4,
            num_blocks: 1,
            task_dim: 3,
            ten_hidden: 3,
            groups: 2,
            eps: 1e-5,
            batch_norm: false,
        }
    }

    #[test]
    fn support_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = ProtoHead::new(small(), &mut rng).unwrap();
        let imgs = Tensor::randn([3, 1, 4, 4], 1.0, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::no_grad(&tape);
        let missing = Support {
            images: &imgs,
            labels: &[0, 0, 0],
            ways: 2,
        };
        assert!(head.logits(&ctx, &missing, &imgs).is_err());
        let uneven = Support {
            images: &imgs,
            labels: &[0, 1, 1],
            ways: 2,
        };
        assert!(head.logits(&ctx, &uneven, &imgs).is_err());
        let ok = Support {
            images: &imgs,
            labels: &[0, 1, 2],
            ways: 3,
        };
        assert_eq!(head.logits(&ctx, &ok, &imgs).unwrap().shape(), vec![3, 3]);
    }

    #[test]
    fn alpha_scaling_scales_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = ProtoHead::new(small(), &mut rng).unwrap();
        let imgs = Tensor::randn([4, 1, 4, 4], 1.0, &mut rng).unwrap();
        let support = Support {
            images: &imgs,
            labels: &[0, 1, 0, 1],
            ways: 2,
        };
        let run = |head: &mut ProtoHead| {
            let tape = Tape::new();
            let ctx = Ctx::no_grad(&tape);
            (*head.logits(&ctx, &support, &imgs).unwrap().value()).clone()
        };
        let base = run(&mut head);
        let a = head.alpha();
        // alpha -> 3 alpha
        let target: f64 = 3.0 * a;
        head.alpha_raw.value.data_mut()[0] = target.exp_m1().ln();
        let scaled = run(&mut head);
        for (x, y) in base.data().iter().zip(scaled.data()) {
            assert!((3.0 * x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
        assert_eq!(
            crate::nn::argmax_rows(&base),
            crate::nn::argmax_rows(&scaled)
        );
    }
}
