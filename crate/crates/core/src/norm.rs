//! Unified normalization layers.
//!
//! Every method normalizes `x_i` by the mean and standard deviation of an
//! index set `S_i` and differs only in how that set is chosen:
//!
//! | domain        | `S_i` shares with `i`                 | reduced over       |
//! |---------------|----------------------------------------|--------------------|
//! | `Batch`       | channel                                | `N, H, W`          |
//! | `Layer`       | sample                                 | `C, H, W`          |
//! | `Instance`    | sample and channel                     | `H, W`             |
//! | `Group(G)`    | sample and channel group `c / (C/G)`   | group chans, `H, W`|
//!
//! `sigma = sqrt(biased variance + eps)`. After normalization a per-channel
//! scale and shift is applied, either as free parameters or as affine
//! functions of a conditioning vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Ctx, Mode, Module, Param};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_GROUPS: usize = 4;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Which positions share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatDomain {
    Batch,
    Layer,
    Instance,
    Group(usize),
}

impl StatDomain {
    pub fn check_channels(&self, channels: usize) -> Result<()> {
        if let StatDomain::Group(g) = *self {
            if g == 0 || !channels.is_multiple_of(g) {
                return Err(Error::GroupMismatch {
                    channels,
                    groups: g,
                });
            }
        }
        Ok(())
    }

    /// Reshaped view of an `[N, C, H, W]` tensor and the axes to reduce in it.
    fn layout(&self, shape: &[usize]) -> Result<(Vec<usize>, &'static [usize])> {
        let [n, c, h, w] = nchw(shape)?;
        self.check_channels(c)?;
        Ok(match *self {
            StatDomain::Batch => (shape.to_vec(), &[0, 2, 3]),
            StatDomain::Layer => (shape.to_vec(), &[1, 2, 3]),
            StatDomain::Instance => (shape.to_vec(), &[2, 3]),
            StatDomain::Group(g) => (vec![n, g, c / g, h * w], &[2, 3]),
        })
    }

    fn set_of(&self, shape: [usize; 4], n: usize, c: usize) -> usize {
        let channels = shape[1];
        match *self {
            StatDomain::Batch => c,
            StatDomain::Layer => n,
            StatDomain::Instance => n * channels + c,
            StatDomain::Group(g) => n * g + c / (channels / g),
        }
    }

    fn num_sets(&self, shape: [usize; 4]) -> usize {
        let [n, c, _, _] = shape;
        match *self {
            StatDomain::Batch => c,
            StatDomain::Layer => n,
            StatDomain::Instance => n * c,
            StatDomain::Group(g) => n * g,
        }
    }
}

fn nchw(shape: &[usize]) -> Result<[usize; 4]> {
    shape.try_into().map_err(|_| Error::InvalidShape {
        shape: shape.to_vec(),
        reason: "normalization expects an [N, C, H, W] tensor".into(),
    })
}

/// The partition of all flat indices of an `[N, C, H, W]` tensor into
/// statistics sets, ordered by set.
pub fn index_sets(domain: StatDomain, shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    let dims = nchw(shape)?;
    domain.check_channels(dims[1])?;
    let [n, c, h, w] = dims;
    let mut sets = vec![Vec::new(); domain.num_sets(dims)];
    for ni in 0..n {
        for ci in 0..c {
            let set = domain.set_of(dims, ni, ci);
            let base = (ni * c + ci) * h * w;
            sets[set].extend(base..base + h * w);
        }
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    Ok(sets)
}

/// Per-set statistics of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub domain: StatDomain,
    /// Shape of the tensor the statistics were computed from.
    pub input_shape: Vec<usize>,
    /// Means, one per set, laid out with the reduced axes kept (e.g. `[1, C, 1, 1]` for batch).
    pub mu: Tensor,
    /// `sqrt(biased variance + eps)`, same layout as `mu`.
    pub sigma: Tensor,
    /// Biased variance, same layout as `mu`.
    pub var: Tensor,
    /// Number of elements in each set.
    pub m: usize,
}

/// Differentiable statistics recorded on a tape.
pub struct StatVars<'t> {
    pub mu: Var<'t>,
    pub var: Var<'t>,
    pub sigma: Var<'t>,
    pub m: usize,
}

/// Normalizes `x` with statistics computed from `x` itself; gradients flow
/// through the mean and standard deviation.
pub fn normalize_var<'t>(
    x: Var<'t>,
    domain: StatDomain,
    eps: f64,
) -> Result<(Var<'t>, StatVars<'t>)> {
    let shape = x.shape();
    let (view, axes) = domain.layout(&shape)?;
    let xv = x.reshape(&view)?;
    let mu = xv.mean(axes)?;
    let centered = xv.sub(mu)?;
    let var = centered.square()?.mean(axes)?;
    let sigma = var.add_scalar(eps)?.sqrt()?;
    let xhat = centered.div(sigma)?.reshape(&shape)?;
    let m = view.iter().product::<usize>() / mu.value().numel();
    Ok((xhat, StatVars { mu, var, sigma, m }))
}

pub fn compute_stats(x: &Tensor, domain: StatDomain, eps: f64) -> Result<NormStats> {
    if eps < 0.0 {
        return Err(Error::Config(format!(
            "eps must be non-negative, got {eps}"
        )));
    }
    let tape = Tape::new();
    let (_, s) = normalize_var(tape.constant(x.clone()), domain, eps)?;
    Ok(NormStats {
        domain,
        input_shape: x.shape().to_vec(),
        mu: (*s.mu.value()).clone(),
        sigma: (*s.sigma.value()).clone(),
        var: (*s.var.value()).clone(),
        m: s.m,
    })
}

/// `(x - mu) / sigma` with precomputed statistics.
pub fn normalize(x: &Tensor, stats: &NormStats) -> Result<Tensor> {
    if x.shape() != stats.input_shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "normalize",
            lhs: x.shape().to_vec(),
            rhs: stats.input_shape.clone(),
        });
    }
    let (view, _) = stats.domain.layout(x.shape())?;
    let tape = Tape::new();
    let mu = tape.constant(stats.mu.clone());
    let sigma = tape.constant(stats.sigma.clone());
    let y = tape
        .constant(x.clone())
        .reshape(&view)?
        .sub(mu)?
        .div(sigma)?
        .reshape(x.shape())?;
    Ok((*y.value()).clone())
}

/// `gamma(c) = W_gamma c + b_gamma`, `beta(c) = W_beta c + b_beta`.
///
/// Weights are `[C, D]`. Initialized as a deviation from identity: zero
/// weights, unit `b_gamma`, zero `b_beta`, so `c = 0` leaves activations
/// unchanged.
#[derive(Clone, Debug)]
pub struct ConditionalAffine {
    pub w_gamma: Param,
    pub b_gamma: Param,
    pub w_beta: Param,
    pub b_beta: Param,
}

impl ConditionalAffine {
    pub fn new(name: &str, channels: usize, cond_dim: usize) -> Result<Self> {
        Ok(ConditionalAffine {
            w_gamma: Param::new(
                format!("{name}.w_gamma"),
                Tensor::zeros([channels, cond_dim])?,
            ),
            b_gamma: Param::new(format!("{name}.b_gamma"), Tensor::ones([channels])?),
            w_beta: Param::new(
                format!("{name}.w_beta"),
                Tensor::zeros([channels, cond_dim])?,
            ),
            b_beta: Param::new(format!("{name}.b_beta"), Tensor::zeros([channels])?),
        })
    }

    pub fn channels(&self) -> usize {
        self.b_gamma.value.numel()
    }

    pub fn cond_dim(&self) -> usize {
        self.w_gamma.value.shape()[1]
    }

    /// Maps conditioning `[D]` or `[N, D]` to `(gamma, beta)`, each `[N, C]`
    /// (`N = 1` for an unbatched vector).
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = c.shape();
        let c = match shape.as_slice() {
            [d] => c.reshape(&[1, *d])?,
            [_, _] => c,
            _ => {
                return Err(Error::Conditioning(format!(
                    "conditioning must be [D] or [N, D], got {shape:?}"
                )))
            }
        };
        let d = c.shape()[1];
        if d != self.cond_dim() {
            return Err(Error::Conditioning(format!(
                "conditioning has dimension {d}, layer expects {}",
                self.cond_dim()
            )));
        }
        let ch = self.channels();
        let map = |w: &Param, b: &Param| -> Result<Var<'t>> {
            let wt = ctx.param(w).transpose()?;
            let b = ctx.param(b).reshape(&[1, ch])?;
            c.matmul(wt)?.add(b)
        };
        Ok((
            map(&self.w_gamma, &self.b_gamma)?,
            map(&self.w_beta, &self.b_beta)?,
        ))
    }
}

impl Module for ConditionalAffine {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.w_gamma);
        f(&self.b_gamma);
        f(&self.w_beta);
        f(&self.b_beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w_gamma);
        f(&mut self.b_gamma);
        f(&mut self.w_beta);
        f(&mut self.b_beta);
    }

    fn set_mode(&mut self, _mode: Mode) {}
}

/// Value-level conditional affine map.
pub fn cond_affine(c: &Tensor, params: &ConditionalAffine) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let ctx = Ctx::no_grad(&tape);
    let (g, b) = params.forward(&ctx, ctx.input(c.clone()))?;
    Ok(((*g.value()).clone(), (*b.value()).clone()))
}

#[derive(Clone, Debug)]
pub enum Affine {
    None,
    Fixed { gamma: Param, beta: Param },
    Conditional(ConditionalAffine),
}

/// Requested post-normalization transform, used when building a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffineKind {
    None,
    Fixed,
    Conditional { cond_dim: usize },
}

impl Affine {
    pub fn kind(&self) -> AffineKind {
        match self {
            Affine::None => AffineKind::None,
            Affine::Fixed { .. } => AffineKind::Fixed,
            Affine::Conditional(a) => AffineKind::Conditional {
                cond_dim: a.cond_dim(),
            },
        }
    }
}

/// Exponential moving averages of batch statistics, stored as buffers.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Param,
    /// Biased variance.
    pub var: Param,
    /// Number of updates applied so far, as a one-element buffer.
    pub updates: Param,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(name: &str, channels: usize, momentum: f64) -> Result<Self> {
        Ok(RunningStats {
            mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros([channels])?),
            var: Param::buffer(format!("{name}.running_var"), Tensor::ones([channels])?),
            updates: Param::buffer(format!("{name}.running_updates"), Tensor::zeros([1])?),
            momentum,
        })
    }

    pub fn num_updates(&self) -> u64 {
        self.updates.value.data()[0] as u64
    }
}

/// `run <- momentum * run + (1 - momentum) * batch` for mean and variance.
pub fn update_running(running: &mut RunningStats, batch_mu: &[f64], batch_var: &[f64]) {
    let m = running.momentum;
    for (r, b) in running.mean.value.data_mut().iter_mut().zip(batch_mu) {
        *r = m * *r + (1.0 - m) * b;
    }
    for (r, b) in running.var.value.data_mut().iter_mut().zip(batch_var) {
        *r = m * *r + (1.0 - m) * b;
    }
    running.updates.value.data_mut()[0] += 1.0;
}

/// One normalization layer over `[N, C, H, W]` activations.
#[derive(Clone, Debug)]
pub struct NormLayer {
    pub name: String,
    pub domain: StatDomain,
    pub eps: f64,
    pub mode: Mode,
    pub affine: Affine,
    /// Present exactly when `domain` is `Batch`.
    pub running: Option<RunningStats>,
    channels: usize,
}

impl NormLayer {
    pub fn new(
        name: &str,
        channels: usize,
        domain: StatDomain,
        eps: f64,
        affine: AffineKind,
    ) -> Result<Self> {
        domain.check_channels(channels)?;
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::Config(format!(
                "{name}: eps must be non-negative, got {eps}"
            )));
        }
        let affine = match affine {
            AffineKind::None => Affine::None,
            AffineKind::Fixed => Affine::Fixed {
                gamma: Param::new(format!("{name}.gamma"), Tensor::ones([channels])?),
                beta: Param::new(format!("{name}.beta"), Tensor::zeros([channels])?),
            },
            AffineKind::Conditional { cond_dim } => {
                Affine::Conditional(ConditionalAffine::new(name, channels, cond_dim)?)
            }
        };
        let running = match domain {
            StatDomain::Batch => Some(RunningStats::new(name, channels, DEFAULT_MOMENTUM)?),
            _ => None,
        };
        Ok(NormLayer {
            name: name.to_string(),
            domain,
            eps,
            mode: Mode::Train,
            affine,
            running,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.affine, Affine::Conditional(_))
    }

    /// Normalizes `x` and applies the affine transform.
    ///
    /// `cond` must be given iff the affine is conditional; it may be `[D]`
    /// (shared by all samples) or `[N, D]` (one row per sample).
    pub fn forward<'t>(
        &mut self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        cond: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        let [n, c, _, _] = nchw(&shape)?;
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "norm_forward",
                lhs: shape,
                rhs: vec![self.channels],
            });
        }
        match (&self.affine, cond.is_some()) {
            (Affine::Conditional(_), false) => {
                return Err(Error::Conditioning(format!(
                    "{}: conditional layer needs a conditioning input",
                    self.name
                )))
            }
            (Affine::None | Affine::Fixed { .. }, true) => {
                return Err(Error::Conditioning(format!(
                    "{}: unexpected conditioning input",
                    self.name
                )))
            }
            _ => {}
        }

        let xhat = match (self.domain, self.mode) {
            (StatDomain::Batch, Mode::Eval) => {
                let running = self
                    .running
                    .as_ref()
                    .expect("batch layers carry running statistics");
                if running.num_updates() == 0 {
                    return Err(Error::MissingRunningStats(self.name.clone()));
                }
                let tape = ctx.tape();
                let mu = tape.constant(running.mean.value.reshape([1, c, 1, 1])?);
                let sd = running
                    .var
                    .value
                    .data()
                    .iter()
                    .map(|v| (v + self.eps).sqrt())
                    .collect();
                let sd = tape.constant(Tensor::new([1, c, 1, 1], sd)?);
                x.sub(mu)?.div(sd)?
            }
            (domain, _) => {
                let (xhat, stats) = normalize_var(x, domain, self.eps)?;
                if let (Some(running), Mode::Train) = (self.running.as_mut(), self.mode) {
                    update_running(running, stats.mu.value().data(), stats.var.value().data());
                }
                xhat
            }
        };

        let (gamma, beta) = match &self.affine {
            Affine::None => return Ok(xhat),
            Affine::Fixed { gamma, beta } => (
                ctx.param(gamma).reshape(&[1, c, 1, 1])?,
                ctx.param(beta).reshape(&[1, c, 1, 1])?,
            ),
            Affine::Conditional(params) => {
                let (g, b) = params.forward(ctx, cond.expect("checked above"))?;
                let rows = g.shape()[0];
                if rows != 1 && rows != n {
                    return Err(Error::Conditioning(format!(
                        "{}: {rows} conditioning rows for a batch of {n}",
                        self.name
                    )));
                }
                (g.reshape(&[rows, c, 1, 1])?, b.reshape(&[rows, c, 1, 1])?)
            }
        };
        xhat.mul(gamma)?.add(beta)
    }
}

impl Module for NormLayer {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        match &self.affine {
            Affine::None => {}
            Affine::Fixed { gamma, beta } => {
                f(gamma);
                f(beta);
            }
            Affine::Conditional(a) => a.visit(f),
        }
        if let Some(r) = &self.running {
            f(&r.mean);
            f(&r.var);
            f(&r.updates);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match &mut self.affine {
            Affine::None => {}
            Affine::Fixed { gamma, beta } => {
                f(gamma);
                f(beta);
            }
            Affine::Conditional(a) => a.visit_mut(f),
        }
        if let Some(r) = &mut self.running {
            f(&mut r.mean);
            f(&mut r.var);
            f(&mut r.updates);
        }
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

/// Value-level forward pass (no gradients). Train-mode batch layers still
/// update their running statistics.
pub fn norm_forward(layer: &mut NormLayer, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
    let tape = Tape::new();
    let ctx = Ctx::no_grad(&tape);
    let c = cond.map(|c| ctx.input(c.clone()));
    let y = layer.forward(&ctx, ctx.input(x.clone()), c)?;
    Ok((*y.value()).clone())
}
