//! Finite-difference gradient checks over tape ops, normalization layers
//! and small instances of every model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{
    FilmConfig, FilmNetwork, GruEncoder, NormVariant, ProtoConfig, ProtoHead, Support,
};
use crate::norm::{normalize_var, AffineKind, NormLayer, StatDomain};
use crate::param::{Ctx, Mode, Module};
use crate::tensor::{
    fd_gradient, inject_backward_fault, max_rel_error, OpKind, Tape, Tensor, Var,
    DIFFERENTIABLE_OPS,
};

pub const TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Suite {
    Ops,
    Norm,
    Models,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Ops, Suite::Norm, Suite::Models];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Norm => "norm",
            Suite::Models => "models",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub suite: Suite,
    pub name: String,
    /// Operations recorded while evaluating the case.
    pub ops: BTreeSet<OpKind>,
    pub worst: f64,
    pub error: Option<String>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst <= TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    /// Registered ops exercised by at least one case.
    pub fn coverage(&self) -> BTreeSet<OpKind> {
        self.cases
            .iter()
            .flat_map(|c| c.ops.iter().copied())
            .collect()
    }

    pub fn missing_ops(&self) -> Vec<OpKind> {
        let covered = self.coverage();
        DIFFERENTIABLE_OPS
            .iter()
            .copied()
            .filter(|k| !covered.contains(k))
            .collect()
    }

    pub fn worst_by_suite(&self) -> BTreeMap<Suite, f64> {
        let mut out = BTreeMap::new();
        for c in &self.cases {
            let w = out.entry(c.suite).or_insert(0.0f64);
            *w = w.max(if c.error.is_some() {
                f64::INFINITY
            } else {
                c.worst
            });
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let status = if c.passed() { "ok" } else { "FAIL" };
            let _ = write!(
                s,
                "{:<7} {:<36} worst {:.3e}  {status}",
                c.suite.name(),
                c.name,
                c.worst
            );
            if let Some(e) = &c.error {
                let _ = write!(s, "  ({e})");
            }
            s.push('\n');
        }
        for (suite, worst) in self.worst_by_suite() {
            let _ = writeln!(s, "suite {:<7} worst rel. error {worst:.3e}", suite.name());
        }
        let covered = self.coverage();
        let registered = DIFFERENTIABLE_OPS.len();
        let hit = DIFFERENTIABLE_OPS
            .iter()
            .filter(|k| covered.contains(k))
            .count();
        let _ = writeln!(s, "coverage {hit}/{registered} registered ops");
        let missing = self.missing_ops();
        if !missing.is_empty() {
            let names: Vec<&str> = missing.iter().map(|k| k.name()).collect();
            let _ = writeln!(s, "not covered: {}", names.join(", "));
        }
        let _ = writeln!(s, "{}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

/// Runs the requested suites, optionally with a sign error injected into
/// the backward rule of one op.
pub fn run(suites: &[Suite], fault: Option<OpKind>) -> GradcheckReport {
    inject_backward_fault(fault);
    let mut cases = Vec::new();
    for &suite in suites {
        match suite {
            Suite::Ops => ops_suite(&mut cases),
            Suite::Norm => norm_suite(&mut cases),
            Suite::Models => models_suite(&mut cases),
        }
    }
    inject_backward_fault(None);
    GradcheckReport { cases }
}

/// Deterministic weights for reducing an output to a scalar.
fn probe_weights(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + 1.0) * 0.7137).sin() + 0.25)
        .expect("valid shape")
}

fn scalarize<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>> {
    if out.value().numel() == 1 {
        return out.sum_all();
    }
    out.mul(tape.constant(probe_weights(&out.shape())))?
        .sum_all()
}

fn failed(suite: Suite, name: &str, e: impl ToString) -> CaseReport {
    CaseReport {
        suite,
        name: name.to_string(),
        ops: BTreeSet::new(),
        worst: f64::INFINITY,
        error: Some(e.to_string()),
    }
}

/// Checks gradients with respect to every input of `f`.
pub fn check_inputs<F>(suite: Suite, name: &str, inputs: &[Tensor], mut f: F) -> CaseReport
where
    F: for<'t> FnMut(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let analytic = match f(&tape, &vars).and_then(|o| scalarize(&tape, o)) {
        Ok(loss) => match tape.backward(loss) {
            Ok(g) => vars
                .iter()
                .map(|v| g.get(*v).cloned().expect("tracked leaf"))
                .collect::<Vec<_>>(),
            Err(e) => return failed(suite, name, e),
        },
        Err(e) => return failed(suite, name, e),
    };
    let ops = tape.op_kinds();
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let numeric = fd_gradient(
            |probe| {
                let t = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.constant(if j == i { probe.clone() } else { x.clone() }))
                    .collect();
                f(&t, &vars)
                    .and_then(|o| scalarize(&t, o))
                    .map_or(f64::NAN, |l| l.value().data()[0])
            },
            &inputs[i],
            FD_STEP,
        );
        let err = max_rel_error(&analytic[i], &numeric);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    CaseReport {
        suite,
        name: name.to_string(),
        ops,
        worst,
        error: None,
    }
}

fn set_param(m: &mut dyn Module, name: &str, value: &Tensor) {
    m.visit_mut(&mut |p| {
        if p.name == name {
            p.value = value.clone();
        }
    });
}

/// Checks gradients with respect to every trainable parameter of `model`.
pub fn check_module<M, F>(suite: Suite, name: &str, model: &mut M, mut loss: F) -> CaseReport
where
    M: Module,
    F: for<'t> FnMut(&mut M, &Ctx<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape);
    let analytic = match loss(model, &ctx).and_then(|o| scalarize(&tape, o)) {
        Ok(l) => match tape.backward(l) {
            Ok(g) => ctx.param_grads(&g),
            Err(e) => return failed(suite, name, e),
        },
        Err(e) => return failed(suite, name, e),
    };
    let ops = tape.op_kinds();
    let params: Vec<(String, Tensor)> = model
        .params()
        .into_iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    let mut worst = 0.0f64;
    for (pname, value) in params {
        let Some(grad) = analytic.get(&pname) else {
            return failed(
                suite,
                name,
                format!("parameter {pname} received no gradient"),
            );
        };
        let numeric = fd_gradient(
            |probe| {
                set_param(model, &pname, probe);
                let t = Tape::new();
                let c = Ctx::no_grad(&t);
                loss(model, &c)
                    .and_then(|o| scalarize(&t, o))
                    .map_or(f64::NAN, |l| l.value().data()[0])
            },
            &value,
            FD_STEP,
        );
        set_param(model, &pname, &value);
        let err = max_rel_error(grad, &numeric);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    CaseReport {
        suite,
        name: name.to_string(),
        ops,
        worst,
        error: None,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed)).expect("valid shape")
}

/// Values bounded away from zero, for kinks and divisors.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.signum() * (v.abs() + 0.2));
    t
}

fn ops_suite(out: &mut Vec<CaseReport>) {
    let s = Suite::Ops;
    let a = randn(&[2, 3], 1);
    let b = randn(&[2, 3], 2);
    let row = randn(&[1, 3], 3);
    out.push(check_inputs(
        s,
        "add (broadcast)",
        &[a.clone(), row.clone()],
        |_, v| v[0].add(v[1]),
    ));
    out.push(check_inputs(
        s,
        "sub (broadcast)",
        &[row.clone(), a.clone()],
        |_, v| v[0].sub(v[1]),
    ));
    out.push(check_inputs(s, "mul", &[a.clone(), b.clone()], |_, v| {
        v[0].mul(v[1])
    }));
    out.push(check_inputs(
        s,
        "mul (broadcast)",
        &[a.clone(), row.clone()],
        |_, v| v[0].mul(v[1]),
    ));
    out.push(check_inputs(
        s,
        "div",
        &[a.clone(), away_from_zero(&[2, 3], 4)],
        |_, v| v[0].div(v[1]),
    ));
    out.push(check_inputs(
        s,
        "div (broadcast)",
        &[a.clone(), away_from_zero(&[1, 3], 5)],
        |_, v| v[0].div(v[1]),
    ));
    out.push(check_inputs(
        s,
        "scale",
        std::slice::from_ref(&a),
        |_, v| v[0].scale(-1.7),
    ));
    out.push(check_inputs(
        s,
        "add_scalar",
        std::slice::from_ref(&a),
        |_, v| v[0].add_scalar(0.3)?.square(),
    ));
    out.push(check_inputs(
        s,
        "relu",
        &[away_from_zero(&[2, 3], 6)],
        |_, v| v[0].relu(),
    ));
    out.push(check_inputs(
        s,
        "sigmoid",
        std::slice::from_ref(&a),
        |_, v| v[0].sigmoid(),
    ));
    out.push(check_inputs(s, "tanh", std::slice::from_ref(&a), |_, v| {
        v[0].tanh()
    }));
    out.push(check_inputs(
        s,
        "softplus",
        std::slice::from_ref(&a),
        |_, v| v[0].softplus(),
    ));
    let pos = Tensor::from_fn([2, 3], |i| 0.5 + i as f64 * 0.3).expect("shape");
    out.push(check_inputs(s, "sqrt", &[pos], |_, v| v[0].sqrt()));
    let x4 = randn(&[2, 3, 2, 2], 7);
    out.push(check_inputs(
        s,
        "sum (axes 0,2)",
        std::slice::from_ref(&x4),
        |_, v| v[0].sum(&[0, 2]),
    ));
    out.push(check_inputs(
        s,
        "mean (axes 2,3)",
        std::slice::from_ref(&x4),
        |_, v| v[0].mean(&[2, 3]),
    ));
    out.push(check_inputs(
        s,
        "max (axes 2,3)",
        std::slice::from_ref(&x4),
        |_, v| v[0].max(&[2, 3]),
    ));
    out.push(check_inputs(
        s,
        "max (axis 1)",
        std::slice::from_ref(&a),
        |_, v| v[0].max(&[1]),
    ));
    out.push(check_inputs(
        s,
        "matmul",
        &[a.clone(), randn(&[3, 4], 8)],
        |_, v| v[0].matmul(v[1]),
    ));
    out.push(check_inputs(
        s,
        "transpose",
        std::slice::from_ref(&a),
        |_, v| v[0].transpose(),
    ));
    let x = randn(&[2, 2, 4, 3], 9);
    out.push(check_inputs(
        s,
        "conv2d 3x3 pad 1",
        &[x.clone(), randn(&[3, 2, 3, 3], 10), randn(&[3], 11)],
        |_, v| v[0].conv2d(v[1], v[2], 1),
    ));
    out.push(check_inputs(
        s,
        "conv2d 3x3 pad 0",
        &[x.clone(), randn(&[2, 2, 3, 3], 12), randn(&[2], 13)],
        |_, v| v[0].conv2d(v[1], v[2], 0),
    ));
    out.push(check_inputs(
        s,
        "conv2d 1x1",
        &[x, randn(&[3, 2, 1, 1], 14), randn(&[3], 15)],
        |_, v| v[0].conv2d(v[1], v[2], 0),
    ));
    out.push(check_inputs(
        s,
        "reshape",
        std::slice::from_ref(&a),
        |_, v| v[0].reshape(&[3, 2]),
    ));
    out.push(check_inputs(
        s,
        "concat axis 1",
        &[x4.clone(), randn(&[2, 1, 2, 2], 16)],
        |_, v| Var::concat(&[v[0], v[1]], 1),
    ));
    out.push(check_inputs(
        s,
        "concat axis 0",
        &[a.clone(), b.clone()],
        |_, v| Var::concat(&[v[0], v[1]], 0),
    ));
    out.push(check_inputs(
        s,
        "index_select (repeats)",
        &[randn(&[4, 3], 17)],
        |_, v| v[0].index_select(&[2, 0, 2, 3]),
    ));
    out.push(check_inputs(
        s,
        "softmax_xent",
        &[randn(&[4, 3], 18)],
        |_, v| v[0].softmax_xent(&[0, 2, 1, 2]),
    ));
}

fn norm_suite(out: &mut Vec<CaseReport>) {
    let s = Suite::Norm;
    let x = randn(&[3, 4, 3, 2], 21);
    for (name, domain) in [
        ("batch", StatDomain::Batch),
        ("layer", StatDomain::Layer),
        ("instance", StatDomain::Instance),
        ("group(2)", StatDomain::Group(2)),
    ] {
        out.push(check_inputs(
            s,
            &format!("normalize {name}"),
            std::slice::from_ref(&x),
            |_, v| Ok(normalize_var(v[0], domain, 1e-5)?.0),
        ));
        out.push(check_inputs(
            s,
            &format!("statistics {name}"),
            std::slice::from_ref(&x),
            |_, v| {
                let (_, st) = normalize_var(v[0], domain, 1e-5)?;
                let n = st.mu.value().numel();
                Var::concat(&[st.mu.reshape(&[n])?, st.sigma.reshape(&[n])?], 0)
            },
        ));
    }
    // conditional affine: gradients with respect to the input and the conditioning
    let c = randn(&[3, 5], 22);
    for domain in [StatDomain::Group(2), StatDomain::Batch] {
        let mut layer = NormLayer::new(
            "cn",
            4,
            domain,
            1e-5,
            AffineKind::Conditional { cond_dim: 5 },
        )
        .expect("layer");
        perturb(&mut layer, 23);
        out.push(check_inputs(
            s,
            &format!("conditional norm {:?} (x, c)", domain),
            &[x.clone(), c.clone()],
            |tape, v| layer.forward(&Ctx::no_grad(tape), v[0], Some(v[1])),
        ));
        let mut layer2 = layer.clone();
        out.push(check_module(
            s,
            &format!("conditional norm {:?} (params)", domain),
            &mut layer2,
            |m, ctx| {
                let xv = ctx.input(x.clone());
                let cv = ctx.input(c.clone());
                m.forward(ctx, xv, Some(cv))
            },
        ));
    }
    let mut fixed =
        NormLayer::new("fn", 4, StatDomain::Group(2), 1e-5, AffineKind::Fixed).expect("layer");
    perturb(&mut fixed, 24);
    out.push(check_module(
        s,
        "fixed affine group (params)",
        &mut fixed,
        |m, ctx| {
            let xv = ctx.input(x.clone());
            m.forward(ctx, xv, None)
        },
    ));
    // eval mode batch statistics are constants
    let mut bn =
        NormLayer::new("bn", 4, StatDomain::Batch, 1e-5, AffineKind::Fixed).expect("layer");
    for k in 0..3 {
        let _ = crate::norm::norm_forward(&mut bn, &randn(&[3, 4, 3, 2], 30 + k), None);
    }
    bn.set_mode(Mode::Eval);
    out.push(check_inputs(
        s,
        "batch norm eval (x)",
        std::slice::from_ref(&x),
        |tape, v| bn.forward(&Ctx::no_grad(tape), v[0], None),
    ));
}

/// Moves every parameter off its initial value so that gradients through
/// affine and conditional parameters are non-trivial.
fn perturb(m: &mut dyn Module, seed: u64) {
    let mut r = rng(seed);
    m.visit_mut(&mut |p| {
        if p.trainable {
            let noise = Tensor::randn(p.value.shape().to_vec(), 0.3, &mut r).expect("shape");
            p.value
                .data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(v, n)| *v += n);
        }
    });
}

fn micro_film(variant: NormVariant) -> FilmConfig {
    FilmConfig {
        in_channels: 1,
        stem_layers: 1,
        width: 4,
        num_blocks: 2,
        classifier_width: 6,
        fc_width: 8,
        num_answers: 2,
        vocab_size: 6,
        embed_dim: 3,
        gru_hidden: 3,
        groups: 2,
        eps: 1e-5,
        variant,
        coord_maps: true,
    }
}

fn models_suite(out: &mut Vec<CaseReport>) {
    let s = Suite::Models;
    let mut gru = GruEncoder::new("gru", 5, 3, 4, &mut rng(40)).expect("gru");
    perturb(&mut gru, 41);
    let seqs = vec![vec![0, 3, 1], vec![4, 4, 2]];
    out.push(check_module(s, "gru encoder", &mut gru, |m, ctx| {
        m.forward(ctx, &seqs)
    }));

    let images = randn(&[4, 1, 5, 5], 42);
    let questions = vec![vec![0, 1, 2], vec![3, 4, 5], vec![1, 1, 0], vec![2, 5, 3]];
    let labels = [0, 1, 1, 0];
    for variant in NormVariant::ALL {
        let mut net = FilmNetwork::new(micro_film(variant), &mut rng(43)).expect("film");
        perturb(&mut net, 44);
        out.push(check_module(
            s,
            &format!("film {}", variant.name()),
            &mut net,
            |m, ctx| m.forward(ctx, &images, &questions)?.softmax_xent(&labels),
        ));
    }

    for batch_norm in [false, true] {
        let cfg = ProtoConfig {
            in_channels: 2,
            width: 4,
            num_blocks: 1,
            task_dim: 3,
            ten_hidden: 3,
            groups: 2,
            eps: 1e-5,
            batch_norm,
        };
        let mut head = ProtoHead::new(cfg, &mut rng(45)).expect("proto");
        perturb(&mut head, 46);
        let support = randn(&[4, 2, 4, 4], 47);
        let query = randn(&[3, 2, 4, 4], 48);
        let name = if batch_norm {
            "proto head batch"
        } else {
            "proto head group"
        };
        out.push(check_module(s, name, &mut head, |m, ctx| {
            let sup = Support {
                images: &support,
                labels: &[0, 1, 0, 1],
                ways: 2,
            };
            m.logits(ctx, &sup, &query)?.softmax_xent(&[1, 0, 1])
        }));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_suite_passes_and_covers_registry() {
        let r = run(&[Suite::Ops], None);
        assert!(r.passed(), "{}", r.render());
        assert!(r.missing_ops().is_empty(), "{}", r.render());
    }

    #[test]
    fn norm_and_model_suites_pass() {
        let r = run(&[Suite::Norm, Suite::Models], None);
        println!("{}", r.render());
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn injected_fault_is_detected() {
        let r = run(&[Suite::Ops], Some(OpKind::Tanh));
        assert!(!r.passed());
        let bad: Vec<&str> = r
            .cases
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect();
        assert_eq!(bad, vec!["tanh"]);
        // the fault does not leak into later runs
        assert!(run(&[Suite::Ops], None).passed());
    }
}
