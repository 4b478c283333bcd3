//! Library results against independent reference computations: brute-force
//! enumeration, naive loops and scalar recurrences.

use std::collections::BTreeSet;

use normlab::data::fewshot::{
    gen_fewshot_universe, sample_episode, ClassSplit, EpisodeConfig, FewShotConfig,
};
use normlab::data::sqoop::{
    self, gen_sqoop, glyph_patterns, Encoding, Relation, SqoopConfig, SqoopSample,
};
use normlab::nn::{GruEncoder, Optimizer, OptimizerKind, ProtoConfig, ProtoHead, Support};
use normlab::norm::{
    compute_stats, norm_forward, update_running, AffineKind, NormLayer, RunningStats, StatDomain,
};
use normlab::param::{Ctx, Mode, Module, Param};
use normlab::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn same_set(
    domain: StatDomain,
    c_total: usize,
    (n1, c1): (usize, usize),
    (n2, c2): (usize, usize),
) -> bool {
    match domain {
        StatDomain::Batch => c1 == c2,
        StatDomain::Layer => n1 == n2,
        StatDomain::Instance => n1 == n2 && c1 == c2,
        StatDomain::Group(g) => n1 == n2 && c1 / (c_total / g) == c2 / (c_total / g),
    }
}

/// Mean and biased variance of the set containing element `(n, c, h, w)`.
fn brute_stats(x: &Tensor, domain: StatDomain, at: [usize; 4]) -> (f64, f64) {
    let [nn, cc, hh, ww] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let mut vals = Vec::new();
    for n in 0..nn {
        for c in 0..cc {
            if !same_set(domain, cc, (at[0], at[1]), (n, c)) {
                continue;
            }
            for h in 0..hh {
                for w in 0..ww {
                    vals.push(x.get(&[n, c, h, w]).unwrap());
                }
            }
        }
    }
    let m = vals.len() as f64;
    let mu = vals.iter().sum::<f64>() / m;
    (
        mu,
        vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m,
    )
}

/// Statistics keep reduced axes as size 1; group statistics are `[N, G, 1, 1]`.
fn stat_at(t: &Tensor, domain: StatDomain, channels: usize, at: [usize; 4]) -> f64 {
    let mut at = at;
    if let StatDomain::Group(g) = domain {
        at[1] /= channels / g;
    }
    let idx: Vec<usize> = t
        .shape()
        .iter()
        .zip(at)
        .map(|(&d, i)| if d == 1 { 0 } else { i })
        .collect();
    t.get(&idx).unwrap()
}

#[test]
fn statistics_match_enumeration() {
    let mut r = rng(1);
    for shape in [[2, 4, 3, 2], [3, 8, 2, 3], [1, 2, 1, 1]] {
        let x = Tensor::randn(shape.to_vec(), 1.5, &mut r).unwrap();
        for domain in [
            StatDomain::Batch,
            StatDomain::Layer,
            StatDomain::Instance,
            StatDomain::Group(2),
        ] {
            let s = compute_stats(&x, domain, 1e-5).unwrap();
            for n in 0..shape[0] {
                for c in 0..shape[1] {
                    let at = [n, c, 0, 0];
                    let (mu, var) = brute_stats(&x, domain, at);
                    assert!(
                        (stat_at(&s.mu, domain, shape[1], at) - mu).abs()
                            <= 1e-12 * mu.abs().max(1.0)
                    );
                    assert!(
                        (stat_at(&s.var, domain, shape[1], at) - var).abs() <= 1e-12 * var.max(1.0)
                    );
                    assert!(
                        (stat_at(&s.sigma, domain, shape[1], at) - (var + 1e-5).sqrt()).abs()
                            <= 1e-12
                    );
                }
            }
        }
    }
}

#[test]
fn normalized_output_matches_elementwise_formula() {
    let x = Tensor::randn([2, 4, 3, 3], 2.0, &mut rng(2)).unwrap();
    let eps = 1e-3;
    for domain in [
        StatDomain::Layer,
        StatDomain::Instance,
        StatDomain::Group(2),
        StatDomain::Batch,
    ] {
        let mut layer = NormLayer::new("n", 4, domain, eps, AffineKind::None).unwrap();
        let y = norm_forward(&mut layer, &x, None).unwrap();
        for n in 0..2 {
            for c in 0..4 {
                for h in 0..3 {
                    for w in 0..3 {
                        let (mu, var) = brute_stats(&x, domain, [n, c, h, w]);
                        let want = (x.get(&[n, c, h, w]).unwrap() - mu) / (var + eps).sqrt();
                        assert!((y.get(&[n, c, h, w]).unwrap() - want).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn conditional_affine_matches_per_sample_loop() {
    let x = Tensor::randn([3, 4, 2, 2], 1.0, &mut rng(3)).unwrap();
    let c = Tensor::randn([3, 2], 1.0, &mut rng(4)).unwrap();
    let mut layer = NormLayer::new(
        "n",
        4,
        StatDomain::Group(2),
        1e-5,
        AffineKind::Conditional { cond_dim: 2 },
    )
    .unwrap();
    let mut r = rng(5);
    layer.visit_mut(&mut |p| {
        p.value = Tensor::randn(p.value.shape().to_vec(), 0.7, &mut r).unwrap()
    });
    let names: Vec<(String, Tensor)> = layer
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    let get = |suffix: &str| {
        names
            .iter()
            .find(|(n, _)| n.ends_with(suffix))
            .unwrap()
            .1
            .clone()
    };
    let (wg, bg, wb, bb) = (get("w_gamma"), get("b_gamma"), get("w_beta"), get("b_beta"));
    let y = norm_forward(&mut layer, &x, Some(&c)).unwrap();
    for n in 0..3 {
        for ch in 0..4 {
            let gamma = bg.data()[ch]
                + (0..2)
                    .map(|d| wg.get(&[ch, d]).unwrap() * c.get(&[n, d]).unwrap())
                    .sum::<f64>();
            let beta = bb.data()[ch]
                + (0..2)
                    .map(|d| wb.get(&[ch, d]).unwrap() * c.get(&[n, d]).unwrap())
                    .sum::<f64>();
            for h in 0..2 {
                for w in 0..2 {
                    let (mu, var) = brute_stats(&x, StatDomain::Group(2), [n, ch, h, w]);
                    let want =
                        gamma * (x.get(&[n, ch, h, w]).unwrap() - mu) / (var + 1e-5).sqrt() + beta;
                    assert!((y.get(&[n, ch, h, w]).unwrap() - want).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn running_statistics_follow_scalar_recurrence() {
    let mut running = RunningStats::new("bn", 1, 0.9).unwrap();
    let (mut mu, mut var) = (0.0, 1.0);
    for k in 0..7 {
        let (bm, bv) = (k as f64 * 0.5 - 1.0, 1.0 + k as f64);
        update_running(&mut running, &[bm], &[bv]);
        mu = 0.9 * mu + 0.1 * bm;
        var = 0.9 * var + 0.1 * bv;
    }
    assert!((running.mean.value.data()[0] - mu).abs() <= 1e-15);
    assert!((running.var.value.data()[0] - var).abs() <= 1e-15);
    assert_eq!(running.num_updates(), 7);
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], pad: usize) -> Tensor {
    let [n, cin, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [cout, _, k, _] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let (oh, ow) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    Tensor::from_fn([n, cout, oh, ow], |i| {
        let (s, o, y, xx) = (
            i / (cout * oh * ow),
            (i / (oh * ow)) % cout,
            (i / ow) % oh,
            i % ow,
        );
        let mut acc = b[o];
        for c in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let (iy, ix) = (
                        (y + dy) as isize - pad as isize,
                        (xx + dx) as isize - pad as isize,
                    );
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += w.get(&[o, c, dy, dx]).unwrap()
                            * x.get(&[s, c, iy as usize, ix as usize]).unwrap();
                    }
                }
            }
        }
        acc
    })
    .unwrap()
}

#[test]
fn conv2d_matches_naive_loops() {
    let mut r = rng(6);
    for (k, pad) in [(3, 1), (3, 0), (1, 0), (3, 2)] {
        let x = Tensor::randn([2, 3, 5, 4], 1.0, &mut r).unwrap();
        let w = Tensor::randn([4, 3, k, k], 1.0, &mut r).unwrap();
        let b = Tensor::randn([4], 1.0, &mut r).unwrap();
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), tape.constant(b.clone()), pad)
            .unwrap()
            .value();
        let want = naive_conv(&x, &w, b.data(), pad);
        assert_eq!(y.shape(), want.shape());
        assert!(y.max_abs_diff(&want) <= 1e-12, "k={k} pad={pad}");
    }
}

#[test]
fn matmul_matches_naive_loops() {
    let mut r = rng(7);
    let a = Tensor::randn([5, 7], 1.0, &mut r).unwrap();
    let b = Tensor::randn([7, 3], 1.0, &mut r).unwrap();
    let tape = Tape::new();
    let y = tape
        .constant(a.clone())
        .matmul(tape.constant(b.clone()))
        .unwrap()
        .value();
    for i in 0..5 {
        for j in 0..3 {
            let want: f64 = (0..7)
                .map(|k| a.get(&[i, k]).unwrap() * b.get(&[k, j]).unwrap())
                .sum();
            assert!((y.get(&[i, j]).unwrap() - want).abs() <= 1e-12);
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn gru_matches_scalar_recurrence() {
    let enc = GruEncoder::new("q", 6, 3, 4, &mut rng(8)).unwrap();
    let mut enc = enc;
    let mut r = rng(9);
    enc.visit_mut(&mut |p| p.value = Tensor::randn(p.value.shape().to_vec(), 0.6, &mut r).unwrap());
    let tokens = [2usize, 5, 0, 3];
    let got = normlab::nn::gru_encode(&tokens, &enc).unwrap();

    let gate = |g: &normlab::nn::gru::Gate, x: &[f64], h: &[f64], j: usize| {
        let mut v = g.bias.value.data()[j];
        for (e, xe) in x.iter().enumerate() {
            v += xe * g.input.value.get(&[e, j]).unwrap();
        }
        for (k, hk) in h.iter().enumerate() {
            v += hk * g.recurrent.value.get(&[k, j]).unwrap();
        }
        v
    };
    let mut h = vec![0.0; 4];
    for &t in &tokens {
        let x: Vec<f64> = (0..3)
            .map(|e| enc.embedding.value.get(&[t, e]).unwrap())
            .collect();
        let z: Vec<f64> = (0..4)
            .map(|j| sigmoid(gate(&enc.update, &x, &h, j)))
            .collect();
        let rr: Vec<f64> = (0..4)
            .map(|j| sigmoid(gate(&enc.reset, &x, &h, j)))
            .collect();
        let rh: Vec<f64> = (0..4).map(|j| rr[j] * h[j]).collect();
        let cand: Vec<f64> = (0..4)
            .map(|j| gate(&enc.candidate, &x, &rh, j).tanh())
            .collect();
        h = (0..4)
            .map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j])
            .collect();
    }
    for j in 0..4 {
        assert!((got.data()[j] - h[j]).abs() <= 1e-12);
    }
}

struct One(Param);

impl Module for One {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.0)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.0)
    }
    fn set_mode(&mut self, _mode: Mode) {}
}

#[test]
fn adam_matches_scalar_update() {
    let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-5);
    let mut m = One(Param::new("w", Tensor::from_vec(vec![0.5]).unwrap()));
    let mut opt = Optimizer::new(OptimizerKind::Adam {
        lr,
        beta1: b1,
        beta2: b2,
        eps,
    });
    let (mut w, mut m1, mut m2) = (0.5f64, 0.0, 0.0);
    for t in 1..=5 {
        // gradient of w^3
        let g = 3.0 * w * w;
        let grads = [("w".to_string(), Tensor::from_vec(vec![g]).unwrap())]
            .into_iter()
            .collect();
        opt.step(&mut m, &grads).unwrap();
        m1 = b1 * m1 + (1.0 - b1) * g;
        m2 = b2 * m2 + (1.0 - b2) * g * g;
        let mhat = m1 / (1.0 - b1.powi(t));
        let vhat = m2 / (1.0 - b2.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);
        assert!((m.0.value.data()[0] - w).abs() <= 1e-14, "step {t}");
    }
}

/// Finds each glyph's cell by scanning the canvas for its pattern.
fn locate(sample: &SqoopSample, cfg: &SqoopConfig, glyph: usize) -> Option<(usize, usize)> {
    let pats = glyph_patterns(cfg.alphabet, cfg.glyph_px);
    let side = cfg.canvas();
    let g = cfg.glyph_px;
    let mut found = None;
    for row in 0..cfg.grid {
        for col in 0..cfg.grid {
            let matches = (0..g * g).all(|k| {
                let (y, x) = (row * cfg.cell_px + k / g, col * cfg.cell_px + k % g);
                let on = sample.image.data()[y * side + x] == 1.0;
                on == pats[glyph][k]
            });
            if matches {
                assert!(found.is_none(), "glyph {glyph} drawn twice");
                found = Some((row, col));
            }
        }
    }
    found
}

#[test]
fn sqoop_answers_match_pixel_geometry() {
    let cfg = SqoopConfig {
        alphabet: 6,
        grid: 4,
        cell_px: 3,
        glyph_px: 3,
        objects_per_image: 4,
        rhs_per_lhs: 2,
        train_size: 60,
        val_size: 20,
        test_size: 40,
        encoding: Encoding::Grayscale,
        seed: 11,
    };
    let d = gen_sqoop(&cfg).unwrap();
    for s in d.train.iter().chain(&d.val).chain(&d.test) {
        let x = locate(s, &cfg, s.question.x).expect("x drawn");
        let y = locate(s, &cfg, s.question.y).expect("y drawn");
        let want = match s.question.relation {
            Relation::LeftOf => x.1 < y.1,
            Relation::RightOf => x.1 > y.1,
            Relation::Above => x.0 < y.0,
            Relation::Below => x.0 > y.0,
        };
        assert_eq!(s.answer, want);
    }
}

#[test]
fn sqoop_triple_counts_match_enumeration() {
    for (alphabet, k) in [(3, 1), (5, 2), (10, 9)] {
        let cfg = SqoopConfig {
            alphabet,
            rhs_per_lhs: k,
            objects_per_image: alphabet.min(5),
            ..Default::default()
        };
        let train: BTreeSet<[usize; 3]> =
            sqoop::train_triples(&cfg).iter().map(|t| t.ids()).collect();
        let test: BTreeSet<[usize; 3]> =
            sqoop::test_triples(&cfg).iter().map(|t| t.ids()).collect();
        let mut all = BTreeSet::new();
        for x in 0..alphabet {
            for r in 0..4 {
                for y in 0..alphabet {
                    if x != y {
                        all.insert([x, r, y]);
                    }
                }
            }
        }
        assert_eq!(train.len(), alphabet * k * 4);
        assert!(train.is_subset(&all));
        assert_eq!(test, all);
        // each relation sees every lhs glyph with exactly k partners
        for x in 0..alphabet {
            for r in 0..4 {
                assert_eq!(train.iter().filter(|t| t[0] == x && t[1] == r).count(), k);
            }
        }
    }
}

#[test]
fn nearest_centroid_separates_low_jitter_classes() {
    let cfg = FewShotConfig {
        n_classes: 20,
        per_class: 12,
        size: 10,
        jitter: 0.1,
        train_classes: 10,
        val_classes: 5,
        test_classes: 5,
        ..Default::default()
    };
    let pool = gen_fewshot_universe(&cfg).unwrap();
    let (mut hits, mut total) = (0, 0);
    for seed in 0..20 {
        let ep = sample_episode(
            &pool,
            &EpisodeConfig {
                ways: 5,
                shots: 5,
                queries: 5,
                split: ClassSplit::Test,
                seed,
            },
        )
        .unwrap();
        let dim = ep.support.numel() / 25;
        let centroid = |m: usize| -> Vec<f64> {
            let mut c = vec![0.0; dim];
            for (i, &l) in ep.support_labels.iter().enumerate() {
                if l == m {
                    for (k, v) in ep.support.data()[i * dim..(i + 1) * dim].iter().enumerate() {
                        c[k] += v / 5.0;
                    }
                }
            }
            c
        };
        let cents: Vec<Vec<f64>> = (0..5).map(centroid).collect();
        for (q, &l) in ep.query_labels.iter().enumerate() {
            let row = &ep.query.data()[q * dim..(q + 1) * dim];
            let dist = |c: &Vec<f64>| {
                c.iter()
                    .zip(row)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            };
            let best = (0..5)
                .min_by(|&a, &b| dist(&cents[a]).total_cmp(&dist(&cents[b])))
                .unwrap();
            hits += (best == l) as usize;
            total += 1;
        }
    }
    assert!(hits as f64 / total as f64 >= 0.9, "{hits}/{total}");
}

#[test]
fn episodes_are_well_formed() {
    let cfg = FewShotConfig {
        n_classes: 12,
        per_class: 8,
        size: 8,
        train_classes: 6,
        val_classes: 3,
        test_classes: 3,
        ..Default::default()
    };
    let pool = gen_fewshot_universe(&cfg).unwrap();
    for seed in 0..10 {
        let ep = sample_episode(
            &pool,
            &EpisodeConfig {
                ways: 3,
                shots: 2,
                queries: 3,
                split: ClassSplit::Train,
                seed,
            },
        )
        .unwrap();
        let classes: BTreeSet<usize> = ep.classes.iter().copied().collect();
        assert_eq!(classes.len(), 3);
        assert!(classes.iter().all(|c| pool.train.contains(c)));
        let sup: BTreeSet<_> = ep.support_index.iter().collect();
        let qry: BTreeSet<_> = ep.query_index.iter().collect();
        assert_eq!(sup.len(), 6);
        assert_eq!(qry.len(), 9);
        assert!(sup.is_disjoint(&qry));
        for (i, &(c, k)) in ep.support_index.iter().enumerate() {
            assert_eq!(ep.classes[ep.support_labels[i]], c);
            assert_eq!(ep.support_labels[i], i / 2);
            assert_eq!(
                ep.support.sample(i).unwrap().data(),
                pool.images[c][k].data()
            );
        }
        for (i, &(c, _)) in ep.query_index.iter().enumerate() {
            assert_eq!(ep.classes[ep.query_labels[i]], c);
        }
    }
}

#[test]
fn proto_logits_are_scaled_negative_squared_distances() {
    let cfg = ProtoConfig {
        in_channels: 3,
        width: 4,
        num_blocks: 1,
        task_dim: 3,
        ten_hidden: 5,
        groups: 2,
        ..Default::default()
    };
    let mut head = ProtoHead::new(cfg, &mut rng(12)).unwrap();
    let mut r = rng(13);
    head.visit_mut(&mut |p| {
        if p.trainable {
            let noise = Tensor::randn(p.value.shape().to_vec(), 0.2, &mut r).unwrap();
            let v: Vec<f64> = p
                .value
                .data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect();
            p.value = Tensor::new(p.value.shape().to_vec(), v).unwrap();
        }
    });
    let support = Tensor::randn([6, 3, 5, 5], 1.0, &mut r).unwrap();
    let labels = [0, 0, 1, 1, 2, 2];
    let query = Tensor::randn([4, 3, 5, 5], 1.0, &mut r).unwrap();
    let sup = Support {
        images: &support,
        labels: &labels,
        ways: 3,
    };

    let tape = Tape::new();
    let ctx = Ctx::no_grad(&tape);
    let logits = head.logits(&ctx, &sup, &query).unwrap().value();
    let gamma = head.task_embedding(&ctx, &sup).unwrap();
    let es = head.embed.forward(&ctx, &support, gamma).unwrap().value();
    let eq = head.embed.forward(&ctx, &query, gamma).unwrap().value();
    let e = es.shape()[1];
    let alpha = head.alpha();
    for q in 0..4 {
        for m in 0..3 {
            let proto: Vec<f64> = (0..e)
                .map(|k| (es.get(&[2 * m, k]).unwrap() + es.get(&[2 * m + 1, k]).unwrap()) / 2.0)
                .collect();
            let d: f64 = (0..e)
                .map(|k| (eq.get(&[q, k]).unwrap() - proto[k]).powi(2))
                .sum();
            assert!((logits.get(&[q, m]).unwrap() + alpha * d).abs() <= 1e-10);
        }
    }
}
