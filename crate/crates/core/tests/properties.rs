use normlab::data::io::{decode_pixels, encode_pixels};
use normlab::nn::argmax_rows;
use normlab::norm::{compute_stats, index_sets, norm_forward, AffineKind, NormLayer, StatDomain};
use normlab::Tensor;
use proptest::prelude::*;

fn nchw() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (
        1usize..4,
        prop::sample::select(vec![2usize, 4, 8]),
        1usize..4,
        1usize..4,
    )
        .prop_flat_map(|(n, c, h, w)| {
            let shape = vec![n, c, h, w];
            prop::collection::vec(-5.0f64..5.0, n * c * h * w).prop_map(move |d| (shape.clone(), d))
        })
}

fn domains(c: usize) -> Vec<StatDomain> {
    let mut out = vec![StatDomain::Batch, StatDomain::Layer, StatDomain::Instance];
    out.extend(
        [1, 2, c]
            .into_iter()
            .filter(|g| c.is_multiple_of(*g))
            .map(StatDomain::Group),
    );
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn index_sets_partition_the_tensor((shape, _) in nchw()) {
        for d in domains(shape[1]) {
            let sets = index_sets(d, &shape).unwrap();
            let mut all: Vec<usize> = sets.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..shape.iter().product()).collect::<Vec<_>>());
            let m = sets[0].len();
            prop_assert!(sets.iter().all(|s| s.len() == m));
        }
    }

    #[test]
    fn normalized_sets_have_zero_mean_and_shrunk_variance((shape, data) in nchw()) {
        let x = Tensor::new(shape.clone(), data).unwrap();
        let eps = 1e-3;
        for d in domains(shape[1]) {
            let mut layer = NormLayer::new("n", shape[1], d, eps, AffineKind::None).unwrap();
            let y = norm_forward(&mut layer, &x, None).unwrap();
            for set in index_sets(d, &shape).unwrap() {
                let m = set.len() as f64;
                let xs: Vec<f64> = set.iter().map(|&i| x.data()[i]).collect();
                let mu = xs.iter().sum::<f64>() / m;
                let var = xs.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
                let ys: Vec<f64> = set.iter().map(|&i| y.data()[i]).collect();
                let ym = ys.iter().sum::<f64>() / m;
                let yv = ys.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / m;
                prop_assert!(ym.abs() <= 1e-10);
                prop_assert!((yv - var / (var + eps)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn group_norm_extremes_are_layer_and_instance((shape, data) in nchw()) {
        let x = Tensor::new(shape.clone(), data).unwrap();
        let c = shape[1];
        let run = |d| norm_forward(&mut NormLayer::new("n", c, d, 1e-5, AffineKind::None).unwrap(), &x, None).unwrap();
        prop_assert!(run(StatDomain::Group(1)).max_abs_diff(&run(StatDomain::Layer)) <= 1e-12);
        prop_assert!(run(StatDomain::Group(c)).max_abs_diff(&run(StatDomain::Instance)) <= 1e-12);
    }

    #[test]
    fn per_sample_domains_ignore_the_rest_of_the_batch((shape, data) in nchw()) {
        let x = Tensor::new(shape.clone(), data).unwrap();
        let c = shape[1];
        for d in domains(c).into_iter().filter(|d| *d != StatDomain::Batch) {
            let mut layer = NormLayer::new("n", c, d, 1e-5, AffineKind::Fixed).unwrap();
            let full = norm_forward(&mut layer, &x, None).unwrap();
            for i in 0..shape[0] {
                let one = norm_forward(&mut layer, &x.sample(i).unwrap(), None).unwrap();
                prop_assert!(one.max_abs_diff(&full.sample(i).unwrap()) <= 1e-12);
            }
        }
    }

    #[test]
    fn sigma_is_positive_and_bounded_below_by_sqrt_eps((shape, data) in nchw()) {
        let x = Tensor::new(shape.clone(), data).unwrap();
        for d in domains(shape[1]) {
            let s = compute_stats(&x, d, 1e-5).unwrap();
            prop_assert!(s.sigma.data().iter().all(|&v| v >= 1e-5f64.sqrt() - 1e-18));
            prop_assert_eq!(s.m * s.mu.numel(), x.numel());
        }
    }

    #[test]
    fn pixels_round_trip_through_base64(vals in prop::collection::vec(-100.0f32..100.0, 1..64)) {
        let t = Tensor::new([vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
        let back = decode_pixels(&encode_pixels(&t), t.shape()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn argmax_prefers_the_lowest_tied_index(cols in 1usize..8, hot in 0usize..8, v in -3.0f64..3.0) {
        let hot = hot % cols;
        let mut row = vec![v - 1.0; cols];
        for x in row.iter_mut().skip(hot) {
            *x = v;
        }
        let t = Tensor::new([1, cols], row).unwrap();
        prop_assert_eq!(argmax_rows(&t), vec![hot]);
    }
}
