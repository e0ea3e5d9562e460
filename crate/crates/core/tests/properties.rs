use cosnorm::checkpoint::Checkpoint;
use cosnorm::data::batches;
use cosnorm::kernels::{cosine_forward, dot_forward, pcc_forward, weightnorm_forward};
use cosnorm::layers::softmax;
use cosnorm::train::MetricsRow;
use cosnorm::{Architecture, Network, NormKind, SimilarityKind, Tensor};
use proptest::prelude::*;

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-50.0f64..50.0, n),
            prop::collection::vec(-50.0f64..50.0, n),
        )
    })
}

fn spread(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|a| (a - m).abs()).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn kernel_of(i: usize) -> SimilarityKind {
    SimilarityKind::ALL[i % 4]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn cosine_bounded_and_scale_free((w, x) in pair(), a in 0.01f64..100.0, b in 0.01f64..100.0) {
        prop_assume!(norm(&w) > 1e-3 && norm(&x) > 1e-3);
        let c = cosine_forward(&w, &x).unwrap().value;
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let ws: Vec<f64> = w.iter().map(|v| v * a).collect();
        let xs: Vec<f64> = x.iter().map(|v| v * b).collect();
        prop_assert!((cosine_forward(&ws, &xs).unwrap().value - c).abs() < 1e-12);
        let xn: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((cosine_forward(&w, &xn).unwrap().value + c).abs() < 1e-12);
    }

    #[test]
    fn pcc_ignores_shift_and_scale((w, x) in pair(), shift in -100.0f64..100.0, a in 0.01f64..100.0) {
        prop_assume!(spread(&w) > 1e-3 && spread(&x) > 1e-3);
        let p = pcc_forward(&w, &x).unwrap().value;
        prop_assert!(p.abs() <= 1.0 + 1e-12);
        let xs: Vec<f64> = x.iter().map(|v| a * v + shift).collect();
        prop_assert!((pcc_forward(&w, &xs).unwrap().value - p).abs() < 1e-9);
        prop_assert!((pcc_forward(&x, &w).unwrap().value - p).abs() < 1e-12);
    }

    #[test]
    fn dot_is_bilinear((w, x) in pair(), a in -10.0f64..10.0) {
        let d = dot_forward(&w, &x).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
        let got = dot_forward(&w, &xs).unwrap();
        prop_assert!((got - a * d).abs() <= 1e-9 * (1.0 + (a * d).abs()));
    }

    #[test]
    fn weightnorm_is_linear_in_input_and_gain((w, x) in pair(), a in 0.01f64..100.0, g in -5.0f64..5.0) {
        prop_assume!(norm(&w) > 1e-3);
        let base = weightnorm_forward(&w, &x, 1.0).unwrap().value;
        let ws: Vec<f64> = w.iter().map(|v| v * a).collect();
        prop_assert!((weightnorm_forward(&ws, &x, g).unwrap().value - g * base).abs() < 1e-9 * (1.0 + base.abs() * g.abs()));
        let xs: Vec<f64> = x.iter().map(|v| v * a).collect();
        prop_assert!((weightnorm_forward(&w, &xs, 1.0).unwrap().value - a * base).abs() < 1e-9 * (1.0 + (a * base).abs()));
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        logits in prop::collection::vec(-700.0f64..700.0, 2..12),
        shift in -300.0f64..300.0,
    ) {
        let n = logits.len();
        let p = softmax(&Tensor::new(vec![1, n], logits.clone()).unwrap());
        prop_assert!(p.all_finite());
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&Tensor::new(vec![1, n], logits.iter().map(|v| v + shift).collect()).unwrap());
        for (a, b) in p.data().iter().zip(q.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batches_are_full_disjoint_and_reproducible(n in 1usize..500, bs in 1usize..64, seed in 0u64..1000, epoch in 0u64..10) {
        prop_assume!(bs <= n);
        let b = batches(n, bs, seed, epoch).unwrap();
        prop_assert_eq!(b.len(), n / bs);
        prop_assert!(b.iter().all(|x| x.len() == bs));
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), (n / bs) * bs);
        prop_assert!(all.iter().all(|&i| i < n));
        prop_assert_eq!(b, batches(n, bs, seed, epoch).unwrap());
    }

    #[test]
    fn metrics_rows_round_trip_through_csv(
        epoch in 0usize..1000, step in 0usize..1_000_000,
        loss in 0.0f64..1e6, err in 0.0f64..=100.0, wall in 0u64..u64::MAX,
    ) {
        let row = MetricsRow { epoch, step, train_loss: loss, test_error_percent: err, wall_ms: wall };
        prop_assert_eq!(MetricsRow::parse(&row.csv_line()).unwrap(), row);
    }

    #[test]
    fn checkpoints_round_trip_exactly(
        kernel in 0usize..4,
        norm in 0usize..3,
        hidden in prop::collection::vec(2usize..9, 0..3),
        seed in 0u64..1000,
    ) {
        let norm = [NormKind::None, NormKind::LayerNorm, NormKind::BatchNorm][norm];
        let arch = Architecture::mlp(5, &hidden, 3, norm);
        let net = Network::build(&arch, kernel_of(kernel), seed).unwrap();
        let bytes = Checkpoint::new(net.clone(), None).encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        let x = cosnorm::init::init_weights(&[3, 5], seed + 1);
        let (a, b) = (net.infer(&x).unwrap(), back.network.infer(&x).unwrap());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
