use proptest::prelude::*;

use meshcov::drift::{fit_baseline, monitor_stream, BfMonitor, Decision, ModelKind};

fn symbols(k: usize, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(0..k, len)
}

fn kind() -> impl Strategy<Value = ModelKind> {
    prop_oneof![Just(ModelKind::Multinomial), Just(ModelKind::Markov)]
}

fn log_bf(kind: ModelKind, k: usize, base: &[usize], stream: &[usize]) -> f64 {
    let model = fit_baseline(&[base.to_vec()], k, kind, 1.0).unwrap();
    let mut m = BfMonitor::new(&model, 10.0);
    m.observe(stream).unwrap();
    m.log_bf
}

proptest! {
    #[test]
    fn bayes_factor_never_below_one(
        k in 2usize..5,
        kind in kind(),
        seed in any::<u64>(),
        base_len in 2usize..200,
        stream_len in 1usize..200,
        alpha in 0.1f64..3.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<usize> = (0..base_len).map(|_| rng.gen_range(0..k)).collect();
        let stream: Vec<usize> = (0..stream_len).map(|_| rng.gen_range(0..k)).collect();
        let model = fit_baseline(&[base], k, kind, alpha).unwrap();
        let mut m = BfMonitor::new(&model, 10.0);
        for chunk in stream.chunks(7) {
            m.observe(chunk).unwrap();
            prop_assert!(m.log_bf.is_finite());
            prop_assert!(m.log_bf >= -1e-9, "log BF {}", m.log_bf);
        }
    }

    #[test]
    fn multinomial_ignores_order(base in symbols(3, 1..50), stream in symbols(3, 1..80)) {
        let mut reversed = stream.clone();
        reversed.reverse();
        let a = log_bf(ModelKind::Multinomial, 3, &base, &stream);
        let b = log_bf(ModelKind::Multinomial, 3, &base, &reversed);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn latch_is_monotone(base in symbols(3, 2..40), stream in symbols(3, 1..120), kind in kind()) {
        let model = fit_baseline(&[base], 3, kind, 1.0).unwrap();
        let mut m = BfMonitor::new(&model, 5.0);
        let mut seen = false;
        for chunk in stream.chunks(5) {
            let d = m.observe(chunk).unwrap();
            if seen {
                prop_assert_eq!(d, Decision::Drift);
            }
            seen |= d == Decision::Drift;
        }
    }

    #[test]
    fn markov_batches_join_into_one_stream(
        base in symbols(3, 2..40),
        stream in symbols(3, 2..100),
        cut in 1usize..99,
    ) {
        let cut = cut.min(stream.len() - 1);
        let model = fit_baseline(&[base], 3, ModelKind::Markov, 1.0).unwrap();
        let mut whole = BfMonitor::new(&model, 10.0);
        whole.observe(&stream).unwrap();
        let mut split = BfMonitor::new(&model, 10.0);
        split.observe(&stream[..cut]).unwrap();
        split.observe(&stream[cut..]).unwrap();
        prop_assert!((whole.log_bf - split.log_bf).abs() < 1e-9);
    }
}

#[test]
fn markov_depends_on_order() {
    let base = vec![0, 1, 2, 0, 1, 2, 0, 0, 1];
    let stream = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
    let shuffled = vec![0, 1, 2, 0, 1, 2, 0, 1, 2];
    let a = log_bf(ModelKind::Markov, 3, &base, &stream);
    let b = log_bf(ModelKind::Markov, 3, &base, &shuffled);
    assert!((a - b).abs() > 1e-6, "{a} vs {b}");
    let ma = log_bf(ModelKind::Multinomial, 3, &base, &stream);
    let mb = log_bf(ModelKind::Multinomial, 3, &base, &shuffled);
    assert!((ma - mb).abs() < 1e-12);
}

#[test]
fn more_baseline_means_more_concentration() {
    let short = fit_baseline(&[vec![0, 1, 0, 1]], 2, ModelKind::Markov, 1.0).unwrap();
    let long = fit_baseline(&[[0, 1].repeat(50)], 2, ModelKind::Markov, 1.0).unwrap();
    assert!(long.concentration(0) > short.concentration(0));
    assert!(long.concentration(1) > short.concentration(1));
}

#[test]
fn stream_from_prior_stays_quiet() {
    let base = [0, 0, 1, 0, 2].repeat(200);
    let model = fit_baseline(std::slice::from_ref(&base), 3, ModelKind::Multinomial, 1.0).unwrap();
    let records = monitor_stream(&model, &base[..500], 50, 10.0).unwrap();
    assert_eq!(records.len(), 10);
    for r in &records {
        assert_eq!(r.decision, Decision::NoDrift);
        assert!(r.log_bf.abs() < 0.5, "{}", r.log_bf);
    }
}

#[test]
fn empty_baseline_is_rejected() {
    assert!(fit_baseline(&[], 2, ModelKind::Multinomial, 1.0).is_err());
    assert!(fit_baseline(&[vec![]], 2, ModelKind::Markov, 1.0).is_err());
}
