use foss_core::rng::SplitMix64;
use foss_core::ssm::{
    dense_unroll_oracle, scan_frozen, ScanMode, SelectiveSsm, SelectiveSsmConfig, StepParams,
};
use foss_core::{DType, ParamStore, Tape, Tensor};

fn random_steps(t: usize, n: usize, d_in: usize, p: usize, rng: &mut SplitMix64) -> Vec<StepParams> {
    (0..t)
        .map(|_| StepParams {
            a: Tensor::uniform(&[n], 0.05, 0.95, rng),
            b: Tensor::randn(&[n, d_in], 1.0, rng),
            c: Tensor::randn(&[p, n], 1.0, rng),
            d: Tensor::randn(&[p, d_in], 1.0, rng),
        })
        .collect()
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn frozen_scan_matches_dense_unroll_on_random_instances() {
    let mut rng = SplitMix64::new(2024);
    for case in 0..100 {
        let n = 1 + rng.below(8);
        let d_in = 1 + rng.below(4);
        let p = 1 + rng.below(4);
        let t = 1 + rng.below(32);
        let steps = random_steps(t, n, d_in, p, &mut rng);
        let x = Tensor::randn(&[t, d_in], 1.0, &mut rng);
        let h0: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let fast = scan_frozen(&steps, &x, &h0, ScanMode::Raw).unwrap();
        let slow = dense_unroll_oracle(&steps, &x, &h0).unwrap();
        let err = rel_err(&fast, &slow);
        assert!(err < 1e-8, "case {case} (n={n}, d_in={d_in}, p={p}, T={t}): {err}");
    }
}

#[test]
fn oracle_accepts_full_transition_matrices() {
    // A full matrix that is diagonal must agree with the diagonal form.
    let mut rng = SplitMix64::new(5);
    let steps = random_steps(6, 3, 2, 2, &mut rng);
    let dense: Vec<StepParams> = steps
        .iter()
        .map(|s| {
            let mut a = Tensor::zeros(&[3, 3]);
            for i in 0..3 {
                a.data_mut()[i * 3 + i] = s.a.data()[i];
            }
            StepParams { a, ..s.clone() }
        })
        .collect();
    let x = Tensor::randn(&[6, 2], 1.0, &mut rng);
    let y1 = dense_unroll_oracle(&steps, &x, &[0.1, 0.2, 0.3]).unwrap();
    let y2 = dense_unroll_oracle(&dense, &x, &[0.1, 0.2, 0.3]).unwrap();
    assert_eq!(y1, y2);
}

#[test]
fn learned_ssm_with_raw_mode_matches_oracle_on_its_own_params() {
    let mut rng = SplitMix64::new(9);
    let mut store = ParamStore::new(DType::F64);
    let cfg = SelectiveSsmConfig {
        n: 5,
        d_in: 3,
        p: 2,
        conv_width: 3,
        generator_hidden: 6,
        mode: ScanMode::Raw,
    };
    let ssm = SelectiveSsm::new(cfg, &mut store, "s", &mut rng).unwrap();
    let x = Tensor::randn(&[12, 3], 1.0, &mut rng);
    let mut tape = Tape::default();
    let xv = tape.constant(x.clone()).unwrap();
    let y = ssm.forward(&mut tape, &store, xv, None).unwrap();
    let steps = ssm.step_params(&store, &x).unwrap();
    for s in &steps {
        assert!(s.a.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let oracle = dense_unroll_oracle(&steps, &x, &[0.0; 5]).unwrap();
    assert!(rel_err(tape.value(y), &oracle) < 1e-8);
}

#[test]
fn input_independent_generators_give_constant_params() {
    let mut rng = SplitMix64::new(10);
    let mut store = ParamStore::new(DType::F64);
    let cfg = SelectiveSsmConfig {
        n: 4,
        d_in: 2,
        p: 2,
        conv_width: 3,
        generator_hidden: 5,
        mode: ScanMode::Feedback,
    };
    let ssm = SelectiveSsm::new(cfg, &mut store, "s", &mut rng).unwrap();
    for g in [&ssm.f_a, &ssm.f_b, &ssm.f_c, &ssm.f_d] {
        let shape = store.value(g.w1).shape().to_vec();
        store.set_value(g.w1, Tensor::zeros(&shape)).unwrap();
        let shape = store.value(g.b1).shape().to_vec();
        store.set_value(g.b1, Tensor::randn(&shape, 1.0, &mut rng)).unwrap();
    }
    let x = Tensor::randn(&[7, 2], 1.0, &mut rng);
    let steps = ssm.step_params(&store, &x).unwrap();
    for s in &steps[1..] {
        assert_eq!(s, &steps[0]);
    }
}

#[test]
fn local_features_examples() {
    let mut rng = SplitMix64::new(11);
    let mut store = ParamStore::new(DType::F64);
    let cfg = SelectiveSsmConfig {
        n: 2,
        d_in: 2,
        p: 1,
        conv_width: 3,
        generator_hidden: 2,
        mode: ScanMode::Feedback,
    };
    let ssm = SelectiveSsm::new(cfg, &mut store, "s", &mut rng).unwrap();
    let x = Tensor::randn(&[5, 2], 1.0, &mut rng);
    let run = |store: &ParamStore, x: &Tensor| {
        let mut tape = Tape::default();
        let xv = tape.constant(x.clone()).unwrap();
        let y = ssm.local_features(&mut tape, store, xv).unwrap();
        tape.value(y).clone()
    };
    store
        .set_value(ssm.conv, Tensor::new(&[2, 3], vec![0., 1., 0., 0., 1., 0.]).unwrap())
        .unwrap();
    assert_eq!(run(&store, &x), x);
    let third = 1.0 / 3.0;
    store.set_value(ssm.conv, Tensor::full(&[2, 3], third)).unwrap();
    let y = run(&store, &Tensor::full(&[5, 2], 2.0));
    for t in 1..4 {
        for c in 0..2 {
            assert!((y.at2(t, c) - 2.0).abs() < 1e-15);
        }
    }
}
