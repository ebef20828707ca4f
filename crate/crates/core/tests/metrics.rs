use foss_core::metrics::{b_minfde, best_final, miss_rate, minade, minfde, pairwise_sum, score, EvalReport, ScenarioMetrics};
use foss_core::rng::SplitMix64;
use foss_core::{CandidateSet, Error, Tensor};
use proptest::prelude::*;

fn set(trajs: &[Vec<[f64; 2]>], probs: Vec<f64>) -> CandidateSet {
    let t = trajs[0].len();
    let data = trajs.iter().flatten().flat_map(|p| *p).collect();
    CandidateSet::new(Tensor::new(&[trajs.len(), t, 2], data).unwrap(), probs).unwrap()
}

fn random_case(rng: &mut SplitMix64) -> (Vec<Vec<[f64; 2]>>, Vec<f64>, Vec<[f64; 2]>) {
    let k = 1 + rng.below(8);
    let t = 1 + rng.below(30);
    let mut pt = || [rng.uniform_range(-5.0, 5.0), rng.uniform_range(-5.0, 5.0)];
    let trajs: Vec<Vec<[f64; 2]>> = (0..k).map(|_| (0..t).map(|_| pt()).collect()).collect();
    let truth: Vec<[f64; 2]> = (0..t).map(|_| pt()).collect();
    let w: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
    let total: f64 = w.iter().sum();
    let mut probs: Vec<f64> = w.iter().map(|x| x / total).collect();
    let rest: f64 = probs[1..].iter().sum();
    probs[0] = 1.0 - rest;
    (trajs, probs, truth)
}

struct Oracle {
    ade: f64,
    fde: f64,
    b_fde: f64,
}

fn oracle(trajs: &[Vec<[f64; 2]>], probs: &[f64], truth: &[[f64; 2]]) -> Oracle {
    let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut ade = f64::INFINITY;
    let (mut fde, mut kstar) = (f64::INFINITY, 0);
    for (k, tr) in trajs.iter().enumerate() {
        let mut s = 0.0;
        for (p, y) in tr.iter().zip(truth) {
            s += d(*p, *y);
        }
        ade = ade.min(s / truth.len() as f64);
        let f = d(*tr.last().unwrap(), *truth.last().unwrap());
        if f < fde {
            fde = f;
            kstar = k;
        }
    }
    Oracle {
        ade,
        fde,
        b_fde: fde + (1.0 - probs[kstar]).powi(2),
    }
}

#[test]
fn thousand_random_sets_match_brute_force() {
    let mut rng = SplitMix64::new(2024);
    let mut per = Vec::new();
    let mut oracles = Vec::new();
    for _ in 0..1000 {
        let (trajs, probs, truth) = random_case(&mut rng);
        let c = set(&trajs, probs.clone());
        let o = oracle(&trajs, &probs, &truth);
        assert!((minade(&c, &truth).unwrap() - o.ade).abs() < 1e-10);
        assert!((minfde(&c, &truth).unwrap() - o.fde).abs() < 1e-10);
        assert!((b_minfde(&c, &truth).unwrap() - o.b_fde).abs() < 1e-10);
        per.push(score(&c, &truth, c.k()).unwrap());
        oracles.push(o);
    }
    let r = EvalReport::aggregate(&per, 6).unwrap();
    let n = oracles.len() as f64;
    let mr = oracles.iter().filter(|o| o.fde > 2.0).count() as f64 / n;
    assert!((r.minade_k - oracles.iter().map(|o| o.ade).sum::<f64>() / n).abs() < 1e-10);
    assert!((r.minfde_k - oracles.iter().map(|o| o.fde).sum::<f64>() / n).abs() < 1e-10);
    assert!((r.b_minfde_k - oracles.iter().map(|o| o.b_fde).sum::<f64>() / n).abs() < 1e-10);
    assert!((r.mr_k - mr).abs() < 1e-10);
    assert_eq!(r.n_scenarios, 1000);
}

#[test]
fn perfect_and_offset_candidates() {
    let truth: Vec<[f64; 2]> = (0..5).map(|i| [i as f64, 0.5 * i as f64]).collect();
    let off: Vec<[f64; 2]> = truth.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
    let one = set(std::slice::from_ref(&off), vec![1.0]);
    assert!((minade(&one, &truth).unwrap() - 5.0).abs() < 1e-12);
    assert!((minfde(&one, &truth).unwrap() - 5.0).abs() < 1e-12);
    let both = set(&[off, truth.clone()], vec![0.5, 0.5]);
    assert_eq!(minade(&both, &truth).unwrap(), 0.0);
    assert_eq!(minfde(&both, &truth).unwrap(), 0.0);
    assert_eq!(b_minfde(&both, &truth).unwrap(), 0.25);
    let sure = set(std::slice::from_ref(&truth), vec![1.0]);
    assert_eq!(b_minfde(&sure, &truth).unwrap(), 0.0);
}

#[test]
fn final_point_displaced_three_meters() {
    let truth: Vec<[f64; 2]> = (0..4).map(|i| [i as f64, 0.0]).collect();
    let mut pred = truth.clone();
    pred[3][1] += 3.0;
    let c = set(&[pred], vec![1.0]);
    assert_eq!(minfde(&c, &truth).unwrap(), 3.0);
    assert!(score(&c, &truth, 1).unwrap().miss);
}

#[test]
fn miss_threshold_is_strict() {
    assert_eq!(miss_rate(&[0.0, 0.0]), 0.0);
    assert_eq!(miss_rate(&[3.0, 3.0, 3.0]), 1.0);
    assert_eq!(miss_rate(&[2.0]), 0.0);
    assert_eq!(miss_rate(&[2.0 + 1e-12]), 1.0);
    let truth = vec![[0.0, 0.0], [0.0, 0.0]];
    let c = set(&[vec![[0.0, 0.0], [2.0, 0.0]]], vec![1.0]);
    assert!(!score(&c, &truth, 1).unwrap().miss);
}

#[test]
fn k_one_keeps_the_argmax_candidate() {
    let truth = vec![[0.0, 0.0], [1.0, 0.0]];
    let good = vec![[0.0, 0.0], [1.0, 0.0]];
    let bad = vec![[0.0, 1.0], [1.0, 3.0]];
    let c = set(&[good.clone(), bad.clone()], vec![0.3, 0.7]);
    let only = set(&[bad], vec![1.0]);
    assert_eq!(score(&c, &truth, 1).unwrap(), score(&only, &truth, 1).unwrap());
    assert_eq!(score(&c, &truth, 2).unwrap().fde, 0.0);
    let top = c.top_k(1).unwrap();
    assert_eq!(top.probabilities, vec![1.0]);
}

#[test]
fn errors() {
    assert!(matches!(EvalReport::aggregate(&[], 6), Err(Error::Config(_))));
    let c = set(&[vec![[0.0, 0.0]; 3]], vec![1.0]);
    assert!(minade(&c, &[[0.0, 0.0]; 2]).is_err());
    assert!(score(&c, &[[0.0, 0.0]; 3], 0).is_err());
}

#[test]
fn report_serialization() {
    let m = ScenarioMetrics {
        ade: 1.0,
        fde: 2.5,
        b_fde: 2.75,
        miss: true,
    };
    let r = EvalReport::aggregate(&[m], 6).unwrap();
    let json = r.to_json();
    assert!(!json.contains('\n'));
    assert!(json.contains("\"K\":6"));
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert_eq!(EvalReport::CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
}

#[test]
fn pairwise_sum_is_accurate() {
    let v = vec![0.1; 1000];
    assert!((pairwise_sum(&v) - 100.0).abs() < 1e-12);
    assert_eq!(pairwise_sum(&[]), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn appending_candidates_never_increases_minima(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let (trajs, _, truth) = random_case(&mut rng);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 1..=trajs.len() {
            let p = vec![1.0 / k as f64; k];
            let c = set(&trajs[..k], p);
            let cur = (minade(&c, &truth).unwrap(), minfde(&c, &truth).unwrap());
            prop_assert!(cur.0 <= prev.0 && cur.1 <= prev.1);
            prev = cur;
        }
    }

    #[test]
    fn brier_term_is_bounded(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let (trajs, probs, truth) = random_case(&mut rng);
        let c = set(&trajs, probs);
        let f = minfde(&c, &truth).unwrap();
        let b = b_minfde(&c, &truth).unwrap();
        prop_assert!(f >= 0.0);
        prop_assert!(b - f >= 0.0 && b - f <= 1.0);
        let (k, d) = best_final(&c, &truth).unwrap();
        prop_assert!(k < c.k() && d == f);
        let r = EvalReport::aggregate(&[score(&c, &truth, c.k()).unwrap()], c.k()).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.mr_k) && r.b_minfde_k >= r.minfde_k);
    }
}
