use proptest::prelude::*;
use shadowprice::arbitrage::{
    build_cps, crossing_times, detect_obvious_arbitrage, twc_curve, ArbitrageSearch, GammaPolicy, PathEnsemble,
    SigmaRule,
};
use shadowprice::fbm::{HurstParameter, ModelSpec};
use shadowprice::tree::{build_fbs_tree, ScenarioTree};

fn corpus_ensembles() -> Vec<(f64, usize, PathEnsemble)> {
    let mut out = Vec::new();
    for h in [0.3, 0.5, 0.7] {
        let m = ModelSpec::new(0.05, 0.2, HurstParameter::new(h).unwrap(), 1.0).unwrap();
        for depth in 1..=8 {
            let tree = build_fbs_tree(&m, depth, 0).unwrap();
            out.push((h, depth, PathEnsemble::from_tree(&tree).unwrap()));
        }
    }
    out
}

#[test]
fn consistent_ensembles_show_no_obvious_arbitrage() {
    for (h, depth, e) in corpus_ensembles() {
        for mu_prime in [0.2, 0.5, 0.9] {
            if build_cps(&e, mu_prime, GammaPolicy::Scan).is_err() {
                continue;
            }
            // any alpha with mu' < alpha / (2 + alpha)
            let alpha = 2.0 * mu_prime / (1.0 - mu_prime) * 1.01;
            let r = detect_obvious_arbitrage(&e, &ArbitrageSearch::new(alpha)).unwrap();
            assert!(!r.found, "H {h} depth {depth} mu' {mu_prime}: {r:?}");
        }
    }
}

#[test]
fn corpus_weights_are_an_equivalent_measure() {
    for (h, depth, e) in corpus_ensembles() {
        let r = build_cps(&e, 0.5, GammaPolicy::Scan).unwrap();
        let mass: f64 = r.weights.iter().zip(e.probs()).map(|(w, p)| w * p).sum();
        assert!((mass - 1.0).abs() < 1e-12, "H {h} depth {depth}: {mass}");
        assert!(r.weights.iter().all(|w| *w > 0.0));
        for (p, stops) in r.stopping_times.iter().enumerate() {
            assert_eq!(stops.len() + 1, r.tilde_at_stops[p].len());
            for (&t, &v) in stops.iter().zip(&r.tilde_at_stops[p][1..]) {
                assert_eq!(v, e.paths()[p][t]);
                assert_eq!(r.tilde[p][t], v);
            }
        }
    }
}

#[test]
fn one_period_tree_is_a_single_stage() {
    let tree = ScenarioTree::one_period(1.0, 1.3, 0.8, 0.5).unwrap();
    let e = PathEnsemble::from_tree(&tree).unwrap();
    let r = build_cps(&e, 0.5, GammaPolicy::Strict).unwrap();
    assert_eq!(r.stages.len(), 1);
    // Q is the unique martingale measure: q (1.3) + (1 - q) 0.8 = 1
    let q_up = 0.4;
    assert!((r.stages[0].q_up - q_up).abs() < 1e-12);
    assert!((r.weights[0] * 0.5 - q_up).abs() < 1e-12);
}

fn path_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.2f64..0.2, 1..30).prop_map(|steps| {
        let mut v = vec![1.0];
        for s in steps {
            let last = *v.last().unwrap();
            v.push(last * (1.0 + s));
        }
        v
    })
}

proptest! {
    #[test]
    fn crossings_follow_sigma(values in path_strategy(), t in 0.0f64..1.0) {
        let times: Vec<f64> = (0..values.len()).map(|k| k as f64 / values.len() as f64).collect();
        let c = crossing_times(&times, &values, SigmaRule::FixedTime { time: t }).unwrap();
        if let Some(s) = c.sigma {
            prop_assert!(times[s] >= t - 1e-12);
            if let Some(p) = c.sigma_plus {
                prop_assert!(p > s && values[p] > values[s]);
                prop_assert!(values[s + 1..p].iter().all(|v| *v <= values[s]));
            }
            if let Some(m) = c.sigma_minus {
                prop_assert!(m > s && values[m] < values[s]);
            }
        } else {
            prop_assert!(c.sigma_plus.is_none() && c.sigma_minus.is_none());
        }
    }

    #[test]
    fn twc_fraction_is_non_increasing(paths in prop::collection::vec(path_strategy(), 1..6), len in 2usize..12) {
        let paths: Vec<Vec<f64>> = paths.into_iter().map(|mut p| { p.resize(len, 1.0); p }).collect();
        let times: Vec<f64> = (0..len).map(|k| k as f64).collect();
        let e = PathEnsemble::new(times, paths).unwrap();
        let eps: Vec<f64> = (0..=2 * len).map(|k| k as f64 * 0.5).collect();
        let curve = twc_curve(&e, SigmaRule::FixedTime { time: 0.0 }, &eps).unwrap();
        for w in curve.windows(2) {
            prop_assert!(w[1].fraction <= w[0].fraction);
        }
        prop_assert_eq!(curve.last().unwrap().fraction, 0.0);
    }

    #[test]
    fn successful_constructions_are_martingales(paths in prop::collection::vec(path_strategy(), 2..8), len in 2usize..10, mu_prime in 0.05f64..0.95) {
        let paths: Vec<Vec<f64>> = paths.into_iter().map(|mut p| { let last = *p.last().unwrap(); p.resize(len, last); p }).collect();
        let times: Vec<f64> = (0..len).map(|k| k as f64).collect();
        let e = PathEnsemble::new(times, paths).unwrap();
        if let Ok(r) = build_cps(&e, mu_prime, GammaPolicy::Scan) {
            prop_assert!(r.max_residual <= 1e-12);
            prop_assert_eq!(r.containment_violation, 0.0);
            prop_assert!(r.weights.iter().all(|w| *w > 0.0));
            let mean = r.weights.iter().sum::<f64>() / r.weights.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
        }
    }
}
