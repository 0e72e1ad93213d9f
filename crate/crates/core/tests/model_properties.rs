use std::sync::Arc;

use proptest::prelude::*;
use shadowprice::fbm::{fbm_covariance, sample_fbm_paths, HurstParameter, ModelSpec, SamplerMethod, TimeGrid};
use shadowprice::ledger::CostSpec;
use shadowprice::tree::{
    build_fbs_tree, extract_shadow, maximize_utility, verify_shadow, ScenarioTree, ShadowTolerances, SolverOptions,
    UtilitySpec,
};

fn solve_and_verify(tree: &ScenarioTree, lambda: f64) -> (Vec<f64>, bool) {
    let cost = CostSpec::new(lambda).unwrap();
    let utility: UtilitySpec = "log".parse().unwrap();
    let r = maximize_utility(tree, cost, &utility, 1.0, &SolverOptions::default()).unwrap();
    let report = extract_shadow(tree, cost, &utility, &r).unwrap();
    let v = verify_shadow(tree, cost, &utility, 1.0, &r, &report, &ShadowTolerances::default());
    (report.shadow_price, v.passed())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn covariance_is_symmetric_and_self_similar(s in 0.0f64..2.0, t in 0.0f64..2.0, c in 0.1f64..5.0, h in 0.05f64..1.0) {
        let h = HurstParameter::new(h).unwrap();
        let st = fbm_covariance(s, t, h).unwrap();
        prop_assert!((st - fbm_covariance(t, s, h).unwrap()).abs() <= 1e-12 * (1.0 + st.abs()));
        let scaled = fbm_covariance(c * s, c * t, h).unwrap();
        prop_assert!((scaled - c.powf(2.0 * h.value()) * st).abs() <= 1e-10 * (1.0 + scaled.abs()));
        prop_assert!((fbm_covariance(t, t, h).unwrap() - t.powf(2.0 * h.value())).abs() <= 1e-12);
        // Cauchy-Schwarz
        prop_assert!(st * st <= fbm_covariance(s, s, h).unwrap() * fbm_covariance(t, t, h).unwrap() + 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic(seed in any::<u64>(), h in 0.1f64..0.95, steps in 2usize..64) {
        let grid = TimeGrid::uniform(1.0, steps).unwrap();
        let h = HurstParameter::new(h).unwrap();
        for method in [SamplerMethod::Cholesky, SamplerMethod::Circulant] {
            let a = sample_fbm_paths(&grid, h, 3, seed, method).unwrap();
            let b = sample_fbm_paths(&grid, h, 3, seed, method).unwrap();
            prop_assert_eq!(&a, &b);
            for p in &a {
                prop_assert_eq!(p.values[0], 0.0);
                prop_assert_eq!(p.values.len(), steps + 1);
            }
        }
    }

    #[test]
    fn fbs_trees_are_well_formed(h in 0.1f64..0.7, depth in 1usize..7) {
        let model = ModelSpec::new(0.05, 0.2, HurstParameter::new(h).unwrap(), 1.0).unwrap();
        let tree = build_fbs_tree(&model, depth, 0).unwrap();
        prop_assert_eq!(tree.depth(), depth);
        prop_assert_eq!(tree.leaves().len(), 1 << depth);
        prop_assert!(tree.arbitrage_node().is_none());
        for n in tree.nodes() {
            prop_assert!(n.price > 0.0);
            if !n.children.is_empty() {
                let mass: f64 = n.children.iter().map(|&c| tree.node(c).prob).sum();
                prop_assert!((mass - 1.0).abs() < 1e-12);
            }
        }
        let leaf_mass: f64 = tree.leaves().iter().map(|&l| tree.reach_prob(l)).sum();
        prop_assert!((leaf_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_period_shadow_prices_verify(up in 1.01f64..1.6, down in 0.5f64..0.99, p in 0.1f64..0.9, lambda in 0.001f64..0.3) {
        let tree = ScenarioTree::one_period(1.0, up, down, p).unwrap();
        let (price, passed) = solve_and_verify(&tree, lambda);
        prop_assert!(passed);
        for (n, s) in tree.nodes().iter().zip(&price) {
            prop_assert!(*s >= (1.0 - lambda) * n.price - 1e-8 && *s <= n.price + 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn log_utility_shadow_prices_verify_on_fbs_trees(h in 0.2f64..0.8, depth in 1usize..5, lambda in 0.005f64..0.2) {
        let model = ModelSpec::new(0.05, 0.2, HurstParameter::new(h).unwrap(), 1.0).unwrap();
        let tree = build_fbs_tree(&model, depth, 0).unwrap();
        let (_, passed) = solve_and_verify(&tree, lambda);
        prop_assert!(passed);
    }
}

#[test]
fn persistent_deep_trees_admit_frictionless_arbitrage() {
    let model = |h| ModelSpec::new(0.05, 0.2, HurstParameter::new(h).unwrap(), 1.0).unwrap();
    assert!(build_fbs_tree(&model(0.69), 8, 0).unwrap().arbitrage_node().is_none());
    let tree = build_fbs_tree(&model(0.7), 8, 0).unwrap();
    let node = tree.node(tree.arbitrage_node().unwrap());
    assert_eq!(node.time_index, 7);
    assert!(node.children.iter().all(|&c| tree.node(c).price > node.price));
    assert!(build_fbs_tree(&model(0.9), 2, 0).unwrap().arbitrage_node().is_some());
}

#[test]
fn sampled_paths_share_the_grid() {
    let grid = Arc::new(TimeGrid::uniform(1.0, 4).unwrap());
    let paths = sample_fbm_paths(&grid, HurstParameter::new(0.5).unwrap(), 2, 0, SamplerMethod::Cholesky).unwrap();
    assert!(paths.iter().all(|p| p.grid.points() == grid.points()));
}
