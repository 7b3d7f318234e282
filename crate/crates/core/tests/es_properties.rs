use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use signalopt::es::{
    draw_conditioned_variance, es_update, rank_shape, run_es_with, sample_delta_conditioned_variance,
    sample_delta_least_phases, EsConfig, PerturbationScheme,
};
use signalopt::plan::{validate_plan, IntersectionSpec, PhaseSpec};
use signalopt::SignalPlan;

fn specs(shape: &[usize], min: u32, max: u32) -> Vec<IntersectionSpec> {
    shape
        .iter()
        .enumerate()
        .map(|(id, &n)| IntersectionSpec {
            id,
            phases: (0..n).map(|_| PhaseSpec { min_len: min, max_len: max, movements: vec![] }).collect(),
        })
        .collect()
}

#[test]
fn ten_thousand_draws_stay_valid_on_two_intersections() {
    let sp = specs(&[2, 3], 10, 60);
    // Start close to the bounds so clipping and repair engage often.
    let plan = SignalPlan::new(vec![vec![12, 58], vec![10, 50, 10]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for k in 0..10_000 {
        let d = if k % 2 == 0 {
            sample_delta_least_phases(&plan, &sp, 2, 6.0, &mut rng).unwrap()
        } else {
            sample_delta_conditioned_variance(&plan, &sp, 2, 6.0, &mut rng).unwrap()
        };
        assert!(d.preserves_cycle_equality(), "{d:?}");
        let moved = signalopt::plan::apply_delta(&plan, &d, &sp, 2).unwrap();
        assert!(validate_plan(&moved, &sp, 2).unwrap().is_ok());
        assert_eq!(moved.delta_from(&plan).unwrap(), d);
    }
}

#[test]
fn anchor_sum_variance_matches_sigma_squared() {
    // Before clipping, the anchor's total is a sum of n_i draws with
    // variance σ²/n_i each.
    let sigma = 3.0;
    let shape = [5, 3, 2, 2, 2];
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sums: Vec<f64> = (0..n)
        .map(|_| {
            let raw = draw_conditioned_variance(&shape, sigma, &mut rng);
            raw.sums()[raw.anchor]
        })
        .collect();
    let mean = sums.iter().sum::<f64>() / n as f64;
    let var = sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let target = sigma * sigma;
    let se = target * (2.0 / (n - 1) as f64).sqrt();
    assert!((var - target).abs() < 3.0 * se, "variance {var} vs {target} (se {se})");
}

#[test]
fn non_anchor_free_phases_use_sigma_over_phase_count() {
    let sigma = 4.0;
    let shape = [5, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut xs = vec![];
    while xs.len() < 10_000 {
        let raw = draw_conditioned_variance(&shape, sigma, &mut rng);
        if raw.anchor == 1 {
            xs.extend_from_slice(&raw.values[0][..4]);
        }
    }
    let n = xs.len() as f64;
    let var = xs.iter().map(|x| x * x).sum::<f64>() / n;
    let target = (sigma / 5.0).powi(2);
    let se = target * (2.0 / n).sqrt();
    assert!((var - target).abs() < 3.0 * se, "variance {var} vs {target}");
}

#[test]
fn update_direction_points_uphill_on_a_quadratic() {
    // F(θ) = -|θ - θ*|²; the search gradient should align with θ* - θ.
    let dim = 12;
    let sigma = 0.5;
    let trials = 200;
    let mut positive = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let theta: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng) * 3.0).collect();
        let target: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng) * 3.0).collect();
        let f = |x: &[f64]| -x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let mut deltas = vec![];
        let mut fit = vec![];
        for _ in 0..10 {
            let e: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng) * sigma).collect();
            let plus: Vec<f64> = theta.iter().zip(&e).map(|(a, b)| a + b).collect();
            let minus: Vec<f64> = theta.iter().zip(&e).map(|(a, b)| a - b).collect();
            fit.push(f(&plus));
            fit.push(f(&minus));
            deltas.push(e.clone());
            deltas.push(e.iter().map(|x| -x).collect());
        }
        let u = rank_shape(&fit).unwrap();
        let next = es_update(&theta, &deltas, &u, 1.0, sigma, deltas.len()).unwrap();
        let dot: f64 = next
            .iter()
            .zip(&theta)
            .zip(&target)
            .map(|((n, t), s)| (n - t) * (s - t))
            .sum();
        if dot > 0.0 {
            positive += 1;
        }
    }
    assert!(positive as f64 >= 0.95 * trials as f64, "{positive}/{trials}");
}

#[test]
fn thirty_generations_of_ten_pairs_use_six_hundred_queries() {
    let sp = specs(&[2, 2], 10, 80);
    let init = SignalPlan::new(vec![vec![30, 30], vec![20, 40]]).unwrap();
    let calls = std::sync::atomic::AtomicUsize::new(0);
    let cfg = EsConfig { generations: 30, pairs_per_generation: 10, ..EsConfig::default() };
    let out = run_es_with(&init, &sp, 2, &cfg, |p| {
        calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        Ok(-((p.intersection(0)[0] as f64) - 40.0).powi(2))
    })
    .unwrap();
    assert_eq!(calls.into_inner(), 600);
    assert_eq!(out.queries, 600);
    for (g, r) in out.records.iter().enumerate() {
        assert_eq!(r.queries, 2 * 10 * (g + 1));
    }
}

#[test]
fn runs_are_reproducible_and_emit_valid_plans() {
    let sp = specs(&[3, 2], 10, 90);
    let init = SignalPlan::new(vec![vec![20, 20, 20], vec![30, 30]]).unwrap();
    let fitness = |p: &SignalPlan| -> signalopt::Result<f64> {
        assert!(validate_plan(p, &sp, 2).unwrap().is_ok());
        let t = p.flatten();
        Ok(-((t[0] as f64 - 40.0).powi(2) + (t[3] as f64 - 15.0).powi(2) + p.cycle_length() as f64))
    };
    for scheme in [PerturbationScheme::LeastPhases, PerturbationScheme::ConditionedVariance] {
        let cfg = EsConfig { generations: 15, scheme, seed: 3, sigma: 4.0, learning_rate: 4.0, ..EsConfig::default() };
        let a = run_es_with(&init, &sp, 2, &cfg, fitness).unwrap();
        let b = run_es_with(&init, &sp, 2, &cfg, fitness).unwrap();
        assert_eq!(a, b);
        for r in &a.records {
            assert!(validate_plan(&r.plan, &sp, 2).unwrap().is_ok());
        }
        assert!(a.best_fitness > fitness(&init).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_shape_ignores_monotone_transforms(xs in prop::collection::vec(-50.0f64..50.0, 2..20)) {
        let a = rank_shape(&xs).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| (x / 10.0).exp() * 3.0 - 7.0).collect();
        let b = rank_shape(&ys).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rank_shape_is_centered(xs in prop::collection::vec(-50.0f64..50.0, 2..20)) {
        let u = rank_shape(&xs).unwrap();
        prop_assert!(u.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(u.iter().all(|v| (-0.5..=0.5).contains(v)));
    }

    #[test]
    fn sampled_deltas_keep_desk_plans_valid(seed in any::<u64>(), sigma in 0.5f64..20.0, scheme in any::<bool>()) {
        let spec = signalopt::scenario::desk_network();
        let plan = signalopt::scenario::desk_initial_plan();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = if scheme {
            sample_delta_least_phases(&plan, &spec.intersections, 2, sigma, &mut rng).unwrap()
        } else {
            sample_delta_conditioned_variance(&plan, &spec.intersections, 2, sigma, &mut rng).unwrap()
        };
        let (p, m) = signalopt::es::antithetic_pair(&d, &plan, &spec.intersections, 2).unwrap();
        prop_assert!(validate_plan(&p, &spec.intersections, 2).unwrap().is_ok());
        prop_assert!(validate_plan(&m, &spec.intersections, 2).unwrap().is_ok());
    }
}
