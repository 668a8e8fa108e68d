use proptest::prelude::*;

use clusterdp::accounting::{calibrate, cluster_dp_eps_delta, cluster_dp_pure_eps, prior_budget};
use clusterdp::estimation::{build_q, debias_row};
use clusterdp::mechanisms::{projected_prior, renormalize, ArmHistogram};
use clusterdp::variance::{baseline_gaps, ht_variance};
use clusterdp::{DesignCounts, Extended, OutcomeSpace, PopulationDataset};

fn sigma_strategy() -> impl Strategy<Value = Extended> {
    prop_oneof![(0.05f64..50.0).prop_map(Extended::Finite), Just(Extended::Infinite)]
}

fn population_strategy() -> impl Strategy<Value = PopulationDataset> {
    (2usize..6, prop::collection::vec(2usize..8, 1..4)).prop_flat_map(|(k, sizes)| {
        let n: usize = sizes.iter().sum();
        (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n)).prop_map(move |(y0, y1)| {
            let space = OutcomeSpace::new((0..k).map(|v| v as f64).collect()).unwrap();
            let clusters = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
            PopulationDataset::from_indices(space, clusters, y0, y1).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn projected_prior_is_a_floored_distribution(
        labels in prop::collection::vec(0usize..6, 1..60),
        noise in prop::collection::vec(-2.0f64..2.0, 6),
        frac in 0.0f64..=1.0,
    ) {
        let gamma = frac / 6.0;
        let q = projected_prior(&ArmHistogram::from_outcomes(labels, 6), gamma, &noise);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.iter().all(|&v| v >= gamma - 1e-12 && v <= 1.0 + 1e-12));
    }

    #[test]
    fn renormalize_keeps_distributions(raw in prop::collection::vec(0.01f64..1.0, 2..10)) {
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let gamma = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let q = renormalize(&p, gamma);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_round_trips(
        gamma in 0.001f64..0.5,
        sigma in sigma_strategy(),
        extra in 0.01f64..8.0,
        delta in 0.0f64..0.1,
    ) {
        let prior = prior_budget(gamma, sigma).finite().unwrap();
        let target = prior + extra;
        let cal = calibrate(target, delta, gamma, sigma).unwrap();
        let report = cluster_dp_eps_delta(gamma, sigma, cal.lambda, target - prior);
        prop_assert!((report.epsilon.finite().unwrap() - target).abs() < 1e-9);
        prop_assert!((report.delta - delta).abs() < 1e-12);
        prop_assert!(calibrate(prior * 0.999, delta, gamma, sigma).unwrap_err().is_infeasible_calibration());
    }

    #[test]
    fn pure_epsilon_decreases_in_lambda(gamma in 0.001f64..0.5, sigma in sigma_strategy(), a in 0.01f64..0.98) {
        let b = a + 0.01;
        let ea = cluster_dp_pure_eps(gamma, sigma, a).finite().unwrap();
        let eb = cluster_dp_pure_eps(gamma, sigma, b).finite().unwrap();
        prop_assert!(eb <= ea + 1e-12);
    }

    #[test]
    fn debias_row_inverts_q(raw in prop::collection::vec(0.01f64..1.0, 2..8), lambda in 0.0f64..0.99) {
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let k = q.len();
        let space = OutcomeSpace::new((0..k).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        let row = debias_row(&space, &q, lambda).unwrap();
        let m = build_q(&q, lambda).unwrap();
        for j in 0..k {
            let back: f64 = (0..k).map(|i| row[i] * m.entry(i, j)).sum();
            prop_assert!((back - space.value(j)).abs() < 1e-9);
        }
    }

    #[test]
    fn ht_variance_is_nonnegative(pop in population_strategy()) {
        let counts = DesignCounts::balanced(&pop.cluster_sizes()).unwrap();
        prop_assert!(ht_variance(&pop, &counts).unwrap() >= -1e-12);
    }

    #[test]
    fn noisy_ht_gap_never_exceeds_histogram_gap(pop in population_strategy(), eps in 0.05f64..10.0) {
        let counts = DesignCounts::balanced(&pop.cluster_sizes()).unwrap();
        let gaps = baseline_gaps(&pop, &counts, Extended::Finite(eps)).unwrap();
        prop_assert!(gaps.noisy_ht <= gaps.noisy_histogram * (1.0 + 1e-12));
    }
}
