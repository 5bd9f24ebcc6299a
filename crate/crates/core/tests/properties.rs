mod common;

use cbcp_core::best_response::{best_response, fractional_knapsack, ineligible_best_response};
use cbcp_core::equilibrium::{potential, solve_equilibrium, SolverOptions};
use cbcp_core::model::{aggregate_edge_flows, EdgeFlows, FlowPattern, LatencyFunction, Scheme, EXPRESS, GP};
use common::{knapsack_exhaustive, latency_area, random_instance, random_scheme, Shape};
use proptest::prelude::*;

fn pwl() -> impl Strategy<Value = LatencyFunction> {
    (1.0..30.0f64, 0.1..1.0f64, 0.5..50.0f64, 0.0..5.0f64)
        .prop_map(|(l0, lambda, kappa, beta)| LatencyFunction::piecewise_linear(l0, lambda, kappa, beta).unwrap())
}

fn knapsack() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (1usize..=6).prop_flat_map(|t| {
        (prop::collection::vec(-5.0..10.0f64, t), prop::collection::vec(0.0..10.0f64, t), 0.0..40.0f64)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn latency_is_nondecreasing(l in pwl(), a in 0.0..100.0f64, b in 0.0..100.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(l.latency(lo).unwrap() <= l.latency(hi).unwrap() + 1e-12);
    }

    #[test]
    fn integral_matches_quadrature(l in pwl(), x in 0.0..100.0f64) {
        let exact = l.latency_integral(x).unwrap();
        prop_assert!((exact - latency_area(&l, x)).abs() <= 1e-8 * (1.0 + exact.abs()));
    }

    #[test]
    fn greedy_knapsack_is_optimal((savings, tolls, budget) in knapsack()) {
        let z = fractional_knapsack(&savings, &tolls, budget);
        let spend: f64 = z.iter().zip(&tolls).map(|(z, t)| z * t).sum();
        prop_assert!(spend <= budget + 1e-9);
        prop_assert!(z.iter().all(|&z| (0.0..=1.0).contains(&z)));
        let value: f64 = z.iter().zip(&savings).map(|(z, s)| z * s).sum();
        prop_assert!((value - knapsack_exhaustive(&savings, &tolls, budget)).abs() <= 1e-9);
    }

    #[test]
    fn eligible_cost_nonincreasing_in_budget(seed in 0u64..10_000, extra in 0.0..20.0f64) {
        let inst = random_instance(seed, Shape { groups: 2, horizon: 4, unit_demand: false, reg_eps: None });
        let scheme = random_scheme(seed, 4);
        let x = aggregate_edge_flows(&FlowPattern::all_gp(&inst));
        let richer = Scheme::new(scheme.tolls.clone(), scheme.budget + extra).unwrap();
        let eligible = &inst.groups()[0];
        let lo = best_response(&inst, &x, &scheme, eligible).cost;
        let hi = best_response(&inst, &x, &richer, eligible).cost;
        prop_assert!(hi <= lo + 1e-9);
    }

    #[test]
    fn ineligible_choice_invariant_to_vot_and_toll_scaling(
        seed in 0u64..10_000,
        k in 0.1..10.0f64,
        flows in prop::collection::vec(0.0..3.0f64, 3),
    ) {
        let inst = random_instance(seed, Shape { groups: 2, horizon: 3, unit_demand: false, reg_eps: None });
        let scheme = random_scheme(seed, 3);
        let d = inst.total_demand();
        let x = EdgeFlows { x: [flows.iter().map(|f| f.min(d)).collect(), flows.iter().map(|f| d - f.min(d)).collect()] };
        let vot = &inst.groups()[1].vot;
        let scaled_vot: Vec<f64> = vot.iter().map(|v| v * k).collect();
        let scaled = Scheme::new(scheme.tolls.iter().map(|t| t * k).collect(), scheme.budget).unwrap();
        let a = ineligible_best_response(&inst, &x, &scheme, vot);
        let b = ineligible_best_response(&inst, &x, &scaled, &scaled_vot);
        prop_assert_eq!(a.express, b.express);
        prop_assert!((b.cost - k * a.cost).abs() <= 1e-9 * (1.0 + b.cost.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn solver_potential_never_increases(seed in 0u64..10_000, groups in 2usize..6, horizon in 1usize..5) {
        let inst = random_instance(seed, Shape { groups, horizon, unit_demand: false, reg_eps: None });
        let scheme = random_scheme(seed, horizon);
        let rep = solve_equilibrium(&inst, &scheme, &SolverOptions::default()).unwrap();
        for w in rep.potential_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()));
        }
        let direct = potential(&inst, &scheme, &rep.flow).unwrap();
        prop_assert!((direct - rep.potential).abs() <= 1e-8 * (1.0 + direct.abs()));
    }

    #[test]
    fn edge_flows_are_the_sum_of_group_flows(seed in 0u64..10_000, groups in 2usize..6, horizon in 1usize..5) {
        let inst = random_instance(seed, Shape { groups, horizon, unit_demand: false, reg_eps: None });
        let scheme = random_scheme(seed, horizon);
        let rep = solve_equilibrium(&inst, &scheme, &SolverOptions::default()).unwrap();
        for t in 0..horizon {
            let mut sums = [0.0; 2];
            for f in &rep.flow.flows {
                sums[EXPRESS] += f[EXPRESS][t];
                sums[GP] += f[GP][t];
            }
            for e in [EXPRESS, GP] {
                prop_assert!((sums[e] - rep.edge_flows.x[e][t]).abs() <= 1e-9 * inst.total_demand());
            }
            prop_assert!((sums[EXPRESS] + sums[GP] - inst.total_demand()).abs() <= 1e-9 * inst.total_demand());
        }
    }
}
