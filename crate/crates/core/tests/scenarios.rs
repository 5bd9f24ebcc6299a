mod common;

use cbcp_core::design::{dense_sample, GridSpec, ObjectiveSpec};
use cbcp_core::equilibrium::{solve_equilibrium, verify_equilibrium, SolverOptions};
use cbcp_core::io::{instance_to_json, parse_instance_json};
use cbcp_core::model::{Edge, EdgeId, Eligibility, FlowPattern, Instance, LatencyFunction, Scheme, UserGroup, EXPRESS};
use cbcp_core::statics::{detect_substitutes_violation, toll_sweep, TollTarget};
use common::{pigou_split, random_instance, random_scheme, Shape};

fn pigou(groups: Vec<UserGroup>, horizon: usize) -> Instance {
    Instance::new(
        [
            Edge { id: EdgeId::Express, latency: LatencyFunction::piecewise_linear(10.0, 0.5, 2.0, 4.0).unwrap() },
            Edge { id: EdgeId::Gp, latency: LatencyFunction::piecewise_linear(12.0, 0.5, 4.0, 1.0).unwrap() },
        ],
        groups,
        horizon,
        true,
    )
    .unwrap()
}

fn ineligible(id: &str, demand: f64, vot: Vec<f64>) -> UserGroup {
    UserGroup { id: id.into(), eligibility: Eligibility::Ineligible, demand, vot }
}

#[test]
fn untolled_split_matches_bisection() {
    let inst = pigou(vec![ineligible("a", 3.0, vec![30.0])], 1);
    let scheme = Scheme::new(vec![0.0], 0.0).unwrap();
    let rep = solve_equilibrium(&inst, &scheme, &SolverOptions { gap_tol: 1e-12, ..Default::default() }).unwrap();
    let expected = pigou_split(inst.latency_fn(0), inst.latency_fn(1), 3.0).unwrap();
    assert!((rep.edge_flows.x[EXPRESS][0] - expected).abs() < 1e-6, "{} vs {expected}", rep.edge_flows.x[EXPRESS][0]);
    let v = verify_equilibrium(&inst, &scheme, &rep.flow, 1e-6).unwrap();
    assert!(v.is_eq);
}

#[test]
fn hand_split_away_from_equilibrium_is_rejected() {
    let inst = pigou(vec![ineligible("a", 3.0, vec![30.0])], 1);
    let scheme = Scheme::new(vec![0.0], 0.0).unwrap();
    let all_express = FlowPattern::from_express(&inst, &[vec![3.0]]);
    let v = verify_equilibrium(&inst, &scheme, &all_express, 1e-6).unwrap();
    assert!(!v.is_eq);
    assert_eq!(v.worst_group, Some(0));
}

#[test]
fn toll_on_one_period_leaves_others_alone_without_eligible_users() {
    let inst =
        pigou(vec![ineligible("a", 2.0, vec![30.0, 40.0, 25.0]), ineligible("b", 1.0, vec![60.0, 50.0, 70.0])], 3);
    let base = Scheme::new(vec![1.0, 1.0, 1.0], 0.0).unwrap();
    let opts = SolverOptions { gap_tol: 1e-12, ..Default::default() };
    let sweep = toll_sweep(&inst, &base, TollTarget::Period(1), &[0.0, 1.0, 2.0, 4.0, 8.0], &opts).unwrap();
    assert!(sweep.all_monotone());
    for flows in &sweep.express_flows {
        for t in [0, 2] {
            assert!((flows[t] - sweep.express_flows[0][t]).abs() < 1e-6);
        }
    }
    let check = detect_substitutes_violation(&inst, &base, 1, 2.0, &opts).unwrap();
    assert!(!check.violated);
}

#[test]
fn uniform_toll_sweep_sets_every_period() {
    let inst = random_instance(42, Shape { groups: 3, horizon: 3, unit_demand: false, reg_eps: None });
    let base = random_scheme(42, 3);
    let sweep = toll_sweep(&inst, &base, TollTarget::All, &[0.5, 2.0, 6.0], &SolverOptions::default()).unwrap();
    for (s, v) in sweep.schemes.iter().zip(&sweep.parameter_values) {
        assert!(s.tolls.iter().all(|t| t == v));
        assert_eq!(s.budget, base.budget);
    }
    assert!(sweep.monotone_flags.iter().all(Option::is_some));
}

#[test]
fn instance_json_round_trip_preserves_solution() {
    let inst = random_instance(7, Shape { groups: 4, horizon: 3, unit_demand: false, reg_eps: Some(1e-6) });
    let back = parse_instance_json(&instance_to_json(&inst)).unwrap();
    assert_eq!(back, inst);
    let scheme = random_scheme(7, 3);
    let a = solve_equilibrium(&inst, &scheme, &SolverOptions::default()).unwrap();
    let b = solve_equilibrium(&back, &scheme, &SolverOptions::default()).unwrap();
    assert_eq!(a.flow, b.flow);
}

#[test]
fn solves_are_deterministic() {
    let inst = random_instance(11, Shape { groups: 5, horizon: 4, unit_demand: false, reg_eps: None });
    let scheme = random_scheme(11, 4);
    let opts = SolverOptions { seed: Some(3), ..Default::default() };
    let a = solve_equilibrium(&inst, &scheme, &opts).unwrap();
    let b = solve_equilibrium(&inst, &scheme, &opts).unwrap();
    assert_eq!(a.flow, b.flow);
    assert_eq!(a.iterations, b.iterations);
}

#[test]
fn finer_nested_grid_never_does_worse() {
    let inst = random_instance(21, Shape { groups: 4, horizon: 2, unit_demand: false, reg_eps: None });
    let objective = ObjectiveSpec::pareto(1.0, 1.0, 1.0).unwrap();
    let opts = SolverOptions::default();
    let coarse =
        dense_sample(&inst, &GridSpec::time_invariant([0.0, 8.0], [0.0, 8.0], 2.0), &objective, &opts).unwrap();
    let fine = dense_sample(&inst, &GridSpec::time_invariant([0.0, 8.0], [0.0, 8.0], 1.0), &objective, &opts).unwrap();
    assert_eq!(coarse.entries.len(), 25);
    assert_eq!(fine.entries.len(), 81);
    assert!(fine.best_cost <= coarse.best_cost + 1e-9 * (1.0 + coarse.best_cost.abs()));
}
