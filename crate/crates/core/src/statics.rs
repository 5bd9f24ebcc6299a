//! Comparative statics: toll and budget sweeps, the two counterexample
//! constructions, and a continuity probe.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::cost_terms;
use crate::equilibrium::{solve_equilibrium, EquilibriumError, EquilibriumReport, SolverOptions};
use crate::model::{Edge, EdgeId, Eligibility, Instance, LatencyFunction, ModelError, Scheme, UserGroup, EXPRESS};

#[derive(Debug, Error)]
pub enum StaticsError {
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("solver did not converge at parameter value {0}")]
    NonConvergence(f64),
    #[error("invalid sweep: {0}")]
    Sweep(String),
    #[error("counterexample construction failed: {0}")]
    Construction(String),
}

/// Relative tolerance (times total demand) for monotonicity and substitutes checks.
pub const FLOW_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TollTarget {
    Period(usize),
    /// Uniform change of every period's toll.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter_values: Vec<f64>,
    /// `express_flows[k][t]`: express edge flow at the k-th value.
    pub express_flows: Vec<Vec<f64>>,
    /// Total eligible travel cost ($) at each value.
    pub eligible_costs: Vec<f64>,
    /// Per period; `None` for periods a toll sweep does not test.
    pub monotone_flags: Vec<Option<bool>>,
    #[serde(skip)]
    pub schemes: Vec<Scheme>,
    #[serde(skip)]
    pub reports: Vec<EquilibriumReport>,
}

impl SweepResult {
    pub fn all_monotone(&self) -> bool {
        self.monotone_flags.iter().all(|f| f.unwrap_or(true))
    }
}

fn check_ascending(values: &[f64]) -> Result<(), StaticsError> {
    if values.is_empty() {
        return Err(StaticsError::Sweep("no parameter values".into()));
    }
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(StaticsError::Sweep("parameter values must be finite and nonnegative".into()));
    }
    if values.windows(2).any(|w| w[1] < w[0]) {
        return Err(StaticsError::Sweep("parameter values must be ascending".into()));
    }
    Ok(())
}

fn run_sweep(
    instance: &Instance,
    values: &[f64],
    schemes: Vec<Scheme>,
    opts: &SolverOptions,
) -> Result<(Vec<EquilibriumReport>, Vec<Vec<f64>>, Vec<f64>), StaticsError> {
    let reports: Vec<EquilibriumReport> = schemes
        .par_iter()
        .zip(values.par_iter())
        .map(|(scheme, &v)| {
            let report = solve_equilibrium(instance, scheme, opts)?;
            if !report.converged {
                return Err(StaticsError::NonConvergence(v));
            }
            Ok(report)
        })
        .collect::<Result<_, _>>()?;
    let flows = reports.iter().map(|r| r.edge_flows.x[EXPRESS].clone()).collect();
    let costs =
        reports.iter().zip(&schemes).map(|(r, s)| cost_terms(instance, s, &r.flow, &r.edge_flows).eligible).collect();
    Ok((reports, flows, costs))
}

fn monotone(flows: &[Vec<f64>], t: usize, tol: f64, increasing: bool) -> bool {
    flows.windows(2).all(|w| if increasing { w[1][t] >= w[0][t] - tol } else { w[1][t] <= w[0][t] + tol })
}

/// Re-solves from scratch at every toll value; flags whether the express
/// flow of the swept period(s) is non-increasing.
pub fn toll_sweep(
    instance: &Instance,
    base: &Scheme,
    target: TollTarget,
    values: &[f64],
    opts: &SolverOptions,
) -> Result<SweepResult, StaticsError> {
    base.check_for(instance)?;
    check_ascending(values)?;
    let horizon = instance.horizon();
    if let TollTarget::Period(t) = target {
        if t >= horizon {
            return Err(StaticsError::Sweep(format!("period {t} outside horizon {horizon}")));
        }
    }
    let schemes: Vec<Scheme> = values
        .iter()
        .map(|&v| {
            let mut tolls = base.tolls.clone();
            match target {
                TollTarget::Period(t) => tolls[t] = v,
                TollTarget::All => tolls.iter_mut().for_each(|x| *x = v),
            }
            Scheme::new(tolls, base.budget)
        })
        .collect::<Result<_, _>>()?;
    let (reports, flows, costs) = run_sweep(instance, values, schemes.clone(), opts)?;
    let tol = FLOW_TOL * instance.total_demand();
    let monotone_flags = (0..horizon)
        .map(|t| match target {
            TollTarget::Period(p) if p != t => None,
            _ => Some(monotone(&flows, t, tol, false)),
        })
        .collect();
    Ok(SweepResult {
        parameter_values: values.to_vec(),
        express_flows: flows,
        eligible_costs: costs,
        monotone_flags,
        schemes,
        reports,
    })
}

/// Re-solves at every budget value; flags whether each period's express
/// flow is non-decreasing.
pub fn budget_sweep(
    instance: &Instance,
    base: &Scheme,
    values: &[f64],
    opts: &SolverOptions,
) -> Result<SweepResult, StaticsError> {
    base.check_for(instance)?;
    check_ascending(values)?;
    let schemes: Vec<Scheme> = values.iter().map(|&b| Scheme::new(base.tolls.clone(), b)).collect::<Result<_, _>>()?;
    let (reports, flows, costs) = run_sweep(instance, values, schemes.clone(), opts)?;
    let tol = FLOW_TOL * instance.total_demand();
    let monotone_flags = (0..instance.horizon()).map(|t| Some(monotone(&flows, t, tol, true))).collect();
    Ok(SweepResult {
        parameter_values: values.to_vec(),
        express_flows: flows,
        eligible_costs: costs,
        monotone_flags,
        schemes,
        reports,
    })
}

/// Long-format CSV: `parameter,period,express_flow,eligible_cost,monotone`.
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["parameter", "period", "express_flow", "eligible_cost", "monotone"]).expect("in-memory write");
    for (k, v) in result.parameter_values.iter().enumerate() {
        for (t, x) in result.express_flows[k].iter().enumerate() {
            w.write_record([
                v.to_string(),
                t.to_string(),
                x.to_string(),
                result.eligible_costs[k].to_string(),
                result.monotone_flags[t].map(|f| f.to_string()).unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutesCheck {
    pub violated: bool,
    /// Period whose express flow fell the most.
    pub witness_period: Option<usize>,
    /// Size of that drop.
    pub magnitude: f64,
}

/// Raises the toll of `period` by `delta` and reports whether the express
/// flow of some other period fell by more than `1e-4 · total demand`.
pub fn detect_substitutes_violation(
    instance: &Instance,
    scheme: &Scheme,
    period: usize,
    delta: f64,
    opts: &SolverOptions,
) -> Result<SubstitutesCheck, StaticsError> {
    scheme.check_for(instance)?;
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(StaticsError::Sweep("delta must be nonnegative".into()));
    }
    if period >= instance.horizon() {
        return Err(StaticsError::Sweep(format!("period {period} outside horizon {}", instance.horizon())));
    }
    let mut raised = scheme.tolls.clone();
    raised[period] += delta;
    let raised = Scheme::new(raised, scheme.budget)?;
    let base = solve_equilibrium(instance, scheme, opts)?;
    let after = if delta == 0.0 { base.clone() } else { solve_equilibrium(instance, &raised, opts)? };
    for (r, v) in [(&base, 0.0), (&after, delta)] {
        if !r.converged {
            return Err(StaticsError::NonConvergence(v));
        }
    }
    let tol = FLOW_TOL * instance.total_demand();
    let mut witness = None;
    let mut magnitude = 0.0;
    for t in (0..instance.horizon()).filter(|&t| t != period) {
        let drop = base.edge_flows.x[EXPRESS][t] - after.edge_flows.x[EXPRESS][t];
        if drop > magnitude {
            magnitude = drop;
            witness = Some(t);
        }
    }
    Ok(SubstitutesCheck { violated: magnitude > tol, witness_period: witness, magnitude })
}

#[derive(Debug, Clone)]
pub struct SubstitutesCounterexample {
    pub instance: Instance,
    pub scheme: Scheme,
    pub perturbed: Scheme,
    /// `(raised period, witness period)`, zero-based.
    pub period_pair: (usize, usize),
    pub epsilon: f64,
    pub check: SubstitutesCheck,
}

/// Two periods with equal toll 1 and budget 1.5. One eligible group (mass 1,
/// VoT $60/h) and one ineligible group (mass 1) whose VoT of $120/h in the
/// first period always favours express and whose $6/h in the second never
/// does, with at least 10% margin over all flows in [0, 2].
pub fn substitutes_instance() -> (Instance, Scheme) {
    let l1 = LatencyFunction::piecewise_linear(1.0, 0.5, 1.0, 0.5).expect("valid latency");
    let l2 = LatencyFunction::piecewise_linear(2.5, 0.2, 1.0, 2.0).expect("valid latency");
    let instance = Instance::new(
        [Edge { id: EdgeId::Express, latency: l1 }, Edge { id: EdgeId::Gp, latency: l2 }],
        vec![
            UserGroup { id: "eligible".into(), eligibility: Eligibility::Eligible, demand: 1.0, vot: vec![60.0, 60.0] },
            UserGroup {
                id: "ineligible".into(),
                eligibility: Eligibility::Ineligible,
                demand: 1.0,
                vot: vec![120.0, 6.0],
            },
        ],
        2,
        true,
    )
    .expect("valid instance");
    (instance, Scheme::new(vec![1.0, 1.0], 1.5).expect("valid scheme"))
}

/// Searches `ε = 1e-3, 2e-3, …` for a raise of the second toll to `τ(1+ε)`
/// that lowers the first period's express flow.
pub fn build_substitutes_counterexample(opts: &SolverOptions) -> Result<SubstitutesCounterexample, StaticsError> {
    let (instance, scheme) = substitutes_instance();
    let tau = scheme.tolls[1];
    let mut eps = 1e-3;
    while eps <= 0.5 {
        let check = detect_substitutes_violation(&instance, &scheme, 1, tau * eps, opts)?;
        if check.violated && check.witness_period == Some(0) {
            let perturbed = Scheme::new(vec![scheme.tolls[0], tau * (1.0 + eps)], scheme.budget)?;
            return Ok(SubstitutesCounterexample {
                instance,
                scheme,
                perturbed,
                period_pair: (1, 0),
                epsilon: eps,
                check,
            });
        }
        eps *= 2.0;
    }
    Err(StaticsError::Construction("no substitutes violation for ε up to 0.5".into()))
}

#[derive(Debug, Clone)]
pub struct CostCounterexample {
    pub instance: Instance,
    pub scheme_low: Scheme,
    pub scheme_high: Scheme,
    /// Per-user eligible cost under the low and the high budget.
    pub expected_costs: (f64, f64),
}

/// One period, one eligible group of mass 1 with VoT $60/h so costs read in
/// minutes, toll 1 and budgets 1/2 and 3/4. The latencies satisfy
/// `l1(0.5) = 0.5`, `l1(0.75) = 1.5`, `l2(0.5) = 2`, `l2(0.25) = 1.99`.
pub fn build_cost_nonmonotonicity_counterexample() -> CostCounterexample {
    let l1 = LatencyFunction::piecewise_linear(0.1, 0.4, 1.0, 4.0).expect("valid latency");
    let l2 = LatencyFunction::piecewise_linear(1.982, 0.05, 1.0, 0.04).expect("valid latency");
    let instance = Instance::new(
        [Edge { id: EdgeId::Express, latency: l1 }, Edge { id: EdgeId::Gp, latency: l2 }],
        vec![UserGroup { id: "eligible".into(), eligibility: Eligibility::Eligible, demand: 1.0, vot: vec![60.0] }],
        1,
        true,
    )
    .expect("valid instance");
    CostCounterexample {
        instance,
        scheme_low: Scheme::new(vec![1.0], 0.5).expect("valid scheme"),
        scheme_high: Scheme::new(vec![1.0], 0.75).expect("valid scheme"),
        expected_costs: (1.25, 1.6225),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeComponent {
    Toll(usize),
    Budget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub step: f64,
    /// Largest change of any edge flow between adjacent probe points.
    pub max_jump: f64,
}

/// Solves at `n_points` equally spaced values of `component` over
/// `[p, p + radius]` and measures the largest edge-flow change between
/// neighbours.
pub fn continuity_probe(
    instance: &Instance,
    scheme: &Scheme,
    component: ProbeComponent,
    radius: f64,
    n_points: usize,
    opts: &SolverOptions,
) -> Result<ProbeResult, StaticsError> {
    scheme.check_for(instance)?;
    if scheme.tolls.iter().any(|t| *t <= 0.0) {
        return Err(StaticsError::Sweep("continuity probe requires strictly positive tolls".into()));
    }
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(StaticsError::Sweep("radius must be nonnegative".into()));
    }
    if n_points < 2 || radius == 0.0 {
        return Ok(ProbeResult { step: 0.0, max_jump: 0.0 });
    }
    let step = radius / (n_points - 1) as f64;
    let start = match component {
        ProbeComponent::Toll(t) => {
            if t >= instance.horizon() {
                return Err(StaticsError::Sweep(format!("period {t} outside horizon {}", instance.horizon())));
            }
            scheme.tolls[t]
        }
        ProbeComponent::Budget => scheme.budget,
    };
    let values: Vec<f64> = (0..n_points).map(|k| start + k as f64 * step).collect();
    let schemes: Vec<Scheme> = values
        .iter()
        .map(|&v| match component {
            ProbeComponent::Toll(t) => {
                let mut tolls = scheme.tolls.clone();
                tolls[t] = v;
                Scheme::new(tolls, scheme.budget)
            }
            ProbeComponent::Budget => Scheme::new(scheme.tolls.clone(), v),
        })
        .collect::<Result<_, _>>()?;
    let (reports, _, _) = run_sweep(instance, &values, schemes, opts)?;
    let max_jump = reports
        .windows(2)
        .flat_map(|w| {
            (0..2).flat_map(move |e| w[0].edge_flows.x[e].iter().zip(&w[1].edge_flows.x[e]).map(|(a, b)| (a - b).abs()))
        })
        .fold(0.0, f64::max);
    Ok(ProbeResult { step, max_jump })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tight() -> SolverOptions {
        SolverOptions { gap_tol: 1e-12, ..Default::default() }
    }

    #[test]
    fn substitutes_fixture_conditions() {
        let (inst, scheme) = substitutes_instance();
        let l1 = inst.latency_fn(0);
        let l2 = inst.latency_fn(1);
        assert!(l2.latency(0.5).unwrap() > l1.latency(1.5).unwrap());
        // period-one ineligible saving at least 10% above the toll, period two at least 10% below
        let worst_saving_1 = l2.latency(0.0).unwrap() - l1.latency(2.0).unwrap();
        let best_saving_2 = l2.latency(2.0).unwrap() - l1.latency(0.0).unwrap();
        assert!(worst_saving_1 * 120.0 / 60.0 >= 1.1 * scheme.tolls[0]);
        assert!(best_saving_2 * 6.0 / 60.0 <= scheme.tolls[1] / 1.1);
    }

    #[test]
    fn substitutes_baseline_equilibrium() {
        let (inst, scheme) = substitutes_instance();
        let rep = solve_equilibrium(&inst, &scheme, &tight()).unwrap();
        assert_abs_diff_eq!(rep.flow.flows[0][EXPRESS][0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(rep.flow.flows[0][EXPRESS][1], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rep.flow.flows[1][EXPRESS][0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(rep.flow.flows[1][EXPRESS][1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn substitutes_counterexample_is_found() {
        let ce = build_substitutes_counterexample(&tight()).unwrap();
        assert_eq!(ce.period_pair, (1, 0));
        assert_eq!(ce.check.witness_period, Some(0));
        assert!(ce.check.violated);
        assert_eq!(ce.epsilon, 1e-3);
        let zero = detect_substitutes_violation(&ce.instance, &ce.scheme, 1, 0.0, &tight()).unwrap();
        assert!(!zero.violated);
    }

    #[test]
    fn cost_counterexample_anchor_points() {
        let ce = build_cost_nonmonotonicity_counterexample();
        let l1 = ce.instance.latency_fn(0);
        let l2 = ce.instance.latency_fn(1);
        assert_abs_diff_eq!(l1.latency(0.5).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(l1.latency(0.75).unwrap(), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(l2.latency(0.5).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l2.latency(0.25).unwrap(), 1.99, epsilon = 1e-12);
    }

    #[test]
    fn cost_counterexample_costs() {
        let ce = build_cost_nonmonotonicity_counterexample();
        for (scheme, expected) in [(&ce.scheme_low, 1.25), (&ce.scheme_high, 1.6225)] {
            let rep = solve_equilibrium(&ce.instance, scheme, &tight()).unwrap();
            let cost = cost_terms(&ce.instance, scheme, &rep.flow, &rep.edge_flows).eligible;
            assert_abs_diff_eq!(cost, expected, epsilon = 1e-9);
        }
        let none = Scheme::new(vec![1.0], 0.0).unwrap();
        let rep = solve_equilibrium(&ce.instance, &none, &tight()).unwrap();
        let cost = cost_terms(&ce.instance, &none, &rep.flow, &rep.edge_flows).eligible;
        assert_abs_diff_eq!(cost, ce.instance.latency_fn(1).latency(1.0).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn sweeps_validate_inputs() {
        let (inst, scheme) = substitutes_instance();
        let opts = SolverOptions::default();
        assert!(toll_sweep(&inst, &scheme, TollTarget::Period(0), &[2.0, 1.0], &opts).is_err());
        assert!(toll_sweep(&inst, &scheme, TollTarget::Period(5), &[1.0], &opts).is_err());
        assert!(budget_sweep(&inst, &scheme, &[], &opts).is_err());
    }

    #[test]
    fn budget_sweep_on_substitutes_fixture() {
        let (inst, scheme) = substitutes_instance();
        let res = budget_sweep(&inst, &scheme, &[0.0, 0.5, 1.0, 1.5, 2.0, 3.0], &tight()).unwrap();
        assert!(res.all_monotone());
        // budget 2 already covers both periods
        assert_eq!(res.express_flows[4], res.express_flows[5]);
        let csv = sweep_csv(&res);
        assert_eq!(csv.lines().count(), 1 + 6 * 2);
    }

    #[test]
    fn toll_sweep_flags_only_swept_period() {
        let (inst, scheme) = substitutes_instance();
        let res = toll_sweep(&inst, &scheme, TollTarget::Period(1), &[0.5, 1.0, 1.5], &tight()).unwrap();
        assert_eq!(res.monotone_flags[0], None);
        assert_eq!(res.monotone_flags[1], Some(true));
    }

    #[test]
    fn probe_edge_cases() {
        let (inst, scheme) = substitutes_instance();
        let r = continuity_probe(&inst, &scheme, ProbeComponent::Budget, 0.0, 5, &tight()).unwrap();
        assert_eq!(r.max_jump, 0.0);
        let free = Scheme::new(vec![0.0, 1.0], 1.0).unwrap();
        assert!(continuity_probe(&inst, &free, ProbeComponent::Budget, 1.0, 5, &tight()).is_err());
    }
}
