//! Equilibrium computation by Frank-Wolfe on the convex potential
//!
//! ```text
//! Σ_t [ Σ_e ∫_0^{x_{e,t}} l_e(w) dw + 60 · Σ_{g ineligible} τ_t y_{g,1,t} / v_{t,g} ]
//! ```
//!
//! over the product of per-group allocation polytopes (eligible groups also
//! carry their credit budget). The linear minimization oracle decomposes
//! into the per-group best responses of [`crate::best_response`].
//!
//! Two iteration schemes are available. [`FwVariant::Vanilla`] is the
//! classical step `y ← y + γ (s − y)`. [`FwVariant::Pairwise`] runs
//! block-wise pairwise steps that move mass from the worst active vertex of a
//! block to its oracle vertex; it can drop vertices entirely, so spurious
//! small flows on the wrong edge vanish instead of decaying like `1/k`.
//! Both variants use the same global Frank-Wolfe gap as stopping certificate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::best_response::{best_response_from_times, fractional_knapsack, plan_cost_from_times, BangPerBuck};
use crate::model::{
    aggregate_edge_flows, validate, EdgeFlows, FlowPattern, Instance, ModelError, Scheme, Violation, EXPRESS, GP,
    MINUTES_PER_HOUR,
};

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("infeasible flow: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Infeasible(Vec<Violation>),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid solver options: {0}")]
    Options(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    /// Bisection on the directional derivative of the potential.
    Exact1d,
    /// Armijo backtracking from the full step.
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FwVariant {
    Vanilla,
    Pairwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Stop when `gap / (|potential| + 1)` falls to this value.
    pub gap_tol: f64,
    pub line_search: LineSearch,
    pub variant: FwVariant,
    /// `None` starts with everyone on the GP lanes; `Some(seed)` starts from a
    /// random convex combination of oracle vertices.
    pub seed: Option<u64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 50_000,
            gap_tol: 1e-7,
            line_search: LineSearch::Exact1d,
            variant: FwVariant::Pairwise,
            seed: None,
        }
    }
}

impl SolverOptions {
    pub fn check(&self) -> Result<(), EquilibriumError> {
        if self.max_iters < 1 {
            return Err(EquilibriumError::Options("max_iters must be at least 1".into()));
        }
        if !(self.gap_tol > 0.0) {
            return Err(EquilibriumError::Options("gap_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub flow: FlowPattern,
    pub edge_flows: EdgeFlows,
    pub potential: f64,
    /// Absolute Frank-Wolfe gap at the returned point.
    pub fw_gap: f64,
    /// Sum of `d·|reduced gradient|` over ineligible group-periods that keep
    /// more than `eps_flow` on the costlier edge.
    pub support_gap: f64,
    pub relative_gap: f64,
    /// Per group, $ per user: realized cost minus best-response cost.
    pub br_regret: Vec<f64>,
    /// Budget multiplier estimate per eligible group; `None` for ineligible groups.
    pub budget_duals: Vec<Option<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Potential after every iteration.
    #[serde(skip)]
    pub potential_trace: Vec<f64>,
}

impl EquilibriumReport {
    /// Upper bound on any group's per-user regret implied by the gap:
    /// `gap · v_max / (60 · d_min)`.
    pub fn regret_bound(&self, instance: &Instance) -> f64 {
        self.fw_gap * instance.max_vot() / (MINUTES_PER_HOUR * instance.min_demand())
    }
}

/// Tolerance in $ per user used to certify a solve run at `gap_tol`: ten
/// times the regret bound a gap of exactly `gap_tol` would imply.
pub fn certificate_eps(instance: &Instance, potential: f64, gap_tol: f64) -> f64 {
    10.0 * gap_tol * (potential.abs() + 1.0) * instance.max_vot() / (MINUTES_PER_HOUR * instance.min_demand())
}

/// Support threshold for the per-edge equilibrium checks.
pub fn eps_flow(demand: f64) -> f64 {
    1e-6 * demand
}

/// Value of the potential at a feasible flow.
pub fn potential(instance: &Instance, scheme: &Scheme, flow: &FlowPattern) -> Result<f64, EquilibriumError> {
    let violations = validate(instance, scheme, flow)?;
    if !violations.is_empty() {
        return Err(EquilibriumError::Infeasible(violations));
    }
    let x = aggregate_edge_flows(flow);
    let express: Vec<Vec<f64>> = flow.flows.iter().map(|f| f[EXPRESS].clone()).collect();
    Ok(potential_parts(instance, scheme, &x.x[EXPRESS], &x.x[GP], &express))
}

fn potential_parts(instance: &Instance, scheme: &Scheme, x1: &[f64], x2: &[f64], y1: &[Vec<f64>]) -> f64 {
    let l1 = instance.latency_fn(EXPRESS);
    let l2 = instance.latency_fn(GP);
    let mut total = 0.0;
    for t in 0..instance.horizon() {
        total += l1.area(x1[t]) + l2.area(x2[t]);
    }
    for (group, y) in instance.groups().iter().zip(y1) {
        if !group.is_eligible() {
            for t in 0..instance.horizon() {
                total += MINUTES_PER_HOUR * scheme.tolls[t] * y[t] / group.vot[t];
            }
        }
    }
    total
}

/// Potential gradient, same shape as a flow pattern.
pub fn potential_gradient(instance: &Instance, scheme: &Scheme, x: &EdgeFlows) -> Vec<[Vec<f64>; 2]> {
    let lat = instance.edge_latencies(x);
    instance
        .groups()
        .iter()
        .map(|g| {
            let mut grad = lat.clone();
            if !g.is_eligible() {
                for t in 0..instance.horizon() {
                    grad[EXPRESS][t] += MINUTES_PER_HOUR * scheme.tolls[t] / g.vot[t];
                }
            }
            grad
        })
        .collect()
}

/// Minimizes `Σ gradient · y` over all feasible flows.
///
/// Ineligible groups put their whole demand on the edge with the smaller
/// entry in each period (ties go express); eligible groups solve the credit
/// knapsack on gradient savings per dollar of toll.
pub fn lmo(instance: &Instance, scheme: &Scheme, gradient: &[[Vec<f64>; 2]]) -> Result<FlowPattern, EquilibriumError> {
    scheme.check_for(instance)?;
    if gradient.len() != instance.groups().len()
        || gradient.iter().any(|g| g[0].len() != instance.horizon() || g[1].len() != instance.horizon())
    {
        return Err(ModelError::Shape("gradient shape does not match the instance".into()).into());
    }
    let express: Vec<Vec<f64>> = instance
        .groups()
        .iter()
        .zip(gradient)
        .map(|(group, grad)| {
            let reduced: Vec<f64> = (0..instance.horizon()).map(|t| grad[EXPRESS][t] - grad[GP][t]).collect();
            group_vertex(group.is_eligible(), &reduced, scheme).into_iter().map(|z| z * group.demand).collect()
        })
        .collect();
    Ok(FlowPattern::from_express(instance, &express))
}

/// Oracle vertex for one group in express-fraction space, given the reduced
/// gradient `grad_express − grad_gp` per period.
fn group_vertex(eligible: bool, reduced: &[f64], scheme: &Scheme) -> Vec<f64> {
    if eligible {
        let savings: Vec<f64> = reduced.iter().map(|r| -r).collect();
        fractional_knapsack(&savings, &scheme.tolls, scheme.budget)
    } else {
        reduced.iter().map(|&r| if r <= 0.0 { 1.0 } else { 0.0 }).collect()
    }
}

/// Search direction expressed through its effect on the potential: change of
/// express edge flow per period, plus the linear toll term.
struct Direction {
    dx: Vec<f64>,
    lin: f64,
    gmax: f64,
}

struct Solver<'a> {
    instance: &'a Instance,
    scheme: &'a Scheme,
    line_search: LineSearch,
    /// Express flow per group and period.
    y1: Vec<Vec<f64>>,
    x1: Vec<f64>,
    period_demand: f64,
    /// Toll term coefficient `60 τ_t / v_{t,g}` (zero for eligible groups).
    toll_coef: Vec<Vec<f64>>,
    /// Active vertices and weights of each eligible group, in fractions.
    active: Vec<Vec<(Vec<f64>, f64)>>,
}

impl<'a> Solver<'a> {
    fn new(instance: &'a Instance, scheme: &'a Scheme, opts: &SolverOptions) -> Self {
        let t_len = instance.horizon();
        let toll_coef = instance
            .groups()
            .iter()
            .map(|g| {
                (0..t_len)
                    .map(|t| if g.is_eligible() { 0.0 } else { MINUTES_PER_HOUR * scheme.tolls[t] / g.vot[t] })
                    .collect()
            })
            .collect();
        let mut solver = Solver {
            instance,
            scheme,
            line_search: opts.line_search,
            y1: vec![vec![0.0; t_len]; instance.groups().len()],
            x1: vec![0.0; t_len],
            period_demand: instance.total_demand(),
            toll_coef,
            active: instance.groups().iter().map(|_| vec![(vec![0.0; t_len], 1.0)]).collect(),
        };
        if let Some(seed) = opts.seed {
            solver.randomize(seed);
        }
        solver.refresh_x();
        solver
    }

    /// Random convex combination of three oracle vertices per group.
    fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_len = self.instance.horizon();
        for (g, group) in self.instance.groups().iter().enumerate() {
            let mut weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let mut set: Vec<(Vec<f64>, f64)> = Vec::new();
            for w in weights {
                let reduced: Vec<f64> = (0..t_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let v = group_vertex(group.is_eligible(), &reduced, self.scheme);
                match set.iter_mut().find(|(u, _)| *u == v) {
                    Some(entry) => entry.1 += w,
                    None => set.push((v, w)),
                }
            }
            self.y1[g] = combine(&set, group.demand, t_len);
            self.active[g] = set;
        }
    }

    fn refresh_x(&mut self) {
        for t in 0..self.instance.horizon() {
            self.x1[t] = self.y1.iter().map(|y| y[t]).sum::<f64>().clamp(0.0, self.period_demand);
        }
    }

    fn x2(&self, t: usize) -> f64 {
        (self.period_demand - self.x1[t]).max(0.0)
    }

    fn value(&self) -> f64 {
        let x2: Vec<f64> = (0..self.instance.horizon()).map(|t| self.x2(t)).collect();
        potential_parts(self.instance, self.scheme, &self.x1, &x2, &self.y1)
    }

    /// Reduced gradient `∂/∂y_express` for one group at the current point.
    fn reduced(&self, g: usize, out: &mut [f64]) {
        let l1 = self.instance.latency_fn(EXPRESS);
        let l2 = self.instance.latency_fn(GP);
        for t in 0..out.len() {
            out[t] = l1.at(self.x1[t]) - l2.at(self.x2(t)) + self.toll_coef[g][t];
        }
    }

    /// Global oracle vertex (fractions) and absolute FW gap.
    /// Linear-minimization vertices, the FW gap, and the support gap: the
    /// sum of `d·|r|` over ineligible blocks with more than `eps_flow` on
    /// the worse edge.
    fn oracle(&self) -> (Vec<Vec<f64>>, f64, f64) {
        let t_len = self.instance.horizon();
        let mut r = vec![0.0; t_len];
        let mut gap = 0.0;
        let mut support = 0.0;
        let mut vertices = Vec::with_capacity(self.y1.len());
        for (g, group) in self.instance.groups().iter().enumerate() {
            self.reduced(g, &mut r);
            let s = group_vertex(group.is_eligible(), &r, self.scheme);
            for t in 0..t_len {
                gap += r[t] * (self.y1[g][t] - group.demand * s[t]);
                if !group.is_eligible() {
                    let worse = if r[t] > 0.0 { self.y1[g][t] } else { group.demand - self.y1[g][t] };
                    if worse > eps_flow(group.demand) {
                        support += group.demand * r[t].abs();
                    }
                }
            }
            vertices.push(s);
        }
        (vertices, gap.max(0.0), support)
    }

    fn slope(&self, dir: &Direction, gamma: f64) -> f64 {
        let l1 = self.instance.latency_fn(EXPRESS);
        let l2 = self.instance.latency_fn(GP);
        let mut d = dir.lin;
        for (t, &dx) in dir.dx.iter().enumerate() {
            if dx != 0.0 {
                let a = (self.x1[t] + gamma * dx).clamp(0.0, self.period_demand);
                d += dx * (l1.at(a) - l2.at(self.period_demand - a));
            }
        }
        d
    }

    fn change(&self, dir: &Direction, gamma: f64) -> f64 {
        let l1 = self.instance.latency_fn(EXPRESS);
        let l2 = self.instance.latency_fn(GP);
        let mut d = dir.lin * gamma;
        for (t, &dx) in dir.dx.iter().enumerate() {
            if dx != 0.0 {
                let a = (self.x1[t] + gamma * dx).clamp(0.0, self.period_demand);
                let x2 = self.x2(t);
                d += l1.area(a) - l1.area(self.x1[t]) + l2.area(self.period_demand - a) - l2.area(x2);
            }
        }
        d
    }

    fn step_size(&self, dir: &Direction) -> f64 {
        if dir.gmax <= 0.0 {
            return 0.0;
        }
        let d0 = self.slope(dir, 0.0);
        if d0 >= 0.0 {
            return 0.0;
        }
        match self.line_search {
            LineSearch::Exact1d => {
                if self.slope(dir, dir.gmax) <= 0.0 {
                    return dir.gmax;
                }
                let (mut lo, mut hi) = (0.0, dir.gmax);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if self.slope(dir, mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                // lo keeps a negative slope, so the potential has not increased there
                lo
            }
            LineSearch::Backtracking => {
                let mut gamma = dir.gmax;
                for _ in 0..60 {
                    if self.change(dir, gamma) <= 1e-4 * gamma * d0 {
                        return gamma;
                    }
                    gamma *= 0.5;
                }
                0.0
            }
        }
    }

    fn vanilla_step(&mut self, vertices: &[Vec<f64>]) {
        let t_len = self.instance.horizon();
        let mut dir = Direction { dx: vec![0.0; t_len], lin: 0.0, gmax: 1.0 };
        for (g, group) in self.instance.groups().iter().enumerate() {
            for t in 0..t_len {
                let d = group.demand * vertices[g][t] - self.y1[g][t];
                dir.dx[t] += d;
                dir.lin += self.toll_coef[g][t] * d;
            }
        }
        let gamma = self.step_size(&dir);
        if gamma <= 0.0 {
            return;
        }
        for (g, group) in self.instance.groups().iter().enumerate() {
            for t in 0..t_len {
                let target = group.demand * vertices[g][t];
                self.y1[g][t] += gamma * (target - self.y1[g][t]);
            }
        }
        self.refresh_x();
    }

    fn pairwise_sweep(&mut self) {
        let t_len = self.instance.horizon();
        let mut r = vec![0.0; t_len];
        for g in 0..self.instance.groups().len() {
            let group = &self.instance.groups()[g];
            let demand = group.demand;
            if group.is_eligible() {
                self.reduced(g, &mut r);
                let s = group_vertex(true, &r, self.scheme);
                let score = |v: &[f64]| v.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
                let s_score = score(&s);
                let (away, away_score) = self.active[g]
                    .iter()
                    .enumerate()
                    .map(|(i, (v, _))| (i, score(v)))
                    .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
                if away_score - s_score <= 0.0 || self.active[g][away].0 == s {
                    continue;
                }
                let w_away = self.active[g][away].1;
                let mut dir = Direction { dx: vec![0.0; t_len], lin: 0.0, gmax: w_away };
                for t in 0..t_len {
                    dir.dx[t] = demand * (s[t] - self.active[g][away].0[t]);
                }
                let gamma = self.step_size(&dir);
                if gamma <= 0.0 {
                    continue;
                }
                let set = &mut self.active[g];
                match set.iter().position(|(v, _)| *v == s) {
                    Some(i) => set[i].1 += gamma,
                    None => set.push((s, gamma)),
                }
                set[away].1 -= gamma;
                if set[away].1 <= 1e-14 || gamma >= w_away {
                    set.swap_remove(away);
                }
                let total: f64 = set.iter().map(|(_, w)| w).sum();
                set.iter_mut().for_each(|(_, w)| *w /= total);
                let y = combine(set, demand, t_len);
                for t in 0..t_len {
                    self.x1[t] = (self.x1[t] + y[t] - self.y1[g][t]).clamp(0.0, self.period_demand);
                }
                self.y1[g] = y;
            } else {
                for t in 0..t_len {
                    let l1 = self.instance.latency_fn(EXPRESS).at(self.x1[t]);
                    let l2 = self.instance.latency_fn(GP).at(self.x2(t));
                    let rt = l1 - l2 + self.toll_coef[g][t];
                    let (sign, room) = if rt < 0.0 {
                        (1.0, demand - self.y1[g][t])
                    } else if rt > 0.0 {
                        (-1.0, self.y1[g][t])
                    } else {
                        continue;
                    };
                    if room <= 0.0 {
                        continue;
                    }
                    let mut dx = vec![0.0; t_len];
                    dx[t] = sign;
                    let dir = Direction { dx, lin: sign * self.toll_coef[g][t], gmax: room };
                    let delta = self.step_size(&dir);
                    if delta <= 0.0 {
                        continue;
                    }
                    let new_y = if delta >= room {
                        if sign > 0.0 {
                            demand
                        } else {
                            0.0
                        }
                    } else {
                        (self.y1[g][t] + sign * delta).clamp(0.0, demand)
                    };
                    self.x1[t] = (self.x1[t] + new_y - self.y1[g][t]).clamp(0.0, self.period_demand);
                    self.y1[g][t] = new_y;
                }
            }
        }
        // drop accumulated round-off in the aggregate
        self.refresh_x();
    }

    fn flow_pattern(&self) -> FlowPattern {
        FlowPattern::from_express(self.instance, &self.y1)
    }
}

fn combine(set: &[(Vec<f64>, f64)], demand: f64, t_len: usize) -> Vec<f64> {
    let mut y = vec![0.0; t_len];
    for (v, w) in set {
        for t in 0..t_len {
            y[t] += w * v[t];
        }
    }
    y.iter().map(|z| (z * demand).clamp(0.0, demand)).collect()
}

/// Computes an equilibrium by minimizing the potential.
///
/// Eligible groups must have time-invariant values of time. Hitting
/// `max_iters` is not an error: the report comes back with
/// `converged = false`.
pub fn solve_equilibrium(
    instance: &Instance,
    scheme: &Scheme,
    opts: &SolverOptions,
) -> Result<EquilibriumReport, EquilibriumError> {
    opts.check()?;
    scheme.check_for(instance)?;
    if !instance.eligible_vots_constant() {
        return Err(EquilibriumError::Unsupported("time-varying eligible VoTs".into()));
    }
    let mut solver = Solver::new(instance, scheme, opts);
    let mut trace = vec![solver.value()];
    let mut iterations = 0;
    let mut converged = false;
    let mut gap;
    let mut support_gap;
    loop {
        let (vertices, g, sg) = solver.oracle();
        gap = g;
        support_gap = sg;
        let value = *trace.last().unwrap();
        if gap.max(support_gap) / (value.abs() + 1.0) <= opts.gap_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        match opts.variant {
            FwVariant::Vanilla => solver.vanilla_step(&vertices),
            FwVariant::Pairwise => solver.pairwise_sweep(),
        }
        iterations += 1;
        trace.push(solver.value());
    }
    let value = *trace.last().unwrap();
    let flow = solver.flow_pattern();
    let edge_flows = aggregate_edge_flows(&flow);
    let lat = instance.edge_latencies(&edge_flows);
    let br_regret = instance
        .groups()
        .iter()
        .zip(&flow.flows)
        .map(|(group, f)| {
            let z: Vec<f64> = f[EXPRESS].iter().map(|y| y / group.demand).collect();
            plan_cost_from_times(&lat, group, &z, scheme) - best_response_from_times(&lat, scheme, group).cost
        })
        .collect();
    let mut report = EquilibriumReport {
        flow,
        edge_flows,
        potential: value,
        fw_gap: gap,
        support_gap,
        relative_gap: gap / (value.abs() + 1.0),
        br_regret,
        budget_duals: Vec::new(),
        iterations,
        converged,
        potential_trace: trace,
    };
    report.budget_duals = budget_dual_estimate(instance, scheme, &report, DUAL_SLACK_TOL);
    Ok(report)
}

/// Relative slack below which a budget counts as binding in [`budget_dual_estimate`].
pub const DUAL_SLACK_TOL: f64 = 1e-6;

/// Estimates the budget multiplier of each eligible group from the
/// bang-per-buck threshold separating used from unused periods.
///
/// A slack budget gives zero. Otherwise the ratio of the fractional period
/// is returned when there is one; with no priced period in use (for
/// instance `B = 0`) the largest ratio among priced periods; else the
/// smallest ratio among the periods in use.
pub fn budget_dual_estimate(
    instance: &Instance,
    scheme: &Scheme,
    report: &EquilibriumReport,
    slack_tol: f64,
) -> Vec<Option<f64>> {
    let x = &report.edge_flows;
    let frac_tol = 1e-6;
    instance
        .groups()
        .iter()
        .zip(&report.flow.flows)
        .map(|(group, f)| {
            if !group.is_eligible() {
                return None;
            }
            let z: Vec<f64> = f[EXPRESS].iter().map(|y| y / group.demand).collect();
            let spend: f64 = scheme.tolls.iter().zip(&z).map(|(tau, z)| tau * z).sum();
            if spend < scheme.budget - slack_tol * scheme.budget.max(1.0) {
                return Some(0.0);
            }
            let ratio =
                |t: usize| match crate::best_response::bang_per_buck(instance, x, group.vot[t], t, scheme.tolls[t]) {
                    BangPerBuck::Ratio(r) => Some(r),
                    BangPerBuck::FreePeriod { .. } => None,
                };
            let priced: Vec<usize> = (0..instance.horizon()).filter(|&t| scheme.tolls[t] > 0.0).collect();
            if let Some(&t) = priced.iter().find(|&&t| z[t] > frac_tol && z[t] < 1.0 - frac_tol) {
                return ratio(t).map(|r| r.max(0.0));
            }
            let used: Vec<usize> = priced.iter().copied().filter(|&t| z[t] >= 1.0 - frac_tol).collect();
            let pick = if used.is_empty() {
                priced.iter().filter_map(|&t| ratio(t)).fold(f64::NEG_INFINITY, f64::max)
            } else {
                used.iter().filter_map(|&t| ratio(t)).fold(f64::INFINITY, f64::min)
            };
            Some(if pick.is_finite() { pick.max(0.0) } else { 0.0 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumVerdict {
    pub is_eq: bool,
    /// Largest regret found, $ per user.
    pub worst_regret: f64,
    pub worst_group: Option<usize>,
    /// Per-group regret, $ per user. For ineligible groups this is the
    /// largest per-period cost excess of an edge carrying more than
    /// [`eps_flow`]; for eligible groups the excess over the best response.
    pub group_regret: Vec<f64>,
    /// `min_s F(y)ᵀ(s − y)` over feasible `s`, divided by total demand
    /// ($ per user). Never positive; `≥ −eps` certifies the variational
    /// inequality.
    pub vi_residual: f64,
}

/// Checks the equilibrium conditions of `flow` directly.
///
/// Works for any VoT pattern, including time-varying eligible VoTs.
pub fn verify_equilibrium(
    instance: &Instance,
    scheme: &Scheme,
    flow: &FlowPattern,
    eps: f64,
) -> Result<EquilibriumVerdict, EquilibriumError> {
    let violations = validate(instance, scheme, flow)?;
    if !violations.is_empty() {
        return Err(EquilibriumError::Infeasible(violations));
    }
    let x = aggregate_edge_flows(flow);
    let lat = instance.edge_latencies(&x);
    let mut group_regret = Vec::with_capacity(flow.flows.len());
    let mut vi = 0.0;
    for (group, f) in instance.groups().iter().zip(&flow.flows) {
        let z: Vec<f64> = f[EXPRESS].iter().map(|y| y / group.demand).collect();
        let best = best_response_from_times(&lat, scheme, group);
        let realized = plan_cost_from_times(&lat, group, &z, scheme);
        vi += group.demand * (best.cost - realized);
        let regret = if group.is_eligible() {
            realized - best.cost
        } else {
            let mut worst: f64 = 0.0;
            for t in 0..instance.horizon() {
                let c1 = group.vot[t] * lat[EXPRESS][t] / MINUTES_PER_HOUR + scheme.tolls[t];
                let c2 = group.vot[t] * lat[GP][t] / MINUTES_PER_HOUR;
                let best_t = c1.min(c2);
                if f[EXPRESS][t] > eps_flow(group.demand) {
                    worst = worst.max(c1 - best_t);
                }
                if f[GP][t] > eps_flow(group.demand) {
                    worst = worst.max(c2 - best_t);
                }
            }
            worst
        };
        group_regret.push(regret);
    }
    let (worst_group, worst_regret) = group_regret
        .iter()
        .copied()
        .enumerate()
        .fold((None, f64::NEG_INFINITY), |acc, (g, r)| if r > acc.1 { (Some(g), r) } else { acc });
    let vi_residual = vi / instance.total_demand();
    Ok(EquilibriumVerdict {
        is_eq: worst_regret <= eps && vi_residual >= -eps,
        worst_regret,
        worst_group,
        group_regret,
        vi_residual,
    })
}
