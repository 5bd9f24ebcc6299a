//! Scheme design by dense sampling of a toll/budget grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{solve_equilibrium, EquilibriumError, EquilibriumReport, SolverOptions};
use crate::model::{EdgeFlows, FlowPattern, Instance, ModelError, Scheme, EXPRESS, GP, MINUTES_PER_HOUR};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid objective: {0}")]
    Objective(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("refusing to evaluate a non-converged equilibrium")]
    NotConverged,
    #[error("no grid point converged ({0} excluded)")]
    AllExcluded(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    ParetoWeighted,
    RevenueMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// `(λ_E, λ_I, λ_R)`; ignored for `revenue_max`.
    #[serde(default = "unit_weights")]
    pub weights: [f64; 3],
}

fn unit_weights() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl ObjectiveSpec {
    pub fn pareto(eligible: f64, ineligible: f64, revenue: f64) -> Result<Self, DesignError> {
        let spec = ObjectiveSpec { kind: ObjectiveKind::ParetoWeighted, weights: [eligible, ineligible, revenue] };
        spec.check()?;
        Ok(spec)
    }

    pub fn revenue_max() -> Self {
        ObjectiveSpec { kind: ObjectiveKind::RevenueMax, weights: [0.0, 0.0, 1.0] }
    }

    pub fn check(&self) -> Result<(), DesignError> {
        if self.kind == ObjectiveKind::RevenueMax {
            return Ok(());
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(DesignError::Objective("weights must be finite and nonnegative".into()));
        }
        if self.weights.iter().all(|w| *w == 0.0) {
            return Err(DesignError::Objective("weights must not all be zero".into()));
        }
        Ok(())
    }

    /// Effective `(λ_E, λ_I, λ_R)`.
    pub fn effective_weights(&self) -> [f64; 3] {
        match self.kind {
            ObjectiveKind::ParetoWeighted => self.weights,
            ObjectiveKind::RevenueMax => [0.0, 0.0, 1.0],
        }
    }
}

/// The three ingredients of every societal objective, all in $.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    /// Total travel-time cost of eligible users.
    pub eligible: f64,
    /// Total travel-time plus toll cost of ineligible users.
    pub ineligible: f64,
    /// Toll revenue, collected from ineligible users only.
    pub revenue: f64,
}

impl CostTerms {
    pub fn weighted(&self, weights: [f64; 3]) -> f64 {
        weights[0] * self.eligible + weights[1] * self.ineligible - weights[2] * self.revenue
    }
}

/// Total $ cost of each group (time cost, plus tolls for ineligible groups).
pub fn group_costs(instance: &Instance, scheme: &Scheme, flow: &FlowPattern, x: &EdgeFlows) -> Vec<f64> {
    let lat = instance.edge_latencies(x);
    instance
        .groups()
        .iter()
        .zip(&flow.flows)
        .map(|(group, f)| {
            let mut cost = 0.0;
            for t in 0..instance.horizon() {
                for e in [EXPRESS, GP] {
                    cost += group.vot[t] * lat[e][t] * f[e][t] / MINUTES_PER_HOUR;
                }
                if !group.is_eligible() {
                    cost += scheme.tolls[t] * f[EXPRESS][t];
                }
            }
            cost
        })
        .collect()
}

pub fn cost_terms(instance: &Instance, scheme: &Scheme, flow: &FlowPattern, x: &EdgeFlows) -> CostTerms {
    let costs = group_costs(instance, scheme, flow, x);
    let mut terms = CostTerms { eligible: 0.0, ineligible: 0.0, revenue: 0.0 };
    for ((group, f), c) in instance.groups().iter().zip(&flow.flows).zip(costs) {
        if group.is_eligible() {
            terms.eligible += c;
        } else {
            terms.ineligible += c;
            terms.revenue += scheme.tolls.iter().zip(&f[EXPRESS]).map(|(tau, y)| tau * y).sum::<f64>();
        }
    }
    terms
}

/// Societal cost of a converged equilibrium under `spec`.
pub fn societal_cost(
    instance: &Instance,
    scheme: &Scheme,
    report: &EquilibriumReport,
    spec: &ObjectiveSpec,
) -> Result<f64, DesignError> {
    spec.check()?;
    if !report.converged {
        return Err(DesignError::NotConverged);
    }
    Ok(cost_terms(instance, scheme, &report.flow, &report.edge_flows).weighted(spec.effective_weights()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSummary {
    /// Percent of demand on the express lane, averaged over periods.
    pub overall_express_share: f64,
    pub eligible_express_share: f64,
    pub ineligible_express_share: f64,
    /// Flow-weighted average travel time in minutes; free-flow time when
    /// the lane is empty in every period.
    pub avg_tt_express: f64,
    pub avg_tt_gp: f64,
    pub eligible_cost: f64,
    pub ineligible_cost: f64,
    pub revenue: f64,
}

pub fn summarize_equilibrium(instance: &Instance, scheme: &Scheme, report: &EquilibriumReport) -> EquilibriumSummary {
    summarize_flow(instance, scheme, &report.flow, &report.edge_flows)
}

pub fn summarize_flow(instance: &Instance, scheme: &Scheme, flow: &FlowPattern, x: &EdgeFlows) -> EquilibriumSummary {
    let horizon = instance.horizon() as f64;
    let share = |eligible: Option<bool>| {
        let mut on_express = 0.0;
        let mut demand = 0.0;
        for (group, f) in instance.groups().iter().zip(&flow.flows) {
            if eligible.map_or(true, |e| e == group.is_eligible()) {
                on_express += f[EXPRESS].iter().sum::<f64>();
                demand += group.demand * horizon;
            }
        }
        if demand > 0.0 {
            100.0 * on_express / demand
        } else {
            0.0
        }
    };
    let lat = instance.edge_latencies(x);
    let avg_tt = |e: usize| {
        let total: f64 = x.x[e].iter().sum();
        if total > 0.0 {
            x.x[e].iter().zip(&lat[e]).map(|(f, l)| f * l).sum::<f64>() / total
        } else {
            instance.latency_fn(e).free_flow()
        }
    };
    let terms = cost_terms(instance, scheme, flow, x);
    EquilibriumSummary {
        overall_express_share: share(None),
        eligible_express_share: share(Some(true)),
        ineligible_express_share: share(Some(false)),
        avg_tt_express: avg_tt(EXPRESS),
        avg_tt_gp: avg_tt(GP),
        eligible_cost: terms.eligible,
        ineligible_cost: terms.ineligible,
        revenue: terms.revenue,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TollMode {
    TimeInvariant,
    PerPeriod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub toll_range: [f64; 2],
    pub budget_range: [f64; 2],
    pub step: f64,
    /// Budget step when it differs from the toll step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_step: Option<f64>,
    pub toll_mode: TollMode,
    /// Per-period grids larger than this many schemes log a warning.
    #[serde(default = "default_solve_budget")]
    pub solve_budget: usize,
}

fn default_solve_budget() -> usize {
    10_000
}

impl GridSpec {
    pub fn time_invariant(toll_range: [f64; 2], budget_range: [f64; 2], step: f64) -> Self {
        GridSpec {
            toll_range,
            budget_range,
            step,
            budget_step: None,
            toll_mode: TollMode::TimeInvariant,
            solve_budget: default_solve_budget(),
        }
    }

    pub fn check(&self) -> Result<(), DesignError> {
        let finite = |r: [f64; 2]| r.iter().all(|v| v.is_finite());
        if !finite(self.toll_range) || !finite(self.budget_range) {
            return Err(DesignError::Grid("ranges must be finite".into()));
        }
        if self.toll_range[0] > self.toll_range[1] || self.budget_range[0] > self.budget_range[1] {
            return Err(DesignError::Grid("range lower bound exceeds upper bound".into()));
        }
        if self.toll_range[0] < 0.0 || self.budget_range[0] < 0.0 {
            return Err(DesignError::Grid("tolls and budgets must be nonnegative".into()));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(DesignError::Grid("step must be positive".into()));
        }
        if let Some(s) = self.budget_step {
            if !(s.is_finite() && s > 0.0) {
                return Err(DesignError::Grid("budget step must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn with_budget_step(mut self, step: f64) -> Self {
        self.budget_step = Some(step);
        self
    }
}

/// `lo, lo+s, …` strictly below `hi`, then `hi` itself.
pub fn axis(range: [f64; 2], step: f64) -> Vec<f64> {
    let [lo, hi] = range;
    let slack = 1e-9 * step;
    let mut values = Vec::new();
    let mut k = 0u64;
    loop {
        let v = lo + k as f64 * step;
        if v >= hi - slack {
            break;
        }
        values.push((v * 1e9).round() / 1e9);
        k += 1;
    }
    values.push(hi);
    values
}

/// All schemes of the grid, ordered by ascending budget and then tolls.
pub fn grid_points(spec: &GridSpec, horizon: usize) -> Result<Vec<Scheme>, DesignError> {
    spec.check()?;
    if horizon == 0 {
        return Err(DesignError::Grid("horizon must be at least 1".into()));
    }
    let tolls = axis(spec.toll_range, spec.step);
    let budgets = axis(spec.budget_range, spec.budget_step.unwrap_or(spec.step));
    let toll_vectors: Vec<Vec<f64>> = match spec.toll_mode {
        TollMode::TimeInvariant => tolls.iter().map(|&t| vec![t; horizon]).collect(),
        TollMode::PerPeriod => {
            let count = (tolls.len() as f64).powi(horizon as i32) * budgets.len() as f64;
            if count > spec.solve_budget as f64 {
                log::warn!("per-period grid has {count} schemes, above the solve budget {}", spec.solve_budget);
            }
            let mut out: Vec<Vec<f64>> = vec![Vec::new()];
            for _ in 0..horizon {
                out = out
                    .into_iter()
                    .flat_map(|prefix| {
                        tolls.iter().map(move |&t| {
                            let mut v = prefix.clone();
                            v.push(t);
                            v
                        })
                    })
                    .collect();
            }
            out
        }
    };
    let mut schemes = Vec::with_capacity(budgets.len() * toll_vectors.len());
    for &b in &budgets {
        for tv in &toll_vectors {
            schemes.push(Scheme::new(tv.clone(), b)?);
        }
    }
    Ok(schemes)
}

/// One lower-level solve of a grid.
#[derive(Debug, Clone)]
pub struct GridSolve {
    pub scheme: Scheme,
    pub report: EquilibriumReport,
}

/// Solves the equilibrium at every grid point, in parallel, keeping grid order.
pub fn solve_grid(instance: &Instance, spec: &GridSpec, opts: &SolverOptions) -> Result<Vec<GridSolve>, DesignError> {
    let schemes = grid_points(spec, instance.horizon())?;
    schemes
        .into_par_iter()
        .map(|scheme| {
            let report = solve_equilibrium(instance, &scheme, opts)?;
            Ok(GridSolve { scheme, report })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub scheme: Scheme,
    /// `None` when the lower level did not converge.
    pub cost: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub summary: EquilibriumSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub objective: ObjectiveSpec,
    pub entries: Vec<GridEntry>,
    /// Index into `entries` of the first minimizer in grid order.
    pub best: usize,
    pub best_cost: f64,
    /// Other entries within `1e-9` relative of the best cost.
    pub ties: Vec<usize>,
    pub excluded: Vec<usize>,
}

impl GridResult {
    pub fn best_entry(&self) -> &GridEntry {
        &self.entries[self.best]
    }
}

/// Evaluates `objective` over already solved grid points.
pub fn select_best(
    instance: &Instance,
    solves: &[GridSolve],
    objective: &ObjectiveSpec,
) -> Result<GridResult, DesignError> {
    objective.check()?;
    let weights = objective.effective_weights();
    let entries: Vec<GridEntry> = solves
        .iter()
        .map(|s| {
            let converged = s.report.converged;
            GridEntry {
                scheme: s.scheme.clone(),
                cost: converged
                    .then(|| cost_terms(instance, &s.scheme, &s.report.flow, &s.report.edge_flows).weighted(weights)),
                converged,
                iterations: s.report.iterations,
                summary: summarize_equilibrium(instance, &s.scheme, &s.report),
            }
        })
        .collect();
    let excluded: Vec<usize> = entries.iter().enumerate().filter(|(_, e)| e.cost.is_none()).map(|(i, _)| i).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in entries.iter().enumerate() {
        if let Some(c) = e.cost {
            if best.map_or(true, |(_, b)| c < b) {
                best = Some((i, c));
            }
        }
    }
    let (best, best_cost) = best.ok_or(DesignError::AllExcluded(excluded.len()))?;
    let tie_tol = 1e-9 * (1.0 + best_cost.abs());
    let ties = entries
        .iter()
        .enumerate()
        .filter(|&(i, e)| i != best && e.cost.map_or(false, |c| c - best_cost <= tie_tol))
        .map(|(i, _)| i)
        .collect();
    Ok(GridResult { objective: objective.clone(), entries, best, best_cost, ties, excluded })
}

/// Solves the lower level on every grid point and returns the scheme of
/// least societal cost. Ties go to the first point in grid order.
pub fn dense_sample(
    instance: &Instance,
    spec: &GridSpec,
    objective: &ObjectiveSpec,
    opts: &SolverOptions,
) -> Result<GridResult, DesignError> {
    objective.check()?;
    let solves = solve_grid(instance, spec, opts)?;
    select_best(instance, &solves, objective)
}

/// Heatmap CSV with one row per grid entry. Per-period tolls are joined by `;`.
pub fn heatmap_csv(result: &GridResult) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record([
        "budget",
        "toll",
        "cost",
        "overall_share",
        "eligible_share",
        "ineligible_share",
        "tt_express",
        "tt_gp",
        "revenue",
        "converged",
    ])
    .expect("in-memory write");
    for e in &result.entries {
        let tolls = &e.scheme.tolls;
        let toll = if tolls.iter().all(|t| *t == tolls[0]) {
            tolls[0].to_string()
        } else {
            tolls.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";")
        };
        let s = &e.summary;
        w.write_record([
            e.scheme.budget.to_string(),
            toll,
            e.cost.map(|c| c.to_string()).unwrap_or_default(),
            s.overall_express_share.to_string(),
            s.eligible_express_share.to_string(),
            s.ineligible_express_share.to_string(),
            s.avg_tt_express.to_string(),
            s.avg_tt_gp.to_string(),
            s.revenue.to_string(),
            e.converged.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}
