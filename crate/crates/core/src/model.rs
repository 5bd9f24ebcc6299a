//! Domain types for the two-edge credit-based congestion pricing game.
//!
//! Units used throughout the crate: flows in vehicles/hour, latencies in
//! minutes, money in dollars and values of time in dollars/hour. Any product
//! of a value of time and a latency is divided by [`MINUTES_PER_HOUR`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MINUTES_PER_HOUR: f64 = 60.0;

/// Absolute tolerance for conservation and budget checks in [`validate`].
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Default quadratic regularizer for [`LatencyFunction::StrictlyConvexPwl`].
pub const DEFAULT_REG_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("negative flow {0} passed to a latency function")]
    NegativeFlow(f64),
    #[error("invalid latency parameters: {0}")]
    InvalidLatency(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Edge travel-time model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyFunction {
    /// Flat at `l0` up to the kink `lambda * kappa`, then slope `beta`.
    PiecewiseLinear { l0: f64, lambda: f64, kappa: f64, beta: f64 },
    /// `xi * (1 + a * (x / kappa)^b)`.
    Bpr { xi: f64, a: f64, b: u32, kappa: f64 },
    /// Piecewise linear plus `reg_eps * x^2`, strictly convex everywhere.
    StrictlyConvexPwl { l0: f64, lambda: f64, kappa: f64, beta: f64, reg_eps: f64 },
}

impl LatencyFunction {
    pub fn piecewise_linear(l0: f64, lambda: f64, kappa: f64, beta: f64) -> Result<Self, ModelError> {
        let f = LatencyFunction::PiecewiseLinear { l0, lambda, kappa, beta };
        f.check()?;
        Ok(f)
    }

    pub fn bpr(xi: f64, a: f64, b: u32, kappa: f64) -> Result<Self, ModelError> {
        let f = LatencyFunction::Bpr { xi, a, b, kappa };
        f.check()?;
        Ok(f)
    }

    pub fn strictly_convex_pwl(l0: f64, lambda: f64, kappa: f64, beta: f64, reg_eps: f64) -> Result<Self, ModelError> {
        let f = LatencyFunction::StrictlyConvexPwl { l0, lambda, kappa, beta, reg_eps };
        f.check()?;
        Ok(f)
    }

    /// Checks the parameter invariants.
    pub fn check(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidLatency(msg.to_string()));
        let pwl = |l0: f64, lambda: f64, kappa: f64, beta: f64| {
            if !(l0.is_finite() && l0 > 0.0) {
                return bad("l0 must be positive");
            }
            if !(kappa.is_finite() && kappa > 0.0) {
                return bad("kappa must be positive");
            }
            if !(beta.is_finite() && beta >= 0.0) {
                return bad("beta must be non-negative");
            }
            if !(lambda > 0.0 && lambda <= 1.0) {
                return bad("lambda must lie in (0, 1]");
            }
            Ok(())
        };
        match *self {
            LatencyFunction::PiecewiseLinear { l0, lambda, kappa, beta } => pwl(l0, lambda, kappa, beta),
            LatencyFunction::StrictlyConvexPwl { l0, lambda, kappa, beta, reg_eps } => {
                pwl(l0, lambda, kappa, beta)?;
                if !(reg_eps.is_finite() && reg_eps >= 0.0) {
                    return bad("reg_eps must be non-negative");
                }
                Ok(())
            }
            LatencyFunction::Bpr { xi, a, b, kappa } => {
                if !(xi.is_finite() && xi > 0.0) {
                    return bad("xi must be positive");
                }
                if !(kappa.is_finite() && kappa > 0.0) {
                    return bad("kappa must be positive");
                }
                if !(a.is_finite() && a >= 0.0) {
                    return bad("a must be non-negative");
                }
                if b < 1 {
                    return bad("b must be at least 1");
                }
                Ok(())
            }
        }
    }

    /// Travel time in minutes at `flow`.
    pub fn latency(&self, flow: f64) -> Result<f64, ModelError> {
        if flow < 0.0 || flow.is_nan() {
            return Err(ModelError::NegativeFlow(flow));
        }
        Ok(self.at(flow))
    }

    /// Closed-form `∫_0^flow latency(w) dw`.
    pub fn latency_integral(&self, flow: f64) -> Result<f64, ModelError> {
        if flow < 0.0 || flow.is_nan() {
            return Err(ModelError::NegativeFlow(flow));
        }
        Ok(self.area(flow))
    }

    /// Unchecked evaluation; negative round-off is treated as zero flow.
    #[inline]
    pub(crate) fn at(&self, flow: f64) -> f64 {
        let f = flow.max(0.0);
        match *self {
            LatencyFunction::PiecewiseLinear { l0, lambda, kappa, beta } => pwl_at(l0, lambda * kappa, beta, f),
            LatencyFunction::StrictlyConvexPwl { l0, lambda, kappa, beta, reg_eps } => {
                pwl_at(l0, lambda * kappa, beta, f) + reg_eps * f * f
            }
            LatencyFunction::Bpr { xi, a, b, kappa } => xi * (1.0 + a * (f / kappa).powi(b as i32)),
        }
    }

    #[inline]
    pub(crate) fn area(&self, flow: f64) -> f64 {
        let f = flow.max(0.0);
        match *self {
            LatencyFunction::PiecewiseLinear { l0, lambda, kappa, beta } => pwl_area(l0, lambda * kappa, beta, f),
            LatencyFunction::StrictlyConvexPwl { l0, lambda, kappa, beta, reg_eps } => {
                pwl_area(l0, lambda * kappa, beta, f) + reg_eps * f * f * f / 3.0
            }
            LatencyFunction::Bpr { xi, a, b, kappa } => {
                let p = b as i32 + 1;
                xi * f + xi * a * f * (f / kappa).powi(b as i32) / p as f64
            }
        }
    }

    /// Free-flow travel time, the value at zero flow.
    pub fn free_flow(&self) -> f64 {
        self.at(0.0)
    }
}

#[inline]
fn pwl_at(l0: f64, kink: f64, beta: f64, f: f64) -> f64 {
    if f <= kink {
        l0
    } else {
        l0 + beta * (f - kink)
    }
}

#[inline]
fn pwl_area(l0: f64, kink: f64, beta: f64, f: f64) -> f64 {
    if f <= kink {
        l0 * f
    } else {
        let over = f - kink;
        l0 * f + 0.5 * beta * over * over
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeId {
    Express,
    Gp,
}

impl EdgeId {
    pub const ALL: [EdgeId; 2] = [EdgeId::Express, EdgeId::Gp];

    pub const fn index(self) -> usize {
        match self {
            EdgeId::Express => 0,
            EdgeId::Gp => 1,
        }
    }
}

pub const EXPRESS: usize = 0;
pub const GP: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub latency: LatencyFunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eligibility {
    Eligible,
    Ineligible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserGroup {
    pub id: String,
    pub eligibility: Eligibility,
    /// Vehicles/hour.
    pub demand: f64,
    /// Value of time per period, $/hour.
    pub vot: Vec<f64>,
}

impl UserGroup {
    pub fn is_eligible(&self) -> bool {
        self.eligibility == Eligibility::Eligible
    }

    pub fn has_constant_vot(&self) -> bool {
        self.vot.windows(2).all(|w| w[0] == w[1])
    }
}

/// A validated game instance. Construct through [`Instance::new`] or serde.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceDoc")]
pub struct Instance {
    edges: [Edge; 2],
    groups: Vec<UserGroup>,
    horizon: usize,
    time_invariant_eligible: bool,
}

#[derive(Deserialize)]
struct InstanceDoc {
    edges: Vec<Edge>,
    groups: Vec<UserGroup>,
    horizon: usize,
    time_invariant_eligible: bool,
}

impl TryFrom<InstanceDoc> for Instance {
    type Error = ModelError;

    fn try_from(doc: InstanceDoc) -> Result<Self, Self::Error> {
        let n = doc.edges.len();
        let edges: [Edge; 2] = doc
            .edges
            .try_into()
            .map_err(|_| ModelError::InvalidInstance(format!("expected exactly 2 edges, got {n}")))?;
        Instance::new(edges, doc.groups, doc.horizon, doc.time_invariant_eligible)
    }
}

impl Instance {
    pub fn new(
        edges: [Edge; 2],
        groups: Vec<UserGroup>,
        horizon: usize,
        time_invariant_eligible: bool,
    ) -> Result<Self, ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidInstance(msg));
        if edges[0].id != EdgeId::Express || edges[1].id != EdgeId::Gp {
            return bad("edges must be ordered [express, gp]".into());
        }
        for e in &edges {
            e.latency.check()?;
        }
        if horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if groups.is_empty() {
            return bad("at least one user group is required".into());
        }
        for (i, g) in groups.iter().enumerate() {
            if groups[..i].iter().any(|h| h.id == g.id) {
                return bad(format!("duplicate group id {}", g.id));
            }
            if !(g.demand.is_finite() && g.demand > 0.0) {
                return bad(format!("group {} has non-positive demand {}", g.id, g.demand));
            }
            if g.vot.len() != horizon {
                return bad(format!("group {} has {} VoT entries, horizon is {horizon}", g.id, g.vot.len()));
            }
            if g.vot.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return bad(format!("group {} has a non-positive VoT", g.id));
            }
            if time_invariant_eligible && g.is_eligible() && !g.has_constant_vot() {
                return bad(format!(
                    "group {} is eligible with time-varying VoT but the instance is flagged time-invariant",
                    g.id
                ));
            }
        }
        Ok(Instance { edges, groups, horizon, time_invariant_eligible })
    }

    pub fn edges(&self) -> &[Edge; 2] {
        &self.edges
    }

    pub fn latency_fn(&self, edge: usize) -> &LatencyFunction {
        &self.edges[edge].latency
    }

    pub fn groups(&self) -> &[UserGroup] {
        &self.groups
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn time_invariant_eligible(&self) -> bool {
        self.time_invariant_eligible
    }

    pub fn total_demand(&self) -> f64 {
        self.groups.iter().map(|g| g.demand).sum()
    }

    /// True when every eligible group has a constant VoT vector, whatever the flag says.
    pub fn eligible_vots_constant(&self) -> bool {
        self.groups.iter().filter(|g| g.is_eligible()).all(UserGroup::has_constant_vot)
    }

    /// Latency of every edge at every period, `[edge][t]`, in minutes.
    pub fn edge_latencies(&self, x: &EdgeFlows) -> [Vec<f64>; 2] {
        [0, 1].map(|e| x.x[e].iter().map(|&f| self.edges[e].latency.at(f)).collect())
    }

    pub fn max_vot(&self) -> f64 {
        self.groups.iter().flat_map(|g| g.vot.iter().copied()).fold(0.0, f64::max)
    }

    pub fn min_demand(&self) -> f64 {
        self.groups.iter().map(|g| g.demand).fold(f64::INFINITY, f64::min)
    }
}

/// Toll vector and eligible credit budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheme {
    pub tolls: Vec<f64>,
    pub budget: f64,
}

impl Scheme {
    pub fn new(tolls: Vec<f64>, budget: f64) -> Result<Self, ModelError> {
        let s = Scheme { tolls, budget };
        s.check()?;
        Ok(s)
    }

    pub fn uniform(toll: f64, horizon: usize, budget: f64) -> Result<Self, ModelError> {
        Scheme::new(vec![toll; horizon], budget)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.tolls.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(ModelError::InvalidScheme("tolls must be finite and non-negative".into()));
        }
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return Err(ModelError::InvalidScheme("budget must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn check_for(&self, instance: &Instance) -> Result<(), ModelError> {
        self.check()?;
        if self.tolls.len() != instance.horizon() {
            return Err(ModelError::Shape(format!(
                "scheme has {} tolls, horizon is {}",
                self.tolls.len(),
                instance.horizon()
            )));
        }
        Ok(())
    }
}

/// Per-group flows, indexed `flows[g][edge][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPattern {
    pub flows: Vec<[Vec<f64>; 2]>,
}

impl FlowPattern {
    /// Everyone on the general-purpose lanes.
    pub fn all_gp(instance: &Instance) -> Self {
        let t = instance.horizon();
        FlowPattern { flows: instance.groups().iter().map(|g| [vec![0.0; t], vec![g.demand; t]]).collect() }
    }

    /// Builds a pattern from per-group express flows; GP flow is the remainder.
    pub fn from_express(instance: &Instance, express: &[Vec<f64>]) -> Self {
        FlowPattern {
            flows: instance
                .groups()
                .iter()
                .zip(express)
                .map(|(g, y1)| [y1.clone(), y1.iter().map(|&v| g.demand - v).collect()])
                .collect(),
        }
    }

    pub fn y(&self, g: usize, e: usize, t: usize) -> f64 {
        self.flows[g][e][t]
    }

    pub fn n_groups(&self) -> usize {
        self.flows.len()
    }

    fn check_shape(&self, instance: &Instance) -> Result<(), ModelError> {
        if self.flows.len() != instance.groups().len() {
            return Err(ModelError::Shape(format!(
                "flow has {} groups, instance has {}",
                self.flows.len(),
                instance.groups().len()
            )));
        }
        for (g, f) in self.flows.iter().enumerate() {
            for e in 0..2 {
                if f[e].len() != instance.horizon() {
                    return Err(ModelError::Shape(format!(
                        "group {g} edge {e} has {} periods, horizon is {}",
                        f[e].len(),
                        instance.horizon()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Aggregate edge flows, indexed `x[edge][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeFlows {
    pub x: [Vec<f64>; 2],
}

impl EdgeFlows {
    pub fn express(&self) -> &[f64] {
        &self.x[EXPRESS]
    }

    pub fn gp(&self) -> &[f64] {
        &self.x[GP]
    }
}

/// Sums group flows into edge flows.
pub fn aggregate_edge_flows(flow: &FlowPattern) -> EdgeFlows {
    let t = flow.flows.first().map_or(0, |f| f[0].len());
    let mut x = [vec![0.0; t], vec![0.0; t]];
    for f in &flow.flows {
        for e in 0..2 {
            for (acc, v) in x[e].iter_mut().zip(&f[e]) {
                *acc += v;
            }
        }
    }
    EdgeFlows { x }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Negative { group: usize, edge: usize, period: usize, value: f64 },
    Conservation { group: usize, period: usize, residual: f64 },
    Budget { group: usize, spend: f64, budget: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Negative { group, edge, period, value } => {
                write!(f, "negative flow {value} for group {group} edge {edge} period {period}")
            }
            Violation::Conservation { group, period, residual } => {
                write!(f, "conservation residual {residual} for group {group} period {period}")
            }
            Violation::Budget { group, spend, budget } => {
                write!(f, "group {group} spends {spend} per user, budget is {budget}")
            }
        }
    }
}

/// Lists every feasibility violation of `flow`. Shape problems are a
/// separate error, not a violation.
pub fn validate(instance: &Instance, scheme: &Scheme, flow: &FlowPattern) -> Result<Vec<Violation>, ModelError> {
    scheme.check_for(instance)?;
    flow.check_shape(instance)?;
    let mut out = Vec::new();
    for (g, (group, f)) in instance.groups().iter().zip(&flow.flows).enumerate() {
        for t in 0..instance.horizon() {
            for e in 0..2 {
                if f[e][t] < -FEASIBILITY_TOL || !f[e][t].is_finite() {
                    out.push(Violation::Negative { group: g, edge: e, period: t, value: f[e][t] });
                }
            }
            let residual = f[EXPRESS][t] + f[GP][t] - group.demand;
            if residual.abs() > FEASIBILITY_TOL {
                out.push(Violation::Conservation { group: g, period: t, residual });
            }
        }
        if group.is_eligible() {
            let spend: f64 = scheme.tolls.iter().zip(&f[EXPRESS]).map(|(tau, y)| tau * y).sum::<f64>() / group.demand;
            if spend > scheme.budget + FEASIBILITY_TOL {
                out.push(Violation::Budget { group: g, spend, budget: scheme.budget });
            }
        }
    }
    Ok(out)
}
