//! Exact individual best responses for both user classes.
//!
//! Ineligible users pick the cheaper edge period by period. Eligible users
//! solve a fractional knapsack: periods are bought in descending order of
//! bang-per-buck until the credit budget runs out.

use serde::{Deserialize, Serialize};

use crate::model::{EdgeFlows, Instance, Scheme, UserGroup, EXPRESS, GP, MINUTES_PER_HOUR};

/// Result of [`bang_per_buck`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BangPerBuck {
    Ratio(f64),
    /// The period is untolled so the ratio is undefined. `express_faster`
    /// tells whether the ratio would be `+inf` (true) or zero (false).
    FreePeriod {
        express_faster: bool,
    },
}

/// Dollar value of the express-lane time saving per dollar of toll at period `t`.
pub fn bang_per_buck(instance: &Instance, x: &EdgeFlows, vot: f64, t: usize, toll: f64) -> BangPerBuck {
    let l1 = instance.latency_fn(EXPRESS).at(x.x[EXPRESS][t]);
    let l2 = instance.latency_fn(GP).at(x.x[GP][t]);
    ratio_from_times(vot, l1, l2, toll)
}

fn ratio_from_times(vot: f64, l1: f64, l2: f64, toll: f64) -> BangPerBuck {
    if toll > 0.0 {
        BangPerBuck::Ratio(vot * (l2 - l1) / MINUTES_PER_HOUR / toll)
    } else {
        BangPerBuck::FreePeriod { express_faster: l2 > l1 }
    }
}

/// A single user's plan: `express[t]` is the express-lane fraction at period
/// `t`, the remainder travels on the GP lanes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponsePlan {
    pub express: Vec<f64>,
    /// $ per user.
    pub cost: f64,
    /// Credits (eligible) or tolls (ineligible) spent per user, $.
    pub spend: f64,
}

impl ResponsePlan {
    pub fn z(&self, edge: usize, t: usize) -> f64 {
        if edge == EXPRESS {
            self.express[t]
        } else {
            1.0 - self.express[t]
        }
    }
}

/// Greedy solution of `max Σ savings·z  s.t.  Σ tolls·z ≤ budget, z ∈ [0,1]^T`.
///
/// Only periods with strictly positive savings are candidates. Untolled
/// candidates are taken first for free; the rest in descending
/// savings/toll order with ties broken by ascending period index. The last
/// affordable period may be fractional.
pub fn fractional_knapsack(savings: &[f64], tolls: &[f64], budget: f64) -> Vec<f64> {
    let mut z = vec![0.0; savings.len()];
    let mut priced: Vec<usize> = Vec::with_capacity(savings.len());
    for t in 0..savings.len() {
        if savings[t] > 0.0 {
            if tolls[t] > 0.0 {
                priced.push(t);
            } else {
                z[t] = 1.0;
            }
        }
    }
    // stable sort keeps ascending period order among equal ratios
    priced.sort_by(|&a, &b| {
        let ra = savings[a] / tolls[a];
        let rb = savings[b] / tolls[b];
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut remaining = budget;
    for t in priced {
        if remaining <= 0.0 {
            break;
        }
        if tolls[t] <= remaining {
            z[t] = 1.0;
            remaining -= tolls[t];
        } else {
            z[t] = remaining / tolls[t];
            remaining = 0.0;
        }
    }
    z
}

/// Budget-constrained best response of an eligible user with per-period VoT
/// `vot`. Periods whose dollar time saving does not exceed `tol` are left
/// on the GP lanes.
pub fn eligible_best_response(
    instance: &Instance,
    x: &EdgeFlows,
    scheme: &Scheme,
    vot: &[f64],
    tol: f64,
) -> ResponsePlan {
    let lat = instance.edge_latencies(x);
    eligible_response_from_times(&lat, scheme, vot, tol)
}

pub(crate) fn eligible_response_from_times(
    lat: &[Vec<f64>; 2],
    scheme: &Scheme,
    vot: &[f64],
    tol: f64,
) -> ResponsePlan {
    let savings: Vec<f64> = (0..vot.len())
        .map(|t| {
            let s = vot[t] * (lat[GP][t] - lat[EXPRESS][t]) / MINUTES_PER_HOUR;
            if s > tol {
                s
            } else {
                0.0
            }
        })
        .collect();
    let express = fractional_knapsack(&savings, &scheme.tolls, scheme.budget);
    let cost = time_cost(lat, vot, &express);
    let spend = scheme.tolls.iter().zip(&express).map(|(tau, z)| tau * z).sum();
    ResponsePlan { express, cost, spend }
}

/// Per-period cost minimizer of an ineligible user. Exact ties go express.
pub fn ineligible_best_response(instance: &Instance, x: &EdgeFlows, scheme: &Scheme, vot: &[f64]) -> ResponsePlan {
    let lat = instance.edge_latencies(x);
    ineligible_response_from_times(&lat, scheme, vot)
}

pub(crate) fn ineligible_response_from_times(lat: &[Vec<f64>; 2], scheme: &Scheme, vot: &[f64]) -> ResponsePlan {
    let mut express = vec![0.0; vot.len()];
    let mut cost = 0.0;
    let mut spend = 0.0;
    for t in 0..vot.len() {
        let c1 = vot[t] * lat[EXPRESS][t] / MINUTES_PER_HOUR + scheme.tolls[t];
        let c2 = vot[t] * lat[GP][t] / MINUTES_PER_HOUR;
        if c1 <= c2 {
            express[t] = 1.0;
            cost += c1;
            spend += scheme.tolls[t];
        } else {
            cost += c2;
        }
    }
    ResponsePlan { express, cost, spend }
}

/// Best response for whichever class `group` belongs to.
pub fn best_response(instance: &Instance, x: &EdgeFlows, scheme: &Scheme, group: &UserGroup) -> ResponsePlan {
    let lat = instance.edge_latencies(x);
    best_response_from_times(&lat, scheme, group)
}

pub(crate) fn best_response_from_times(lat: &[Vec<f64>; 2], scheme: &Scheme, group: &UserGroup) -> ResponsePlan {
    if group.is_eligible() {
        eligible_response_from_times(lat, scheme, &group.vot, 0.0)
    } else {
        ineligible_response_from_times(lat, scheme, &group.vot)
    }
}

fn time_cost(lat: &[Vec<f64>; 2], vot: &[f64], express: &[f64]) -> f64 {
    (0..vot.len())
        .map(|t| vot[t] / MINUTES_PER_HOUR * (lat[EXPRESS][t] * express[t] + lat[GP][t] * (1.0 - express[t])))
        .sum()
}

/// Cost per user of following `plan`. Eligible users pay only time; ineligible
/// users also pay the tolls of the express periods they use.
pub fn travel_cost(instance: &Instance, group: &UserGroup, plan: &ResponsePlan, x: &EdgeFlows, scheme: &Scheme) -> f64 {
    let lat = instance.edge_latencies(x);
    plan_cost_from_times(&lat, group, &plan.express, scheme)
}

pub(crate) fn plan_cost_from_times(lat: &[Vec<f64>; 2], group: &UserGroup, express: &[f64], scheme: &Scheme) -> f64 {
    let time = time_cost(lat, &group.vot, express);
    if group.is_eligible() {
        time
    } else {
        time + scheme.tolls.iter().zip(express).map(|(tau, z)| tau * z).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Edge, EdgeId, Eligibility, LatencyFunction};
    use approx::assert_relative_eq;

    /// Instance whose latencies are constant so `x` is irrelevant.
    fn flat_instance(l1: f64, l2: f64, t: usize) -> Instance {
        let f = |l0| LatencyFunction::piecewise_linear(l0, 1.0, 1e9, 0.0).unwrap();
        Instance::new(
            [Edge { id: EdgeId::Express, latency: f(l1) }, Edge { id: EdgeId::Gp, latency: f(l2) }],
            vec![UserGroup { id: "g".into(), eligibility: Eligibility::Eligible, demand: 1.0, vot: vec![60.0; t] }],
            t,
            true,
        )
        .unwrap()
    }

    fn zero_flows(t: usize) -> EdgeFlows {
        EdgeFlows { x: [vec![0.0; t], vec![0.0; t]] }
    }

    #[test]
    fn ratio_examples() {
        let inst = flat_instance(20.0, 30.0, 1);
        let x = zero_flows(1);
        assert_eq!(bang_per_buck(&inst, &x, 60.0, 0, 5.0), BangPerBuck::Ratio(2.0));
        assert_eq!(bang_per_buck(&inst, &x, 60.0, 0, 0.0), BangPerBuck::FreePeriod { express_faster: true });
        let same = flat_instance(25.0, 25.0, 1);
        assert_eq!(bang_per_buck(&same, &x, 60.0, 0, 3.0), BangPerBuck::Ratio(0.0));
        assert_eq!(bang_per_buck(&same, &x, 60.0, 0, 0.0), BangPerBuck::FreePeriod { express_faster: false });
    }

    #[test]
    fn two_period_knapsack() {
        // dollar savings 10 and 2.5 with toll 5 give ratios 2.0 and 0.5
        let z = fractional_knapsack(&[10.0, 2.5], &[5.0, 5.0], 5.0);
        assert_eq!(z, vec![1.0, 0.0]);
        let z = fractional_knapsack(&[10.0, 2.5], &[5.0, 5.0], 7.5);
        assert_eq!(z, vec![1.0, 0.5]);
    }

    #[test]
    fn knapsack_ties_take_earliest_period() {
        let z = fractional_knapsack(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0], 3.0);
        assert_eq!(z, vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn free_periods_are_used_without_budget() {
        let z = fractional_knapsack(&[1.0, 3.0, 0.0], &[0.0, 2.0, 0.0], 0.0);
        assert_eq!(z, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn eligible_without_budget_stays_on_gp() {
        let inst = flat_instance(20.0, 30.0, 3);
        let s = Scheme::uniform(5.0, 3, 0.0).unwrap();
        let plan = eligible_best_response(&inst, &zero_flows(3), &s, &[60.0; 3], 0.0);
        assert_eq!(plan.express, vec![0.0; 3]);
        assert_eq!(plan.spend, 0.0);
        assert_relative_eq!(plan.cost, 90.0);
    }

    #[test]
    fn eligible_with_ample_budget_uses_express_always() {
        let inst = flat_instance(20.0, 30.0, 3);
        let s = Scheme::uniform(5.0, 3, 15.0).unwrap();
        let plan = eligible_best_response(&inst, &zero_flows(3), &s, &[60.0; 3], 0.0);
        assert_eq!(plan.express, vec![1.0; 3]);
        assert_relative_eq!(plan.spend, 15.0);
    }

    #[test]
    fn ineligible_examples() {
        let inst = flat_instance(20.0, 30.0, 1);
        let x = zero_flows(1);
        let s = Scheme::uniform(5.0, 1, 0.0).unwrap();
        let plan = ineligible_best_response(&inst, &x, &s, &[60.0]);
        assert_eq!(plan.express, vec![1.0]);
        assert_relative_eq!(plan.cost, 25.0);

        let s = Scheme::uniform(60.0 * 10.0 / 60.0 + 1.0, 1, 0.0).unwrap();
        let plan = ineligible_best_response(&inst, &x, &s, &[60.0]);
        assert_eq!(plan.express, vec![0.0]);

        let tie = flat_instance(25.0, 25.0, 1);
        let s = Scheme::uniform(0.0, 1, 0.0).unwrap();
        assert_eq!(ineligible_best_response(&tie, &x, &s, &[60.0]).express, vec![1.0]);
    }

    #[test]
    fn travel_cost_examples() {
        let inst = flat_instance(20.0, 30.0, 5);
        let x = zero_flows(5);
        let s = Scheme::uniform(5.0, 5, 0.0).unwrap();
        let plan = ResponsePlan { express: vec![1.0; 5], cost: 0.0, spend: 0.0 };
        let eligible = &inst.groups()[0];
        assert_relative_eq!(travel_cost(&inst, eligible, &plan, &x, &s), 100.0);
        let mut ineligible = eligible.clone();
        ineligible.eligibility = Eligibility::Ineligible;
        assert_relative_eq!(travel_cost(&inst, &ineligible, &plan, &x, &s), 125.0);
        let gp = ResponsePlan { express: vec![0.0; 5], cost: 0.0, spend: 0.0 };
        assert_relative_eq!(travel_cost(&inst, &ineligible, &gp, &x, &s), 150.0);
    }
}
