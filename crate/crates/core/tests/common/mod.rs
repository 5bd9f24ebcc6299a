//! Random instance generators and independent oracles shared by the
//! integration tests.
#![allow(dead_code)]

use cbcp_core::equilibrium::{certificate_eps, verify_equilibrium, EquilibriumReport};
use cbcp_core::model::{Edge, EdgeId, Eligibility, Instance, LatencyFunction, Scheme, UserGroup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub groups: usize,
    pub horizon: usize,
    /// Every group has demand 1.
    pub unit_demand: bool,
    /// Use the strictly convex latency variant with this regularizer.
    pub reg_eps: Option<f64>,
}

/// Random time-invariant-eligible instance. Group 0 is eligible, group 1
/// ineligible, the rest are drawn.
pub fn random_instance(seed: u64, shape: Shape) -> Instance {
    let mut r = rng(seed);
    let groups: Vec<UserGroup> = (0..shape.groups)
        .map(|g| {
            let eligible = match g {
                0 => true,
                1 => false,
                _ => r.gen_bool(0.4),
            };
            let demand = if shape.unit_demand { 1.0 } else { r.gen_range(0.3..2.0) };
            let base: f64 = r.gen_range(10.0..80.0);
            let vot = if eligible {
                vec![base; shape.horizon]
            } else {
                (0..shape.horizon).map(|_| base * r.gen_range(0.8..1.2)).collect()
            };
            UserGroup {
                id: format!("g{g}"),
                eligibility: if eligible { Eligibility::Eligible } else { Eligibility::Ineligible },
                demand,
                vot,
            }
        })
        .collect();
    let d: f64 = groups.iter().map(|g| g.demand).sum();
    let l0_1 = r.gen_range(5.0..15.0);
    let l0_2 = l0_1 + r.gen_range(0.5..6.0);
    let lambda = r.gen_range(0.2..0.9);
    let kappa1 = d * r.gen_range(0.3..0.8);
    let kappa2 = kappa1 * r.gen_range(1.5..3.0);
    let beta1 = r.gen_range(5.0..30.0) / d;
    let beta2 = r.gen_range(2.0..15.0) / d;
    let make = |l0, kappa, beta| match shape.reg_eps {
        Some(eps) => LatencyFunction::strictly_convex_pwl(l0, lambda, kappa, beta, eps).unwrap(),
        None => LatencyFunction::piecewise_linear(l0, lambda, kappa, beta).unwrap(),
    };
    Instance::new(
        [
            Edge { id: EdgeId::Express, latency: make(l0_1, kappa1, beta1) },
            Edge { id: EdgeId::Gp, latency: make(l0_2, kappa2, beta2) },
        ],
        groups,
        shape.horizon,
        true,
    )
    .unwrap()
}

/// Random scheme with strictly positive tolls.
pub fn random_scheme(seed: u64, horizon: usize) -> Scheme {
    let mut r = rng(seed ^ 0x5eed);
    let tolls: Vec<f64> = (0..horizon).map(|_| r.gen_range(0.5..8.0)).collect();
    let budget = tolls.iter().sum::<f64>() * r.gen_range(0.0..1.2);
    Scheme::new(tolls, budget).unwrap()
}

/// Composite Simpson rule on `[0, x]`.
pub fn simpson(f: impl Fn(f64) -> f64, x: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = x / n as f64;
    let mut s = f(0.0) + f(x);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Integral of a latency from 0 to `x` by quadrature, split at the kink.
pub fn latency_area(l: &LatencyFunction, x: f64) -> f64 {
    let kink = match *l {
        LatencyFunction::PiecewiseLinear { lambda, kappa, .. }
        | LatencyFunction::StrictlyConvexPwl { lambda, kappa, .. } => lambda * kappa,
        LatencyFunction::Bpr { .. } => f64::INFINITY,
    };
    let f = |w: f64| l.latency(w).unwrap();
    if x <= kink {
        simpson(f, x, 400)
    } else {
        simpson(f, kink, 400) + simpson(|w| f(kink + w), x - kink, 400)
    }
}

/// Exhaustive minimization of the potential over flows whose per-group
/// express fractions are multiples of `1/res`, for `T = 2` and unit demands.
/// Returns the express edge flows of a minimizer.
pub fn brute_force_express_flows(instance: &Instance, scheme: &Scheme, res: usize) -> (Vec<f64>, f64) {
    assert_eq!(instance.horizon(), 2);
    assert!(instance.groups().iter().all(|g| g.demand == 1.0));
    let n = instance.groups().len();
    let side = n * res + 1;
    let mut dp = vec![f64::INFINITY; side * side];
    dp[0] = 0.0;
    let mut reach = 0;
    for group in instance.groups() {
        let mut next = vec![f64::INFINITY; side * side];
        let options: Vec<(usize, usize, f64)> = (0..=res)
            .flat_map(|a| (0..=res).map(move |b| (a, b)))
            .filter_map(|(a, b)| {
                let z = [a as f64 / res as f64, b as f64 / res as f64];
                if group.is_eligible() {
                    let spend = scheme.tolls[0] * z[0] + scheme.tolls[1] * z[1];
                    (spend <= scheme.budget + 1e-12).then_some((a, b, 0.0))
                } else {
                    let lin: f64 = (0..2).map(|t| 60.0 * scheme.tolls[t] * z[t] / group.vot[t]).sum();
                    Some((a, b, lin))
                }
            })
            .collect();
        for s1 in 0..=reach {
            for s2 in 0..=reach {
                let base = dp[s1 * side + s2];
                if !base.is_finite() {
                    continue;
                }
                for &(a, b, c) in &options {
                    let k = (s1 + a) * side + s2 + b;
                    if base + c < next[k] {
                        next[k] = base + c;
                    }
                }
            }
        }
        dp = next;
        reach += res;
    }
    let total = n as f64;
    let area1: Vec<f64> = (0..side).map(|i| latency_area(instance.latency_fn(0), i as f64 / res as f64)).collect();
    let area2: Vec<f64> =
        (0..side).map(|i| latency_area(instance.latency_fn(1), total - i as f64 / res as f64)).collect();
    let mut best = (f64::INFINITY, 0, 0);
    for s1 in 0..side {
        for s2 in 0..side {
            let lin = dp[s1 * side + s2];
            if !lin.is_finite() {
                continue;
            }
            let v = lin + area1[s1] + area2[s1] + area1[s2] + area2[s2];
            if v < best.0 {
                best = (v, s1, s2);
            }
        }
    }
    (vec![best.1 as f64 / res as f64, best.2 as f64 / res as f64], best.0)
}

/// Best value of `max Σ savings·z, Σ tolls·z ≤ budget, z ∈ [0,1]^T` by
/// enumerating every vertex: a 0/1 vector plus at most one fractional entry.
pub fn knapsack_exhaustive(savings: &[f64], tolls: &[f64], budget: f64) -> f64 {
    let t = savings.len();
    let mut best = 0.0f64;
    for mask in 0u32..(1 << t) {
        let full: Vec<usize> = (0..t).filter(|i| mask & (1 << i) != 0).collect();
        let spend: f64 = full.iter().map(|&i| tolls[i]).sum();
        if spend > budget + 1e-12 {
            continue;
        }
        let value: f64 = full.iter().map(|&i| savings[i]).sum();
        best = best.max(value);
        for f in (0..t).filter(|i| mask & (1 << i) == 0) {
            let frac = if tolls[f] > 0.0 { ((budget - spend) / tolls[f]).clamp(0.0, 1.0) } else { 1.0 };
            best = best.max(value + savings[f] * frac);
        }
    }
    best
}

/// Untolled single-period Pigou equilibrium split by bisection on
/// `l1(x) − l2(D − x)`; `None` when one edge is unused.
pub fn pigou_split(l1: &LatencyFunction, l2: &LatencyFunction, demand: f64) -> Option<f64> {
    let g = |x: f64| l1.latency(x).unwrap() - l2.latency(demand - x).unwrap();
    if g(0.0) >= 0.0 || g(demand) <= 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (0.0, demand);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Runs the equilibrium certificate at the tolerance implied by `gap_tol`.
pub fn certify(instance: &Instance, scheme: &Scheme, report: &EquilibriumReport, gap_tol: f64) -> Result<(), String> {
    let eps = certificate_eps(instance, report.potential, gap_tol);
    let v = verify_equilibrium(instance, scheme, &report.flow, eps).map_err(|e| e.to_string())?;
    if v.is_eq {
        Ok(())
    } else {
        Err(format!(
            "certificate failed: worst regret {:e} (group {:?}), vi residual {:e}, eps {:e}",
            v.worst_regret, v.worst_group, v.vi_residual, eps
        ))
    }
}
