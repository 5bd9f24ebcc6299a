//! Instance construction from data: latency fits to flow/travel-time
//! observations and VoT populations synthesized from income bins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Edge, EdgeId, Eligibility, Instance, LatencyFunction, ModelError, UserGroup};

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid observation data: {0}")]
    Observations(String),
    #[error("degenerate data: no candidate kink has observations on both sides")]
    Degenerate,
    #[error("invalid income bins: {0}")]
    Bins(String),
    #[error(
        "eligible share {target} unreachable with {n_groups} groups; nearest achievable shares {below} and {above}"
    )]
    ShareUnreachable { target: f64, n_groups: usize, below: f64, above: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowObservation {
    /// Vehicles per hour.
    pub flow: f64,
    /// Minutes.
    #[serde(alias = "travel_time_minutes")]
    pub travel_time: f64,
}

/// Parses `flow,travel_time_minutes` CSV with a header row.
pub fn parse_observations_csv(text: &str) -> Result<Vec<FlowObservation>, CalibrationError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<FlowObservation>().enumerate() {
        let obs = row.map_err(|e| CalibrationError::Observations(format!("row {}: {e}", i + 1)))?;
        if !(obs.flow.is_finite() && obs.flow > 0.0 && obs.travel_time.is_finite() && obs.travel_time > 0.0) {
            return Err(CalibrationError::Observations(format!(
                "row {}: flow and travel time must be positive",
                i + 1
            )));
        }
        out.push(obs);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PwlFit {
    pub l0: f64,
    pub lambda: f64,
    pub beta: f64,
    pub kappa: f64,
    pub mse: f64,
}

impl PwlFit {
    pub fn latency(&self) -> Result<LatencyFunction, ModelError> {
        LatencyFunction::piecewise_linear(self.l0, self.lambda, self.kappa, self.beta)
    }
}

/// Least-squares piecewise-linear fit with the capacity `kappa` fixed.
///
/// `λ` runs over a grid of resolution 0.001 in (0, 1]; for each kink
/// `(l0, β)` solve a linear least-squares problem with `β ≥ 0`. Only kinks
/// with observations on both sides are candidates. Ties keep the smallest λ.
pub fn fit_pwl_latency(observations: &[FlowObservation], kappa: f64) -> Result<PwlFit, CalibrationError> {
    if observations.len() < 4 {
        return Err(CalibrationError::Observations(format!(
            "need at least 4 observations, got {}",
            observations.len()
        )));
    }
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(CalibrationError::Config("kappa must be positive".into()));
    }
    let n = observations.len() as f64;
    let mean_tt = observations.iter().map(|o| o.travel_time).sum::<f64>() / n;
    let mut best: Option<PwlFit> = None;
    for k in 1..=1000 {
        let lambda = k as f64 / 1000.0;
        let kink = lambda * kappa;
        let below = observations.iter().filter(|o| o.flow <= kink).count();
        if below == 0 || below == observations.len() {
            continue;
        }
        let (mut sh, mut shh, mut sht) = (0.0, 0.0, 0.0);
        for o in observations {
            let h = (o.flow - kink).max(0.0);
            sh += h;
            shh += h * h;
            sht += h * o.travel_time;
        }
        let mean_h = sh / n;
        let var_h = shh / n - mean_h * mean_h;
        let cov = sht / n - mean_h * mean_tt;
        let (l0, beta) = if var_h > 0.0 && cov > 0.0 {
            let beta = cov / var_h;
            (mean_tt - beta * mean_h, beta)
        } else {
            (mean_tt, 0.0)
        };
        if l0 <= 0.0 {
            continue;
        }
        let mse = observations
            .iter()
            .map(|o| {
                let r = o.travel_time - (l0 + beta * (o.flow - kink).max(0.0));
                r * r
            })
            .sum::<f64>()
            / n;
        if best.map_or(true, |b| mse < b.mse) {
            best = Some(PwlFit { l0, lambda, beta, kappa, mse });
        }
    }
    best.ok_or(CalibrationError::Degenerate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncomeBin {
    /// $ per year.
    pub lower: f64,
    /// `None` for the open-ended top bin.
    pub upper: Option<f64>,
    pub population_share: f64,
    /// Family incomes are divided by the family divisor.
    #[serde(default)]
    pub family: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncomeBinSet {
    #[serde(default = "default_hours")]
    pub hours_per_year: f64,
    pub bins: Vec<IncomeBin>,
}

fn default_hours() -> f64 {
    2080.0
}

/// Open-ended bins are treated as `[lower, 1.5 · lower]`, midpoint `1.25 · lower`.
pub const OPEN_BIN_FACTOR: f64 = 1.5;

impl IncomeBinSet {
    pub fn check(&self) -> Result<(), CalibrationError> {
        let bad = |m: String| Err(CalibrationError::Bins(m));
        if self.bins.is_empty() {
            return bad("no bins".into());
        }
        if !(self.hours_per_year.is_finite() && self.hours_per_year > 0.0) {
            return bad("hours_per_year must be positive".into());
        }
        for (i, b) in self.bins.iter().enumerate() {
            if !(b.lower.is_finite() && b.lower >= 0.0) {
                return bad(format!("bin {i}: lower bound must be nonnegative"));
            }
            match b.upper {
                Some(u) if !(u.is_finite() && u > b.lower) => {
                    return bad(format!("bin {i}: lower must be below upper"))
                }
                None if b.lower <= 0.0 => return bad(format!("bin {i}: open-ended bin needs a positive lower bound")),
                _ => {}
            }
            if !(b.population_share.is_finite() && b.population_share >= 0.0) {
                return bad(format!("bin {i}: share must be nonnegative"));
            }
        }
        let total: f64 = self.bins.iter().map(|b| b.population_share).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("shares sum to {total}, expected 1"));
        }
        Ok(())
    }

    /// Hourly wage intervals and shares, family divisor applied.
    fn hourly(&self, family_divisor: f64) -> Vec<(f64, f64, f64)> {
        self.bins
            .iter()
            .map(|b| {
                let div = self.hours_per_year * if b.family { family_divisor } else { 1.0 };
                let upper = b.upper.unwrap_or(b.lower * OPEN_BIN_FACTOR);
                (b.lower / div, upper / div, b.population_share)
            })
            .collect()
    }

    /// Mean hourly VoT of the bin mixture.
    pub fn mean_vot(&self, family_divisor: f64) -> f64 {
        self.hourly(family_divisor).iter().map(|(lo, hi, w)| w * 0.5 * (lo + hi)).sum()
    }

    /// Hourly VoT at cumulative population fraction `u`.
    pub fn quantile(&self, family_divisor: f64, u: f64) -> f64 {
        let bins = self.hourly(family_divisor);
        let cdf = |v: f64| -> f64 { bins.iter().map(|&(lo, hi, w)| w * ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).sum() };
        let mut lo = bins.iter().map(|b| b.0).fold(f64::INFINITY, f64::min);
        let mut hi = bins.iter().map(|b| b.1).fold(0.0, f64::max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

pub fn parse_income_bins_json(text: &str) -> Result<IncomeBinSet, CalibrationError> {
    let set: IncomeBinSet = serde_json::from_str(text).map_err(|e| CalibrationError::Bins(e.to_string()))?;
    set.check()?;
    Ok(set)
}

/// The shipped ACS-like bin fixture: ten earnings brackets for individuals
/// and ten for families, mean about $44/h and median about $37/h.
pub fn default_income_bins() -> IncomeBinSet {
    parse_income_bins_json(include_str!("../data/income_bins.json")).expect("shipped fixture is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotConfig {
    pub family_divisor: f64,
    pub eligible_share_target: f64,
    pub n_groups: usize,
    pub horizon: usize,
    pub perturb_amp: f64,
    pub seed: u64,
}

impl Default for VotConfig {
    fn default() -> Self {
        VotConfig {
            family_divisor: 2.0,
            eligible_share_target: 0.17,
            n_groups: 100,
            horizon: 5,
            perturb_amp: 0.125,
            seed: 0,
        }
    }
}

/// Synthesizes `n_groups` groups of equal demand (summing to 1).
///
/// Base VoTs are stratified draws from the bin mixture: group `g` takes the
/// quantile at `(g + U)/n`. The lowest-VoT groups are eligible, as few as
/// needed to reach the target share; their VoTs stay constant. Ineligible
/// VoTs become `v_g · (1 + δ)` with `δ ~ U[−amp, amp]` per period.
pub fn build_vot_groups(bins: &IncomeBinSet, cfg: &VotConfig) -> Result<Vec<UserGroup>, CalibrationError> {
    bins.check()?;
    if cfg.n_groups < 2 {
        return Err(CalibrationError::Config("n_groups must be at least 2".into()));
    }
    if !(cfg.eligible_share_target > 0.0 && cfg.eligible_share_target < 1.0) {
        return Err(CalibrationError::Config("eligible share target must lie in (0, 1)".into()));
    }
    if !(cfg.perturb_amp >= 0.0 && cfg.perturb_amp < 1.0) {
        return Err(CalibrationError::Config("perturbation amplitude must lie in [0, 1)".into()));
    }
    if !(cfg.family_divisor.is_finite() && cfg.family_divisor > 0.0) {
        return Err(CalibrationError::Config("family divisor must be positive".into()));
    }
    if cfg.horizon == 0 {
        return Err(CalibrationError::Config("horizon must be at least 1".into()));
    }
    let n = cfg.n_groups;
    let eligible = (1..n).find(|&k| k as f64 / n as f64 >= cfg.eligible_share_target - 1e-12).unwrap_or(n);
    let achieved = eligible as f64 / n as f64;
    if eligible == n || (achieved - cfg.eligible_share_target).abs() > 0.01 {
        return Err(CalibrationError::ShareUnreachable {
            target: cfg.eligible_share_target,
            n_groups: n,
            below: (eligible - 1) as f64 / n as f64,
            above: achieved,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base: Vec<f64> = (0..n)
        .map(|g| {
            let u = (g as f64 + rng.gen::<f64>()) / n as f64;
            bins.quantile(cfg.family_divisor, u)
        })
        .collect();
    let width = n.to_string().len().max(3);
    Ok(base
        .iter()
        .enumerate()
        .map(|(g, &v)| {
            let is_eligible = g < eligible;
            let vot = if is_eligible || cfg.perturb_amp == 0.0 {
                vec![v; cfg.horizon]
            } else {
                (0..cfg.horizon).map(|_| v * (1.0 + rng.gen_range(-cfg.perturb_amp..=cfg.perturb_amp))).collect()
            };
            UserGroup {
                id: format!("g{g:0width$}"),
                eligibility: if is_eligible { Eligibility::Eligible } else { Eligibility::Ineligible },
                demand: 1.0 / n as f64,
                vot,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseStudyConfig {
    pub total_demand: f64,
    pub horizon: usize,
    pub seed: u64,
    pub n_groups: usize,
    pub eligible_share_target: f64,
    pub perturb_amp: f64,
    pub l0: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub beta: f64,
    /// The GP edge aggregates this many lanes: capacity times, slope divided.
    pub gp_lanes: f64,
}

impl Default for CaseStudyConfig {
    fn default() -> Self {
        CaseStudyConfig {
            total_demand: 8000.0,
            horizon: 5,
            seed: 0,
            n_groups: 100,
            eligible_share_target: 0.17,
            perturb_amp: 0.125,
            l0: 19.4,
            lambda: 0.786,
            kappa: 1650.0,
            beta: 0.01256,
            gp_lanes: 3.0,
        }
    }
}

/// The two-lane case study with default parameters.
pub fn build_case_study(total_demand: f64, horizon: usize, seed: u64) -> Result<Instance, CalibrationError> {
    build_case_study_with(
        &CaseStudyConfig { total_demand, horizon, seed, ..Default::default() },
        &default_income_bins(),
    )
}

pub fn build_case_study_with(cfg: &CaseStudyConfig, bins: &IncomeBinSet) -> Result<Instance, CalibrationError> {
    if !(cfg.total_demand.is_finite() && cfg.total_demand > 0.0) {
        return Err(CalibrationError::Config("total demand must be positive".into()));
    }
    if !(cfg.gp_lanes.is_finite() && cfg.gp_lanes > 0.0) {
        return Err(CalibrationError::Config("gp_lanes must be positive".into()));
    }
    let express = LatencyFunction::piecewise_linear(cfg.l0, cfg.lambda, cfg.kappa, cfg.beta)?;
    let gp = LatencyFunction::piecewise_linear(cfg.l0, cfg.lambda, cfg.kappa * cfg.gp_lanes, cfg.beta / cfg.gp_lanes)?;
    let vot_cfg = VotConfig {
        eligible_share_target: cfg.eligible_share_target,
        n_groups: cfg.n_groups,
        horizon: cfg.horizon,
        perturb_amp: cfg.perturb_amp,
        seed: cfg.seed,
        ..Default::default()
    };
    let mut groups = build_vot_groups(bins, &vot_cfg)?;
    let n = groups.len();
    let each = cfg.total_demand / n as f64;
    let mut assigned = 0.0;
    for g in groups.iter_mut().take(n - 1) {
        g.demand = each;
        assigned += each;
    }
    groups[n - 1].demand = cfg.total_demand - assigned;
    Ok(Instance::new(
        [Edge { id: EdgeId::Express, latency: express }, Edge { id: EdgeId::Gp, latency: gp }],
        groups,
        cfg.horizon,
        true,
    )?)
}
