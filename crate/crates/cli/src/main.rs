use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use cbcp_core::calibration::{
    build_case_study_with, default_income_bins, fit_pwl_latency, parse_income_bins_json, parse_observations_csv,
    CaseStudyConfig,
};
use cbcp_core::design::{axis, heatmap_csv, select_best, solve_grid, DesignError, ObjectiveSpec};
use cbcp_core::equilibrium::{certificate_eps, potential, solve_equilibrium, verify_equilibrium, EquilibriumError};
use cbcp_core::io::{flow_csv, instance_to_json, load_config, parse_flow_csv, LoadedConfig};
use cbcp_core::statics::{
    budget_sweep, build_cost_nonmonotonicity_counterexample, build_substitutes_counterexample, sweep_csv, toll_sweep,
    StaticsError, TollTarget,
};

const EXIT_INPUT: u8 = 1;
const EXIT_NONCONVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "cbcp", version, about = "Credit-based congestion pricing equilibria and scheme design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Relative Frank-Wolfe gap tolerance; overrides the config.
    #[arg(long)]
    gap_tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the equilibrium of the configured scheme.
    Solve {
        #[command(flatten)]
        common: Common,
    },
    /// Check whether a flow CSV is an equilibrium of the configured scheme.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Flow CSV with columns group,period,express,gp.
        #[arg(long)]
        flows: PathBuf,
        /// Regret tolerance in $ per user (default derived from the gap tolerance).
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Re-solve over a range of one toll or of the budget.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `budget`, `toll:all` or `toll:<period>` (zero-based).
        #[arg(long)]
        axis: String,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        step: f64,
    },
    /// Dense sampling over the configured grid.
    Design {
        #[command(flatten)]
        common: Common,
    },
    /// Reproduce the substitutes and cost non-monotonicity counterexamples.
    Counterexamples {
        #[command(flatten)]
        common: Common,
    },
    /// Fit latency parameters and synthesize a case-study instance.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// CSV with columns flow,travel_time_minutes.
        #[arg(long)]
        observations: Option<PathBuf>,
        /// Capacity of the express lane in vehicles/hour.
        #[arg(long, default_value_t = 1650.0)]
        kappa: f64,
        /// Income-bin JSON (default: shipped fixture).
        #[arg(long)]
        bins: Option<PathBuf>,
        #[arg(long, default_value_t = 8000.0)]
        total_demand: f64,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
    },
}

/// Where artifacts go plus the provenance stamped on each of them.
struct Output {
    dir: PathBuf,
    seed: u64,
    config_hash: String,
}

impl Output {
    fn new(dir: PathBuf, seed: u64, config_hash: String) -> Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Output { dir, seed, config_hash })
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf> {
        let mut value = serde_json::to_value(body)?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("seed".into(), json!(self.seed));
            map.insert("config_hash".into(), json!(self.config_hash));
        }
        self.write(name, &(serde_json::to_string_pretty(&value)? + "\n"))
    }

    /// Provenance for the CSV artifacts, which carry no header metadata.
    fn manifest(&self, files: &[&str]) -> Result<()> {
        self.write_json("manifest.json", &json!({ "files": files }))?;
        Ok(())
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn setup(common: &Common) -> Result<()> {
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    if let Some(tol) = common.gap_tol {
        if !(tol > 0.0) {
            bail!("--gap-tol must be positive");
        }
    }
    Ok(())
}

fn load(common: &Common) -> Result<(LoadedConfig, Output)> {
    let path = common.config.as_ref().context("--config is required")?;
    let mut loaded = load_config(path, common.seed)?;
    if let Some(tol) = common.gap_tol {
        loaded.config.solver.gap_tol = tol;
    }
    let dir = common
        .out
        .clone()
        .or_else(|| loaded.config.output_dir.as_ref().map(|d| loaded.base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("cbcp-out"));
    let out = Output::new(dir, loaded.seed, hash_file(path)?)?;
    Ok((loaded, out))
}

fn plain_output(common: &Common) -> Result<Output> {
    let hash = match &common.config {
        Some(p) => hash_file(p)?,
        None => "none".into(),
    };
    Output::new(common.out.clone().unwrap_or_else(|| PathBuf::from("cbcp-out")), common.seed.unwrap_or(0), hash)
}

fn scheme_of(loaded: &LoadedConfig) -> Result<&cbcp_core::model::Scheme> {
    loaded.config.scheme.as_ref().context("this command needs a scheme in the config")
}

fn cmd_solve(common: &Common) -> Result<u8> {
    let (loaded, out) = load(common)?;
    let scheme = scheme_of(&loaded)?;
    let report = solve_equilibrium(&loaded.instance, scheme, &loaded.config.solver)?;
    out.write_json("report.json", &report)?;
    out.write("flows.csv", &flow_csv(&loaded.instance, &report.flow))?;
    out.manifest(&["report.json", "flows.csv"])?;
    if report.converged {
        log::info!("converged after {} iterations", report.iterations);
        Ok(0)
    } else {
        eprintln!(
            "solver stopped after {} iterations with relative gap {:e}, support gap {:e}",
            report.iterations, report.relative_gap, report.support_gap
        );
        Ok(EXIT_NONCONVERGED)
    }
}

fn cmd_verify(common: &Common, flows: &Path, eps: Option<f64>) -> Result<u8> {
    let (loaded, out) = load(common)?;
    let scheme = scheme_of(&loaded)?;
    let text = std::fs::read_to_string(flows).with_context(|| format!("reading {}", flows.display()))?;
    let flow = parse_flow_csv(&loaded.instance, &text)?;
    let eps = match eps {
        Some(e) => e,
        None => {
            let value = potential(&loaded.instance, scheme, &flow)?;
            certificate_eps(&loaded.instance, value, loaded.config.solver.gap_tol)
        }
    };
    let verdict = verify_equilibrium(&loaded.instance, scheme, &flow, eps)?;
    out.write_json("verdict.json", &json!({ "eps": eps, "verdict": verdict }))?;
    println!(
        "is_eq={} worst_regret={:e} worst_group={} vi_residual={:e}",
        verdict.is_eq,
        verdict.worst_regret,
        verdict.worst_group.map(|g| loaded.instance.groups()[g].id.clone()).unwrap_or_default(),
        verdict.vi_residual
    );
    Ok(0)
}

fn cmd_sweep(common: &Common, which: &str, from: f64, to: f64, step: f64) -> Result<u8> {
    let (loaded, out) = load(common)?;
    let scheme = scheme_of(&loaded)?;
    if !(step > 0.0) || from > to {
        bail!("sweep range needs from <= to and a positive step");
    }
    let values = axis([from, to], step);
    let result = match which {
        "budget" => budget_sweep(&loaded.instance, scheme, &values, &loaded.config.solver),
        "toll:all" => toll_sweep(&loaded.instance, scheme, TollTarget::All, &values, &loaded.config.solver),
        other => {
            let period = other
                .strip_prefix("toll:")
                .and_then(|p| p.parse::<usize>().ok())
                .with_context(|| format!("unknown axis {other:?}; use budget, toll:all or toll:<period>"))?;
            toll_sweep(&loaded.instance, scheme, TollTarget::Period(period), &values, &loaded.config.solver)
        }
    };
    let result = match result {
        Err(StaticsError::NonConvergence(v)) => {
            eprintln!("solver did not converge at parameter value {v}");
            return Ok(EXIT_NONCONVERGED);
        }
        r => r?,
    };
    out.write("sweep.csv", &sweep_csv(&result))?;
    out.manifest(&["sweep.csv"])?;
    Ok(0)
}

fn cmd_design(common: &Common) -> Result<u8> {
    let (loaded, out) = load(common)?;
    let grid = loaded.config.grid.as_ref().context("design needs a grid in the config")?;
    let objective = loaded.config.objective.clone().unwrap_or(ObjectiveSpec::pareto(1.0, 1.0, 1.0)?);
    let solves = solve_grid(&loaded.instance, grid, &loaded.config.solver)?;
    let result = match select_best(&loaded.instance, &solves, &objective) {
        Err(DesignError::AllExcluded(n)) => {
            eprintln!("no grid point converged ({n} excluded)");
            return Ok(EXIT_NONCONVERGED);
        }
        r => r?,
    };
    if !result.excluded.is_empty() {
        log::warn!("{} grid points did not converge and were excluded", result.excluded.len());
    }
    out.write("heatmap.csv", &heatmap_csv(&result))?;
    let best = result.best_entry();
    out.write_json(
        "best.json",
        &json!({
            "objective": objective,
            "scheme": best.scheme,
            "cost": result.best_cost,
            "summary": best.summary,
            "ties": result.ties.iter().map(|&i| &result.entries[i].scheme).collect::<Vec<_>>(),
            "excluded": result.excluded.iter().map(|&i| &result.entries[i].scheme).collect::<Vec<_>>(),
            "grid_points": result.entries.len(),
        }),
    )?;
    out.manifest(&["heatmap.csv", "best.json"])?;
    Ok(0)
}

fn cmd_counterexamples(common: &Common) -> Result<u8> {
    let out = plain_output(common)?;
    let opts = cbcp_core::equilibrium::SolverOptions { gap_tol: common.gap_tol.unwrap_or(1e-12), ..Default::default() };
    let ce = build_cost_nonmonotonicity_counterexample();
    let mut costs = Vec::new();
    for scheme in [&ce.scheme_low, &ce.scheme_high] {
        let report = solve_equilibrium(&ce.instance, scheme, &opts)?;
        let terms = cbcp_core::design::cost_terms(&ce.instance, scheme, &report.flow, &report.edge_flows);
        costs.push(terms.eligible / ce.instance.total_demand());
    }
    let cost_ok = (costs[0] - ce.expected_costs.0).abs() <= 1e-9 && (costs[1] - ce.expected_costs.1).abs() <= 1e-9;
    let (subs_ok, subs) = match build_substitutes_counterexample(&opts) {
        Ok(s) => (
            true,
            json!({
                "found": true,
                "raised_period": s.period_pair.0,
                "witness_period": s.period_pair.1,
                "epsilon": s.epsilon,
                "drop": s.check.magnitude,
                "tolls_before": s.scheme.tolls,
                "tolls_after": s.perturbed.tolls,
                "budget": s.scheme.budget,
            }),
        ),
        Err(StaticsError::Construction(msg)) => (false, json!({ "found": false, "error": msg })),
        Err(e) => return Err(e.into()),
    };
    out.write_json(
        "counterexamples.json",
        &json!({
            "cost_nonmonotonicity": {
                "budgets": [ce.scheme_low.budget, ce.scheme_high.budget],
                "eligible_costs": costs,
                "expected": [ce.expected_costs.0, ce.expected_costs.1],
                "reproduced": cost_ok,
            },
            "substitutes_violation": subs,
        }),
    )?;
    println!("eligible costs {:.10} {:.10}; substitutes violation found: {subs_ok}", costs[0], costs[1]);
    Ok(if cost_ok && subs_ok { 0 } else { EXIT_INPUT })
}

fn cmd_calibrate(
    common: &Common,
    observations: Option<&Path>,
    kappa: f64,
    bins: Option<&Path>,
    total_demand: f64,
    horizon: usize,
) -> Result<u8> {
    let out = plain_output(common)?;
    let mut cfg = CaseStudyConfig { total_demand, horizon, seed: out.seed, kappa, ..Default::default() };
    let mut files = vec!["instance.json"];
    if let Some(path) = observations {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let fit = fit_pwl_latency(&parse_observations_csv(&text)?, kappa)?;
        cfg.l0 = fit.l0;
        cfg.lambda = fit.lambda;
        cfg.beta = fit.beta;
        out.write_json("fit.json", &fit)?;
        files.push("fit.json");
    }
    let bins = match bins {
        Some(p) => {
            parse_income_bins_json(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?
        }
        None => default_income_bins(),
    };
    let instance = build_case_study_with(&cfg, &bins)?;
    out.write("instance.json", &(instance_to_json(&instance) + "\n"))?;
    out.manifest(&files)?;
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Solve { common } => {
            setup(common)?;
            cmd_solve(common)
        }
        Command::Verify { common, flows, eps } => {
            setup(common)?;
            cmd_verify(common, flows, *eps)
        }
        Command::Sweep { common, axis, from, to, step } => {
            setup(common)?;
            cmd_sweep(common, axis, *from, *to, *step)
        }
        Command::Design { common } => {
            setup(common)?;
            cmd_design(common)
        }
        Command::Counterexamples { common } => {
            setup(common)?;
            cmd_counterexamples(common)
        }
        Command::Calibrate { common, observations, kappa, bins, total_demand, horizon } => {
            setup(common)?;
            cmd_calibrate(common, observations.as_deref(), *kappa, bins.as_deref(), *total_demand, *horizon)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CBCP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            match err.downcast_ref::<EquilibriumError>() {
                Some(EquilibriumError::Infeasible(violations)) => {
                    eprintln!("error: infeasible flow");
                    for v in violations {
                        eprintln!("  {v}");
                    }
                }
                _ => eprintln!("error: {err:#}"),
            }
            ExitCode::from(EXIT_INPUT)
        }
    }
}
