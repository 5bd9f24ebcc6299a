//! File formats: instance JSON, flow CSV and experiment configuration.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{build_case_study_with, default_income_bins, CalibrationError, CaseStudyConfig};
use crate::design::{GridSpec, ObjectiveSpec};
use crate::equilibrium::SolverOptions;
use crate::model::{FlowPattern, Instance, Scheme, EXPRESS, GP};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("instance JSON: {0}")]
    Instance(String),
    #[error("flow CSV: {0}")]
    FlowCsv(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

pub fn parse_instance_json(text: &str) -> Result<Instance, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::Instance(e.to_string()))
}

pub fn instance_to_json(instance: &Instance) -> String {
    serde_json::to_string_pretty(instance).expect("instances always serialize")
}

#[derive(Debug, Deserialize)]
struct FlowRow {
    group: String,
    period: usize,
    express: f64,
    gp: f64,
}

/// Parses `group,period,express,gp` rows (zero-based periods). Every
/// group/period pair of `instance` must appear exactly once. Feasibility
/// is not checked here.
pub fn parse_flow_csv(instance: &Instance, text: &str) -> Result<FlowPattern, IoError> {
    let index: HashMap<&str, usize> = instance.groups().iter().enumerate().map(|(i, g)| (g.id.as_str(), i)).collect();
    let horizon = instance.horizon();
    let mut flow = FlowPattern::all_gp(instance);
    let mut seen = vec![vec![false; horizon]; instance.groups().len()];
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    for (i, row) in reader.deserialize::<FlowRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| IoError::FlowCsv(format!("line {line}: {e}")))?;
        let g = *index
            .get(row.group.as_str())
            .ok_or_else(|| IoError::FlowCsv(format!("line {line}: unknown group {:?}", row.group)))?;
        if row.period >= horizon {
            return Err(IoError::FlowCsv(format!("line {line}: period {} outside horizon {horizon}", row.period)));
        }
        if !(row.express.is_finite() && row.gp.is_finite()) {
            return Err(IoError::FlowCsv(format!("line {line}: non-finite flow")));
        }
        if std::mem::replace(&mut seen[g][row.period], true) {
            return Err(IoError::FlowCsv(format!(
                "line {line}: duplicate row for {} period {}",
                row.group, row.period
            )));
        }
        flow.flows[g][EXPRESS][row.period] = row.express;
        flow.flows[g][GP][row.period] = row.gp;
    }
    for (g, periods) in seen.iter().enumerate() {
        if let Some(t) = periods.iter().position(|s| !s) {
            return Err(IoError::FlowCsv(format!("missing row for {} period {t}", instance.groups()[g].id)));
        }
    }
    Ok(flow)
}

pub fn flow_csv(instance: &Instance, flow: &FlowPattern) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["group", "period", "express", "gp"]).expect("in-memory write");
    for (group, f) in instance.groups().iter().zip(&flow.flows) {
        for t in 0..instance.horizon() {
            w.write_record([group.id.clone(), t.to_string(), f[EXPRESS][t].to_string(), f[GP][t].to_string()])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Where the instance comes from: a JSON file path, the built-in case
/// study (`{"case_study": {...}}`), or an inline instance object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum InstanceSource {
    Path(PathBuf),
    CaseStudy(CaseStudyConfig),
    Inline(Instance),
}

impl TryFrom<serde_json::Value> for InstanceSource {
    type Error = String;

    fn try_from(value: serde_json::Value) -> Result<Self, String> {
        match value {
            serde_json::Value::String(p) => Ok(InstanceSource::Path(p.into())),
            serde_json::Value::Object(ref map) if map.contains_key("case_study") => {
                let cfg = serde_json::from_value(map["case_study"].clone()).map_err(|e| format!("case_study: {e}"))?;
                Ok(InstanceSource::CaseStudy(cfg))
            }
            other => serde_json::from_value(other).map(InstanceSource::Inline).map_err(|e| format!("instance: {e}")),
        }
    }
}

impl From<InstanceSource> for serde_json::Value {
    fn from(src: InstanceSource) -> Self {
        match src {
            InstanceSource::Path(p) => serde_json::Value::String(p.to_string_lossy().into_owned()),
            InstanceSource::CaseStudy(c) => serde_json::json!({ "case_study": c }),
            InstanceSource::Inline(i) => serde_json::to_value(i).expect("instances always serialize"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub instance: InstanceSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveSpec>,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Parses and checks a config; paths are not touched.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, IoError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
    match (&cfg.scheme, &cfg.grid) {
        (Some(_), Some(_)) => return Err(IoError::Config("give either a scheme or a grid, not both".into())),
        (None, None) => return Err(IoError::Config("a scheme or a grid is required".into())),
        _ => {}
    }
    if let Some(s) = &cfg.scheme {
        s.check().map_err(|e| IoError::Config(e.to_string()))?;
    }
    if let Some(g) = &cfg.grid {
        g.check().map_err(|e| IoError::Config(e.to_string()))?;
    }
    if let Some(o) = &cfg.objective {
        o.check().map_err(|e| IoError::Config(e.to_string()))?;
    }
    Ok(cfg)
}

pub fn config_to_json(config: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(config).expect("configs always serialize")
}

/// A config with its instance materialized.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub instance: Instance,
    pub seed: u64,
    /// Directory relative paths in the config are resolved against.
    pub base_dir: PathBuf,
}

fn read(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Read { path: path.to_path_buf(), source })
}

/// Reads a config file and builds its instance. `seed_override` replaces
/// the config seed; the resulting seed also drives the case-study VoTs.
pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<LoadedConfig, IoError> {
    let config = parse_config(&read(path)?)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let seed = seed_override.or(config.seed).unwrap_or(0);
    let instance = match &config.instance {
        InstanceSource::Path(p) => parse_instance_json(&read(&base_dir.join(p))?)?,
        InstanceSource::CaseStudy(c) => {
            let cfg = CaseStudyConfig { seed, ..c.clone() };
            build_case_study_with(&cfg, &default_income_bins())?
        }
        InstanceSource::Inline(i) => i.clone(),
    };
    if let Some(s) = &config.scheme {
        s.check_for(&instance).map_err(|e| IoError::Config(e.to_string()))?;
    }
    Ok(LoadedConfig { config, instance, seed, base_dir })
}
