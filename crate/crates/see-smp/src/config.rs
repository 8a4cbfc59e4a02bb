//! Experiment configuration: a flat key-value text format with optional
//! per-experiment sections, or the same keys as a JSON object.

use crate::error::{Result, SeeError};
use crate::order::SlopeThresholds;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const EXPERIMENTS: &[&str] = &[
    "see-orders",
    "bsie-equivalence",
    "ito-orders",
    "shift-orders",
    "variation-orders",
    "hat-orders",
    "smp-verdict",
    "full-pipeline",
];

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub t_end: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub rho_max_steps: usize,
    pub n_rho: usize,
    pub t0_steps: usize,
    pub alpha_list: Vec<f64>,
    pub thresholds: SlopeThresholds,
    /// named instance variant within the experiment (experiment specific)
    pub instance: String,
    /// candidate selector for verdict experiments: oracle | sign-flipped | riccati
    pub candidate: String,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub strict: bool,
    /// raw keys as parsed, echoed into the report
    pub raw: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: String::new(),
            t_end: 1.0,
            n_steps: 256,
            n_paths: 10_000,
            seed: 7,
            rho_max_steps: 64,
            n_rho: 5,
            t0_steps: 64,
            alpha_list: vec![1.0],
            thresholds: SlopeThresholds::default(),
            instance: "default".to_string(),
            candidate: "oracle".to_string(),
            out_dir: PathBuf::from("out"),
            threads: 0,
            strict: false,
            raw: BTreeMap::new(),
        }
    }
}

fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    let mut experiment = String::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if line.starts_with('[') && line.ends_with(']') {
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            SeeError::config(format!("line {}: expected key = value", lineno + 1))
        })?;
        let key = k.trim().to_string();
        let val = v.trim().to_string();
        if key == "experiment" && section.is_empty() {
            experiment = val.clone();
        }
        if section.is_empty() {
            map.insert(key, val);
        } else {
            // sectioned keys apply only when that experiment is selected
            map.insert(format!("{section}::{key}"), val);
        }
    }
    // flatten the selected experiment's section over the globals
    if !experiment.is_empty() {
        let prefix = format!("{experiment}::");
        let selected: Vec<(String, String)> = map
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (k[prefix.len()..].to_string(), v.clone()))
            .collect();
        for (k, v) in selected {
            map.insert(k, v);
        }
    }
    Ok(map)
}

fn parse_json_object(text: &str) -> Result<BTreeMap<String, String>> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| SeeError::config(format!("invalid JSON config: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| SeeError::config("JSON config must be an object"))?;
    let mut map = BTreeMap::new();
    for (k, v) in obj {
        let s = match v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Array(items) => items
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
            other => other.to_string(),
        };
        map.insert(k.clone(), s);
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SeeError::config(format!("cannot read {}: {e}", path.display())))?;
        let trimmed = text.trim_start();
        let map = if trimmed.starts_with('{') {
            parse_json_object(&text)?
        } else {
            parse_kv_text(&text)?
        };
        Self::from_map(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let get = |k: &str| map.get(k).map(|s| s.as_str());
        cfg.experiment = get("experiment")
            .ok_or_else(|| SeeError::config("missing 'experiment' key"))?
            .to_string();
        if !EXPERIMENTS.contains(&cfg.experiment.as_str()) {
            return Err(SeeError::config(format!(
                "unknown experiment '{}'; expected one of {:?}",
                cfg.experiment, EXPERIMENTS
            )));
        }
        macro_rules! num {
            ($key:literal, $field:expr, $ty:ty) => {
                if let Some(v) = get($key) {
                    $field = v.parse::<$ty>().map_err(|_| {
                        SeeError::config(format!("key {}: cannot parse '{}'", $key, v))
                    })?;
                }
            };
        }
        num!("t_end", cfg.t_end, f64);
        num!("n_steps", cfg.n_steps, usize);
        num!("n_paths", cfg.n_paths, usize);
        num!("seed", cfg.seed, u64);
        num!("rho_max_steps", cfg.rho_max_steps, usize);
        num!("n_rho", cfg.n_rho, usize);
        num!("t0_steps", cfg.t0_steps, usize);
        num!("slope_tol", cfg.thresholds.slope_tol, f64);
        num!("o_margin", cfg.thresholds.o_margin, f64);
        num!("r2_min", cfg.thresholds.r_squared_min, f64);
        num!("threads", cfg.threads, usize);
        if let Some(v) = get("alpha") {
            cfg.alpha_list = v
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| SeeError::config(format!("bad alpha list '{v}'")))?;
        }
        if let Some(v) = get("instance") {
            cfg.instance = v.to_string();
        }
        if let Some(v) = get("candidate") {
            cfg.candidate = v.to_string();
        }
        if let Some(v) = get("out") {
            cfg.out_dir = PathBuf::from(v);
        }
        if let Some(v) = get("strict") {
            cfg.strict = v == "true" || v == "1";
        }
        if cfg.t_end <= 0.0 || cfg.n_steps == 0 || cfg.n_paths == 0 {
            return Err(SeeError::config(
                "t_end, n_steps and n_paths must be positive",
            ));
        }
        if cfg.rho_max_steps + cfg.t0_steps > cfg.n_steps {
            return Err(SeeError::config(
                "t0_steps + rho_max_steps exceeds n_steps",
            ));
        }
        cfg.raw = map;
        Ok(cfg)
    }

    /// Grid-aligned dyadic rho sweep in steps.
    pub fn rho_steps(&self) -> Result<Vec<usize>> {
        crate::order::dyadic_rho_steps(self.rho_max_steps, self.n_rho)
    }
}
