//! Run configuration and its layering: flags override the config file,
//! which overrides the defaults.
//!
//! Defaults depend on the algorithm (step sizes and rollout lengths are
//! tuned per algorithm), so the algorithm is resolved first, then the
//! config file is deep-merged over its defaults, then flags are applied.

use std::path::{Path, PathBuf};

use pgdag_core::evolution::EvolutionConfig;
use pgdag_core::trainer::{algorithm_defaults, TrainBudget};
use pgdag_core::HyperParams;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("config {path}: top level must be an object")]
    NotObject { path: PathBuf },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Fully resolved settings for one command, written verbatim into the run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Reference algorithm name or a graph file path.
    pub algorithm: String,
    pub env: String,
    pub hyper: HyperParams,
    pub budget: TrainBudget,
    pub evolution: EvolutionConfig,
    /// Candidate-evaluation threads for `evolve`; 0 picks the core count.
    pub workers: usize,
}

impl RunConfig {
    /// Defaults for `algorithm`.
    pub fn defaults(algorithm: &str) -> RunConfig {
        let (hyper, budget) = algorithm_defaults(algorithm);
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/latest"),
            algorithm: algorithm.to_string(),
            env: "cartpole".into(),
            hyper,
            budget,
            evolution: EvolutionConfig::default(),
            workers: 0,
        }
    }
}

/// Command-line values that take precedence over everything else.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub algorithm: Option<String>,
    pub env: Option<String>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub workers: Option<usize>,
    pub iterations: Option<usize>,
}

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces.
pub fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub fn read_config_file(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    let v: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Json { path: path.into(), source })?;
    if !v.is_object() {
        return Err(ConfigError::NotObject { path: path.into() });
    }
    Ok(v)
}

/// Resolves a run config. `fallback_algorithm` is used when neither the
/// flags nor the file name one.
pub fn resolve(file: Option<&Value>, flags: &Overrides, fallback_algorithm: &str) -> Result<RunConfig, ConfigError> {
    let algorithm = flags
        .algorithm
        .clone()
        .or_else(|| file.and_then(|f| f.get("algorithm")).and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| fallback_algorithm.to_string());
    let base_alg = template_algorithm(&algorithm);
    let mut merged = serde_json::to_value(RunConfig::defaults(&base_alg)).expect("defaults serialize");
    if let Some(f) = file {
        merge(&mut merged, f);
    }
    let mut cfg: RunConfig =
        serde_json::from_value(merged).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.algorithm = algorithm;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    if let Some(e) = &flags.env {
        cfg.env = e.clone();
    }
    if let Some(k) = flags.steps {
        cfg.budget.total_steps = k;
    }
    if let Some(lr) = flags.lr {
        cfg.hyper.lr = lr;
    }
    if let Some(w) = flags.workers {
        cfg.workers = w;
    }
    if let Some(c) = flags.iterations {
        cfg.evolution.iterations = c;
    }
    // the evolution seed follows the run seed
    if flags.seed.is_some() || file.and_then(|f| f.pointer("/evolution/seed")).is_none() {
        cfg.evolution.seed = cfg.seed;
    }
    cfg.hyper.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    cfg.budget.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

/// Reference algorithm whose defaults apply: the name itself, or the
/// `algorithm` metadata of a graph file.
fn template_algorithm(algorithm: &str) -> String {
    if pgdag_core::reference::ALGORITHMS.contains(&algorithm) {
        return algorithm.to_string();
    }
    std::fs::read_to_string(algorithm)
        .ok()
        .and_then(|t| crate::graph_file::parse_graph(&t).ok())
        .and_then(|g| g.metadata.get(pgdag_core::graph::meta::ALGORITHM).cloned())
        .unwrap_or_else(|| "ddqn".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn precedence_flags_file_defaults() {
        let file = json!({"seed": 5, "hyper": {"gamma": 0.9}, "budget": {"total_steps": 1000}});
        let flags = Overrides { seed: Some(7), ..Overrides::default() };
        let cfg = resolve(Some(&file), &flags, "vpg").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.hyper.gamma, 0.9);
        assert_eq!(cfg.budget.total_steps, 1000);
        // untouched fields keep the algorithm defaults
        assert_eq!(cfg.hyper.lr, algorithm_defaults("vpg").0.lr);
        assert_eq!(cfg.budget.rollout_steps, algorithm_defaults("vpg").1.rollout_steps);
        assert_eq!(cfg.evolution.seed, 7);

        let cfg = resolve(Some(&file), &Overrides::default(), "vpg").unwrap();
        assert_eq!(cfg.seed, 5);
        let cfg = resolve(None, &Overrides::default(), "vpg").unwrap();
        assert_eq!(cfg, RunConfig::defaults("vpg"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let file = json!({"sede": 1});
        assert!(resolve(Some(&file), &Overrides::default(), "ddqn").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let file = json!({"hyper": {"gamma": 1.5}});
        assert!(matches!(resolve(Some(&file), &Overrides::default(), "ddqn"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = resolve(None, &Overrides { lr: Some(0.1), ..Overrides::default() }, "ddqn").unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(resolve(Some(&v), &Overrides::default(), "ddqn").unwrap(), cfg);
    }
}
