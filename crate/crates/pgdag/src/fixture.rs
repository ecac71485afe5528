//! Batch fixtures for `eval-loss`: bound inputs, stub weights, the action
//! space and any hyperparameter overrides in one JSON file.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "actions": { "discrete": 2 },
//!   "hyper": { "gamma": 0.9 },
//!   "bindings": {
//!     "s_t": { "dtype": "S", "batch": 1, "width": 4, "data": [0, 0, 0, 0] },
//!     "gamma": { "dtype": "R", "batch": null, "width": 1, "data": [0.9] }
//!   },
//!   "weights": { "schema_version": 1, "stores": { ... } }
//! }
//! ```

use std::collections::BTreeMap;

use pgdag_core::autodiff::Bindings;
use pgdag_core::envs::ActionSpace;
use pgdag_core::graph::DType;
use pgdag_core::nn::ParameterStore;
use pgdag_core::{HyperParams, Value};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{store_from_json, store_to_json, CheckpointJson};
use crate::graph_file::{FormatError, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionsJson {
    Discrete(usize),
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

impl From<&ActionSpace> for ActionsJson {
    fn from(a: &ActionSpace) -> Self {
        match a {
            ActionSpace::Discrete(n) => ActionsJson::Discrete(*n),
            ActionSpace::Continuous { low, high } => ActionsJson::Continuous { low: low.clone(), high: high.clone() },
        }
    }
}

impl From<&ActionsJson> for ActionSpace {
    fn from(a: &ActionsJson) -> Self {
        match a {
            ActionsJson::Discrete(n) => ActionSpace::Discrete(*n),
            ActionsJson::Continuous { low, high } => ActionSpace::Continuous { low: low.clone(), high: high.clone() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueJson {
    pub dtype: String,
    pub batch: Option<usize>,
    pub width: usize,
    pub data: Vec<f64>,
}

impl From<&Value> for ValueJson {
    fn from(v: &Value) -> Self {
        ValueJson { dtype: v.dtype.as_str().to_string(), batch: v.batch, width: v.width, data: v.data.clone() }
    }
}

impl ValueJson {
    pub fn to_value(&self, symbol: &str) -> Result<Value, FormatError> {
        let bad = |m: String| FormatError::at(1, format!("binding `{symbol}`: {m}"));
        let dtype = DType::parse(&self.dtype).ok_or_else(|| bad(format!("unknown dtype `{}`", self.dtype)))?;
        if self.data.len() != self.batch.unwrap_or(1) * self.width {
            return Err(bad(format!("{} values for batch {:?} x width {}", self.data.len(), self.batch, self.width)));
        }
        Ok(Value::new(dtype, self.batch, self.width, self.data.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFixture {
    pub schema_version: u64,
    pub actions: ActionsJson,
    #[serde(default)]
    pub hyper: HyperParams,
    pub bindings: BTreeMap<String, ValueJson>,
    pub weights: CheckpointJson,
}

/// Everything `evaluate_loss` needs.
pub struct LoadedFixture {
    pub store: ParameterStore,
    pub bindings: Bindings,
    pub hp: HyperParams,
    pub actions: ActionSpace,
}

impl BatchFixture {
    pub fn new(store: &ParameterStore, bindings: &Bindings, hp: &HyperParams, actions: &ActionSpace) -> Self {
        BatchFixture {
            schema_version: SCHEMA_VERSION,
            actions: actions.into(),
            hyper: *hp,
            bindings: bindings
                .symbols()
                .map(|s| (s.to_string(), ValueJson::from(bindings.get(s).expect("listed symbol"))))
                .collect(),
            weights: store_to_json(store),
        }
    }

    pub fn load(&self) -> Result<LoadedFixture, FormatError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(FormatError::SchemaVersionMismatch { found: self.schema_version, expected: SCHEMA_VERSION });
        }
        let mut bindings = Bindings::new();
        for (k, v) in &self.bindings {
            bindings.set(k.clone(), v.to_value(k)?);
        }
        Ok(LoadedFixture {
            store: store_from_json(&self.weights)?,
            bindings,
            hp: self.hyper,
            actions: (&self.actions).into(),
        })
    }
}

pub fn parse_fixture(text: &str) -> Result<LoadedFixture, FormatError> {
    let f: BatchFixture = serde_json::from_str(text)?;
    f.load()
}

#[cfg(test)]
mod tests {
    use super::*;
    use pgdag_core::autodiff::evaluate_loss;
    use pgdag_core::reference::{self, oracle};

    #[test]
    fn ddqn_fixture_round_trips() {
        let s = oracle::ddqn_fixture();
        let text = serde_json::to_string(&BatchFixture::new(&s.store, &s.bindings, &s.hp, &s.actions)).unwrap();
        let f = parse_fixture(&text).unwrap();
        let g = reference::graph("ddqn").unwrap();
        let (loss, _) = evaluate_loss(&g, &f.store, &f.bindings, &f.hp, &f.actions, None).unwrap();
        assert!((loss - 0.1225).abs() < 1e-12);
    }

    #[test]
    fn bad_binding_length() {
        let v = ValueJson { dtype: "R".into(), batch: Some(3), width: 1, data: vec![1.0] };
        assert!(v.to_value("r_t").is_err());
    }
}
