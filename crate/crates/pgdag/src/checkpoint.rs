//! Weight checkpoints: JSON map from store key to network description and
//! per-layer row-major weight matrices.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "stores": {
//!     "theta": {
//!       "signature": "S->ListR",
//!       "head": { "kind": "linear" },
//!       "action_encoding": null,
//!       "layers": [ { "shape": [64, 4], "weights": [...], "bias": [...] }, ... ]
//!     }
//!   },
//!   "targets": { "theta_targ": "theta" }
//! }
//! ```
//!
//! `shape` is `[outputs, inputs]`; `weights` holds `outputs * inputs`
//! floats, one row per output unit.

use std::collections::BTreeMap;

use pgdag_core::graph::Signature;
use pgdag_core::nn::{ActionEncoding, Network, OutputHead, ParameterStore};
use serde::{Deserialize, Serialize};

use crate::graph_file::{FormatError, SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadJson {
    Linear,
    TanhScaled { low: Vec<f64>, high: Vec<f64> },
    Gaussian { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "kebab-case")]
pub enum EncodingJson {
    OneHot(usize),
    Raw(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerJson {
    pub shape: [usize; 2],
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkJson {
    pub signature: String,
    pub head: HeadJson,
    pub action_encoding: Option<EncodingJson>,
    pub layers: Vec<LayerJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointJson {
    pub schema_version: u64,
    pub stores: BTreeMap<String, NetworkJson>,
    #[serde(default)]
    pub targets: BTreeMap<String, String>,
}

pub fn network_to_json(net: &Network) -> NetworkJson {
    let head = match &net.head {
        OutputHead::Linear => HeadJson::Linear,
        OutputHead::TanhScaled { low, high } => HeadJson::TanhScaled { low: low.clone(), high: high.clone() },
        OutputHead::GaussianClamp { dim } => HeadJson::Gaussian { dim: *dim },
    };
    let action_encoding = net.action_encoding.map(|e| match e {
        ActionEncoding::OneHot(n) => EncodingJson::OneHot(n),
        ActionEncoding::Raw(n) => EncodingJson::Raw(n),
    });
    let mut layers = Vec::new();
    let mut off = 0;
    for w in net.sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = net.params[off..off + fan_in * fan_out].to_vec();
        off += fan_in * fan_out;
        let bias = net.params[off..off + fan_out].to_vec();
        off += fan_out;
        layers.push(LayerJson { shape: [fan_out, fan_in], weights, bias });
    }
    NetworkJson { signature: net.signature.as_str().to_string(), head, action_encoding, layers }
}

pub fn network_from_json(key: &str, n: &NetworkJson) -> Result<Network, FormatError> {
    let bad = |m: String| FormatError::at(1, format!("store `{key}`: {m}"));
    let signature = Signature::parse(&n.signature).ok_or_else(|| bad(format!("unknown signature `{}`", n.signature)))?;
    let first = n.layers.first().ok_or_else(|| bad("no layers".into()))?;
    let mut sizes = vec![first.shape[1]];
    let mut params = Vec::new();
    for (i, l) in n.layers.iter().enumerate() {
        let [out, inp] = l.shape;
        if inp != *sizes.last().expect("non-empty") {
            return Err(bad(format!("layer {i} expects {inp} inputs, previous layer has {}", sizes.last().unwrap())));
        }
        if l.weights.len() != out * inp || l.bias.len() != out {
            return Err(bad(format!("layer {i} data does not match shape {:?}", l.shape)));
        }
        params.extend_from_slice(&l.weights);
        params.extend_from_slice(&l.bias);
        sizes.push(out);
    }
    let head = match &n.head {
        HeadJson::Linear => OutputHead::Linear,
        HeadJson::TanhScaled { low, high } => OutputHead::TanhScaled { low: low.clone(), high: high.clone() },
        HeadJson::Gaussian { dim } => OutputHead::GaussianClamp { dim: *dim },
    };
    let action_encoding = n.action_encoding.map(|e| match e {
        EncodingJson::OneHot(k) => ActionEncoding::OneHot(k),
        EncodingJson::Raw(k) => ActionEncoding::Raw(k),
    });
    Ok(Network { signature, sizes, head, action_encoding, params })
}

pub fn store_to_json(store: &ParameterStore) -> CheckpointJson {
    CheckpointJson {
        schema_version: SCHEMA_VERSION,
        stores: store.iter().map(|(k, n)| (k.to_string(), network_to_json(n))).collect(),
        targets: store.target_links().map(|(t, s)| (t.to_string(), s.to_string())).collect(),
    }
}

pub fn store_from_json(c: &CheckpointJson) -> Result<ParameterStore, FormatError> {
    if c.schema_version != SCHEMA_VERSION {
        return Err(FormatError::SchemaVersionMismatch { found: c.schema_version, expected: SCHEMA_VERSION });
    }
    let mut store = ParameterStore::new();
    for (k, n) in &c.stores {
        if !c.targets.contains_key(k) {
            store.insert(k.clone(), network_from_json(k, n)?);
        }
    }
    for (target, source) in &c.targets {
        store
            .link_target(target, source)
            .map_err(|e| FormatError::at(1, format!("target `{target}`: {e}")))?;
        if let Some(n) = c.stores.get(target) {
            let net = network_from_json(target, n)?;
            *store.get_mut(target).expect("just linked") = net;
        }
    }
    Ok(store)
}

pub fn save_store(store: &ParameterStore) -> String {
    serde_json::to_string_pretty(&store_to_json(store)).expect("checkpoint serializes")
}

pub fn load_store(text: &str) -> Result<ParameterStore, FormatError> {
    let c: CheckpointJson = serde_json::from_str(text)?;
    store_from_json(&c)
}
