//! Neural parameter stores behind `Parameter` nodes.
//!
//! Every store entry is a small fully connected network whose weights live in
//! one flat vector (`W` row-major then `b`, layer by layer). Hidden layers use
//! `tanh`; the output head depends on the node signature.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::envs::ActionSpace;
use crate::graph::{DType, Signature};
use crate::math;
use crate::rng;
use crate::value::Value;

pub const HIDDEN: [usize; 2] = [64, 64];
pub const LOGSTD_MIN: f64 = -20.0;
pub const LOGSTD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("signature {signature} is not supported for this action space")]
    UnknownSignature { signature: Signature },
    #[error("store `{0}` not found")]
    MissingStore(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("update for `{0}` produced non-finite weights")]
    NonFiniteWeights(String),
    #[error("invalid update rate {0}")]
    InvalidRate(f64),
}

/// How the network output is post-processed.
#[derive(Debug, Clone, PartialEq)]
pub enum OutputHead {
    Linear,
    /// `low + (tanh(x) + 1) / 2 * (high - low)` per dimension.
    TanhScaled { low: Vec<f64>, high: Vec<f64> },
    /// First `dim` outputs are means, the next `dim` are log standard
    /// deviations clamped to `[LOGSTD_MIN, LOGSTD_MAX]`.
    GaussianClamp { dim: usize },
}

/// How a `S x Z` network encodes its action input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionEncoding {
    OneHot(usize),
    Raw(usize),
}

impl ActionEncoding {
    pub fn width(self) -> usize {
        match self {
            ActionEncoding::OneHot(n) | ActionEncoding::Raw(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub signature: Signature,
    /// Layer widths from input to output.
    pub sizes: Vec<usize>,
    pub head: OutputHead,
    pub action_encoding: Option<ActionEncoding>,
    pub params: Vec<f64>,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NetCache {
    rows: usize,
    /// Activations per layer, including the encoded input (index 0) and the
    /// raw (pre-head) output (last).
    acts: Vec<Vec<f64>>,
    pub output: Value,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn output_width(signature: Signature, state_dim: usize, actions: &ActionSpace) -> Option<(usize, usize, OutputHead, Option<ActionEncoding>)> {
    Some(match (signature, actions) {
        (Signature::StateToScalar, _) => (state_dim, 1, OutputHead::Linear, None),
        (Signature::StateToList, ActionSpace::Discrete(n)) => (state_dim, *n, OutputHead::Linear, None),
        (Signature::StateActionToScalar, ActionSpace::Discrete(n)) => {
            (state_dim + n, 1, OutputHead::Linear, Some(ActionEncoding::OneHot(*n)))
        }
        (Signature::StateActionToScalar, ActionSpace::Continuous { low, .. }) => {
            (state_dim + low.len(), 1, OutputHead::Linear, Some(ActionEncoding::Raw(low.len())))
        }
        (Signature::StateToAction, ActionSpace::Continuous { low, high }) => (
            state_dim,
            low.len(),
            OutputHead::TanhScaled { low: low.clone(), high: high.clone() },
            None,
        ),
        (Signature::StateToGaussian, ActionSpace::Continuous { low, .. }) => {
            (state_dim, 2 * low.len(), OutputHead::GaussianClamp { dim: low.len() }, None)
        }
        _ => return None,
    })
}

/// Builds a seeded `64 x 64` tanh network for `signature`.
///
/// Weights and biases are drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
/// The output layer of `S -> ListR` networks starts at zero so that all
/// actions initially score the same.
pub fn mlp_init(
    seed: u64,
    signature: Signature,
    state_dim: usize,
    actions: &ActionSpace,
) -> Result<Network, NnError> {
    let (input, output, head, action_encoding) = output_width(signature, state_dim, actions)
        .ok_or(NnError::UnknownSignature { signature })?;
    let mut sizes = vec![input];
    sizes.extend(HIDDEN);
    sizes.push(output);
    let mut params = Vec::with_capacity(param_count(&sizes));
    let mut r = rng::rng_from(&[seed, signature as u64]);
    let layers = sizes.len() - 1;
    for (l, w) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let zero = l + 1 == layers && signature == Signature::StateToList;
        let bound = 1.0 / math::sqrt(fan_in.max(1) as f64);
        for _ in 0..(fan_in * fan_out + fan_out) {
            params.push(if zero { 0.0 } else { r.random_range(-bound..bound) });
        }
    }
    Ok(Network { signature, sizes, head, action_encoding, params })
}

impl Network {
    /// An affine map with no hidden layer and a linear head. Used for
    /// deterministic stub networks in tests and fixtures.
    pub fn affine(
        signature: Signature,
        input: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        action_encoding: Option<ActionEncoding>,
    ) -> Result<Network, NnError> {
        let output = bias.len();
        if weights.len() != input * output {
            return Err(NnError::ShapeMismatch(alloc::format!(
                "affine weights {} != {} x {}",
                weights.len(),
                output,
                input
            )));
        }
        let mut params = weights;
        params.extend(bias);
        Ok(Network {
            signature,
            sizes: vec![input, output],
            head: OutputHead::Linear,
            action_encoding,
            params,
        })
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn output_dtype(&self) -> DType {
        match self.signature {
            Signature::StateToScalar | Signature::StateActionToScalar => DType::R,
            Signature::StateToList | Signature::StateToGaussian => DType::ListR,
            Signature::StateToAction => DType::Z,
        }
    }

    fn encode_row(&self, row: &mut Vec<f64>, state: &[f64], action: Option<&[f64]>) -> Result<(), NnError> {
        let start = row.len();
        row.extend_from_slice(state);
        match (self.action_encoding, action) {
            (Some(ActionEncoding::OneHot(n)), Some(a)) => {
                let idx = a[0];
                if !(idx >= 0.0 && (idx as usize) < n && math::is_whole(idx)) {
                    return Err(NnError::ShapeMismatch(alloc::format!("action index {idx}")));
                }
                row.extend((0..n).map(|i| if i == idx as usize { 1.0 } else { 0.0 }));
            }
            (Some(ActionEncoding::Raw(d)), Some(a)) if a.len() == d => row.extend_from_slice(a),
            (None, None) => {}
            _ => return Err(NnError::ShapeMismatch("action input".into())),
        }
        if row.len() - start != self.input_width() {
            return Err(NnError::ShapeMismatch(alloc::format!(
                "network expects {} inputs per row, got {}",
                self.input_width(),
                row.len() - start
            )));
        }
        Ok(())
    }

    /// Raw layer computation on an encoded input matrix.
    fn run(&self, x: Vec<f64>, rows: usize) -> Vec<Vec<f64>> {
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x);
        let mut off = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let input = &acts[l];
            let mut out = vec![0.0; rows * fan_out];
            let hidden = l + 1 < layers;
            for r in 0..rows {
                let xr = &input[r * fan_in..(r + 1) * fan_in];
                let yr = &mut out[r * fan_out..(r + 1) * fan_out];
                for j in 0..fan_out {
                    let wj = &w[j * fan_in..(j + 1) * fan_in];
                    let z = b[j] + dot(wj, xr);
                    yr[j] = if hidden { hidden_tanh(z) } else { z };
                }
            }
            acts.push(out);
        }
        acts
    }

    fn apply_head(&self, raw: &[f64], rows: usize) -> Vec<f64> {
        let w = self.output_width();
        match &self.head {
            OutputHead::Linear => raw.to_vec(),
            OutputHead::TanhScaled { low, high } => {
                let mut out = raw.to_vec();
                for r in 0..rows {
                    for j in 0..w {
                        let t = math::tanh(raw[r * w + j]);
                        out[r * w + j] = low[j] + (t + 1.0) * 0.5 * (high[j] - low[j]);
                    }
                }
                out
            }
            OutputHead::GaussianClamp { dim } => {
                let mut out = raw.to_vec();
                for r in 0..rows {
                    for j in *dim..w {
                        out[r * w + j] = raw[r * w + j].clamp(LOGSTD_MIN, LOGSTD_MAX);
                    }
                }
                out
            }
        }
    }

    /// Evaluates the network on each row of its inputs (a state value and,
    /// for `S x Z` networks, an action value).
    pub fn forward(&self, inputs: &[&Value]) -> Result<NetCache, NnError> {
        let state = inputs.first().ok_or_else(|| NnError::ShapeMismatch("no input".into()))?;
        let action = inputs.get(1);
        let batch = match (state.batch, action.and_then(|a| a.batch)) {
            (Some(a), Some(b)) if a != b => {
                return Err(NnError::ShapeMismatch(alloc::format!("batch {a} vs {b}")));
            }
            (a, b) => a.or(b),
        };
        let rows = batch.unwrap_or(1);
        let mut x = Vec::with_capacity(rows * self.input_width());
        for r in 0..rows {
            self.encode_row(&mut x, state.row(r), action.map(|a| a.row(r)))?;
        }
        let acts = self.run(x, rows);
        let data = self.apply_head(acts.last().expect("output layer"), rows);
        let output = Value::new(self.output_dtype(), batch, self.output_width(), data);
        Ok(NetCache { rows, acts, output })
    }

    /// Output for a single state (and optional action) row.
    pub fn predict(&self, state: &[f64], action: Option<&[f64]>) -> Result<Vec<f64>, NnError> {
        let mut x = Vec::with_capacity(self.input_width());
        self.encode_row(&mut x, state, action)?;
        let acts = self.run(x, 1);
        Ok(self.apply_head(acts.last().expect("output layer"), 1))
    }

    /// Backpropagates the output cotangent `cot`. Weight gradients are
    /// accumulated into `grad` when given; the returned vector is the
    /// cotangent of the encoded input matrix when `want_input` is set.
    pub fn backward(
        &self,
        cache: &NetCache,
        cot: &[f64],
        mut grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let rows = cache.rows;
        let layers = self.sizes.len() - 1;
        let w_out = self.output_width();
        let raw = &cache.acts[layers];
        // head derivative
        let mut g: Vec<f64> = cot.to_vec();
        match &self.head {
            OutputHead::Linear => {}
            OutputHead::TanhScaled { low, high } => {
                for r in 0..rows {
                    for j in 0..w_out {
                        let t = math::tanh(raw[r * w_out + j]);
                        g[r * w_out + j] *= (1.0 - t * t) * 0.5 * (high[j] - low[j]);
                    }
                }
            }
            OutputHead::GaussianClamp { dim } => {
                for r in 0..rows {
                    for j in *dim..w_out {
                        let z = raw[r * w_out + j];
                        if !(LOGSTD_MIN..=LOGSTD_MAX).contains(&z) {
                            g[r * w_out + j] = 0.0;
                        }
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let x = &cache.acts[l];
            if let Some(grad) = grad.as_deref_mut() {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for r in 0..rows {
                    let xr = &x[r * fan_in..(r + 1) * fan_in];
                    for j in 0..fan_out {
                        let gj = g[r * fan_out + j];
                        if gj == 0.0 {
                            continue;
                        }
                        gb[j] += gj;
                        for (gwk, xk) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(xr) {
                            *gwk += gj * xk;
                        }
                    }
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut gx = vec![0.0; rows * fan_in];
            for r in 0..rows {
                let gxr = &mut gx[r * fan_in..(r + 1) * fan_in];
                for j in 0..fan_out {
                    let gj = g[r * fan_out + j];
                    if gj == 0.0 {
                        continue;
                    }
                    for (a, wk) in gxr.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                        *a += gj * wk;
                    }
                }
            }
            if l > 0 {
                // through the tanh of layer l
                for (gi, h) in gx.iter_mut().zip(x) {
                    *gi *= 1.0 - h * h;
                }
            }
            g = gx;
        }
        Some(g)
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i + 4 <= n {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    while i < n {
        s0 += a[i] * b[i];
        i += 1;
    }
    (s0 + s1) + (s2 + s3)
}

/// Hidden-layer tanh through a single `exp`.
#[inline]
fn hidden_tanh(z: f64) -> f64 {
    let e = math::exp(-2.0 * z.abs());
    let t = (1.0 - e) / (1.0 + e);
    if z < 0.0 { -t } else { t }
}

/// Per-store flat weight gradients.
pub type StoreGrads = BTreeMap<String, Vec<f64>>;

/// Named networks plus target links (`target <- source`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Network>,
    target_links: BTreeMap<String, String>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, net: Network) {
        self.entries.insert(key.into(), net);
    }

    pub fn get(&self, key: &str) -> Option<&Network> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Network> {
        self.entries.get_mut(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Network)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Registers `target` as a slowly updated copy of `source` and copies the
    /// weights across.
    pub fn link_target(&mut self, target: &str, source: &str) -> Result<(), NnError> {
        let net = self.get(source).ok_or_else(|| NnError::MissingStore(source.to_string()))?.clone();
        self.entries.insert(target.to_string(), net);
        self.target_links.insert(target.to_string(), source.to_string());
        Ok(())
    }

    pub fn target_links(&self) -> impl Iterator<Item = (&str, &str)> {
        self.target_links.iter().map(|(t, s)| (t.as_str(), s.as_str()))
    }

    pub fn zero_grads(&self, keys: impl IntoIterator<Item = impl AsRef<str>>) -> StoreGrads {
        keys.into_iter()
            .filter_map(|k| {
                let k = k.as_ref();
                self.get(k).map(|n| (k.to_string(), vec![0.0; n.num_params()]))
            })
            .collect()
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm(grads: &StoreGrads) -> f64 {
    math::sqrt(grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum())
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut StoreGrads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// `w <- w - lr * grad` for every store in `grads`. Nothing is written when
/// any result would be non-finite.
pub fn sgd_step(store: &mut ParameterStore, grads: &StoreGrads, lr: f64) -> Result<(), NnError> {
    for (key, g) in grads {
        let net = store.get(key).ok_or_else(|| NnError::MissingStore(key.clone()))?;
        if net.params.len() != g.len() {
            return Err(NnError::ShapeMismatch(alloc::format!(
                "gradient for `{key}` has {} entries, store has {}",
                g.len(),
                net.params.len()
            )));
        }
        if net.params.iter().zip(g).any(|(w, d)| !(w - lr * d).is_finite()) {
            return Err(NnError::NonFiniteWeights(key.clone()));
        }
    }
    for (key, g) in grads {
        let net = store.get_mut(key).expect("checked above");
        for (w, d) in net.params.iter_mut().zip(g) {
            *w -= lr * d;
        }
    }
    Ok(())
}

fn pair_mut<'a>(
    store: &'a mut ParameterStore,
    online: &str,
    target: &str,
) -> Result<(Vec<f64>, &'a mut Network), NnError> {
    let src = store.get(online).ok_or_else(|| NnError::MissingStore(online.to_string()))?.params.clone();
    let dst = store.get_mut(target).ok_or_else(|| NnError::MissingStore(target.to_string()))?;
    if dst.params.len() != src.len() {
        return Err(NnError::ShapeMismatch(alloc::format!("`{online}` vs `{target}`")));
    }
    Ok((src, dst))
}

/// `target <- tau * online + (1 - tau) * target`.
pub fn polyak_update(store: &mut ParameterStore, online: &str, target: &str, tau: f64) -> Result<(), NnError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(NnError::InvalidRate(tau));
    }
    let (src, dst) = pair_mut(store, online, target)?;
    for (t, o) in dst.params.iter_mut().zip(src) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

/// `target <- online`.
pub fn hard_copy(store: &mut ParameterStore, online: &str, target: &str) -> Result<(), NnError> {
    let (src, dst) = pair_mut(store, online, target)?;
    dst.params = src;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cartpole() -> ActionSpace {
        ActionSpace::Discrete(2)
    }

    fn pendulum() -> ActionSpace {
        ActionSpace::Continuous { low: vec![-2.0], high: vec![2.0] }
    }

    #[test]
    fn init_is_deterministic() {
        let a = mlp_init(7, Signature::StateToScalar, 4, &cartpole()).unwrap();
        let b = mlp_init(7, Signature::StateToScalar, 4, &cartpole()).unwrap();
        assert_eq!(a.params, b.params);
        let c = mlp_init(8, Signature::StateToScalar, 4, &cartpole()).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn list_head_width_matches_actions() {
        let net = mlp_init(0, Signature::StateToList, 4, &cartpole()).unwrap();
        assert_eq!(net.output_width(), 2);
        assert_eq!(net.sizes, vec![4, 64, 64, 2]);
    }

    #[test]
    fn unsupported_signature() {
        assert_eq!(
            mlp_init(0, Signature::StateToList, 3, &pendulum()),
            Err(NnError::UnknownSignature { signature: Signature::StateToList })
        );
    }

    #[test]
    fn deterministic_policy_respects_bounds() {
        let mut net = mlp_init(3, Signature::StateToAction, 3, &pendulum()).unwrap();
        for w in net.params.iter_mut() {
            *w *= 50.0;
        }
        for i in 0..50 {
            let x = i as f64 - 25.0;
            let a = net.predict(&[x, -x, 0.5 * x], None).unwrap()[0];
            assert!((-2.0..=2.0).contains(&a), "{a}");
        }
    }

    #[test]
    fn sgd_polyak_and_copy() {
        let mut store = ParameterStore::new();
        store.insert("w", Network::affine(Signature::StateToScalar, 1, vec![0.0], vec![1.0], None).unwrap());
        let grads: StoreGrads = [("w".to_string(), vec![0.0, 2.0])].into_iter().collect();
        sgd_step(&mut store, &grads, 0.1).unwrap();
        assert!((store.get("w").unwrap().params[1] - 0.8).abs() < 1e-15);

        store.insert("online", Network::affine(Signature::StateToScalar, 1, vec![0.0], vec![1.0], None).unwrap());
        store.insert("target", Network::affine(Signature::StateToScalar, 1, vec![0.0], vec![0.0], None).unwrap());
        polyak_update(&mut store, "online", "target", 0.005).unwrap();
        assert!((store.get("target").unwrap().params[1] - 0.005).abs() < 1e-15);
        polyak_update(&mut store, "online", "target", 1.0).unwrap();
        assert_eq!(store.get("target").unwrap().params, vec![0.0, 1.0]);
        store.get_mut("online").unwrap().params[1] = 4.0;
        hard_copy(&mut store, "online", "target").unwrap();
        assert_eq!(store.get("target").unwrap().params, vec![0.0, 4.0]);
        assert!(matches!(polyak_update(&mut store, "online", "target", 0.0), Err(NnError::InvalidRate(_))));
    }

    #[test]
    fn sgd_rejects_mismatched_shapes() {
        let mut store = ParameterStore::new();
        store.insert("w", Network::affine(Signature::StateToScalar, 1, vec![0.0], vec![1.0], None).unwrap());
        let grads: StoreGrads = [("w".to_string(), vec![2.0, 1.0, 0.5])].into_iter().collect();
        assert!(matches!(sgd_step(&mut store, &grads, 0.1), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = mlp_init(11, Signature::StateToGaussian, 3, &pendulum()).unwrap();
        let state = Value::new(DType::S, Some(2), 3, vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.7]);
        let cot = [0.3, -1.1, 0.7, 0.2];
        let loss = |n: &Network| -> f64 {
            let c = n.forward(&[&state]).unwrap();
            c.output.data.iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let cache = net.forward(&[&state]).unwrap();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&cache, &cot, Some(&mut grad), false);
        for &i in &[0usize, 17, 200, 4300, net.num_params() - 1] {
            let mut p = net.clone();
            p.params[i] += 1e-6;
            let mut m = net.clone();
            m.params[i] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-7 * (1.0 + fd.abs()), "{i}: {fd} vs {}", grad[i]);
        }
    }
}
