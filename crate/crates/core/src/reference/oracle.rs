//! Straight-line evaluations of the reference loss formulas.
//!
//! Nothing here goes through the graph interpreter or the network code:
//! stub networks must be single affine layers, which are applied by hand,
//! and every density is written out directly. The oracles exist to check
//! the interpreter against.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Bindings;
use crate::envs::ActionSpace;
use crate::graph::{free_symbols, DType, NodeKind, Signature};
use crate::hyper::HyperParams;
use crate::math;
use crate::nn::{ActionEncoding, Network, OutputHead, ParameterStore};
use crate::rng;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("missing stub `{0}`")]
    MissingStub(String),
    #[error("unknown reference graph `{0}`")]
    UnknownGraph(String),
}

/// Deterministic stand-ins for the networks and the data of one loss
/// evaluation. Noise inputs (`xi`, `eps`) are bound explicitly.
#[derive(Debug, Clone)]
pub struct Stubs {
    pub store: ParameterStore,
    pub bindings: Bindings,
    pub hp: HyperParams,
    pub actions: ActionSpace,
}

struct Ctx<'a> {
    stubs: &'a Stubs,
    rows: usize,
}

impl<'a> Ctx<'a> {
    fn value(&self, symbol: &str) -> Result<&'a Value, OracleError> {
        self.stubs.bindings.get(symbol).ok_or_else(|| OracleError::MissingStub(symbol.to_string()))
    }

    /// Row `i` of a bound symbol, repeating unbatched values.
    fn row(&self, symbol: &str, i: usize) -> Result<&'a [f64], OracleError> {
        let v = self.value(symbol)?;
        let r = if v.batch.is_some() { i } else { 0 };
        Ok(&v.data[r * v.width..(r + 1) * v.width])
    }

    fn scalar(&self, symbol: &str, i: usize) -> Result<f64, OracleError> {
        Ok(self.row(symbol, i)?[0])
    }

    fn net(&self, key: &str) -> Result<&'a Network, OracleError> {
        let net = self.stubs.store.get(key).ok_or_else(|| OracleError::MissingStub(key.to_string()))?;
        if net.sizes.len() != 2 || net.head != OutputHead::Linear {
            return Err(OracleError::MissingStub(alloc::format!("{key} (not an affine stub)")));
        }
        Ok(net)
    }

    /// `W x + b` for the stub `key` on `state` (and `action` for `S x Z`).
    fn apply(&self, key: &str, state: &[f64], action: Option<&[f64]>) -> Result<Vec<f64>, OracleError> {
        let net = self.net(key)?;
        let mut x = state.to_vec();
        match (net.action_encoding, action) {
            (Some(ActionEncoding::OneHot(n)), Some(a)) => {
                x.extend((0..n).map(|i| if i as f64 == a[0] { 1.0 } else { 0.0 }))
            }
            (Some(ActionEncoding::Raw(_)), Some(a)) => x.extend_from_slice(a),
            _ => {}
        }
        let (n_in, n_out) = (net.sizes[0], net.sizes[1]);
        let (w, b) = net.params.split_at(n_in * n_out);
        Ok((0..n_out)
            .map(|j| b[j] + (0..n_in).map(|k| w[j * n_in + k] * x[k]).sum::<f64>())
            .collect())
    }

    fn mean(&self, f: impl Fn(usize) -> Result<f64, OracleError>) -> Result<f64, OracleError> {
        let mut total = 0.0;
        for i in 0..self.rows {
            total += f(i)?;
        }
        Ok(total / self.rows as f64)
    }
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| math::exp(l - m)).sum();
    logits[k] - m - math::ln(z)
}

/// Diagonal Gaussian log-density with the head laid out as means then
/// log standard deviations.
fn gaussian_logpdf(head: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut total = 0.0;
    for j in 0..d {
        let (mu, ls) = (head[j], head[d + j]);
        let z = (x[j] - mu) / math::exp(ls);
        total += -0.5 * z * z - ls - 0.5 * math::ln(2.0 * core::f64::consts::PI);
    }
    total
}

/// Log-density of `a = tanh(u)` where `u` is drawn from the head.
fn squashed_logpdf(head: &[f64], u: &[f64]) -> f64 {
    let correction: f64 = u.iter().map(|&uj| {
        let t = math::tanh(uj);
        math::ln(1.0 - t * t)
    }).sum();
    gaussian_logpdf(head, u) - correction
}

/// The pre-squash sample `mu + exp(logstd) * xi`.
fn presquash(head: &[f64], xi: &[f64]) -> Vec<f64> {
    let d = xi.len();
    (0..d).map(|j| head[j] + math::exp(head[d + j]) * xi[j]).collect()
}

fn policy_logp(ctx: &Ctx, key: &str, i: usize) -> Result<f64, OracleError> {
    let head = ctx.apply(key, ctx.row("s_t", i)?, None)?;
    let a = ctx.row("a_t", i)?;
    Ok(match ctx.stubs.actions {
        ActionSpace::Discrete(_) => log_softmax_at(&head, a[0] as usize),
        ActionSpace::Continuous { .. } => gaussian_logpdf(&head, a),
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Evaluates the loss formula of reference graph `name` on `stubs`.
pub fn oracle_loss(name: &str, stubs: &Stubs) -> Result<f64, OracleError> {
    let s = stubs.bindings.get("s_t").or_else(|| stubs.bindings.get("s_tp1"));
    let rows = s.ok_or_else(|| OracleError::MissingStub("s_t".into()))?.rows();
    let ctx = Ctx { stubs, rows };
    let hp = &stubs.hp;
    let td_target = |i: usize, next: f64| -> Result<f64, OracleError> {
        let (r, d, g) = (ctx.scalar("r_t", i)?, ctx.scalar("d_t", i)?, ctx.scalar("gamma", i)?);
        Ok(r + g * (1.0 - d) * next)
    };
    match name {
        "ddqn" => ctx.mean(|i| {
            let q = ctx.apply("theta", ctx.row("s_t", i)?, None)?;
            let a = ctx.scalar("a_t", i)? as usize;
            let s1 = ctx.row("s_tp1", i)?;
            let greedy = argmax(&ctx.apply("theta", s1, None)?);
            let q_targ = ctx.apply("theta_targ", s1, None)?[greedy];
            let y = ctx.scalar("r_t", i)? + ctx.scalar("gamma", i)? * q_targ;
            Ok((q[a] - y) * (q[a] - y))
        }),
        "vpg_pi" => Ok(-ctx.mean(|i| Ok(policy_logp(&ctx, "theta", i)? * ctx.scalar("adv", i)?))?),
        "vpg_v" => {
            // rewards-to-go by the double-loop definition, discount per row
            let mut rtg = vec![0.0; rows];
            for (t, out) in rtg.iter_mut().enumerate() {
                let mut disc = 1.0;
                for k in t..rows {
                    *out += disc * ctx.scalar("r_t", k)?;
                    disc *= ctx.scalar("gamma", k)?;
                }
            }
            ctx.mean(|i| {
                let v = ctx.apply("phi", ctx.row("s_t", i)?, None)?[0];
                Ok((v - rtg[i]) * (v - rtg[i]))
            })
        }
        "ppo_pi" => Ok(-ctx.mean(|i| {
            let lp = policy_logp(&ctx, "theta", i)?;
            let lpk = policy_logp(&ctx, "theta_k", i)?;
            let ratio = math::exp(lp) / math::exp(lpk);
            let adv = ctx.scalar("adv", i)?;
            let clipped = ratio.clamp(1.0 - hp.eps_ppo, 1.0 + hp.eps_ppo);
            Ok((ratio * adv).min(clipped * adv))
        })?),
        "ddpg_q" => ctx.mean(|i| {
            let s1 = ctx.row("s_tp1", i)?;
            let mu = ctx.apply("theta_targ", s1, None)?;
            let y = td_target(i, ctx.apply("phi_targ", s1, Some(&mu))?[0])?;
            let q = ctx.apply("phi", ctx.row("s_t", i)?, Some(ctx.row("a_t", i)?))?[0];
            Ok((q - y) * (q - y))
        }),
        "ddpg_pi" | "td3_pi" => {
            let key = if name == "ddpg_pi" { "phi" } else { "phi1" };
            Ok(-ctx.mean(|i| {
                let s = ctx.row("s_t", i)?;
                let mu = ctx.apply("theta", s, None)?;
                Ok(ctx.apply(key, s, Some(&mu))?[0])
            })?)
        }
        "td3_q" => {
            let (low, high) = match &stubs.actions {
                ActionSpace::Continuous { low, high } => (low[0], high[0]),
                ActionSpace::Discrete(_) => return Err(OracleError::MissingStub("a_low".into())),
            };
            ctx.mean(|i| {
                let s1 = ctx.row("s_tp1", i)?;
                let eps = ctx.row("eps", i)?;
                let mu = ctx.apply("theta_targ", s1, None)?;
                let a1: Vec<f64> = mu
                    .iter()
                    .zip(eps)
                    .map(|(m, e)| (m + e.clamp(-hp.td3_c, hp.td3_c)).clamp(low, high))
                    .collect();
                let q1 = ctx.apply("phi1_targ", s1, Some(&a1))?[0];
                let q2 = ctx.apply("phi2_targ", s1, Some(&a1))?[0];
                let y = td_target(i, q1.min(q2))?;
                let q = ctx.apply("phi1", ctx.row("s_t", i)?, Some(ctx.row("a_t", i)?))?[0];
                Ok((q - y) * (q - y))
            })
        }
        "sac_q" => ctx.mean(|i| {
            let s1 = ctx.row("s_tp1", i)?;
            let head = ctx.apply("theta", s1, None)?;
            let u = presquash(&head, ctx.row("xi", i)?);
            let a: Vec<f64> = u.iter().map(|&x| math::tanh(x)).collect();
            let q1 = ctx.apply("phi1_targ", s1, Some(&a))?[0];
            let q2 = ctx.apply("phi2_targ", s1, Some(&a))?[0];
            let soft = q1.min(q2) - hp.alpha_sac * squashed_logpdf(&head, &u);
            let y = td_target(i, soft)?;
            let q = ctx.apply("phi1", ctx.row("s_t", i)?, Some(ctx.row("a_t", i)?))?[0];
            Ok((q - y) * (q - y))
        }),
        "sac_pi" => Ok(-ctx.mean(|i| {
            let s = ctx.row("s_t", i)?;
            let head = ctx.apply("theta", s, None)?;
            let u = presquash(&head, ctx.row("xi", i)?);
            let a: Vec<f64> = u.iter().map(|&x| math::tanh(x)).collect();
            let q1 = ctx.apply("phi1", s, Some(&a))?[0];
            let q2 = ctx.apply("phi2", s, Some(&a))?[0];
            Ok(q1.min(q2) - hp.alpha_sac * squashed_logpdf(&head, &u))
        })?),
        other => Err(OracleError::UnknownGraph(other.to_string())),
    }
}

fn uniform(r: &mut rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

/// Action space used by the random stubs of a graph: two discrete actions,
/// or a two-dimensional box `[-2, 2]^2`.
pub fn stub_actions(continuous: bool) -> ActionSpace {
    if continuous {
        ActionSpace::Continuous { low: vec![-2.0, -2.0], high: vec![2.0, 2.0] }
    } else {
        ActionSpace::Discrete(2)
    }
}

/// State width used by the random stubs.
pub const STUB_STATE_DIM: usize = 3;

/// Random affine stores and a random batch of `rows` transitions for the
/// reference graph `name`. Everything is a pure function of `seed`.
pub fn random_stubs(name: &str, seed: u64, rows: usize) -> Result<Stubs, OracleError> {
    let g = super::graph(name).map_err(|_| OracleError::UnknownGraph(name.to_string()))?;
    let continuous = g.action_space() == crate::graph::ActionKind::Continuous;
    let actions = stub_actions(continuous);
    let mut r = rng::rng_from(&[seed, rng::hash_str(name)]);
    let sd = STUB_STATE_DIM;
    let mut store = ParameterStore::new();
    for node in g.nodes() {
        let NodeKind::Parameter { store_key, signature } = &node.kind else { continue };
        if store.contains(store_key) {
            continue;
        }
        let (input, output, enc) = match (signature, &actions) {
            (Signature::StateToScalar, _) => (sd, 1, None),
            (Signature::StateToList, ActionSpace::Discrete(n)) => (sd, *n, None),
            (Signature::StateActionToScalar, ActionSpace::Discrete(n)) => (sd + n, 1, Some(ActionEncoding::OneHot(*n))),
            (Signature::StateActionToScalar, a) => (sd + a.width(), 1, Some(ActionEncoding::Raw(a.width()))),
            (Signature::StateToAction, a) => (sd, a.width(), None),
            (Signature::StateToGaussian, a) => (sd, 2 * a.width(), None),
            (Signature::StateToList, _) => return Err(OracleError::MissingStub(store_key.clone())),
        };
        let mut weights = uniform(&mut r, input * output, 0.5);
        let mut bias = uniform(&mut r, output, 0.5);
        if *signature == Signature::StateToGaussian {
            // keep log standard deviations moderate
            let d = output / 2;
            for j in d..output {
                bias[j] = -0.5 + 0.5 * bias[j];
                for k in 0..input {
                    weights[j * input + k] *= 0.2;
                }
            }
        }
        let net = Network::affine(*signature, input, weights, bias, enc)
            .map_err(|_| OracleError::MissingStub(store_key.clone()))?;
        store.insert(store_key.clone(), net);
    }

    let aw = actions.width();
    let mut bindings = Bindings::new();
    bindings.set("s_t", Value::new(DType::S, Some(rows), sd, uniform(&mut r, rows * sd, 1.0)));
    bindings.set("s_tp1", Value::new(DType::S, Some(rows), sd, uniform(&mut r, rows * sd, 1.0)));
    let a_t = match &actions {
        ActionSpace::Discrete(n) => (0..rows).map(|_| r.random_range(0..*n) as f64).collect(),
        ActionSpace::Continuous { .. } => uniform(&mut r, rows * aw, 1.9),
    };
    bindings.set("a_t", Value::new(DType::Z, Some(rows), aw, a_t));
    bindings.set("r_t", Value::scalars(uniform(&mut r, rows, 2.0)));
    bindings.set("d_t", Value::scalars((0..rows).map(|_| if r.random_bool(0.2) { 1.0 } else { 0.0 }).collect()));
    bindings.set("adv", Value::scalars(uniform(&mut r, rows, 2.0)));
    bindings.set("gamma", Value::scalar(0.9 + 0.09 * r.random::<f64>()));
    bindings.set("lambda", Value::scalar(0.95));
    let used = free_symbols(&g).inputs;
    for (symbol, sigma) in [("xi", 1.0), ("eps", 0.3)] {
        if used.contains(symbol) {
            let data = (0..rows * aw)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    sigma * z
                })
                .collect();
            bindings.set(symbol, Value::new(DType::ListR, Some(rows), aw, data));
        }
    }
    let hp = HyperParams { eps_ppo: 0.2, td3_c: 0.5, td3_sigma: 0.3, alpha_sac: 0.2, ..HyperParams::default() };
    Ok(Stubs { store, bindings, hp, actions })
}

/// A constant-output affine stub (`S -> R` or `S -> ListR`).
pub fn constant_stub(signature: Signature, state_dim: usize, outputs: &[f64], enc: Option<ActionEncoding>) -> Network {
    let input = state_dim + enc.map_or(0, |e| e.width());
    Network::affine(signature, input, vec![0.0; input * outputs.len()], outputs.to_vec(), enc)
        .expect("consistent stub shape")
}

/// The single-transition DDQN fixture: `Q_theta = 2`, `Q_theta' = 1.5`,
/// `r = 1`, `gamma = 0.9`.
pub fn ddqn_fixture() -> Stubs {
    let mut store = ParameterStore::new();
    store.insert("theta", constant_stub(Signature::StateToList, 4, &[2.0, 2.0], None));
    store.insert("theta_targ", constant_stub(Signature::StateToList, 4, &[1.5, 1.5], None));
    let bindings = Bindings::new()
        .with("s_t", Value::new(DType::S, Some(1), 4, vec![0.0; 4]))
        .with("s_tp1", Value::new(DType::S, Some(1), 4, vec![0.1; 4]))
        .with("a_t", Value::new(DType::Z, Some(1), 1, vec![0.0]))
        .with("r_t", Value::scalars(vec![1.0]))
        .with("d_t", Value::scalars(vec![0.0]))
        .with("gamma", Value::scalar(0.9));
    Stubs { store, bindings, hp: HyperParams::default(), actions: ActionSpace::Discrete(2) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ddqn_hand_value() {
        let loss = oracle_loss("ddqn", &ddqn_fixture()).unwrap();
        assert!((loss - 0.1225).abs() < 1e-12);
    }

    #[test]
    fn ppo_ratio_one_is_negative_mean_advantage() {
        let mut stubs = random_stubs("ppo_pi", 3, 7).unwrap();
        let theta = stubs.store.get("theta").unwrap().clone();
        stubs.store.insert("theta_k", theta);
        let adv = &stubs.bindings.get("adv").unwrap().data;
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let loss = oracle_loss("ppo_pi", &stubs).unwrap();
        assert!((loss + mean).abs() < 1e-12);
    }

    #[test]
    fn ddpg_policy_with_constant_q() {
        let mut stubs = random_stubs("ddpg_pi", 1, 5).unwrap();
        let sd = STUB_STATE_DIM;
        stubs.store.insert(
            "phi",
            constant_stub(Signature::StateActionToScalar, sd, &[7.0], Some(ActionEncoding::Raw(2))),
        );
        assert_eq!(oracle_loss("ddpg_pi", &stubs).unwrap(), -7.0);
    }

    #[test]
    fn missing_stub_is_reported() {
        let mut stubs = ddqn_fixture();
        stubs.store = ParameterStore::new();
        assert_eq!(oracle_loss("ddqn", &stubs), Err(OracleError::MissingStub("theta".into())));
    }
}
