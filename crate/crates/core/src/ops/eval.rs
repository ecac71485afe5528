use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::OpId;
use crate::graph::{ActionKind, DType};
use crate::math;
use crate::value::Value;

/// Smallest magnitude a `Div` denominator is allowed to reach.
pub const DEN_GUARD: f64 = 1e-8;
/// `Log` evaluates `log(max(x, LOG_GUARD))`.
pub const LOG_GUARD: f64 = 1e-8;
/// Squashed actions are clamped to `[-SQUASH_LIMIT, SQUASH_LIMIT]` before
/// being mapped back through `atanh`.
pub const SQUASH_LIMIT: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OpError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: OpId, detail: String },
    #[error("{op}: invalid bounds, lo={lo} > hi={hi}")]
    InvalidBounds { op: OpId, lo: f64, hi: f64 },
    #[error("{op}: action index {index} out of range for a list of length {len}")]
    InvalidIndex { op: OpId, index: f64, len: usize },
    #[error("{op}: unsupported policy head (width {head}, action width {action})")]
    UnsupportedHead { op: OpId, head: usize, action: usize },
    #[error("{0} is not differentiable")]
    NonDifferentiable(OpId),
    #[error("{op}: unexpected input type {found}")]
    TypeMismatch { op: OpId, found: DType },
}

fn shape_err(op: OpId, detail: String) -> OpError {
    OpError::ShapeMismatch { op, detail }
}

fn common_batch(op: OpId, vals: &[&Value]) -> Result<Option<usize>, OpError> {
    let mut batch = None;
    for v in vals {
        if let Some(b) = v.batch {
            match batch {
                None => batch = Some(b),
                Some(prev) if prev != b => {
                    return Err(shape_err(op, format!("batch {prev} vs {b}")));
                }
                _ => {}
            }
        }
    }
    Ok(batch)
}

fn common_width(op: OpId, a: usize, b: usize) -> Result<usize, OpError> {
    if a == b || b == 1 {
        Ok(a)
    } else if a == 1 {
        Ok(b)
    } else {
        Err(shape_err(op, format!("width {a} vs {b}")))
    }
}

fn binary_dtype(a: DType, b: DType) -> DType {
    if a == DType::Z || b == DType::Z {
        DType::Z
    } else if a == DType::ListR || b == DType::ListR {
        DType::ListR
    } else {
        DType::R
    }
}

#[inline]
fn guard_den(d: f64) -> (f64, bool) {
    if d.abs() >= DEN_GUARD {
        (d, false)
    } else if d < 0.0 {
        (-DEN_GUARD, true)
    } else {
        (DEN_GUARD, true)
    }
}

/// Forward value and partial derivatives of an elementwise binary op.
#[inline]
fn binary_point(op: OpId, a: f64, b: f64) -> (f64, f64, f64) {
    match op {
        OpId::Add => (a + b, 1.0, 1.0),
        OpId::Subtract => (a - b, 1.0, -1.0),
        OpId::Multiply => (a * b, b, a),
        OpId::Div => {
            let (d, guarded) = guard_den(b);
            let db = if guarded { 0.0 } else { -a / (d * d) };
            (a / d, 1.0 / d, db)
        }
        OpId::Min | OpId::MinPair => {
            if a <= b {
                (a, 1.0, 0.0)
            } else {
                (b, 0.0, 1.0)
            }
        }
        OpId::Max => {
            if a >= b {
                (a, 1.0, 0.0)
            } else {
                (b, 0.0, 1.0)
            }
        }
        _ => unreachable!("not a binary elementwise op"),
    }
}

/// Forward value and derivative of an elementwise unary op.
#[inline]
fn unary_point(op: OpId, x: f64) -> (f64, f64) {
    match op {
        OpId::Neg => (-x, -1.0),
        OpId::Square => (x * x, 2.0 * x),
        OpId::Log => {
            if x > LOG_GUARD {
                (math::ln(x), 1.0 / x)
            } else {
                (math::ln(LOG_GUARD), 0.0)
            }
        }
        OpId::Exp => {
            let y = math::exp(x);
            (y, y)
        }
        OpId::Abs => {
            let s = if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            };
            (x.abs(), s)
        }
        _ => unreachable!("not a unary elementwise op"),
    }
}

/// `v'_i = v_i + b * v'_{i+1}`, i.e. `v'_i = sum_{k >= i} v_k b^(k-i)`.
pub fn sum_and_discount(v: &[f64], b: f64) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut acc = 0.0;
    for i in (0..v.len()).rev() {
        acc = v[i] + b * acc;
        out[i] = acc;
    }
    out
}

/// Reverse-mode product for [`sum_and_discount`] with per-step factors
/// `b[i]` (`v'_i = v_i + b_i v'_{i+1}`). Returns the cotangents of `v` and
/// of each `b_i`.
pub fn sum_and_discount_vjp(out: &[f64], b: &[f64], cot: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = out.len();
    let mut gv = vec![0.0; n];
    let mut gb = vec![0.0; n];
    let mut carry = 0.0;
    for i in 0..n {
        carry = cot[i] + if i > 0 { b[i - 1] * carry } else { 0.0 };
        gv[i] = carry;
        if i + 1 < n {
            gb[i] = carry * out[i + 1];
        }
    }
    (gv, gb)
}

/// Component clip; errors when `lo > hi`.
pub fn clip(x: f64, lo: f64, hi: f64) -> Result<f64, OpError> {
    if lo > hi {
        return Err(OpError::InvalidBounds { op: OpId::Clip, lo, hi });
    }
    Ok(if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    })
}

/// `tanh(mu + exp(logstd) * xi)` component-wise.
pub fn squashing(mu: &[f64], logstd: &[f64], xi: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logstd)
        .zip(xi)
        .map(|((&m, &ls), &e)| math::tanh(m + math::exp(ls) * e))
        .collect()
}

/// Log-density of `x` under a diagonal Gaussian.
pub fn gaussian_log_density(x: &[f64], mu: &[f64], logstd: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(logstd)
        .map(|((&x, &m), &ls)| {
            let z = (x - m) / math::exp(ls);
            -0.5 * z * z - ls - math::LN_SQRT_2PI
        })
        .sum()
}

fn expect_index(op: OpId, z: f64, len: usize) -> Result<usize, OpError> {
    if z >= 0.0 && math::is_whole(z) && (z as usize) < len {
        Ok(z as usize)
    } else {
        Err(OpError::InvalidIndex { op, index: z, len })
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| math::exp(l - m)).collect();
    let s: f64 = p.iter().sum();
    for x in &mut p {
        *x /= s;
    }
    p
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_head(op: OpId, head: &Value, action: &Value) -> Result<usize, OpError> {
    let d = action.width;
    if head.width != 2 * d {
        return Err(OpError::UnsupportedHead { op, head: head.width, action: d });
    }
    Ok(d)
}

/// Per-row log-density and its partials `(d/dhead, d/daction)` for the
/// policy-probability operators.
fn prob_row(
    op: OpId,
    head: &[f64],
    action: &[f64],
    actions: ActionKind,
) -> Result<(f64, Vec<f64>, Vec<f64>), OpError> {
    if actions == ActionKind::Discrete {
        if !matches!(op, OpId::Prob | OpId::LogProb) {
            return Err(OpError::UnsupportedHead { op, head: head.len(), action: 1 });
        }
        let idx = expect_index(op, action[0], head.len())?;
        let p = softmax_row(head);
        let logp = math::ln(p[idx]);
        let mut g = vec![0.0; head.len()];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = if j == idx { 1.0 } else { 0.0 } - p[j];
        }
        return Ok((logp, g, vec![0.0]));
    }
    let d = action.len();
    let (mu, logstd) = head.split_at(d);
    let mut logp = 0.0;
    let mut g_head = vec![0.0; 2 * d];
    let mut g_act = vec![0.0; d];
    let squashed = matches!(op, OpId::SquashedProb | OpId::SquashedLogProb);
    for j in 0..d {
        let sigma = math::exp(logstd[j]);
        let (u, du_da, jac, djac_da) = if squashed {
            let a = action[j].clamp(-SQUASH_LIMIT, SQUASH_LIMIT);
            let clamped = a != action[j];
            let one_minus = (1.0 - a) * (1.0 + a);
            let du = if clamped { 0.0 } else { 1.0 / one_minus };
            let dj = if clamped { 0.0 } else { 2.0 * a / one_minus };
            (math::atanh(a), du, -math::ln(one_minus), dj)
        } else {
            (action[j], 1.0, 0.0, 0.0)
        };
        let z = (u - mu[j]) / sigma;
        logp += -0.5 * z * z - logstd[j] - math::LN_SQRT_2PI + jac;
        g_head[j] = z / sigma;
        g_head[d + j] = z * z - 1.0;
        g_act[j] = -z / sigma * du_da + djac_da;
    }
    Ok((logp, g_head, g_act))
}

/// Forward semantics of a primitive operator.
pub fn eval_primitive(op: OpId, inputs: &[&Value], actions: ActionKind) -> Result<Value, OpError> {
    if inputs.len() != op.arity() {
        return Err(shape_err(op, format!("expected {} inputs, got {}", op.arity(), inputs.len())));
    }
    let batch = common_batch(op, inputs)?;
    let rows = batch.unwrap_or(1);
    match op {
        op if op.is_elementwise_binary() || op == OpId::MinPair => {
            let (a, b) = (inputs[0], inputs[1]);
            let width = common_width(op, a.width, b.width)?;
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for j in 0..width {
                    data.push(binary_point(op, a.at(r, j), b.at(r, j)).0);
                }
            }
            Ok(Value::new(binary_dtype(a.dtype, b.dtype), batch, width, data))
        }
        op if op.is_elementwise_unary() => {
            let x = inputs[0];
            let data = x.data.iter().map(|&v| unary_point(op, v).0).collect();
            Ok(Value::new(x.dtype, x.batch, x.width, data))
        }
        OpId::MeanBatch => {
            let x = inputs[0];
            if x.batch.is_none() {
                return Ok(x.clone());
            }
            let mut data = vec![0.0; x.width];
            for r in 0..rows {
                for (j, d) in data.iter_mut().enumerate() {
                    *d += x.at(r, j);
                }
            }
            for d in &mut data {
                *d /= rows as f64;
            }
            Ok(Value::new(x.dtype, None, x.width, data))
        }
        OpId::SelectList => {
            let (list, z) = (inputs[0], inputs[1]);
            let mut data = Vec::with_capacity(rows);
            for r in 0..rows {
                let idx = expect_index(op, z.at(r, 0), list.width)?;
                data.push(list.row(r)[idx]);
            }
            Ok(Value::new(DType::R, batch, 1, data))
        }
        OpId::MaxList | OpId::ArgMaxList => {
            let x = inputs[0];
            if x.width == 0 {
                return Err(shape_err(op, "empty list".into()));
            }
            let data = (0..rows)
                .map(|r| {
                    let row = x.row(r);
                    let i = first_argmax(row);
                    if op == OpId::MaxList {
                        row[i]
                    } else {
                        i as f64
                    }
                })
                .collect();
            let dtype = if op == OpId::MaxList { DType::R } else { DType::Z };
            Ok(Value::new(dtype, batch, 1, data))
        }
        OpId::DotProduct => {
            let (a, b) = (inputs[0], inputs[1]);
            let width = common_width(op, a.width, b.width)?;
            let data = (0..rows)
                .map(|r| (0..width).map(|j| a.at(r, j) * b.at(r, j)).sum())
                .collect();
            Ok(Value::new(DType::R, batch, 1, data))
        }
        OpId::Softmax => {
            let x = inputs[0];
            let mut data = Vec::with_capacity(x.data.len());
            for r in 0..x.rows() {
                data.extend(softmax_row(x.row(r)));
            }
            Ok(Value::new(x.dtype, x.batch, x.width, data))
        }
        OpId::SumAndDiscount => {
            let (v, b) = (inputs[0], inputs[1]);
            if v.width != 1 || b.width != 1 {
                return Err(shape_err(op, "expects scalar rows".into()));
            }
            let mut data = vec![0.0; rows];
            let mut acc = 0.0;
            for i in (0..rows).rev() {
                acc = v.at(i, 0) + b.at(i, 0) * acc;
                data[i] = acc;
            }
            Ok(Value::new(DType::R, batch, 1, data))
        }
        OpId::Clip => {
            let (x, lo, hi) = (inputs[0], inputs[1], inputs[2]);
            if lo.width != 1 || hi.width != 1 {
                return Err(shape_err(op, "bounds must be scalars".into()));
            }
            let mut data = Vec::with_capacity(rows * x.width);
            for r in 0..rows {
                let (l, h) = (lo.at(r, 0), hi.at(r, 0));
                for j in 0..x.width {
                    data.push(clip(x.at(r, j), l, h)?);
                }
            }
            Ok(Value::new(x.dtype, batch, x.width, data))
        }
        OpId::Squashing => {
            let (head, xi) = (inputs[0], inputs[1]);
            let d = check_head(op, head, xi)?;
            let mut data = Vec::with_capacity(rows * d);
            for r in 0..rows {
                let (mu, ls) = head.row(r).split_at(d);
                data.extend(squashing(mu, ls, xi.row(r)));
            }
            Ok(Value::new(DType::Z, batch, d, data))
        }
        op if op.is_prob() => {
            let (head, act) = (inputs[0], inputs[1]);
            if actions == ActionKind::Continuous {
                check_head(op, head, act)?;
            } else if act.width != 1 {
                return Err(shape_err(op, format!("discrete action width {}", act.width)));
            }
            let mut data = Vec::with_capacity(rows);
            for r in 0..rows {
                let (logp, _, _) = prob_row(op, head.row(r), act.row(r), actions)?;
                data.push(match op {
                    OpId::LogProb | OpId::SquashedLogProb => logp,
                    _ => math::exp(logp),
                });
            }
            Ok(Value::new(DType::R, batch, 1, data))
        }
        _ => unreachable!("operator {op} has no forward rule"),
    }
}

/// Vector-Jacobian product: given the forward inputs, the forward output and
/// the output cotangent, returns one cotangent per input port (shaped like
/// that input's payload). Ports that carry no gradient return `None`.
pub fn vjp(
    op: OpId,
    inputs: &[&Value],
    output: &Value,
    cot: &[f64],
    actions: ActionKind,
) -> Result<Vec<Option<Vec<f64>>>, OpError> {
    if op == OpId::ArgMaxList {
        return Err(OpError::NonDifferentiable(op));
    }
    let rows = output.rows();
    let mut grads: Vec<Vec<f64>> = inputs.iter().map(|v| vec![0.0; v.data.len()]).collect();
    match op {
        op if op.is_elementwise_binary() || op == OpId::MinPair => {
            let (a, b) = (inputs[0], inputs[1]);
            let width = output.width;
            for r in 0..rows {
                for j in 0..width {
                    let g = cot[r * width + j];
                    let (_, da, db) = binary_point(op, a.at(r, j), b.at(r, j));
                    grads[0][a.offset(r, j)] += g * da;
                    grads[1][b.offset(r, j)] += g * db;
                }
            }
        }
        op if op.is_elementwise_unary() => {
            for (i, &x) in inputs[0].data.iter().enumerate() {
                grads[0][i] = cot[i] * unary_point(op, x).1;
            }
        }
        OpId::MeanBatch => {
            let x = inputs[0];
            if x.batch.is_none() {
                grads[0].copy_from_slice(cot);
            } else {
                let n = x.rows() as f64;
                for r in 0..x.rows() {
                    for j in 0..x.width {
                        grads[0][r * x.width + j] = cot[j] / n;
                    }
                }
            }
        }
        OpId::SelectList => {
            let (list, z) = (inputs[0], inputs[1]);
            for r in 0..rows {
                let idx = expect_index(op, z.at(r, 0), list.width)?;
                grads[0][list.offset(r, idx)] += cot[r];
            }
            return Ok(vec![Some(grads.swap_remove(0)), None]);
        }
        OpId::MaxList => {
            let x = inputs[0];
            for r in 0..rows {
                let i = first_argmax(x.row(r));
                grads[0][x.offset(r, i)] += cot[r];
            }
        }
        OpId::DotProduct => {
            let (a, b) = (inputs[0], inputs[1]);
            let width = common_width(op, a.width, b.width)?;
            for r in 0..rows {
                for j in 0..width {
                    grads[0][a.offset(r, j)] += cot[r] * b.at(r, j);
                    grads[1][b.offset(r, j)] += cot[r] * a.at(r, j);
                }
            }
        }
        OpId::Softmax => {
            let w = output.width;
            for r in 0..rows {
                let p = &output.data[r * w..(r + 1) * w];
                let g = &cot[r * w..(r + 1) * w];
                let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    grads[0][r * w + j] = p[j] * (g[j] - dot);
                }
            }
        }
        OpId::SumAndDiscount => {
            let (v, b) = (inputs[0], inputs[1]);
            let factors: Vec<f64> = (0..rows).map(|i| b.at(i, 0)).collect();
            let (gv, gb) = sum_and_discount_vjp(&output.data, &factors, cot);
            for i in 0..rows {
                grads[0][v.offset(i, 0)] += gv[i];
                grads[1][b.offset(i, 0)] += gb[i];
            }
        }
        OpId::Clip => {
            let (x, lo, hi) = (inputs[0], inputs[1], inputs[2]);
            for r in 0..rows {
                let (l, h) = (lo.at(r, 0), hi.at(r, 0));
                for j in 0..x.width {
                    let g = cot[r * x.width + j];
                    let v = x.at(r, j);
                    if v > l && v < h {
                        grads[0][x.offset(r, j)] += g;
                    } else if v < l {
                        grads[1][lo.offset(r, 0)] += g;
                    } else if v > h {
                        grads[2][hi.offset(r, 0)] += g;
                    }
                }
            }
        }
        OpId::Squashing => {
            let (head, xi) = (inputs[0], inputs[1]);
            let d = output.width;
            for r in 0..rows {
                let hr = head.row(r);
                for j in 0..d {
                    let a = output.data[r * d + j];
                    let g = cot[r * d + j] * (1.0 - a * a);
                    let sigma = math::exp(hr[d + j]);
                    let e = xi.at(r, j);
                    grads[0][head.offset(r, j)] += g;
                    grads[0][head.offset(r, d + j)] += g * sigma * e;
                    grads[1][xi.offset(r, j)] += g * sigma;
                }
            }
        }
        op if op.is_prob() => {
            let (head, act) = (inputs[0], inputs[1]);
            let log_mode = matches!(op, OpId::LogProb | OpId::SquashedLogProb);
            for r in 0..rows {
                let (_, gh, ga) = prob_row(op, head.row(r), act.row(r), actions)?;
                // d(exp(logp)) = p * d(logp)
                let scale = if log_mode { cot[r] } else { cot[r] * output.data[r] };
                for (j, g) in gh.iter().enumerate() {
                    grads[0][head.offset(r, j)] += scale * g;
                }
                if actions == ActionKind::Continuous {
                    for (j, g) in ga.iter().enumerate() {
                        grads[1][act.offset(r, j)] += scale * g;
                    }
                }
            }
            if actions == ActionKind::Discrete {
                return Ok(vec![Some(grads.swap_remove(0)), None]);
            }
        }
        _ => unreachable!("operator {op} has no backward rule"),
    }
    Ok(grads.into_iter().map(Some).collect())
}
