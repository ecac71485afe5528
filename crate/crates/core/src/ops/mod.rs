//! Operator registry: ids, static typing rules and runtime semantics.
//!
//! Every operation node names an [`OpId`]. The static rules in [`infer`]
//! decide which input types an operator accepts; [`eval_primitive`] and
//! [`vjp`] give the forward value and the vector-Jacobian product.
//!
//! Broadcasting follows one rule: a batched and an unbatched operand combine
//! by repeating the unbatched one along the batch axis, and a scalar
//! combines with a list by repeating the scalar along the list.

mod eval;

use core::fmt;

use crate::graph::{ActionKind, DType, ListLen, PortType};

pub use eval::{
    clip, eval_primitive, gaussian_log_density, squashing, sum_and_discount,
    sum_and_discount_vjp, vjp, OpError, DEN_GUARD, LOG_GUARD, SQUASH_LIMIT,
};

/// Stable operator identifiers. The string form is what graph files use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpId {
    Add,
    Subtract,
    Multiply,
    Div,
    Neg,
    Min,
    Max,
    Square,
    Log,
    Exp,
    Abs,
    MeanBatch,
    SelectList,
    MaxList,
    ArgMaxList,
    MinPair,
    DotProduct,
    Softmax,
    SumAndDiscount,
    Clip,
    Squashing,
    /// Density (categorical probability or Gaussian pdf) of an action.
    Prob,
    /// Log of [`OpId::Prob`], computed directly.
    LogProb,
    /// Density of a tanh-squashed Gaussian action.
    SquashedProb,
    /// Log-density of a tanh-squashed Gaussian action including the
    /// change-of-variables correction.
    SquashedLogProb,
}

/// Coarse description of an operator for listings and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpSignature {
    pub op: OpId,
    pub arity: usize,
    /// Human-readable overload summary.
    pub overloads: &'static str,
    pub differentiable: bool,
}

impl OpId {
    pub const ALL: [OpId; 25] = [
        OpId::Add,
        OpId::Subtract,
        OpId::Multiply,
        OpId::Div,
        OpId::Neg,
        OpId::Min,
        OpId::Max,
        OpId::Square,
        OpId::Log,
        OpId::Exp,
        OpId::Abs,
        OpId::MeanBatch,
        OpId::SelectList,
        OpId::MaxList,
        OpId::ArgMaxList,
        OpId::MinPair,
        OpId::DotProduct,
        OpId::Softmax,
        OpId::SumAndDiscount,
        OpId::Clip,
        OpId::Squashing,
        OpId::Prob,
        OpId::LogProb,
        OpId::SquashedProb,
        OpId::SquashedLogProb,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpId::Add => "Add",
            OpId::Subtract => "Subtract",
            OpId::Multiply => "Multiply",
            OpId::Div => "Div",
            OpId::Neg => "Neg",
            OpId::Min => "Min",
            OpId::Max => "Max",
            OpId::Square => "Square",
            OpId::Log => "Log",
            OpId::Exp => "Exp",
            OpId::Abs => "Abs",
            OpId::MeanBatch => "MeanBatch",
            OpId::SelectList => "SelectList",
            OpId::MaxList => "MaxList",
            OpId::ArgMaxList => "ArgMaxList",
            OpId::MinPair => "MinPair",
            OpId::DotProduct => "DotProduct",
            OpId::Softmax => "Softmax",
            OpId::SumAndDiscount => "SumAndDiscount",
            OpId::Clip => "Clip",
            OpId::Squashing => "Squashing",
            OpId::Prob => "Prob",
            OpId::LogProb => "LogProb",
            OpId::SquashedProb => "SquashedProb",
            OpId::SquashedLogProb => "SquashedLogProb",
        }
    }

    pub fn parse(s: &str) -> Option<OpId> {
        OpId::ALL.into_iter().find(|op| op.as_str() == s)
    }

    pub fn arity(self) -> usize {
        match self {
            OpId::Neg
            | OpId::Square
            | OpId::Log
            | OpId::Exp
            | OpId::Abs
            | OpId::MeanBatch
            | OpId::MaxList
            | OpId::ArgMaxList
            | OpId::Softmax => 1,
            OpId::Clip => 3,
            _ => 2,
        }
    }

    pub fn is_elementwise_binary(self) -> bool {
        matches!(
            self,
            OpId::Add | OpId::Subtract | OpId::Multiply | OpId::Div | OpId::Min | OpId::Max
        )
    }

    pub fn is_elementwise_unary(self) -> bool {
        matches!(self, OpId::Neg | OpId::Square | OpId::Log | OpId::Exp | OpId::Abs)
    }

    pub fn is_prob(self) -> bool {
        matches!(self, OpId::Prob | OpId::LogProb | OpId::SquashedProb | OpId::SquashedLogProb)
    }

    /// Whether a gradient may flow through input `port`.
    pub fn differentiable_port(self, port: usize, actions: ActionKind) -> bool {
        match self {
            OpId::ArgMaxList => false,
            OpId::SelectList => port == 0,
            op if op.is_prob() => port == 0 || actions == ActionKind::Continuous,
            _ => true,
        }
    }

    pub fn signature(self) -> OpSignature {
        let overloads = match self {
            op if op.is_elementwise_binary() => {
                "R,R->R | L,L->L | R,L->L | L,R->L | Z,Z->Z | Z,R->Z | Z,ListR[d]->Z (continuous Z)"
            }
            op if op.is_elementwise_unary() => "R->R | ListR->ListR | Z->Z (continuous Z)",
            OpId::MeanBatch => "X->X (batch axis removed)",
            OpId::SelectList => "ListR[actions],Z->R",
            OpId::MaxList => "ListR->R",
            OpId::ArgMaxList => "ListR[actions]->Z",
            OpId::MinPair => "R,R->R",
            OpId::DotProduct => "ListR,ListR->R",
            OpId::Softmax => "ListR->ListR",
            OpId::SumAndDiscount => "R,R->R",
            OpId::Clip => "X,R,R->X",
            OpId::Squashing => "ListR[head],ListR[d]->Z",
            _ => "ListR[actions],Z->R (discrete) | ListR[head],Z->R (continuous)",
        };
        OpSignature {
            op: self,
            arity: self.arity(),
            overloads,
            differentiable: self != OpId::ArgMaxList,
        }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn numeric(t: PortType, actions: ActionKind) -> bool {
    match t.dtype {
        DType::R | DType::ListR => true,
        DType::Z => actions == ActionKind::Continuous,
        _ => false,
    }
}

fn broadcast_pair(a: PortType, b: PortType, actions: ActionKind) -> Option<PortType> {
    if !numeric(a, actions) || !numeric(b, actions) {
        return None;
    }
    let action_vec = PortType::list(ListLen::ActionDim);
    if a == b {
        Some(a)
    } else if a == PortType::R {
        Some(b)
    } else if b == PortType::R {
        Some(a)
    } else if (a == PortType::Z && b == action_vec) || (a == action_vec && b == PortType::Z) {
        Some(PortType::Z)
    } else {
        None
    }
}

/// Output type of `op` applied to inputs of the given types, or `None` when
/// no overload matches.
pub fn infer(op: OpId, ins: &[PortType], actions: ActionKind) -> Option<PortType> {
    if ins.len() != op.arity() {
        return None;
    }
    let continuous = actions == ActionKind::Continuous;
    let head = PortType::list(ListLen::Head);
    match op {
        op if op.is_elementwise_binary() => broadcast_pair(ins[0], ins[1], actions),
        op if op.is_elementwise_unary() => numeric(ins[0], actions).then_some(ins[0]),
        OpId::MeanBatch => numeric(ins[0], actions).then_some(ins[0]),
        OpId::MinPair | OpId::SumAndDiscount => {
            (ins[0] == PortType::R && ins[1] == PortType::R).then_some(PortType::R)
        }
        OpId::SelectList => (!continuous
            && ins[0] == PortType::list(ListLen::Actions)
            && ins[1] == PortType::Z)
            .then_some(PortType::R),
        OpId::MaxList => (ins[0].dtype == DType::ListR).then_some(PortType::R),
        OpId::ArgMaxList => {
            (!continuous && ins[0] == PortType::list(ListLen::Actions)).then_some(PortType::Z)
        }
        OpId::DotProduct => {
            (ins[0].dtype == DType::ListR && ins[0] == ins[1]).then_some(PortType::R)
        }
        OpId::Softmax => (ins[0].dtype == DType::ListR).then_some(ins[0]),
        OpId::Clip => (numeric(ins[0], actions)
            && ins[1] == PortType::R
            && ins[2] == PortType::R)
            .then_some(ins[0]),
        OpId::Squashing => (continuous
            && ins[0] == head
            && ins[1] == PortType::list(ListLen::ActionDim))
            .then_some(PortType::Z),
        OpId::Prob | OpId::LogProb => {
            let policy = if continuous { head } else { PortType::list(ListLen::Actions) };
            (ins[0] == policy && ins[1] == PortType::Z).then_some(PortType::R)
        }
        OpId::SquashedProb | OpId::SquashedLogProb => {
            (continuous && ins[0] == head && ins[1] == PortType::Z).then_some(PortType::R)
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_names_round_trip() {
        for op in OpId::ALL {
            assert_eq!(OpId::parse(op.as_str()), Some(op));
        }
        assert_eq!(OpId::parse("Power"), None);
    }

    #[test]
    fn state_does_not_broadcast_with_floats() {
        let d = ActionKind::Discrete;
        assert_eq!(infer(OpId::Add, &[PortType::S, PortType::R], d), None);
        assert_eq!(infer(OpId::Add, &[PortType::R, PortType::R], d), Some(PortType::R));
    }

    #[test]
    fn discrete_actions_are_not_arithmetic() {
        assert_eq!(infer(OpId::Add, &[PortType::Z, PortType::R], ActionKind::Discrete), None);
        assert_eq!(
            infer(OpId::Add, &[PortType::Z, PortType::R], ActionKind::Continuous),
            Some(PortType::Z)
        );
    }

    #[test]
    fn list_lengths_must_agree() {
        let c = ActionKind::Continuous;
        let head = PortType::list(ListLen::Head);
        let dim = PortType::list(ListLen::ActionDim);
        assert_eq!(infer(OpId::Multiply, &[head, dim], c), None);
        assert_eq!(infer(OpId::Multiply, &[head, PortType::R], c), Some(head));
        assert_eq!(infer(OpId::Squashing, &[head, dim], c), Some(PortType::Z));
    }
}
