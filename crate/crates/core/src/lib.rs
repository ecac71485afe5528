//! Core of the loss-graph search system.
//!
//! Reinforcement-learning update rules are expressed as typed directed
//! acyclic graphs whose single `Output` node is the loss an agent minimises.
//! This crate holds everything that does not touch the filesystem:
//!
//! * [`graph`]: node kinds, the type system, validation, topological order,
//!   dead-node analysis and DOT rendering.
//! * [`ops`]: forward and backward semantics of every operator.
//! * [`nn`] and [`autodiff`]: parameter stores behind `Parameter` nodes and
//!   the reverse-mode interpreter.
//! * [`envs`]: desk-scale environments, transition storage and scoring.
//! * [`reference`]: builders for the VPG, PPO, DDPG, TD3, SAC and DDQN
//!   graphs together with straight-line loss oracles.
//! * [`trainer`]: the inner loop that trains one agent with a graph set.
//! * [`evolution`]: the regularized-evolution outer loop.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod envs;
pub mod evolution;
pub mod graph;
pub mod hyper;
pub mod math;
pub mod nn;
pub mod ops;
pub mod reference;
pub mod rng;
pub mod trainer;
pub mod value;

pub use graph::{DType, Graph, GraphBuilder, NodeId, NodeKind};
pub use hyper::HyperParams;
pub use value::Value;
