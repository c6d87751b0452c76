//! Gated app-control agent: an action transformer that predicts action
//! types and click targets from episode token sequences, a controller that
//! hands text-bearing actions to a pluggable text generator, and an
//! evaluation harness built on relaxed action matching.

pub mod action_space;
pub mod encoders;
pub mod episode;
pub mod model;
pub mod optim;
pub mod params;
pub mod sequence;
pub mod synthetic;
pub mod tape;
pub mod checkpoint;
pub mod trainer;
pub mod controller;
pub mod eval;
pub mod config;
