//! Concurrent-learning adaptive control of Euler-Lagrange systems:
//! plant models, desired-compensation controllers (full-state feedback and
//! two velocity-free output-feedback variants), regressor filtering, a
//! rank-certified memory stack, a fixed-step simulator with online
//! invariant monitors, and the numerical certification layer.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod controllers;
pub mod dynamics;
pub mod error;
pub mod filtering;
pub mod plot;
pub mod simulator;
pub mod stack;
pub mod trajectory;

pub use error::{Error, Result};
