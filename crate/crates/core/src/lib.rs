//! Neural-feedback visual servoing workbench.
//!
//! The crate covers the whole pipeline: a synthetic eye-in-hand simulator
//! ([`sim`]) driven by an oracle IBVS demonstrator ([`datagen`]), a small
//! convolutional network trained from scratch ([`nn`], [`training`]) to emit
//! point features usable by the classical control law ([`control`]), and
//! closed-loop benchmarking against an end-to-end baseline ([`evaluation`]).

pub mod config;
pub mod control;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod kinematics;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
