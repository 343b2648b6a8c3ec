//! Feedback-linearization controllers for a planar RR arm: plain, with a
//! bound-based robust term, and with an adaptively grown robust term, plus a
//! Gaussian-process torque model and an experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod config;
pub mod controllers;
pub mod error;
pub mod experiment;
pub mod gp_model;
pub mod lyapunov;
pub mod rr_dynamics;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};
