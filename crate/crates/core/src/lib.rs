//! Desk-scale simulation of a RIMSA-assisted multi-user downlink and a
//! learned controller that maps received uplink pilots to element phases,
//! a digital precoder and a channel estimate.

pub mod config;
pub mod controller;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod nn;
pub mod precoding;
pub mod rimsa;
pub mod rng;
pub mod train;

pub use config::{Config, ControllerConfig, SystemConfig, TrainConfig, Utility};
pub use error::{CoreError, Result};
