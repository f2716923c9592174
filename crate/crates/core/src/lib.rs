pub mod bayes_dsac;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod kinematics;
pub mod perception;
pub mod qp_controller;
pub mod sim;

pub use error::{Error, Result};
