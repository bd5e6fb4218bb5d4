//! Command-line front end: dataset generation, training, evaluation,
//! prediction and Q-value inspection for the toy world.

pub mod commands;
pub mod config;
