//! Command-line front end: data generation, training, evaluation,
//! inference, BEV plots and timing.

pub mod bench;
pub mod commands;
pub mod config;
pub mod svg;
