//! Desk-scale harness around `sovstg-core`: synthetic corpus generation,
//! run configuration, training, evaluation, checkpoints, ablations and
//! convergence plots. The `sovstg` binary exposes all of it as subcommands.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod plot;
pub mod predict;
pub mod render;
pub mod scene;
pub mod trainer;
