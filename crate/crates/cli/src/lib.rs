//! Experiment runner: TOML configs, pretraining, relation-net training,
//! evaluation and plots, with a manifest of every artifact written.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;

pub use commands::{cmd_evaluate, cmd_plot, cmd_plot_run, cmd_pretrain, cmd_train_relations, Run};
pub use config::{ExperimentConfig, Overrides};
