//! Experiment orchestration: configs, dataset directories, the sweep and
//! plot-ready exports.

pub mod config;
pub mod data;
pub mod export;
pub mod fit;
pub mod sweep;

pub use config::{AeSettings, DataConfig, ExperimentConfig, Grids, Method, Task, OUTPUT_ROOT_ENV};
pub use data::{generate_data_dir, AuditLog, DataDir};
pub use fit::{fit_channels, ChannelSpec};
pub use sweep::{read_results, run_sweep, train_method, SweepOptions, SweepResult, SweepRow, TrainedMethod};
