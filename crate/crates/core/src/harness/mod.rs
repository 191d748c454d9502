//! Training orchestration: config parsing, the interact-store-update loop,
//! periodic evaluation, CSV metrics, checkpointing, and plot-data export.

pub mod checkpoint;
pub mod config;
pub mod dump;
pub mod export;
pub mod metrics;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{AgentKind, ConfigError, RunConfig};
pub use dump::dump_frames;
pub use export::{export_plot_data, ExportError};
pub use run::{evaluate, run_training, HarnessError, RunSummary};
