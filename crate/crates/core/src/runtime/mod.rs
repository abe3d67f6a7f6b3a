//! Client/server fabric: wire protocol, per-rank aggregation and training,
//! gradient all-reduce, checkpoints and the supervising launcher.

pub mod allreduce;
pub mod checkpoint;
pub mod client;
pub mod launcher;
pub mod metrics;
pub mod protocol;
pub mod reception;
pub mod routing;
pub mod server;
pub mod trainer;
pub mod validation;

pub use allreduce::{allreduce_mean, AllReducer, Contribution, ReduceError, RoundOutcome};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, RankCheckpoint, ServerCheckpoint,
};
pub use client::{
    client_stream, load_client_checkpoint, save_client_checkpoint, ClientError, ClientFault,
    ClientSpec, ClientSummary,
};
pub use launcher::{
    client_template, experiment_design, launcher_run, ClientJob, ClientProcess, ClientSpawner,
    FaultPlan, LaunchError, LaunchOptions, LaunchReport, ThreadSpawner,
};
pub use metrics::{metrics_path, read_metrics, MetricsRow, MetricsWriter};
pub use protocol::{decode_message, encode_message, MessageType, ProtocolError, TimeStepMessage};
pub use reception::ReceptionLog;
pub use routing::route_rank;
pub use server::{Server, ServerError, ServerOptions, ServerOutcome, ServerStatus};
pub use trainer::{
    trainer_loop, BatchRecord, ThroughputWindow, TrainerError, TrainingHistory, TrainingState,
    ValidationRecord, THROUGHPUT_WINDOW,
};
pub use validation::{ValidationError, ValidationSet};
