//! Pretraining: schedule, optimizer, rounds and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod schedule;
pub mod step;

pub use checkpoint::{load_checkpoint, read_table, save_checkpoint, write_table, Checkpoint, Entry};
pub use config::TrainConfig;
pub use optim::AdamW;
pub use schedule::{lr_at, make_schedule, schedule_for, Sampler, SensorSchedule};
pub use step::{draw_round, round_loss, RngStreams, RoundLoss, RoundPlan, StepMetrics, TrainState, Trainer};
