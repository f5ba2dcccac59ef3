//! Configuration files, checkpoints and the command implementations behind
//! the `mmctr` binary.

mod config;

pub use config::{load_synth_config, parse_flat, parse_synth_config, TrainConfig};
mod checkpoint;

pub use checkpoint::{Checkpoint, NamedTensor, MAGIC, VERSION};
mod commands;

pub use commands::{
    eval_command, format_scores, gen_data, gradcheck_config, gradcheck_report, load_dataset, predict_with, run,
    train_command, Cli, Command, GRADCHECK_TOLERANCE,
};
