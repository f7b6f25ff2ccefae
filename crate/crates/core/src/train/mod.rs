//! Joint training of a front-end and its surrogate reconstruction head with
//! Adam, plus the evaluation, ablation and gradient-check drivers used by the
//! CLI.

mod adam;
mod config;
pub mod gradcheck;
mod head;
mod trainer;

pub use adam::{Adam, StepOutcome};
pub use config::{AdamConfig, RunConfig};
pub use head::{surrogate_loss, SurrogateHead, HEAD_BIAS, HEAD_WEIGHT};
pub use trainer::{
    ablate, build_examples, evaluate_checkpoint, format_table, inspect_checkpoint, make_data, relative_change,
    relative_table, strip_wall_time, train, train_variants, train_with, variant_path, Example, Model, TableRow,
    TrainReport,
};
