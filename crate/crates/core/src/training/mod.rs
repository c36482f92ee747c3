//! Objectives, optimization and experiment drivers.

mod ablation;
mod grid;
mod loss;
mod optim;
mod train;

pub use ablation::{run_ablation, AblationRow, AblationTable, ABLATION_ROWS};
pub use grid::{grid_search, GridCell, GridResult, HyperGrid};
pub use loss::{pabee_loss, ponder_loss, ponder_loss_value, vanilla_loss, LossVars, PonderObjective};
pub use optim::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    batch_loss, train, write_epoch_csv, EarlyStopping, EPOCH_CSV_HEADER, EpochRecord, Objective, TrainConfig, TrainReport,
};
