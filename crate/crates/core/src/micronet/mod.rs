//! A small convolutional encoder-decoder with pluggable pooling stages,
//! hand-written reverse mode, and SGD training.

mod arch;
pub mod layers;
mod model;
mod optim;
mod train;

pub use arch::{Architecture, Arm, LayerSpec, ReferenceArchitecture, Shape};
pub use model::{backward, forward, ForwardCache, Gradients, ModelParams, ParamTensor};
pub use optim::{sgd_step, OptimizerState, ScheduleEvent, SgdConfig, StopReason};
pub use train::{
    batch_gradients, evaluate, hotspot_sweep, predict, train, EpochRecord, Evaluation, TrainConfig, TrainOutcome,
    TrainReport,
};
