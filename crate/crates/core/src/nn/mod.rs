//! A small trainable stack of visualization blocks, with in-house layers.

pub mod layers;
pub mod network;
pub mod tensor;
pub mod train;

pub use network::{
    default_schedule, to_frame, BackwardOptions, Block, BlockConfig, BlockLoss, BlockState,
    ForwardCache, ForwardMode, InputVariant, LossKind, Network, NetworkOutput,
};
pub use tensor::Tensor;
pub use train::{
    evaluate, load_checkpoint, save_checkpoint, train_toy, Checkpoint, EpochMetrics, Evaluation,
    TrainConfig, TrainReport,
};
