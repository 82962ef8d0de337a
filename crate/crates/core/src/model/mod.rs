//! The dual-branch segmentation network, its losses and the toy trainer.

mod config;
mod net;
mod train;

pub use config::{read_pairs, write_pairs, ModelConfig, StagePlan, Variant};
pub use net::{argmax_classes, fuse, Conv, FcnHead, Features, MambaBranch, Outputs, PMamba, PmdBranch, SegHead, VimStage};
pub use train::{
    ablate, evaluate, mean_metrics, metrics, total_loss, train_step, train_toy, AblationConfig, AblationRow, EpochLog,
    LossTerms, LossWeights, Metrics, Sgd, StepLosses, TrainConfig, ABLATION_HEADER, DEFAULT_LR, LOG_HEADER,
};
