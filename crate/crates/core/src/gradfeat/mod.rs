//! Linear models over frozen features (activation, gradient, full),
//! their optimizers and training loops, and the fine-tuning baseline.

mod model;
mod optim;
mod train;

pub use model::{
    activation_logits, Backbone, FeatureCache, FullModel, LinearHead, ModelKind,
};
pub use optim::{Optimizer, OptimizerKind, TrainConfig};
pub use train::{
    accuracy, dataset_loss, evaluate, evaluate_cached, finetune, fit, train_linear, Finetuned,
    TrainReport,
};
