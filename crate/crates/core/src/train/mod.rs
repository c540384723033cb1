//! Data loading, optimisation and the training loops.

pub mod data;
pub mod loops;
pub mod optim;

pub use data::{load_cifar10, Cifar10, Dataset, ImageBatch};
pub use loops::{
    extract_features, finetune, linear_probe, planned_steps, pretrain, pretrain_from, train_classifier, train_teacher,
    write_loss_trace, Classifier, EpochStats, Pool, PretrainOutcome, ProbeReport, SupervisedOutcome, TracePoint, TrainConfig,
};
pub use optim::{cosine_lr, layer_id_for, layerwise_lr_scale, AdamW};
