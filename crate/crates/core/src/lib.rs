//! Source-free domain adaptation for semantic segmentation, desk scale.
//!
//! The crate is organised bottom-up: dense tensors and autodiff, the
//! convolutional segmentation model, stochastic input transforms,
//! confidence-filtered pseudo-labeling, the adaptation engine, and a
//! synthetic shape benchmark for end-to-end evaluation.

pub mod adapt;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod labelmap;
pub mod model;
pub mod optim;
pub mod pseudolabel;
pub mod tensor;
pub mod transforms;

pub use adapt::{
    adapt, entropy_loss, predict, training_iteration, tta_episode, AdaptConfig, AdaptResult,
    InitMode, ParamSubset, TtaConfig, TtaLoss,
};
pub use autodiff::{accumulate_param_grad, Tape, Var};
pub use bench::{
    evaluate, gen_domain_pair, gen_split, group_miou, load_dataset, miou, save_dataset,
    train_source, ConfusionMatrix, DomainSpec, Manifest, Sample, TrainConfig,
};
pub use error::{Error, Result};
pub use kernels::{NormMode, NormStats};
pub use labelmap::{LabelMap, NO_LABEL};
pub use model::{init_model, load_checkpoint, save_checkpoint, update_norm_pass, ArchConfig, Model};
pub use optim::{poly_lr, sgd_step, OptimizerState};
pub use pseudolabel::{dataset_thresholds, ema_update, image_thresholds, pseudo_label};
pub use tensor::{softmax, Precision, Tensor};
pub use transforms::{
    make_collage, sample_transform_pair, Transform, TransformPair, TransformParams,
};
