//! Encoder pretraining, prompt tuning and run manifests.

mod manifest;
mod optim;
mod pretrain;
mod tune;

pub use manifest::{RunManifest, MANIFEST_FORMAT, MANIFEST_VERSION};
pub use optim::{sgd_step, sgd_update, Adam};
pub use pretrain::{cache_path, load_or_pretrain, pretrain, PretrainConfig, PretrainReport};
pub use tune::{
    init_learner, save_log_csv, tune, tune_with_features, write_log_csv, ContextInit, LogRow,
    TuneConfig, TuneOutcome, Tuner, LOG_HEADER,
};
