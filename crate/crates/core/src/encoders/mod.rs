//! The frozen dual encoder standing in for a pretrained vision-language model.

mod config;
mod dual;
pub mod layers;
mod patch;
mod text;
mod vision;
pub mod vocab;

pub use config::EncoderConfig;
pub use dual::{
    contrastive_pretrain_loss, DualEncoder, DualVars, EncoderCheckpoint, NamedArray, VisionOutput,
    CHECKPOINT_VERSION, ENCODER_FORMAT, INIT_LOGIT_SCALE, MAX_LOGIT_SCALE,
};
pub use patch::{patchify, unpatchify, Image, PatchGrid};
pub use text::{TextEncoder, TextVars};
pub use vision::{VisionEncoder, VisionPass, VisionVars};
pub use vocab::{TokenId, Vocabulary};
