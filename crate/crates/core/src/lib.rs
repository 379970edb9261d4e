//! Prompt tuning for a tiny contrastive vision-language model, with
//! masked-image conditioning of the prompt meta-network.

pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod masking;
pub mod numerics;
pub mod objectives;
pub mod prompting;
pub mod seeding;
pub mod training;

pub use error::{Error, Result};
