//! Checks and fixtures shared by the integration tests and the acceptance suite.

pub mod fixture;
pub mod grad;
pub mod laws;

use promim::encoders::EncoderConfig;

/// Encoder small enough for per-parameter finite differences.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        image_side: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        text_vocab_size: 64,
        max_text_len: 8,
        output_dim: 6,
    }
}
