//! Pretrained encoders and small suites shared by the slower tests.

use std::sync::OnceLock;

use promim::data::SuiteSpec;
use promim::encoders::{DualEncoder, EncoderConfig};
use promim::training::{pretrain, PretrainConfig, PretrainReport};

/// Default encoder and corpus with a shortened schedule.
pub fn quick_pretrain_config() -> PretrainConfig {
    PretrainConfig {
        steps: 500,
        ..PretrainConfig::default()
    }
}

/// Encoder pretrained once per test binary with [`quick_pretrain_config`].
pub fn quick_encoder() -> &'static (DualEncoder, PretrainReport) {
    static ENC: OnceLock<(DualEncoder, PretrainReport)> = OnceLock::new();
    ENC.get_or_init(|| pretrain(&EncoderConfig::default(), &quick_pretrain_config()).unwrap())
}

/// Encoder pretrained once per test binary with the default schedule.
pub fn default_encoder() -> &'static DualEncoder {
    static ENC: OnceLock<DualEncoder> = OnceLock::new();
    ENC.get_or_init(|| {
        pretrain(&EncoderConfig::default(), &PretrainConfig::default())
            .unwrap()
            .0
    })
}

/// Default suite cut down to `families` families and `samples_per_class` samples.
pub fn small_suite(families: usize, samples_per_class: usize) -> SuiteSpec {
    SuiteSpec {
        families,
        samples_per_class,
        ..SuiteSpec::default()
    }
}
