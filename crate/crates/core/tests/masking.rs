use promim::data::{generate_dataset, make_split, SyntheticDatasetSpec};
use promim::encoders::EncoderConfig;
use promim::features::FeatureCache;
use promim::masking::{masked_count, MaskSpec, MaskStrategy};
use promim::prompting::Method;
use promim::seeding;
use promim::training::{tune_with_features, TuneConfig};
use promim_testkit::laws::{
    adjacency, compute_law, count_law_violations, expected_tune_tokens, random_marginals,
    untrained_encoder, GRID,
};
use proptest::prelude::*;

#[test]
fn count_law_over_a_thousand_seeds() {
    let bad = count_law_violations(1000).unwrap();
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn random_marginals_match_the_attainable_rate() {
    for m in random_marginals(10_000).unwrap() {
        let dev = m.max_deviation(m.attainable);
        assert!(dev <= 0.02, "ratio {}: deviation {dev}", m.ratio);
        if m.attainable == m.ratio {
            assert!(m.max_deviation(m.ratio) <= 0.02);
        }
    }
}

#[test]
fn block_masks_are_more_contiguous_until_the_grid_saturates() {
    for a in adjacency(1000).unwrap() {
        let c = masked_count(GRID * GRID, a.ratio);
        if c < GRID * GRID - 1 {
            assert!(a.block > a.random, "{a:?}");
        } else {
            // Any 15 of 16 cells: every masked cell touches another.
            assert_eq!(a.block, c as f64, "{a:?}");
            assert_eq!(a.random, c as f64, "{a:?}");
        }
    }
}

#[test]
fn conditioning_cost_follows_the_visible_count() {
    let encoder = untrained_encoder(EncoderConfig::default(), 3).unwrap();
    let ds = generate_dataset(&SyntheticDatasetSpec {
        samples_per_class: 2,
        ..Default::default()
    })
    .unwrap();
    let features = FeatureCache::new(&encoder, &ds).unwrap();
    let ids: Vec<usize> = (0..ds.samples.len()).collect();
    let law = compute_law(&features, &ids).unwrap();
    assert!(law.violations.is_empty(), "{:?}", law.violations);
    assert_eq!(law.calls, ids.len() * 12);
    let full = law.counts[0];
    assert_eq!(full.1, 17);
    assert_eq!(law.counts[1].2 * 2, full.2);
    assert_eq!(law.counts[2].2 * 4, full.2);
}

#[test]
fn tuning_accounts_for_every_visible_token() {
    let encoder = untrained_encoder(EncoderConfig::default(), 3).unwrap();
    let ds = generate_dataset(&SyntheticDatasetSpec {
        samples_per_class: 6,
        ..Default::default()
    })
    .unwrap();
    let features = FeatureCache::new(&encoder, &ds).unwrap();
    let split = make_split(&ds, 2, 0).unwrap();
    for (strategy, ratio) in [
        (MaskStrategy::Random, 0.5),
        (MaskStrategy::Random, 0.75),
        (MaskStrategy::Block, 0.75),
    ] {
        let cfg = TuneConfig {
            epochs: 2,
            k: 2,
            mask: MaskSpec {
                strategy,
                ratio,
                seed: 0,
            },
            ..TuneConfig::for_method(Method::Promim)
        };
        let out = tune_with_features(&features, &split, &cfg, 0).unwrap();
        let samples = 2 * split.train.len();
        assert_eq!(
            out.tokens_processed,
            expected_tune_tokens(16, ratio, samples)
        );
        assert_eq!(
            out.log
                .iter()
                .map(|r| r.tokens_processed as u64)
                .sum::<u64>(),
            out.tokens_processed
        );
    }
}

proptest! {
    #[test]
    fn masks_partition_the_grid(
        h in 1usize..7,
        w in 1usize..7,
        ratio in 0.0f64..0.999,
        block in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let spec = MaskSpec {
            strategy: if block { MaskStrategy::Block } else { MaskStrategy::Random },
            ratio,
            seed: 0,
        };
        let m = spec.sample(h, w, &mut seeding::rng(&[seed])).unwrap();
        prop_assert_eq!(m.masked.len(), masked_count(h * w, ratio));
        let mut all: Vec<usize> = m.visible.iter().chain(&m.masked).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..h * w).collect::<Vec<_>>());
    }
}
