use promim::data::{
    apply_shift, generate_dataset, make_split, Dataset, Shift, ShiftKind, SuiteSpec,
    SyntheticDatasetSpec,
};
use proptest::prelude::*;

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn mean_image(ds: &Dataset, ids: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0.0; ds.samples[0].image.pixels.len()];
    let mut n = 0.0;
    for id in ids {
        for (a, p) in acc.iter_mut().zip(&ds.samples[id].image.pixels) {
            *a += p;
        }
        n += 1.0;
    }
    acc.iter().map(|a| a / n).collect()
}

/// Largest distance between the mean images of two disjoint halves of one
/// class: what sampling noise alone produces.
fn noise_floor(ds: &Dataset) -> f64 {
    let spc = ds.spec.samples_per_class;
    (0..ds.n_classes())
        .map(|c| {
            let start = c * spc;
            let a = mean_image(ds, (start..start + spc).step_by(2));
            let b = mean_image(ds, (start + 1..start + spc).step_by(2));
            rms(&a, &b)
        })
        .fold(0.0, f64::max)
}

#[test]
fn families_are_disjoint_and_separated_beyond_the_noise_floor() {
    let suite = SuiteSpec::default();
    let sets: Vec<Dataset> = suite
        .specs()
        .iter()
        .map(|s| generate_dataset(s).unwrap())
        .collect();
    let floor = sets.iter().map(noise_floor).fold(0.0, f64::max);
    let mut closest = f64::INFINITY;
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            assert!(a.class_names.iter().all(|n| !b.class_names.contains(n)));
            for pa in &a.prototypes {
                for pb in &b.prototypes {
                    closest = closest.min(rms(&pa.pixels, &pb.pixels));
                }
            }
        }
    }
    assert!(
        closest > floor,
        "closest cross-family prototypes {closest} within noise floor {floor}"
    );
}

#[test]
fn invert_twice_round_trips() {
    let ds = generate_dataset(&SyntheticDatasetSpec {
        samples_per_class: 4,
        ..Default::default()
    })
    .unwrap();
    let inv = Shift::new(ShiftKind::Invert, 0.0);
    let back = apply_shift(&apply_shift(&ds, inv).unwrap(), inv).unwrap();
    let worst = ds
        .samples
        .iter()
        .zip(&back.samples)
        .flat_map(|(a, b)| a.image.pixels.iter().zip(&b.image.pixels))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-12, "round trip error {worst}");
}

#[test]
fn every_shift_preserves_labels_and_pixel_range() {
    let ds = generate_dataset(&SyntheticDatasetSpec {
        samples_per_class: 6,
        ..Default::default()
    })
    .unwrap();
    for s in [
        "none",
        "brightness:0.2",
        "brightness:-0.4",
        "noise:0.3",
        "invert",
    ] {
        let shifted = apply_shift(&ds, Shift::parse(s).unwrap()).unwrap();
        for (a, b) in ds.samples.iter().zip(&shifted.samples) {
            assert_eq!((a.id, a.label), (b.id, b.label), "{s}");
            assert!(
                b.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)),
                "{s}"
            );
        }
    }
}

#[test]
fn training_samples_come_only_from_base_classes() {
    let ds = generate_dataset(&SyntheticDatasetSpec::default()).unwrap();
    for seed in 0..20 {
        let split = make_split(&ds, 16, seed).unwrap();
        split.validate(&ds).unwrap();
        assert_eq!(split.train.len(), 16 * split.base_classes.len());
        for &id in &split.train {
            assert!(split.base_classes.contains(&ds.samples[id].label));
            assert!(!split.eval_base.contains(&id));
        }
        for &id in &split.eval_new {
            assert!(split.new_classes.contains(&ds.samples[id].label));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_deterministic(
        family in 0u64..6,
        seed in 0u64..1000,
        noise in 0.0f64..0.6,
    ) {
        let spec = SyntheticDatasetSpec {
            family_id: family,
            sample_seed: seed,
            samples_per_class: 3,
            noise_std: noise,
            ..Default::default()
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        prop_assert_eq!(a.checksum(), b.checksum());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn splits_partition_classes(n in 4usize..9, k in 1usize..8, seed in 0u64..500) {
        let ds = generate_dataset(&SyntheticDatasetSpec {
            n_classes: n,
            samples_per_class: 8,
            ..Default::default()
        })
        .unwrap();
        let split = make_split(&ds, k, seed).unwrap();
        prop_assert_eq!(split.base_classes.len(), n / 2);
        let mut all: Vec<usize> = split.base_classes.iter().chain(&split.new_classes).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for &id in &split.train {
            prop_assert!(!split.eval_base.contains(&id));
        }
    }
}
