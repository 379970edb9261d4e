use promim::data::{generate_dataset, make_split, Dataset, SplitPlan};
use promim::encoders::layers::Module;
use promim::encoders::{DualEncoder, EncoderConfig};
use promim::evaluation::{score_split, zero_shot, EvalConfig};
use promim::features::FeatureCache;
use promim::prompting::Method;
use promim::training::{
    init_learner, pretrain, tune_with_features, PretrainConfig, TuneConfig, Tuner,
};
use promim::Error;
use promim_testkit::fixture::{quick_encoder, small_suite};
use promim_testkit::laws::equivalence_ladder;

const METHODS: [Method; 4] = [Method::Coop, Method::Cocoop, Method::Kgcoop, Method::Promim];

fn family0(samples_per_class: usize) -> Dataset {
    generate_dataset(&small_suite(1, samples_per_class).family(0)).unwrap()
}

fn setup(ds: &Dataset, k: usize) -> (FeatureCache<'_>, SplitPlan) {
    let features = FeatureCache::new(&quick_encoder().0, ds).unwrap();
    let split = make_split(ds, k, 0).unwrap();
    (features, split)
}

fn small(method: Method) -> TuneConfig {
    TuneConfig {
        epochs: 1,
        k: 4,
        ..TuneConfig::for_method(method)
    }
}

fn values<M: Module>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

fn eval_cfg() -> EvalConfig {
    EvalConfig {
        max_eval_per_class: 8,
        ..Default::default()
    }
}

#[test]
fn pretraining_reduces_the_contrastive_loss() {
    let losses = &quick_encoder().1.losses;
    assert_eq!(losses.len(), 500);
    let head = losses[..50].iter().sum::<f64>() / 50.0;
    let tail = losses[450..].iter().sum::<f64>() / 50.0;
    assert!(losses[499] < losses[0], "{} vs {}", losses[499], losses[0]);
    assert!(tail < head, "{tail} vs {head}");
}

#[test]
fn zero_steps_leave_the_initialization() {
    let cfg = EncoderConfig::default();
    let pcfg = PretrainConfig {
        steps: 0,
        ..Default::default()
    };
    let (enc, report) = pretrain(&cfg, &pcfg).unwrap();
    assert!(enc.is_frozen());
    assert!(report.losses.is_empty());
    let mut init = DualEncoder::new(cfg, pcfg.seed).unwrap();
    init.freeze();
    assert_eq!(enc.checksum(), init.checksum());
}

#[test]
fn frozen_encoder_beats_chance_zero_shot() {
    let ds = family0(24);
    let features = FeatureCache::new(&quick_encoder().0, &ds).unwrap();
    let rec = zero_shot(&[features], 16, &EvalConfig::default()).unwrap();
    // Four classes per half.
    assert!(rec.base_acc > 25.0, "{rec:?}");
    assert!(rec.new_acc > 25.0, "{rec:?}");
}

#[test]
fn every_method_leaves_the_encoder_untouched() {
    let ds = family0(12);
    let (features, split) = setup(&ds, 4);
    let before = features.encoder.checksum();
    for m in METHODS {
        tune_with_features(&features, &split, &small(m), 0).unwrap();
        assert_eq!(features.encoder.checksum(), before, "{m}");
    }
}

#[test]
fn equivalence_ladder_holds_bitwise() {
    let ds = family0(12);
    let (features, split) = setup(&ds, 4);
    let base = TuneConfig {
        epochs: 2,
        ..small(Method::Promim)
    };
    for check in equivalence_ladder(&features, &split, &base, &eval_cfg(), 1).unwrap() {
        assert!(check.pass, "{}: {}", check.name, check.detail);
    }
}

#[test]
fn zero_learning_rate_is_deterministic_and_inert() {
    let ds = family0(12);
    let (features, split) = setup(&ds, 4);
    let cfg = TuneConfig {
        lr: 0.0,
        ..small(Method::Coop)
    };
    let init = init_learner(features.encoder, &cfg, 0).unwrap();
    let a = tune_with_features(&features, &split, &cfg, 0).unwrap();
    let b = tune_with_features(&features, &split, &cfg, 0).unwrap();
    assert_eq!(values(&a.learner), values(&init));
    assert_eq!(
        score_split(&features, &split, &a, &cfg, &eval_cfg()).unwrap(),
        score_split(&features, &split, &b, &cfg, &eval_cfg()).unwrap()
    );
}

#[test]
fn tuning_is_reproducible_and_seed_sensitive() {
    let ds = family0(12);
    let (features, split) = setup(&ds, 4);
    for m in METHODS {
        let a = tune_with_features(&features, &split, &small(m), 2).unwrap();
        let b = tune_with_features(&features, &split, &small(m), 2).unwrap();
        let c = tune_with_features(&features, &split, &small(m), 3).unwrap();
        assert_eq!(a.log, b.log, "{m}");
        assert_eq!(values(&a.learner), values(&b.learner), "{m}");
        assert_ne!(values(&a.learner), values(&c.learner), "{m}");
        assert_eq!(a.trained_ids, split.train.iter().copied().collect());
    }
}

#[test]
fn tuning_lowers_the_training_loss() {
    let ds = family0(24);
    let (features, split) = setup(&ds, 16);
    for m in METHODS {
        let cfg = TuneConfig {
            epochs: 4,
            k: 16,
            ..TuneConfig::for_method(m)
        };
        let out = tune_with_features(&features, &split, &cfg, 0).unwrap();
        let per_epoch = split.train.len();
        let mean = |e: usize| {
            out.log[e * per_epoch..(e + 1) * per_epoch]
                .iter()
                .map(|r| r.total)
                .sum::<f64>()
                / per_epoch as f64
        };
        assert!(mean(3) < mean(0), "{m}: {} vs {}", mean(3), mean(0));
    }
}

#[test]
fn new_class_samples_never_enter_a_batch() {
    let ds = family0(12);
    let (features, split) = setup(&ds, 4);
    let mut t = Tuner::new(&features, &split, &small(Method::Promim), 0).unwrap();
    let intruder = split.eval_new[0];
    assert!(matches!(t.step(0, &[intruder]), Err(Error::Contract(_))));
    assert!(t.log().is_empty());
}

#[test]
fn tuning_requires_a_frozen_encoder() {
    let ds = family0(6);
    let mut enc = DualEncoder::new(EncoderConfig::default(), 0).unwrap();
    enc.make_trainable().unwrap();
    assert!(matches!(
        FeatureCache::new(&enc, &ds),
        Err(Error::Contract(_))
    ));
}
