//! Measurements behind the masking, compute, equivalence and objective laws.
//!
//! Each function reports what it measured; callers decide what counts as a pass.

use promim::data::SplitPlan;
use promim::encoders::layers::Module;
use promim::encoders::DualEncoder;
use promim::evaluation::{score_split, EvalConfig};
use promim::features::FeatureCache;
use promim::masking::{masked_adjacency, masked_count, MaskSpec, MaskStrategy};
use promim::numerics::{Graph, Tensor};
use promim::objectives::{kg_loss, total_loss};
use promim::prompting::{Method, PromptLearner};
use promim::seeding;
use promim::training::{tune_with_features, LogRow, TuneConfig, Tuner};
use promim::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const RATIOS: [f64; 5] = [0.25, 0.5, 0.75, 0.95, 0.99];
pub const STRATEGIES: [MaskStrategy; 2] = [MaskStrategy::Random, MaskStrategy::Block];
/// Side of the patch grid the masking laws are stated for.
pub const GRID: usize = 4;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

fn spec(strategy: MaskStrategy, ratio: f64) -> MaskSpec {
    MaskSpec {
        strategy,
        ratio,
        seed: 0,
    }
}

/// Draws whose masked count differs from `floor(ratio * 16)`, over every
/// ratio, both strategies and `seeds` seeds.
pub fn count_law_violations(seeds: u64) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for &r in &RATIOS {
        for s in STRATEGIES {
            for seed in 0..seeds {
                let m = spec(s, r).sample(GRID, GRID, &mut seeding::rng(&[seed]))?;
                let want = masked_count(GRID * GRID, r);
                if m.masked.len() != want || m.visible.len() + m.masked.len() != GRID * GRID {
                    bad.push(format!("{s} r={r} seed={seed}: {} masked", m.masked.len()));
                }
            }
        }
    }
    Ok(bad)
}

/// Per-cell masking frequency of random masks over `draws` draws.
#[derive(Clone, Debug)]
pub struct Marginal {
    pub ratio: f64,
    /// `floor(ratio * 16) / 16`, the rate the count law allows.
    pub attainable: f64,
    pub frequencies: Vec<f64>,
}

impl Marginal {
    /// Largest per-cell distance from `target`.
    pub fn max_deviation(&self, target: f64) -> f64 {
        self.frequencies
            .iter()
            .map(|f| (f - target).abs())
            .fold(0.0, f64::max)
    }
}

pub fn random_marginals(draws: u64) -> Result<Vec<Marginal>> {
    let n = GRID * GRID;
    RATIOS
        .iter()
        .map(|&r| {
            let mut hits = vec![0u64; n];
            for d in 0..draws {
                let m =
                    spec(MaskStrategy::Random, r).sample(GRID, GRID, &mut seeding::rng(&[d]))?;
                for &i in &m.masked {
                    hits[i] += 1;
                }
            }
            Ok(Marginal {
                ratio: r,
                attainable: masked_count(n, r) as f64 / n as f64,
                frequencies: hits.iter().map(|&h| h as f64 / draws as f64).collect(),
            })
        })
        .collect()
}

/// Mean masked-cell adjacency of block and random masks at one ratio.
#[derive(Clone, Copy, Debug)]
pub struct Adjacency {
    pub ratio: f64,
    pub block: f64,
    pub random: f64,
    /// Adjacency of any mask with this many masked cells is at most this.
    pub ceiling: usize,
}

pub fn adjacency(seeds: u64) -> Result<Vec<Adjacency>> {
    RATIOS
        .iter()
        .map(|&r| {
            let mut sums = [0usize; 2];
            for seed in 0..seeds {
                for (k, s) in STRATEGIES.iter().enumerate() {
                    let m = spec(*s, r).sample(GRID, GRID, &mut seeding::rng(&[seed]))?;
                    sums[k] += masked_adjacency(&m, GRID, GRID);
                }
            }
            let c = masked_count(GRID * GRID, r);
            Ok(Adjacency {
                ratio: r,
                random: sums[0] as f64 / seeds as f64,
                block: sums[1] as f64 / seeds as f64,
                ceiling: if c >= 2 { c } else { 0 },
            })
        })
        .collect()
}

/// Token counts of masked conditioning passes.
#[derive(Clone, Debug)]
pub struct ComputeLaw {
    /// Calls where `tokens_processed != |visible| + 1`.
    pub violations: Vec<String>,
    pub calls: usize,
    /// `(ratio, tokens_processed, patch_tokens)` of the unmasked pass and at 0.5 and 0.75.
    pub counts: Vec<(f64, usize, usize)>,
}

/// Encodes every sample in `ids` under masks of every ratio and strategy.
pub fn compute_law(features: &FeatureCache<'_>, ids: &[usize]) -> Result<ComputeLaw> {
    let mut violations = Vec::new();
    let mut calls = 0;
    let ratios: Vec<f64> = std::iter::once(0.0).chain(RATIOS).collect();
    for &id in ids {
        let grid = &features.get(id)?.grid;
        for &r in &ratios {
            for s in STRATEGIES {
                let m =
                    spec(s, r).sample(grid.grid_h, grid.grid_w, &mut seeding::rng(&[id as u64]))?;
                let out = features.encoder.vision_encode(grid, &m.visible)?;
                calls += 1;
                if out.tokens_processed != m.visible.len() + 1
                    || out.patch_tokens != m.visible.len()
                {
                    violations.push(format!(
                        "sample {id} {s} r={r}: {} tokens for {} visible",
                        out.tokens_processed,
                        m.visible.len()
                    ));
                }
            }
        }
    }
    let id = ids[0];
    let grid = &features.get(id)?.grid;
    let counts = [0.0, 0.5, 0.75]
        .iter()
        .map(|&r| {
            let m = spec(MaskStrategy::Random, r).sample(
                grid.grid_h,
                grid.grid_w,
                &mut seeding::rng(&[0]),
            )?;
            let c = features.masked_conditioning(id, &m)?;
            Ok((r, c.tokens_processed, c.patch_tokens))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComputeLaw {
        violations,
        calls,
        counts,
    })
}

/// Tokens a promim run should process on the conditioning path:
/// `n - floor(ratio * n) + 1` per training sample.
pub fn expected_tune_tokens(n_patches: usize, ratio: f64, samples: usize) -> u64 {
    ((n_patches - masked_count(n_patches, ratio) + 1) * samples) as u64
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn params(l: &PromptLearner) -> Vec<(String, Vec<u64>)> {
    let mut out = Vec::new();
    l.visit("", &mut |n, t| out.push((n.to_string(), bits(t.data()))));
    out
}

fn loss_bits(rows: &[LogRow]) -> Vec<[u64; 3]> {
    rows.iter()
        .map(|r| [r.ce.to_bits(), r.kg.to_bits(), r.total.to_bits()])
        .collect()
}

fn cfg(method: Method, base: &TuneConfig) -> TuneConfig {
    TuneConfig {
        method,
        ..base.clone()
    }
}

/// The three rungs of the equivalence ladder, each compared bit for bit on
/// one split and seed. `base` supplies epochs, k, lr and the other shared settings.
pub fn equivalence_ladder(
    features: &FeatureCache<'_>,
    split: &SplitPlan,
    base: &TuneConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    // promim without masking or kg term against cocoop.
    let promim_cfg = TuneConfig {
        lambda: 0.0,
        mask: MaskSpec {
            ratio: 0.0,
            ..base.mask.clone()
        },
        ..cfg(Method::Promim, base)
    };
    let cocoop_cfg = cfg(Method::Cocoop, base);
    let p = tune_with_features(features, split, &promim_cfg, seed)?;
    let c = tune_with_features(features, split, &cocoop_cfg, seed)?;
    let same_log = p.log.len() == c.log.len()
        && loss_bits(&p.log) == loss_bits(&c.log)
        && p.log
            .iter()
            .zip(&c.log)
            .all(|(a, b)| a.tokens_processed == b.tokens_processed);
    let same_params = params(&p.learner) == params(&c.learner);
    let same_scores = {
        let a = score_split(features, split, &p, &promim_cfg, eval)?;
        let b = score_split(features, split, &c, &cocoop_cfg, eval)?;
        a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits()
    };
    checks.push(Check::new(
        "promim(lambda=0, ratio=0) == cocoop",
        same_log && same_params && same_scores,
        format!(
            "{} steps; losses {}, parameters {}, base/new {}",
            p.log.len(),
            same(same_log),
            same(same_params),
            same(same_scores)
        ),
    ));

    // cocoop while its meta-net output is zero against coop.
    let frozen = TuneConfig {
        lr: 0.0,
        ..base.clone()
    };
    let c0 = tune_with_features(features, split, &cfg(Method::Cocoop, &frozen), seed)?;
    let o0 = tune_with_features(features, split, &cfg(Method::Coop, &frozen), seed)?;
    let held_log = loss_bits(&c0.log) == loss_bits(&o0.log);
    let held_scores = {
        let a = score_split(features, split, &c0, &cfg(Method::Cocoop, &frozen), eval)?;
        let b = score_split(features, split, &o0, &cfg(Method::Coop, &frozen), eval)?;
        a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits()
    };
    let first = base.lr > 0.0 && {
        let order = split.train[..1].to_vec();
        let mut tc = Tuner::new(features, split, &cfg(Method::Cocoop, base), seed)?;
        let mut to = Tuner::new(features, split, &cfg(Method::Coop, base), seed)?;
        let rc = tc.step(0, &order)?;
        let ro = to.step(0, &order)?;
        loss_bits(&[rc]) == loss_bits(&[ro])
            && bits(tc.learner().ctx.vectors.data()) == bits(to.learner().ctx.vectors.data())
    };
    checks.push(Check::new(
        "cocoop with zero meta-net output == coop",
        held_log && held_scores && first,
        format!(
            "lr=0 epoch losses {}, base/new {}; first update of the context {}",
            same(held_log),
            same(held_scores),
            same(first)
        ),
    ));

    // kgcoop loss decomposition and its lambda = 0 reduction to coop.
    let k = tune_with_features(features, split, &cfg(Method::Kgcoop, base), seed)?;
    let o = tune_with_features(features, split, &cfg(Method::Coop, base), seed)?;
    let decomposed = k.log.iter().all(|r| {
        r.total.to_bits() == (r.ce + r.lambda * r.kg).to_bits() && r.lambda == base.lambda
    });
    let first_ce = k.log[0].ce.to_bits() == o.log[0].ce.to_bits();
    let k0_cfg = TuneConfig {
        lambda: 0.0,
        ..cfg(Method::Kgcoop, base)
    };
    let k0 = tune_with_features(features, split, &k0_cfg, seed)?;
    let reduces =
        loss_bits(&k0.log) == loss_bits(&o.log) && params(&k0.learner) == params(&o.learner);
    checks.push(Check::new(
        "kgcoop step loss == coop ce + lambda * kg",
        decomposed && first_ce && reduces,
        format!(
            "{} steps total == ce + {}*kg {}; first-step ce vs coop {}; lambda=0 run vs coop {}",
            k.log.len(),
            base.lambda,
            same(decomposed),
            same(first_ce),
            same(reduces)
        ),
    ));
    Ok(checks)
}

fn same(b: bool) -> &'static str {
    if b {
        "identical"
    } else {
        "DIFFER"
    }
}

/// `kg(w, w) = 0`, `kg(e1, e2) = 2` per class, and `total = ce + lambda * kg`
/// over a lambda grid, on random instances.
pub fn objective_identities(instances: u64) -> Result<Vec<Check>> {
    let mut worst_self = 0.0f64;
    let mut worst_unit = 0.0f64;
    let mut worst_total = 0.0f64;
    let lambdas = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 10.0];
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let c = 2 + (i as usize % 7);
        let d = 3 + (i as usize % 5);
        let w = Tensor::randn(vec![c, d], 1.0, &mut rng);
        let mut g = Graph::new();
        let wv = g.constant(w.clone());
        let kg = kg_loss(&mut g, wv, &w)?;
        worst_self = worst_self.max(g.scalar(kg)?.abs());

        let unit = |axis: usize| {
            let mut t = vec![0.0; c * d];
            for r in 0..c {
                t[r * d + axis] = 1.0;
            }
            Tensor::matrix(c, d, t)
        };
        let e1 = g.constant(unit(0)?);
        let kg = kg_loss(&mut g, e1, &unit(1)?)?;
        worst_unit = worst_unit.max((g.scalar(kg)? - 2.0).abs());

        let ce_value = Tensor::randn(vec![1], 1.0, &mut rng).data()[0].abs();
        let kg_value = Tensor::randn(vec![1], 1.0, &mut rng).data()[0].powi(2);
        let ce = g.constant(Tensor::scalar(ce_value));
        let kgv = g.constant(Tensor::scalar(kg_value));
        for &l in &lambdas {
            let (t, b) = total_loss(&mut g, ce, Some(kgv), l, None)?;
            let want = ce_value + l * kg_value;
            worst_total = worst_total
                .max((g.scalar(t)? - want).abs())
                .max((b.total - want).abs());
        }
    }
    Ok(vec![
        Check::new(
            "kg(w, w) == 0",
            worst_self == 0.0,
            format!("max |kg| {worst_self:e}"),
        ),
        Check::new(
            "kg(e1, e2) == 2",
            worst_unit <= 1e-12,
            format!("max |kg - 2| {worst_unit:e}"),
        ),
        Check::new(
            "total == ce + lambda * kg",
            worst_total <= 1e-12,
            format!("max error {worst_total:e} over lambda {lambdas:?}"),
        ),
    ])
}

/// A frozen, untrained encoder; token counts and equivalences do not depend on training.
pub fn untrained_encoder(
    config: promim::encoders::EncoderConfig,
    seed: u64,
) -> Result<DualEncoder> {
    let mut e = DualEncoder::new(config, seed)?;
    e.freeze();
    Ok(e)
}
