//! Central finite-difference checks for every differentiable operation.
//!
//! Input-gradient cases go through `check_gradients`. Parameter gradients of
//! modules are compared on a random sample of entries per tensor, with the
//! numeric side computed by perturbing the module's own parameter buffers.

use promim::encoders::layers::{Block, BoundVars, LayerNorm, Linear, Module};
use promim::encoders::{
    contrastive_pretrain_loss, patchify, DualEncoder, Image, PatchGrid, TextEncoder, VisionEncoder,
};
use promim::numerics::gradcheck::{check_gradients, relative_error, DEFAULT_STEP};
use promim::numerics::{Graph, Tensor, Var};
use promim::objectives::{class_probabilities, cross_entropy, kg_loss, total_loss};
use promim::prompting::Method;
use promim::prompting::{
    assemble_prompts, encode_prompt_set, ContextTokens, MetaNet, PromptKind, PromptLearner,
};
use promim::Result;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tiny_encoder_config;

pub const INSTANCES: u64 = 20;
pub const TOL: f64 = 1e-4;
/// Parameter entries sampled per tensor in module checks.
const SAMPLED: usize = 6;
/// Gradient norm below which a sampled parameter slice counts as zero, e.g.
/// the key bias of attention, whose gradient vanishes because softmax is
/// shift-invariant. Such slices are compared in absolute terms.
const ZERO_FLOOR: f64 = 1e-7;

pub fn rand(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(rand(&shape, seed ^ 0xABCD));
    g.dot(out, w)
}

/// Worst relative error of `build` over its leaf inputs for one instance.
pub fn input_check<F>(shapes: &[&[usize]], instance: u64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let inputs: Vec<Tensor> = shapes
        .iter()
        .enumerate()
        .map(|(k, s)| rand(s, instance * 31 + k as u64))
        .collect();
    let report = check_gradients(&inputs, DEFAULT_STEP, |g, v| {
        let out = build(g, v)?;
        weighted_sum(g, out, instance)
    })?;
    Ok(report.max_rel_error())
}

/// Worst per-tensor relative error of the parameter gradients of `module`.
pub fn module_check<M, F>(module: &M, instance: u64, forward: F) -> Result<f64>
where
    M: Module + Clone,
    F: Fn(&mut Graph, &M::Vars) -> Result<Var>,
{
    let loss = |g: &mut Graph, vars: &M::Vars| -> Result<Var> {
        let out = forward(g, vars)?;
        weighted_sum(g, out, instance)
    };
    let mut g = Graph::new();
    let vars = module.bind(&mut g, true);
    let l = loss(&mut g, &vars)?;
    g.backward(l)?;
    let mut flat = Vec::new();
    vars.flat(&mut flat);
    let analytic: Vec<Vec<f64>> = flat
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let value_at = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let vars = m.bind(&mut g, false);
        let l = loss(&mut g, &vars)?;
        g.scalar(l)
    };
    let perturbed = |tensor: usize, entry: usize, delta: f64| -> Result<f64> {
        let mut m = module.clone();
        let mut i = 0;
        m.visit_mut("", &mut |_, t| {
            if i == tensor {
                t.data_mut()[entry] += delta;
            }
            i += 1;
        });
        value_at(&m)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(instance ^ 0x5EED);
    let mut worst = 0.0f64;
    for (ti, a) in analytic.iter().enumerate() {
        let picks = index::sample(&mut rng, a.len(), SAMPLED.min(a.len())).into_vec();
        let mut an = Vec::with_capacity(picks.len());
        let mut nu = Vec::with_capacity(picks.len());
        for &e in &picks {
            let h = DEFAULT_STEP;
            nu.push((perturbed(ti, e, h)? - perturbed(ti, e, -h)?) / (2.0 * h));
            an.push(a[e]);
        }
        let scale = an.iter().chain(&nu).map(|v| v * v).sum::<f64>().sqrt();
        let err = if scale < ZERO_FLOOR {
            an.iter()
                .zip(&nu)
                .map(|(a, n)| (a - n).abs())
                .fold(0.0, f64::max)
        } else {
            relative_error(&an, &nu)
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Fills every parameter with `N(0, std^2)`, e.g. to lift zero initializations.
pub fn randomize<M: Module>(module: &mut M, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    module.visit_mut("", &mut |_, t| {
        let fresh = Tensor::randn(t.shape().to_vec(), std, &mut rng);
        t.data_mut().copy_from_slice(fresh.data());
    });
}

fn grid(instance: u64) -> PatchGrid {
    let cfg = tiny_encoder_config();
    let n = cfg.image_side * cfg.image_side * cfg.channels;
    let pixels = rand(&[n], instance ^ 0x1111)
        .into_data()
        .iter()
        .map(|v| 0.5 + 0.2 * v)
        .collect();
    patchify(
        &Image::new(cfg.image_side, cfg.channels, pixels).unwrap(),
        cfg.patch_size,
    )
    .unwrap()
}

pub type CaseFn = fn(u64) -> Result<f64>;

/// `(group, name, check)`; groups are numerics, encoders, prompting, objectives.
pub fn cases() -> Vec<(&'static str, &'static str, CaseFn)> {
    vec![
        ("numerics", "matmul", |i| {
            input_check(&[&[4, 5], &[5, 3]], i, |g, v| g.matmul(v[0], v[1]))
        }),
        ("numerics", "add", |i| {
            input_check(&[&[3, 4], &[3, 4]], i, |g, v| g.add(v[0], v[1]))
        }),
        ("numerics", "sub", |i| {
            input_check(&[&[3, 4], &[3, 4]], i, |g, v| g.sub(v[0], v[1]))
        }),
        ("numerics", "mul", |i| {
            input_check(&[&[3, 4], &[3, 4]], i, |g, v| g.mul(v[0], v[1]))
        }),
        ("numerics", "add_row", |i| {
            input_check(&[&[3, 4], &[1, 4]], i, |g, v| g.add_row(v[0], v[1]))
        }),
        ("numerics", "scale", |i| {
            input_check(&[&[2, 3]], i, |g, v| g.scale(v[0], -1.7))
        }),
        ("numerics", "scale_by", |i| {
            input_check(&[&[2, 3], &[1, 1]], i, |g, v| g.scale_by(v[0], v[1]))
        }),
        ("numerics", "exp", |i| {
            input_check(&[&[2, 3]], i, |g, v| g.exp(v[0]))
        }),
        ("numerics", "gelu", |i| {
            input_check(&[&[3, 5]], i, |g, v| g.gelu(v[0]))
        }),
        ("numerics", "relu", |i| {
            input_check(&[&[3, 5]], i, |g, v| g.relu(v[0]))
        }),
        ("numerics", "softmax rows", |i| {
            input_check(&[&[3, 5]], i, |g, v| g.softmax(v[0], 1))
        }),
        ("numerics", "softmax cols", |i| {
            input_check(&[&[3, 5]], i, |g, v| g.softmax(v[0], 0))
        }),
        ("numerics", "log_softmax", |i| {
            input_check(&[&[3, 5]], i, |g, v| g.log_softmax_rows(v[0]))
        }),
        ("numerics", "layer_norm", |i| {
            input_check(&[&[3, 4], &[1, 4], &[1, 4]], i, |g, v| {
                g.layer_norm(v[0], v[1], v[2])
            })
        }),
        ("numerics", "cosine", |i| {
            input_check(&[&[1, 6], &[1, 6]], i, |g, v| {
                g.cosine_similarity(v[0], v[1])
            })
        }),
        ("numerics", "l2_normalize", |i| {
            input_check(&[&[3, 6]], i, |g, v| g.l2_normalize_rows(v[0]))
        }),
        ("numerics", "transpose", |i| {
            input_check(&[&[3, 4]], i, |g, v| g.transpose(v[0]))
        }),
        ("numerics", "slice_cols", |i| {
            input_check(&[&[3, 6]], i, |g, v| g.slice_cols(v[0], 2, 3))
        }),
        ("numerics", "concat_cols", |i| {
            input_check(&[&[3, 2], &[3, 4]], i, |g, v| g.concat_cols(&[v[0], v[1]]))
        }),
        ("numerics", "concat_rows", |i| {
            input_check(&[&[2, 3], &[1, 3]], i, |g, v| g.concat_rows(&[v[0], v[1]]))
        }),
        ("numerics", "select_rows", |i| {
            input_check(&[&[4, 3]], i, |g, v| g.select_rows(v[0], &[2, 0, 2]))
        }),
        ("numerics", "mean", |i| {
            input_check(&[&[3, 3]], i, |g, v| g.mean(v[0]))
        }),
        ("numerics", "pick_mean", |i| {
            input_check(&[&[3, 4]], i, |g, v| g.pick_mean(v[0], &[1, 3, 0]))
        }),
        ("encoders", "linear", |i| {
            let lin = Linear::init(5, 3, &mut ChaCha8Rng::seed_from_u64(i));
            let x = rand(&[4, 5], i + 100);
            module_check(&lin, i, |g, v| {
                let x = g.constant(x.clone());
                v.forward(g, x)
            })
        }),
        ("encoders", "layer_norm module", |i| {
            let mut ln = LayerNorm::new(6);
            randomize(&mut ln, i, 0.8);
            let x = rand(&[3, 6], i + 100);
            module_check(&ln, i, |g, v| {
                let x = g.constant(x.clone());
                v.forward(g, x)
            })
        }),
        ("encoders", "transformer block", |i| {
            let block = Block::init(8, &mut ChaCha8Rng::seed_from_u64(i));
            let x = rand(&[5, 8], i + 100);
            module_check(&block, i, |g, v| {
                let x = g.constant(x.clone());
                v.forward(g, x, 2, None)
            })
        }),
        ("encoders", "transformer block input", |i| {
            let block = Block::init(8, &mut ChaCha8Rng::seed_from_u64(i));
            input_check(&[&[5, 8]], i, |g, v| {
                let b = block.bind(g, false);
                b.forward(g, v[0], 2, None)
            })
        }),
        ("encoders", "vision encoder", |i| {
            let enc =
                VisionEncoder::init(&tiny_encoder_config(), &mut ChaCha8Rng::seed_from_u64(i));
            let grid = grid(i);
            let visible: Vec<usize> = if i % 2 == 0 {
                vec![0, 1, 2, 3]
            } else {
                vec![1, 3]
            };
            module_check(&enc, i, |g, v| Ok(v.forward(g, &grid, &visible)?.embedding))
        }),
        ("encoders", "text encoder tokens", |i| {
            let enc = TextEncoder::init(&tiny_encoder_config(), &mut ChaCha8Rng::seed_from_u64(i));
            let tokens = [3 + (i as usize % 5), 11, 40, 7];
            module_check(&enc, i, |g, v| v.forward_tokens(g, &tokens))
        }),
        ("encoders", "text encoder soft prefix", |i| {
            let enc = TextEncoder::init(&tiny_encoder_config(), &mut ChaCha8Rng::seed_from_u64(i));
            input_check(&[&[3, 8]], i, |g, v| {
                let t = enc.bind(g, false);
                t.forward_soft(g, v[0], &[9, 21])
            })
        }),
        ("encoders", "contrastive pretraining loss", |i| {
            let mut enc = DualEncoder::new(tiny_encoder_config(), i).unwrap();
            enc.make_trainable().unwrap();
            let grids: Vec<PatchGrid> = (0..3).map(|k| grid(i * 7 + k)).collect();
            let captions = [vec![1usize, 5, 9], vec![2, 6], vec![3, 7, 11, 13]];
            module_check(&enc, i, |g, v| {
                let mut imgs = Vec::new();
                let mut txts = Vec::new();
                for (gr, cap) in grids.iter().zip(&captions) {
                    imgs.push(v.vision.forward(g, gr, &[0, 1, 2, 3])?.embedding);
                    txts.push(v.text.forward_tokens(g, cap)?);
                }
                let im = g.concat_rows(&imgs)?;
                let im = g.l2_normalize_rows(im)?;
                let tx = g.concat_rows(&txts)?;
                let tx = g.l2_normalize_rows(tx)?;
                let s = g.exp(v.log_logit_scale)?;
                contrastive_pretrain_loss(g, im, tx, s)
            })
        }),
        ("prompting", "meta-net parameters", |i| {
            let mut meta = MetaNet::new(8, 8, 4, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
            randomize(&mut meta, i, 0.7);
            let x = rand(&[1, 8], i + 100);
            module_check(&meta, i, |g, v| {
                let x = g.constant(x.clone());
                v.forward(g, x)
            })
        }),
        ("prompting", "meta-net input", |i| {
            let mut meta = MetaNet::new(8, 8, 4, &mut ChaCha8Rng::seed_from_u64(i)).unwrap();
            randomize(&mut meta, i, 0.7);
            input_check(&[&[1, 8]], i, |g, v| {
                let m = meta.bind(g, false);
                m.forward(g, v[0])
            })
        }),
        ("prompting", "prompt assembly and encoding", |i| {
            let enc = TextEncoder::init(&tiny_encoder_config(), &mut ChaCha8Rng::seed_from_u64(i));
            let classes = vec![vec![9usize], vec![21, 4], vec![33]];
            input_check(&[&[3, 8], &[1, 8]], i, |g, v| {
                let t = enc.bind(g, false);
                let ps = assemble_prompts(g, PromptKind::Promim, v[0], Some(v[1]), &classes)?;
                encode_prompt_set(g, &t, &ps)
            })
        }),
        ("prompting", "conditional learner parameters", |i| {
            let cfg = tiny_encoder_config();
            let enc = TextEncoder::init(&cfg, &mut ChaCha8Rng::seed_from_u64(i));
            let mut rng = ChaCha8Rng::seed_from_u64(i + 1);
            let ctx = ContextTokens::gaussian(3, cfg.embed_dim, &mut rng).unwrap();
            let mut meta = MetaNet::new(cfg.output_dim, cfg.embed_dim, 2, &mut rng).unwrap();
            randomize(&mut meta, i, 0.7);
            let learner = PromptLearner::new(Method::Promim, ctx, Some(meta)).unwrap();
            let cond = rand(&[1, cfg.output_dim], i + 100);
            let classes = vec![vec![9usize], vec![21, 4], vec![33]];
            module_check(&learner, i, |g, v| {
                let t = enc.bind(g, false);
                let c = g.constant(cond.clone());
                learner.class_embeddings(g, v, &t, Some(c), &classes)
            })
        }),
        ("prompting", "context-only learner parameters", |i| {
            let cfg = tiny_encoder_config();
            let enc = TextEncoder::init(&cfg, &mut ChaCha8Rng::seed_from_u64(i));
            let ctx =
                ContextTokens::gaussian(2, cfg.embed_dim, &mut ChaCha8Rng::seed_from_u64(i + 1))
                    .unwrap();
            let learner = PromptLearner::new(Method::Coop, ctx, None).unwrap();
            let classes = vec![vec![9usize, 2], vec![21]];
            module_check(&learner, i, |g, v| {
                let t = enc.bind(g, false);
                learner.class_embeddings(g, v, &t, None, &classes)
            })
        }),
        ("objectives", "class probabilities", |i| {
            input_check(&[&[2, 6], &[4, 6]], i, |g, v| {
                Ok(class_probabilities(g, v[0], v[1], 0.07)?.probs)
            })
        }),
        ("objectives", "cross-entropy", |i| {
            input_check(&[&[3, 6], &[4, 6]], i, |g, v| {
                let p = class_probabilities(g, v[0], v[1], 0.5)?;
                cross_entropy(g, &p, &[1, 3, 0])
            })
        }),
        ("objectives", "knowledge-guided distance", |i| {
            let reference = rand(&[4, 6], i + 100);
            input_check(&[&[4, 6]], i, |g, v| kg_loss(g, v[0], &reference))
        }),
        ("objectives", "total loss", |i| {
            let reference = rand(&[4, 6], i + 100);
            let lambda = 0.5 + (i % 4) as f64;
            input_check(&[&[2, 6], &[4, 6]], i, |g, v| {
                let p = class_probabilities(g, v[0], v[1], 0.3)?;
                let ce = cross_entropy(g, &p, &[2, 0])?;
                let w = g.l2_normalize_rows(v[1])?;
                let kg = kg_loss(g, w, &reference)?;
                Ok(total_loss(g, ce, Some(kg), lambda, None)?.0)
            })
        }),
    ]
}

/// Runs every instance of every case in `group` (all groups when `None`) and
/// returns `(name, worst relative error)` per case.
pub fn run_group(group: Option<&str>) -> Vec<(String, f64)> {
    cases()
        .into_iter()
        .filter(|(g, _, _)| group.is_none_or(|want| *g == want))
        .map(|(g, name, f)| {
            let t = std::time::Instant::now();
            let worst = (0..INSTANCES)
                .map(|i| f(i).unwrap_or_else(|e| panic!("{g}/{name} instance {i}: {e}")))
                .fold(0.0f64, f64::max);
            if std::env::var_os("GRAD_TIMING").is_some() {
                eprintln!(
                    "{g}/{name}: {:.2}s err {worst:e}",
                    t.elapsed().as_secs_f64()
                );
            }
            (format!("{g}/{name}"), worst)
        })
        .collect()
}
