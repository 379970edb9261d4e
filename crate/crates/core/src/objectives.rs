//! Class probabilities, cross-entropy, the knowledge-guided distance and the
//! combined tuning objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var, NORM_EPS};

/// Softmax over temperature-scaled cosine similarities for one or more images.
#[derive(Clone, Copy, Debug)]
pub struct ClassProbabilities {
    /// `[B, C]` cosine similarities.
    pub sims: Var,
    /// `[B, C]` log-probabilities.
    pub log_probs: Var,
    /// `[B, C]` probabilities.
    pub probs: Var,
    pub tau: f64,
}

impl ClassProbabilities {
    pub fn n_classes(&self, g: &Graph) -> usize {
        g.value(self.probs).shape()[1]
    }
}

fn check_rows_nonzero(g: &Graph, v: Var, what: &str) -> Result<()> {
    let t = g.value(v);
    let (r, _) = t.dims2()?;
    for i in 0..r {
        let n = t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < NORM_EPS {
            return Err(Error::degenerate(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// `softmax(cos(x, w_i) / tau)` over the `C` rows of `class_embs`.
///
/// `image_embs` is `[B, d]` and `class_embs` is `[C, d]`; both are normalized here.
pub fn class_probabilities(
    g: &mut Graph,
    image_embs: Var,
    class_embs: Var,
    tau: f64,
) -> Result<ClassProbabilities> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::input(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (_, dx) = g.value(image_embs).dims2()?;
    let (c, dw) = g.value(class_embs).dims2()?;
    if dx != dw {
        return Err(Error::dim(format!("image width {dx} vs class width {dw}")));
    }
    if c < 2 {
        return Err(Error::input(format!("need at least 2 classes, got {c}")));
    }
    check_rows_nonzero(g, image_embs, "image embedding")?;
    check_rows_nonzero(g, class_embs, "class embedding")?;
    let x = g.l2_normalize_rows(image_embs)?;
    let w = g.l2_normalize_rows(class_embs)?;
    let wt = g.transpose(w)?;
    let sims = g.matmul(x, wt)?;
    let logits = g.scale(sims, 1.0 / tau)?;
    let log_probs = g.log_softmax_rows(logits)?;
    let probs = g.softmax_rows(logits)?;
    Ok(ClassProbabilities {
        sims,
        log_probs,
        probs,
        tau,
    })
}

/// Mean `-log p_label` over the rows of `probs`.
pub fn cross_entropy(g: &mut Graph, probs: &ClassProbabilities, labels: &[usize]) -> Result<Var> {
    let (b, c) = g.value(probs.log_probs).dims2()?;
    if labels.len() != b {
        return Err(Error::input(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::input(format!(
            "label {l} out of range for {c} classes"
        )));
    }
    let picked = g.pick_mean(probs.log_probs, labels)?;
    g.scale(picked, -1.0)
}

/// `(1/C) * sum_i ||w_i - w_ref_i||^2`. The reference is a constant, so only
/// `learned` receives gradients.
pub fn kg_loss(g: &mut Graph, learned: Var, reference: &Tensor) -> Result<Var> {
    let (c, d) = g.value(learned).dims2()?;
    let (rc, rd) = reference.dims2()?;
    if c != rc {
        return Err(Error::input(format!(
            "{c} learned classes vs {rc} reference classes"
        )));
    }
    if d != rd {
        return Err(Error::dim(format!(
            "learned width {d} vs reference width {rd}"
        )));
    }
    if c == 0 {
        return Err(Error::input("no classes"));
    }
    let r = g.constant(Tensor::matrix(c, d, reference.data().to_vec())?);
    let diff = g.sub(learned, r)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq)?;
    g.scale(s, 1.0 / c as f64)
}

/// Scalar values of the three loss terms for logging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kg: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, kg: f64, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            ce,
            kg,
            lambda,
            total: ce + lambda * kg,
        })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::input(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    Ok(())
}

/// `ce + lambda * kg` on the graph.
///
/// With `lambda == 0` or no `kg` node the returned loss is `ce` itself, so the
/// graph and its gradients are exactly those of the cross-entropy alone. A
/// detached `kg_value` can be supplied for logging in that case.
pub fn total_loss(
    g: &mut Graph,
    ce: Var,
    kg: Option<Var>,
    lambda: f64,
    kg_value: Option<f64>,
) -> Result<(Var, LossBreakdown)> {
    check_lambda(lambda)?;
    let ce_v = g.scalar(ce)?;
    match kg {
        Some(k) if lambda != 0.0 => {
            let kg_v = g.scalar(k)?;
            let weighted = g.scale(k, lambda)?;
            let total = g.add(ce, weighted)?;
            let b = LossBreakdown {
                ce: ce_v,
                kg: kg_v,
                lambda,
                total: g.scalar(total)?,
            };
            Ok((total, b))
        }
        other => {
            let kg_v = match other {
                Some(k) => g.scalar(k)?,
                None => kg_value.unwrap_or(0.0),
            };
            Ok((
                ce,
                LossBreakdown {
                    ce: ce_v,
                    kg: kg_v,
                    lambda,
                    total: ce_v,
                },
            ))
        }
    }
}

/// Which embeddings the knowledge-guided distance compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KgSpace {
    /// Unit-norm rows; the distance is bounded by 4 per class.
    #[default]
    Normalized,
    /// Text-encoder outputs as they are.
    Raw,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn probs_for(sims_x: &[f64], classes: &[Vec<f64>], tau: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(sims_x.to_vec()));
        let d = sims_x.len();
        let w = g.constant(Tensor::matrix(classes.len(), d, classes.concat()).unwrap());
        let p = class_probabilities(&mut g, x, w, tau).unwrap();
        g.value(p.probs).data().to_vec()
    }

    #[test]
    fn identical_classes_give_uniform_probabilities() {
        let p = probs_for(&[0.3, -1.0, 2.0], &vec![vec![1.0, 2.0, 3.0]; 5], 0.07);
        for v in p {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_oracle_for_two_classes() {
        // x = e1, w0 has cosine 0.5, w1 has cosine 0.1
        let w0 = vec![0.5, (1.0f64 - 0.25).sqrt()];
        let w1 = vec![0.1, (1.0f64 - 0.01).sqrt()];
        let p = probs_for(&[1.0, 0.0], &[w0, w1], 1.0);
        let e0 = 0.5f64.exp();
        let e1 = 0.1f64.exp();
        assert!((p[0] - e0 / (e0 + e1)).abs() < 1e-12);
        assert!((p[1] - e1 / (e0 + e1)).abs() < 1e-12);
    }

    #[test]
    fn small_temperature_concentrates_on_argmax() {
        let p = probs_for(
            &[1.0, 0.0],
            &[vec![0.5, 0.8], vec![0.9, 0.2], vec![-1.0, 0.0]],
            1e-3,
        );
        assert!(p[1] > 1.0 - 1e-9);
    }

    #[test]
    fn probabilities_reject_bad_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 0.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(matches!(
            class_probabilities(&mut g, x, w, 0.0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            class_probabilities(&mut g, x, w, -1.0),
            Err(Error::Input(_))
        ));
        let z = g.constant(Tensor::row(vec![0.0, 0.0]));
        assert!(matches!(
            class_probabilities(&mut g, z, w, 1.0),
            Err(Error::DegenerateInput(_))
        ));
        let wz = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        assert!(matches!(
            class_probabilities(&mut g, x, wz, 1.0),
            Err(Error::DegenerateInput(_))
        ));
        let one = g.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(class_probabilities(&mut g, x, one, 1.0).is_err());
        let wide = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(
            class_probabilities(&mut g, x, wide, 1.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cross_entropy_special_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 0.0]));
        let w = g.constant(Tensor::matrix(4, 2, vec![1.0, 1.0].repeat(4)).unwrap());
        let p = class_probabilities(&mut g, x, w, 1.0).unwrap();
        let ce = cross_entropy(&mut g, &p, &[2]).unwrap();
        assert!((g.scalar(ce).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&mut g, &p, &[4]),
            Err(Error::Input(_))
        ));
        assert!(cross_entropy(&mut g, &p, &[0, 1]).is_err());

        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap());
        let p = class_probabilities(&mut g, x, w, 1e-3).unwrap();
        let ce = cross_entropy(&mut g, &p, &[0]).unwrap();
        assert!(g.scalar(ce).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kg_special_values_and_scalar_oracle() {
        let mut g = Graph::new();
        let w = Tensor::randn(vec![3, 5], 1.0, &mut seeding::rng(&[1]));
        let v = g.constant(w.clone());
        let k = kg_loss(&mut g, v, &w).unwrap();
        assert_eq!(g.scalar(k).unwrap(), 0.0);

        let e1 = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let e2 = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let v = g.constant(e1);
        let k = kg_loss(&mut g, v, &e2).unwrap();
        assert_eq!(g.scalar(k).unwrap(), 2.0);

        let r = Tensor::randn(vec![3, 5], 1.0, &mut seeding::rng(&[2]));
        let v = g.constant(w.clone());
        let k = kg_loss(&mut g, v, &r).unwrap();
        let mut oracle = 0.0;
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..5 {
                let d = w.data()[i * 5 + j] - r.data()[i * 5 + j];
                acc += d * d;
            }
            oracle += acc;
        }
        oracle /= 3.0;
        assert!((g.scalar(k).unwrap() - oracle).abs() < 1e-12);

        let short = Tensor::zeros(vec![2, 5]);
        assert!(matches!(kg_loss(&mut g, v, &short), Err(Error::Input(_))));
    }

    #[test]
    fn kg_gradient_reaches_only_learned() {
        let mut g = Graph::new();
        let w = g
            .leaf(Tensor::randn(vec![2, 3], 1.0, &mut seeding::rng(&[3])).with_requires_grad(true));
        let r = Tensor::randn(vec![2, 3], 1.0, &mut seeding::rng(&[4]));
        let k = kg_loss(&mut g, w, &r).unwrap();
        g.backward(k).unwrap();
        let grad = g.grad(w).unwrap().to_vec();
        for (i, gv) in grad.iter().enumerate() {
            let want = (g.value(w).data()[i] - r.data()[i]) * 2.0 / 2.0;
            assert!((gv - want).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = LossBreakdown::new(1.0, 0.5, 2.0).unwrap();
        assert_eq!(b.total, 2.0);
        assert!(LossBreakdown::new(1.0, 0.5, -0.1).is_err());

        let mut g = Graph::new();
        let ce = g.constant(Tensor::scalar(0.731));
        let kg = g.constant(Tensor::scalar(0.25));
        let (t, b) = total_loss(&mut g, ce, Some(kg), 0.0, None).unwrap();
        assert_eq!(t, ce);
        assert_eq!(b.total, 0.731);
        assert_eq!(b.kg, 0.25);
        let (_, b) = total_loss(&mut g, ce, None, 0.0, Some(0.4)).unwrap();
        assert_eq!(b.kg, 0.4);
        for lambda in [0.5, 1.0, 2.0, 8.0] {
            let (_, b) = total_loss(&mut g, ce, Some(kg), lambda, None).unwrap();
            assert_eq!(b.total, 0.731 + lambda * 0.25);
        }
        assert!(matches!(
            total_loss(&mut g, ce, Some(kg), -1.0, None),
            Err(Error::Input(_))
        ));
    }
}
