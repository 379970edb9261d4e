use crate::encoders::layers::Module;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check_grads<M: Module>(module: &M, step: usize) -> Result<()> {
    let mut bad = None;
    module.visit("", &mut |name, t| {
        if bad.is_none() && t.requires_grad() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    bad = Some(name.to_string());
                }
            }
        }
    });
    match bad {
        Some(name) => Err(Error::Training {
            step,
            reason: format!("non-finite gradient for {name}"),
        }),
        None => Ok(()),
    }
}

/// `p <- p - lr * g` for every trainable tensor that holds a gradient, then
/// zeroes the gradients. Nothing is updated if any gradient is non-finite.
pub fn sgd_step<M: Module>(module: &mut M, lr: f64, step: usize) -> Result<()> {
    check_grads(module, step)?;
    module.visit_mut("", &mut |_, t| sgd_update(t, lr));
    Ok(())
}

/// Single-tensor SGD update; no-op without a gradient or when frozen.
pub fn sgd_update(t: &mut Tensor, lr: f64) {
    if !t.requires_grad() {
        return;
    }
    let Some(g) = t.grad().map(<[f64]>::to_vec) else {
        return;
    };
    for (p, gv) in t.data_mut().iter_mut().zip(&g) {
        *p -= lr * gv;
    }
    t.zero_grad();
}

/// Adam with bias correction, used for encoder pretraining.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: Module>(&mut self, module: &mut M, step: usize) -> Result<()> {
        check_grads(module, step)?;
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        module.visit_mut("", &mut |_, t| {
            if ms.len() <= i {
                ms.push(vec![0.0; t.numel()]);
                vs.push(vec![0.0; t.numel()]);
            }
            if t.requires_grad() {
                if let Some(g) = t.grad().map(<[f64]>::to_vec) {
                    let (m, v) = (&mut ms[i], &mut vs[i]);
                    for (j, p) in t.data_mut().iter_mut().enumerate() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                    t.zero_grad();
                }
            }
            i += 1;
        });
        Ok(())
    }
}
