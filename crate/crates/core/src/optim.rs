//! RAdam with a Lookahead wrapper, and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Tensor;

/// A first-order update rule over a [`ParamStore`].
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()>;
    /// Number of completed steps.
    fn steps(&self) -> u64;
    /// Internal buffers keyed `"{buffer}/{param}"`, for checkpoints.
    fn state(&self) -> BTreeMap<String, Tensor>;
    fn load_state(&mut self, steps: u64, state: BTreeMap<String, Tensor>) -> Result<()>;
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale(s);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl RAdam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        RAdam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Variance rectification factor for step `t`, or `None` while the
    /// second-moment estimate is still unreliable.
    pub fn rectification(&self, t: u64) -> Option<f64> {
        let b2t = self.beta2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        (rho > 5.0).then(|| {
            ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        })
    }
}

impl Optimizer for RAdam {
    fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let rect = self.rectification(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}", g.shape())));
            }
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                *pi -= match rect {
                    Some(r) => self.lr * r * mhat / ((*vi / bc2).sqrt() + self.eps),
                    None => self.lr * mhat,
                };
            }
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.t
    }

    fn state(&self) -> BTreeMap<String, Tensor> {
        let m = self.m.iter().map(|(k, t)| (format!("m/{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("v/{k}"), t.clone()));
        m.chain(v).collect()
    }

    fn load_state(&mut self, steps: u64, state: BTreeMap<String, Tensor>) -> Result<()> {
        self.t = steps;
        self.m.clear();
        self.v.clear();
        for (k, t) in state {
            if let Some(n) = k.strip_prefix("m/") {
                self.m.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("v/") {
                self.v.insert(n.to_string(), t);
            } else {
                return Err(Error::Corrupt(format!("unexpected optimizer buffer `{k}`")));
            }
        }
        Ok(())
    }
}

/// Keeps slow weights and, every `k` inner steps, moves them a fraction
/// `alpha` towards the fast weights and resets the fast weights to them.
#[derive(Debug, Clone)]
pub struct Lookahead<O> {
    pub inner: O,
    pub k: u64,
    pub alpha: f64,
    slow: BTreeMap<String, Tensor>,
}

impl<O: Optimizer> Lookahead<O> {
    pub fn new(inner: O, k: usize, alpha: f64) -> Self {
        Lookahead {
            inner,
            k: k.max(1) as u64,
            alpha,
            slow: BTreeMap::new(),
        }
    }
}

impl<O: Optimizer> Optimizer for Lookahead<O> {
    fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        for (name, p) in params.iter() {
            self.slow.entry(name.to_string()).or_insert_with(|| p.clone());
        }
        self.inner.step(params, grads)?;
        if self.inner.steps() % self.k == 0 {
            for (name, p) in params.iter_mut() {
                let slow = self.slow.get_mut(name).expect("seeded above");
                for (s, f) in slow.data_mut().iter_mut().zip(p.data_mut()) {
                    *s += self.alpha * (*f - *s);
                    *f = *s;
                }
            }
        }
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.inner.steps()
    }

    fn state(&self) -> BTreeMap<String, Tensor> {
        let mut s = self.inner.state();
        s.extend(self.slow.iter().map(|(k, t)| (format!("slow/{k}"), t.clone())));
        s
    }

    fn load_state(&mut self, steps: u64, state: BTreeMap<String, Tensor>) -> Result<()> {
        let (slow, inner): (BTreeMap<_, _>, BTreeMap<_, _>) =
            state.into_iter().partition(|(k, _)| k.starts_with("slow/"));
        self.slow = slow
            .into_iter()
            .map(|(k, t)| (k["slow/".len()..].to_string(), t))
            .collect();
        self.inner.load_state(steps, inner)
    }
}

/// The training optimizer: RAdam inside Lookahead.
pub fn build(cfg: &OptimizerConfig) -> Lookahead<RAdam> {
    Lookahead::new(
        RAdam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps),
        cfg.lookahead_steps,
        cfg.lookahead_alpha,
    )
}
