use std::f64::consts::PI;

use ndarray::Array2;

use crate::error::{KernelError, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
///
/// Parameters that received no gradient in a step are left untouched and
/// their step counters do not advance.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
    steps: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| Array2::zeros(params.get(id).dim())).collect::<Vec<_>>();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            steps: vec![0; params.len()],
        }
    }

    pub fn first_moment(&self, index: usize) -> &Array2<T> {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Array2<T> {
        &self.second[index]
    }

    pub fn steps(&self, index: usize) -> u64 {
        self.steps[index]
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in grads.param_grads() {
            let i = id.index();
            let p = params.get_mut(id);
            if p.dim() != g.dim() || self.first[i].dim() != g.dim() {
                return Err(KernelError::Shape {
                    op: "adam_step",
                    detail: format!("param {:?} vs grad {:?}", p.dim(), g.dim()),
                });
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (b1, b2) = (T::of(beta1), T::of(beta2));
            let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
            let step = T::of(lr / bc1);
            let bc2_sqrt = T::of(bc2.sqrt());
            let eps = T::of(eps);
            ndarray::Zip::from(p)
                .and(&mut self.first[i])
                .and(&mut self.second[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    *p -= step * *m / ((*v).sqrt() / bc2_sqrt + eps);
                });
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts.
///
/// Time is measured in epochs and may be fractional. Within a cycle of
/// length `T_i` starting at `s_i` the rate is
/// `min + (base - min) * (1 + cos(pi * (t - s_i) / T_i)) / 2`; each new cycle
/// is `t_mult` times longer than the previous one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineRestarts {
    pub base_lr: f64,
    pub min_lr: f64,
    pub t0: f64,
    pub t_mult: f64,
}

impl CosineRestarts {
    pub fn new(base_lr: f64, min_lr: f64, t0: f64, t_mult: f64) -> Result<Self> {
        if !(t0 > 0.0) || !(t_mult >= 1.0) || !(min_lr >= 0.0) || !(base_lr >= min_lr) {
            return Err(KernelError::Invalid {
                op: "CosineRestarts",
                detail: format!("base {base_lr} min {min_lr} t0 {t0} t_mult {t_mult}"),
            });
        }
        Ok(Self {
            base_lr,
            min_lr,
            t0,
            t_mult,
        })
    }

    /// Start and length of the cycle containing `t`.
    pub fn cycle(&self, t: f64) -> (f64, f64) {
        let t = t.max(0.0);
        if self.t_mult == 1.0 {
            let n = (t / self.t0).floor();
            return (n * self.t0, self.t0);
        }
        let (mut start, mut len) = (0.0, self.t0);
        while t >= start + len {
            start += len;
            len *= self.t_mult;
        }
        (start, len)
    }

    pub fn lr_at(&self, t: f64) -> f64 {
        let (start, len) = self.cycle(t);
        let frac = ((t.max(0.0) - start) / len).clamp(0.0, 1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * frac).cos())
    }
}
