use alloc::format;
use alloc::vec::Vec;

use crate::graph::Gradients;
use crate::{Error, Graph, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    /// Discounting factor of the mean-square accumulator.
    pub rho: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { rho: 0.9, momentum: 0.9, epsilon: 1.0 }
    }
}

/// One scalar update:
/// `ms ← ρ·ms + (1−ρ)·g²; mom ← μ·mom + lr·g/√(ms+ε); w ← w − mom`.
#[inline]
pub fn rmsprop_update<T: Real>(w: &mut T, g: T, ms: &mut T, mom: &mut T, lr: T, cfg: &RmsPropConfig) {
    let rho = T::of_f64(cfg.rho);
    *ms = rho * *ms + (T::one() - rho) * g * g;
    *mom = T::of_f64(cfg.momentum) * *mom + lr * g / (*ms + T::of_f64(cfg.epsilon)).sqrt();
    *w -= *mom;
}

/// Non-centred RMSprop with a separate momentum buffer. State mirrors the
/// trainable tensors of the graph it was created for.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsProp<T = f32> {
    pub config: RmsPropConfig,
    pub ms: Vec<Vec<Vec<T>>>,
    pub mom: Vec<Vec<Vec<T>>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(graph: &Graph<T>, config: RmsPropConfig) -> Self {
        let zeros: Vec<Vec<Vec<T>>> = graph
            .nodes()
            .iter()
            .map(|n| {
                n.op.param_info()
                    .iter()
                    .filter(|p| p.trainable)
                    .map(|p| alloc::vec![T::zero(); p.dims.iter().product()])
                    .collect()
            })
            .collect();
        RmsProp { config, ms: zeros.clone(), mom: zeros }
    }

    /// Applies one update. Nothing is modified when any gradient is not
    /// finite or shapes disagree with the state.
    pub fn step(&mut self, graph: &mut Graph<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if grads.params.len() != self.ms.len() || graph.len() != self.ms.len() {
            return Err(Error::InvalidArgument("optimizer state does not match graph".into()));
        }
        for (id, (g, s)) in grads.params.iter().zip(&self.ms).enumerate() {
            let name = &graph.node(id).name;
            if g.len() != s.len() || g.iter().zip(s).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::InvalidArgument(format!("gradient shape mismatch at {name}")));
            }
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let lr = T::of_f64(lr);
        for (id, node_grads) in grads.params.iter().enumerate() {
            let mut values = graph.node_mut(id).op.param_values_mut();
            for (k, g) in node_grads.iter().enumerate() {
                let (ms, mom) = (&mut self.ms[id][k], &mut self.mom[id][k]);
                for (((w, &g), ms), mom) in values[k].iter_mut().zip(g).zip(ms.iter_mut()).zip(mom.iter_mut()) {
                    rmsprop_update(w, g, ms, mom, lr, &self.config);
                }
            }
        }
        Ok(())
    }
}

/// `base_rate · (1 − iter/max_iter)^power`, zero past `max_iter`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyLr {
    pub base_rate: f64,
    pub power: f64,
    pub max_iter: usize,
}

impl PolyLr {
    pub fn new(max_iter: usize) -> Self {
        PolyLr { base_rate: 0.045, power: 0.98, max_iter }
    }

    pub fn lr(&self, iter: usize) -> f64 {
        if self.max_iter == 0 || iter >= self.max_iter {
            return 0.0;
        }
        let frac = 1.0 - iter as f64 / self.max_iter as f64;
        self.base_rate * num_traits::Float::powf(frac, self.power)
    }
}

/// Adds `λ·w` to the gradients of standard and pointwise convolution
/// kernels (the derivative of `λ/2·‖w‖²`) and returns the penalty value.
pub fn apply_weight_decay<T: Real>(graph: &Graph<T>, grads: &mut Gradients<T>, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let l = T::of_f64(lambda);
    let mut penalty = 0.0;
    for (id, node) in graph.nodes().iter().enumerate() {
        if let crate::Op::Conv(p) = &node.op {
            for (g, &w) in grads.params[id][0].iter_mut().zip(p.kernel.data()) {
                *g += l * w;
                penalty += w.as_f64() * w.as_f64();
            }
        }
    }
    0.5 * lambda * penalty
}
