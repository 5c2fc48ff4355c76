//! AdamW over parameters held in low-precision containers.

use serde::{Deserialize, Serialize};

use crate::tensor::ContainerKind;

/// AdamW hyperparameters; the defaults are llm.c's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Projects each tensor of a flat buffer separately, so MX blocks never
/// straddle two tensors.
pub fn project_tensors(kind: &ContainerKind, buf: &mut [f64], sizes: &[usize]) {
    let mut rest = buf;
    for &n in sizes {
        let (head, tail) = rest.split_at_mut(n);
        kind.project(head);
        rest = tail;
    }
}

/// Parameters, optional master copy and optimizer moments.
///
/// `values` always holds exactly what the weights container stores. With a
/// master copy the optimizer updates the `f64` master and `values` is
/// re-derived from it; without one the update is applied to `values` and
/// rounded straight back into the container.
#[derive(Debug, Clone)]
pub struct ParamState {
    values: Vec<f64>,
    master: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
    sizes: Vec<usize>,
    weights: ContainerKind,
    adam: ContainerKind,
}

impl ParamState {
    pub fn new(init: Vec<f64>, sizes: Vec<usize>, weights: ContainerKind, adam: ContainerKind, master_copy: bool) -> Self {
        assert_eq!(sizes.iter().sum::<usize>(), init.len());
        let n = init.len();
        let mut values = init.clone();
        project_tensors(&weights, &mut values, &sizes);
        Self {
            values,
            master: master_copy.then_some(init),
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            sizes,
            weights,
            adam,
        }
    }

    /// Stored (container) parameter values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn master(&self) -> Option<&[f64]> {
        self.master.as_deref()
    }

    /// Best available `f64` weights: the master copy if kept.
    pub fn weights(&self) -> &[f64] {
        self.master.as_deref().unwrap_or(&self.values)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    /// Overwrites the weights (and master copy) and re-derives the stored
    /// values.
    pub fn set_weights(&mut self, w: &[f64]) {
        assert_eq!(w.len(), self.values.len());
        if let Some(master) = &mut self.master {
            master.copy_from_slice(w);
        }
        self.values.copy_from_slice(w);
        project_tensors(&self.weights, &mut self.values, &self.sizes);
    }

    /// One AdamW step. Moments are stored through the optimizer container
    /// before they are used.
    pub fn adamw_step(&mut self, grads: &[f64], opt: &AdamW) {
        assert_eq!(grads.len(), self.values.len());
        self.step += 1;
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
        }
        project_tensors(&self.adam, &mut self.m, &self.sizes);
        project_tensors(&self.adam, &mut self.v, &self.sizes);
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        let target = self.master.as_mut().unwrap_or(&mut self.values);
        for ((p, &m), &v) in target.iter_mut().zip(&self.m).zip(&self.v) {
            let mhat = m / c1;
            let vhat = v / c2;
            *p -= opt.lr * (mhat / (vhat.sqrt() + opt.eps) + opt.weight_decay * *p);
        }
        if let Some(master) = &self.master {
            self.values.copy_from_slice(master);
        }
        project_tensors(&self.weights, &mut self.values, &self.sizes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minifloat::FloatSpec;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = ParamState::new(vec![0.5, -1.0, 2.0], vec![3], ContainerKind::Wide, ContainerKind::Wide, false);
        p.adamw_step(&[0.0; 3], &AdamW::default());
        assert_eq!(p.values(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn one_step_matches_hand_computation() {
        let opt = AdamW { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
        let mut p = ParamState::new(vec![1.0, 2.0, -3.0], vec![3], ContainerKind::Wide, ContainerKind::Wide, false);
        let g = [0.5, -0.25, 2.0];
        p.adamw_step(&g, &opt);
        for (i, (&x0, &gi)) in [1.0f64, 2.0, -3.0].iter().zip(&g).enumerate() {
            // after one step mhat = g and vhat = g^2
            let expect = x0 - 0.1 * (gi / (gi.abs() + 1e-8) + 0.01 * x0);
            assert!((p.values()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn master_copy_accumulates_sub_ulp_updates() {
        let bf16 = ContainerKind::Mini(FloatSpec::E8M7);
        let opt = AdamW { lr: 2f64.powi(-10), ..AdamW::default() };
        let mut direct = ParamState::new(vec![1.0], vec![1], bf16, ContainerKind::Wide, false);
        let mut master = ParamState::new(vec![1.0], vec![1], bf16, ContainerKind::Wide, true);
        for _ in 0..50 {
            direct.adamw_step(&[-1.0], &opt);
            master.adamw_step(&[-1.0], &opt);
        }
        assert_eq!(direct.values(), &[1.0]);
        assert!(master.values()[0] > 1.03);
        assert!((master.master().unwrap()[0] - (1.0 + 50.0 * 2f64.powi(-10))).abs() < 1e-6);
    }
}
