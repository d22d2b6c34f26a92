//! Adam with bias correction, updating trainable parameters only.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for each trainable parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamState {
    /// Zeroed moments for exactly the trainable parameters of `params`.
    pub fn new(params: &ParamRegistry) -> Self {
        let moments = params
            .trainable_ids()
            .map(|id| {
                let shape = params.value(id).shape().to_vec();
                (id, (Tensor::zeros(shape.clone()), Tensor::zeros(shape)))
            })
            .collect();
        Self { t: 0, moments }
    }

    /// Scalars held across both moment buffers.
    pub fn moment_len(&self) -> usize {
        self.moments.values().map(|(m, _)| m.len()).sum()
    }
}

/// One Adam update from the gradients stored in `params`. A parameter with
/// no gradient buffer is treated as having a zero gradient. Any non-finite
/// gradient aborts before a single value changes.
pub fn adam_step(params: &mut ParamRegistry, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for &id in state.moments.keys() {
        if !params.is_trainable(id) {
            return Err(Error::Validation(format!(
                "optimizer holds moments for frozen parameter `{}`",
                params.name(id)
            )));
        }
        if params.grad(id).is_some_and(|g| !g.all_finite()) {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (&id, (m, v)) in state.moments.iter_mut() {
        let grad = params.grad(id).cloned();
        let (m, v) = (m.data_mut(), v.data_mut());
        match &grad {
            Some(g) => {
                for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                }
            }
            None => {
                m.iter_mut().for_each(|mi| *mi *= cfg.beta1);
                v.iter_mut().for_each(|vi| *vi *= cfg.beta2);
            }
        }
        for ((p, &mi), &vi) in params.value_mut(id).data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
            let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            // Skipping exact zeros keeps −0.0 parameters bit-identical.
            if step != 0.0 {
                *p -= step;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    fn registry(values: &[f64]) -> (ParamRegistry, ParamId, ParamId) {
        let mut reg = ParamRegistry::new();
        let w = reg
            .register("w", Tensor::new([values.len()], values.to_vec()).unwrap(), ParamRole::Bias, true)
            .unwrap();
        let f = reg.register("frozen", Tensor::ones([2]), ParamRole::Bias, false).unwrap();
        (reg, w, f)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut reg, w, _) = registry(&[1.0, 1.0, 1.0]);
        reg.set_grad(w, Some(Tensor::new([3], vec![0.5, -2.0, 1e-3]).unwrap()));
        let mut st = AdamState::new(&reg);
        adam_step(&mut reg, &mut st, &AdamConfig::with_lr(0.01)).unwrap();
        for (p, g) in reg.value(w).data().iter().zip([0.5f64, -2.0, 1e-3]) {
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15);
            assert!((p - (1.0 - 0.01 * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_gradient_from_fresh_moments_is_a_no_op() {
        let (mut reg, w, _) = registry(&[0.3, -0.0]);
        reg.set_grad(w, Some(Tensor::zeros([2])));
        let mut st = AdamState::new(&reg);
        adam_step(&mut reg, &mut st, &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(reg.value(w).data()[0], 0.3);
        assert_eq!(reg.value(w).data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let (mut reg, w, _) = registry(&[0.0]);
        let mut st = AdamState::new(&reg);
        let cfg = AdamConfig::with_lr(0.1);
        reg.set_grad(w, Some(Tensor::scalar(2.0).reshape([1]).unwrap()));
        adam_step(&mut reg, &mut st, &cfg).unwrap();
        let (m1, v1) = (st.moments[&w].0.data()[0], st.moments[&w].1.data()[0]);
        reg.set_grad(w, Some(Tensor::zeros([1])));
        adam_step(&mut reg, &mut st, &cfg).unwrap();
        assert!((st.moments[&w].0.data()[0] - 0.9 * m1).abs() < 1e-15);
        assert!((st.moments[&w].1.data()[0] - 0.999 * v1).abs() < 1e-15);
    }

    /// Straight-line Adam on f(θ) = (θ − 3)², written without the registry.
    fn reference(theta0: f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * (th - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + eps);
            out.push(th);
        }
        out
    }

    #[test]
    fn quadratic_matches_reference() {
        let (mut reg, w, f) = registry(&[-1.0]);
        let mut st = AdamState::new(&reg);
        let cfg = AdamConfig::with_lr(0.05);
        let mut traj = Vec::new();
        for _ in 0..3 {
            let th = reg.value(w).data()[0];
            reg.set_grad(w, Some(Tensor::new([1], vec![2.0 * (th - 3.0)]).unwrap()));
            adam_step(&mut reg, &mut st, &cfg).unwrap();
            traj.push(reg.value(w).data()[0]);
        }
        for (a, b) in traj.iter().zip(reference(-1.0, 3, 0.05)) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        assert_eq!(reg.value(f).data(), &[1.0, 1.0]);
    }

    #[test]
    fn state_covers_only_trainable_parameters() {
        let (reg, w, _) = registry(&[1.0, 2.0, 3.0]);
        let st = AdamState::new(&reg);
        assert_eq!(st.moments.keys().copied().collect::<Vec<_>>(), vec![w]);
        assert_eq!(st.moment_len(), reg.trainable_count());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut reg, w, _) = registry(&[1.0, 2.0]);
        reg.set_grad(w, Some(Tensor::new([2], vec![1.0, f64::NAN]).unwrap()));
        let mut st = AdamState::new(&reg);
        let before = reg.snapshot();
        match adam_step(&mut reg, &mut st, &AdamConfig::with_lr(0.1)) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert!(reg.changed_since(&before).is_empty());
        assert_eq!(st.t, 0);
    }
}
