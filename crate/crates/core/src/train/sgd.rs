//! Stochastic gradient descent with classical momentum:
//! `v <- mu*v - lr*g;  p <- p + v`.

use crate::models::{ParamGroup, ParamStore};
use crate::tensor::Element;

use super::TrainError;

#[derive(Clone, Copy, Debug)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter velocity buffers mirroring the store's shapes.
pub struct OptimizerState<T: Element> {
    velocities: Vec<Vec<T>>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, cfg: OptimizerConfig) -> Self {
        OptimizerState {
            velocities: store.iter().map(|e| vec![T::zero(); e.tensor.numel()]).collect(),
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    /// One update over all parameters whose group passes `trainable`.
    /// Frozen parameters are untouched (values and velocities alike).
    /// A non-finite gradient aborts with a diagnostic.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<(), TrainError> {
        let lr = T::from_f64(self.lr);
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        for (entry, vel) in store.iter_mut().zip(&mut self.velocities) {
            if !trainable(entry.group) {
                continue;
            }
            let grad = entry
                .tensor
                .grad()
                .ok_or_else(|| TrainError::Invalid(format!("parameter '{}' has no gradient", entry.name)))?;
            if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
                return Err(TrainError::Invalid(format!(
                    "non-finite gradient {bad} in parameter '{}'",
                    entry.name
                )));
            }
            let grad = grad.to_vec();
            let data = entry.tensor.data_mut();
            for i in 0..data.len() {
                let mut g = grad[i];
                if self.weight_decay != 0.0 {
                    g = g + wd * data[i];
                }
                vel[i] = mu * vel[i] - lr * g;
                data[i] = data[i] + vel[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ParamGroup;
    use crate::tensor::Tensor;

    fn store_with(p: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", ParamGroup::Head, Tensor::from_vec(vec![p.len()], p.to_vec()).unwrap())
            .unwrap();
        s
    }

    fn set_grad(store: &mut ParamStore<f64>, g: &[f64]) {
        let id = store.index_of("p").unwrap();
        store.entry_mut(id).tensor.zero_grad();
        store.entry_mut(id).tensor.accumulate_grad(g);
    }

    #[test]
    fn plain_gradient_step_reaches_zero() {
        // mu = 0, lr = 1, g = p0  =>  p1 = 0
        let mut store = store_with(&[3.5]);
        let mut opt = OptimizerState::new(
            &store,
            OptimizerConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0 },
        );
        set_grad(&mut store, &[3.5]);
        opt.step(&mut store, |_| true).unwrap();
        assert_eq!(store.iter().next().unwrap().tensor.data(), &[0.0]);
    }

    #[test]
    fn zero_gradients_leave_parameters_but_decay_velocity() {
        let mut store = store_with(&[1.0]);
        let mut opt = OptimizerState::new(
            &store,
            OptimizerConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.0 },
        );
        // seed a velocity with one real step
        set_grad(&mut store, &[1.0]);
        opt.step(&mut store, |_| true).unwrap();
        let p_after_first = store.iter().next().unwrap().tensor.data()[0];
        let v1 = opt.velocities[0][0];
        assert!((v1 - (-0.1)).abs() < 1e-15);

        set_grad(&mut store, &[0.0]);
        opt.step(&mut store, |_| true).unwrap();
        let v2 = opt.velocities[0][0];
        assert!((v2 - 0.5 * v1).abs() < 1e-15, "velocity decays by mu");
        let p_final = store.iter().next().unwrap().tensor.data()[0];
        assert!((p_final - (p_after_first + v2)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_the_scalar_hand_iteration_oracle() {
        // f(p) = p^2, g = 2p, from p = 1 with lr 0.1, mu 0.9:
        // oracle: v1 = -0.2, p1 = 0.8; v2 = 0.9*(-0.2) - 0.1*1.6 = -0.34, p2 = 0.46
        let oracle = {
            let (mut p, mut v) = (1.0f64, 0.0f64);
            for _ in 0..2 {
                let g = 2.0 * p;
                v = 0.9 * v - 0.1 * g;
                p += v;
            }
            p
        };
        assert!((oracle - 0.46).abs() < 1e-12);

        let mut store = store_with(&[1.0]);
        let mut opt = OptimizerState::new(
            &store,
            OptimizerConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 },
        );
        for _ in 0..2 {
            let p = store.iter().next().unwrap().tensor.data()[0];
            set_grad(&mut store, &[2.0 * p]);
            opt.step(&mut store, |_| true).unwrap();
        }
        let p = store.iter().next().unwrap().tensor.data()[0];
        assert!((p - oracle).abs() < 1e-15);
    }

    #[test]
    fn ten_steps_match_the_oracle_to_1e12() {
        let mut p_oracle = 0.7f64;
        let mut v_oracle = 0.0f64;
        let mut store = store_with(&[0.7]);
        let mut opt = OptimizerState::new(
            &store,
            OptimizerConfig { lr: 0.05, momentum: 0.9, weight_decay: 0.0 },
        );
        for _ in 0..10 {
            let g = 2.0 * p_oracle;
            v_oracle = 0.9 * v_oracle - 0.05 * g;
            p_oracle += v_oracle;

            let p = store.iter().next().unwrap().tensor.data()[0];
            set_grad(&mut store, &[2.0 * p]);
            opt.step(&mut store, |_| true).unwrap();
            let p_new = store.iter().next().unwrap().tensor.data()[0];
            assert!((p_new - p_oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("backbone.w", ParamGroup::Backbone, Tensor::from_vec(vec![1], vec![1.0]).unwrap())
            .unwrap();
        store
            .add("classifier.w", ParamGroup::Classifier, Tensor::from_vec(vec![1], vec![1.0]).unwrap())
            .unwrap();
        let mut opt = OptimizerState::new(&store, OptimizerConfig::default());
        for id in store.ids().collect::<Vec<_>>() {
            store.entry_mut(id).tensor.accumulate_grad(&[1.0]);
        }
        opt.step(&mut store, |g| g == ParamGroup::Classifier).unwrap();
        assert_eq!(store.entry(store.index_of("backbone.w").unwrap()).tensor.data(), &[1.0]);
        assert!(store.entry(store.index_of("classifier.w").unwrap()).tensor.data()[0] < 1.0);
    }

    #[test]
    fn nan_gradient_aborts_with_diagnostic() {
        let mut store = store_with(&[1.0]);
        let mut opt = OptimizerState::new(&store, OptimizerConfig::default());
        set_grad(&mut store, &[f64::NAN]);
        let err = opt.step(&mut store, |_| true).unwrap_err();
        assert!(err.to_string().contains("non-finite gradient"));
    }
}
