use super::graph::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for every parameter of one [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect::<Vec<_>>();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update of every trainable parameter from its
    /// current gradient. Gradients are left untouched.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut store = scalar_store(1.5);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &store);
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store.iter().next().unwrap().value.item(), 1.5);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut store = scalar_store(0.0);
        store.get_mut(store.find("w").unwrap()).grad = Tensor::scalar(1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &store);
        adam.step(&mut store);
        let w = store.iter().next().unwrap().value.item();
        assert!((w + 0.1).abs() < 1e-8, "{w}");
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add_frozen("f", Tensor::scalar(2.0));
        store.get_mut(id).grad = Tensor::scalar(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.step(&mut store);
        assert_eq!(store.value(id).item(), 2.0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut store = scalar_store(0.3);
            let mut adam = AdamState::new(AdamConfig::with_lr(0.01), &store);
            for i in 0..20 {
                let id = store.find("w").unwrap();
                store.get_mut(id).grad = Tensor::scalar((i as f64).sin());
                adam.step(&mut store);
            }
            (store, adam)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.iter().next().unwrap().value.item().to_bits(), b.iter().next().unwrap().value.item().to_bits());
        assert_eq!(sa, sb);
    }
}
