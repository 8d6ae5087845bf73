use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Element")]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
    steps: u64,
}

/// Adam with per-parameter step counts.
///
/// Frozen parameters are neither updated nor have their moments touched, so
/// unfreezing resumes from the state they had when they were frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Element")]
pub struct Adam<T> {
    pub config: AdamConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: Vec::new() }
    }

    /// Applies `grads` to `store`, skipping frozen parameters.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let c = self.config;
        for (id, grad) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let value = store.value_mut(*id);
            assert_eq!(value.shape(), grad.shape(), "gradient shape for {id:?}");
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                m: Tensor::zeros(value.shape()),
                v: Tensor::zeros(value.shape()),
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
            let step = T::of(c.lr * bc2.sqrt() / bc1);
            let eps = T::of(c.eps * bc2.sqrt());
            for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(st.m.data_mut()).zip(st.v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w = *w - step * *m / (v.sqrt() + eps);
            }
        }
    }

    /// Number of updates applied to parameter `id` so far.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(id.0).and_then(|s| s.as_ref()).map_or(0, |s| s.steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_and_state_untouched() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", "ga", Tensor::ones(&[2]));
        let b = store.add("b", "gb", Tensor::ones(&[2]));
        store.set_group_trainable("ga", false);
        let mut opt = Adam::new(AdamConfig::default());
        let g = Tensor::ones(&[2]);
        opt.step(&mut store, &[(a, g.clone()), (b, g.clone())]);
        assert_eq!(store.get(a).value, Tensor::ones(&[2]));
        assert!(store.get(b).value.data()[0] < 1.0);
        assert_eq!(opt.steps(a), 0);
        assert_eq!(opt.steps(b), 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", "x", Tensor::from_f64(&[1], &[5.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        for _ in 0..500 {
            let v = store.get(x).value.data()[0];
            opt.step(&mut store, &[(x, Tensor::from_f64(&[1], &[2.0 * (v - 1.0)]))]);
        }
        assert!((store.get(x).value.data()[0] - 1.0).abs() < 1e-2);
    }
}
