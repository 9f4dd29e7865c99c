use std::collections::HashSet;

use super::{ParamId, ParamStore, Real, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

/// Adam with bias correction. Frozen parameters keep their values.
#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    state: Vec<Option<Moments<T>>>,
    frozen: HashSet<ParamId>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: Vec::new(), frozen: HashSet::new() }
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen.insert(id);
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&id)
    }

    /// Step count of parameter `id` (0 before its first update).
    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(id.index()).and_then(|s| s.as_ref()).map_or(0, |s| s.t)
    }

    /// Applies one update to every trainable parameter and zeroes all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        for id in store.ids() {
            if !self.frozen.contains(&id) && store.get(id).grad.is_none() {
                return Err(TensorError::MissingGrad(store.name(id).to_string()));
            }
        }
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for id in store.ids() {
            if self.frozen.contains(&id) {
                continue;
            }
            let p = store.get_mut(id);
            let n = p.value.numel();
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            let (b1, b2) = (T::of(beta1), T::of(beta2));
            let grad = p.grad.as_mut().expect("checked above");
            let values = p.value.data_mut();
            for (k, g) in grad.data_mut().iter_mut().enumerate() {
                st.m[k] = b1 * st.m[k] + (T::one() - b1) * *g;
                st.v[k] = b2 * st.v[k] + (T::one() - b2) * *g * *g;
                let m_hat = st.m[k].to_f64().unwrap() / bc1;
                let v_hat = st.v[k].to_f64().unwrap() / bc2;
                values[k] -= T::of(lr * m_hat / (v_hat.sqrt() + eps));
                *g = T::zero();
            }
        }
        for id in store.ids() {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(())
    }
}
