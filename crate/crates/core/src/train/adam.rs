use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParameterStore};
use crate::tensor::Tensor;

/// Bias-corrected Adam with per-parameter moment arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore, lr: f64) -> Self {
        let zeros = || store.values().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every non-frozen parameter.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        if grads.0.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} arrays, store has {}, gradients {}",
                self.m.len(),
                store.len(),
                grads.0.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = &grads.0[i];
            if g.shape() != store.get(id).shape() || self.m[i].shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    store.name(id),
                    g.shape(),
                    store.get(id).shape()
                )));
            }
            if store.is_frozen(id) {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment arrays named `adam.m.<param>` / `adam.v.<param>`.
    pub fn state_arrays(&self, store: &ParameterStore) -> IndexMap<String, Tensor> {
        let mut out = IndexMap::new();
        for (i, (name, _)) in store.iter().enumerate() {
            out.insert(format!("adam.m.{name}"), self.m[i].clone());
            out.insert(format!("adam.v.{name}"), self.v[i].clone());
        }
        out
    }

    /// Restore moments saved by [`Adam::state_arrays`].
    pub fn load_state(&mut self, store: &ParameterStore, arrays: &IndexMap<String, Tensor>, step: u64) -> Result<()> {
        for (i, (name, t)) in store.iter().enumerate() {
            for (kind, dst) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("adam.{kind}.{name}");
                let src = arrays
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer state {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Format(format!("optimizer state {key} has shape {:?}", src.shape())));
                }
                *dst = src.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}
