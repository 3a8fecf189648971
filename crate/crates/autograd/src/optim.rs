//! AdamW: Adam moment estimates with weight decay applied directly to the
//! parameters rather than folded into the gradient.

use crate::error::{Result, TensorError};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    params: Vec<ParamId>,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>, params: Vec<ParamId>) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape());
        Self {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            params,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        // Validate everything before touching any state.
        for &id in &self.params {
            match grads.get(id) {
                None => return Err(TensorError::MissingGrad(store.name(id).to_string())),
                Some(g) if g.shape() != store.get(id).shape() => {
                    return Err(TensorError::ShapeMismatch {
                        op: "adamw",
                        left: store.get(id).shape().to_vec(),
                        right: g.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(c.beta1), f(c.beta2));
        let decay = f(1.0 - c.lr * c.weight_decay);
        let step_size = f(c.lr / bias1);
        let bias2_sqrt = f(bias2.sqrt());
        let eps = f(c.eps);
        for (k, &id) in self.params.iter().enumerate() {
            let g = grads.get(id).expect("checked above").data();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let denom = v[i].sqrt() / bias2_sqrt + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}
