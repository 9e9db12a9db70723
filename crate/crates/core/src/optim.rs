//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: OptimizerConfig,
    /// Number of updates taken so far (bias correction uses `step + 1`).
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    /// Zero moments shaped like every parameter in `store`.
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Tensor> = store
            .params()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.value.shape())))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update of every parameter that has an entry in `grads`:
    /// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`, with the decay factor applied
    /// only to parameters flagged for decay. Parameters without a gradient
    /// entry are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let c = &self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let param = store
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if g.shape() != param.value.shape() {
                return Err(Error::shape(
                    "adam update",
                    format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), param.value.shape()),
                ));
            }
            let m = self.first_moment.get_mut(name).expect("moment per parameter");
            let v = self.second_moment.get_mut(name).expect("moment per parameter");
            let decay = if param.decay {
                1.0 - c.learning_rate * c.weight_decay
            } else {
                1.0
            };
            let theta = param.value.data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                theta[i] = theta[i] * decay - c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
