use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ensure_finite, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam with bias correction. Only store entries flagged trainable are touched.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_parts(config: AdamConfig, t: u64, moments: BTreeMap<String, Moments>) -> Self {
        Self { config, t, moments }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(store, grads, lr)
    }

    /// One update at an explicit learning rate (used by warmup schedules).
    pub fn step_with_lr(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f32,
    ) -> Result<()> {
        let trainable = store.trainable_names();
        for name in &trainable {
            let g = grads.get(name).ok_or_else(|| {
                Error::Contract(format!("no gradient supplied for trainable tensor {name}"))
            })?;
            let p = store.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            ensure_finite(g.data(), "adam gradient")?;
        }
        self.t += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.t as i32);
        for name in trainable {
            let g = grads[&name].data();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let p = store
                .data_mut(&name)
                .expect("trainable name came from the store");
            for i in 0..g.len() {
                let gi = g[i];
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = mom.m[i] as f64 / bc1;
                let v_hat = mom.v[i] as f64 / bc2;
                p[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
            ensure_finite(p, "adam update")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut b = ParamStore::builder();
        b.add("w", Tensor::full(&[2, 2], 1.0)).unwrap();
        b.add("frozen", Tensor::full(&[3], 0.5)).unwrap();
        let mut s = b.build();
        s.set_trainable(|n| n == "w");
        s
    }

    fn grads(w: f32, frozen: f32) -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            ("w".to_string(), Tensor::full(&[2, 2], w)),
            ("frozen".to_string(), Tensor::full(&[3], frozen)),
        ])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store();
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut s, &grads(1.0, 0.0)).unwrap();
        for &v in s.get("w").unwrap().data() {
            assert!((v - 0.9).abs() < 1e-6, "{v}");
        }
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store();
        let before = s.get("w").unwrap().to_le_bytes();
        AdamState::new(AdamConfig::default())
            .step(&mut s, &grads(0.0, 0.0))
            .unwrap();
        assert_eq!(s.get("w").unwrap().to_le_bytes(), before);
    }

    #[test]
    fn frozen_tensor_ignores_ambient_gradient() {
        let mut s = store();
        let before = s.get("frozen").unwrap().to_le_bytes();
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s, &grads(0.3, 7.0)).unwrap();
        }
        assert_eq!(s.get("frozen").unwrap().to_le_bytes(), before);
        assert!(!adam.moments().contains_key("frozen"));
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut s = store();
        let err = AdamState::new(AdamConfig::default())
            .step(&mut s, &BTreeMap::new())
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn step_count_increments_by_one() {
        let mut s = store();
        let mut adam = AdamState::new(AdamConfig::default());
        for expected in 1..=4 {
            adam.step(&mut s, &grads(0.1, 0.0)).unwrap();
            assert_eq!(adam.steps(), expected);
        }
        assert_eq!(adam.moments()["w"].m.len(), 4);
    }
}
