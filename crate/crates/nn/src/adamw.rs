//! AdamW with decoupled weight decay.

use crate::checkpoint::{DType, NamedTensorStore, StoredTensor};
use crate::error::{NnError, Result};
use crate::params::ParamStore;

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
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| vec![0.0; store.get(id).len()])
                .collect()
        };
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from the gradients accumulated in `store`, then clears them.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(NnError::StateMismatch(format!(
                "{} moment slots for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let grad = t.take_grad();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            if m.len() != t.len() {
                return Err(NnError::StateMismatch(format!(
                    "moment length for parameter {}",
                    id.index()
                )));
            }
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= c.lr * c.weight_decay * data[i];
                data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Writes moments and the step counter under `prefix`.
    pub fn export(
        &self,
        prefix: &str,
        store: &ParamStore,
        out: &mut NamedTensorStore,
    ) -> Result<()> {
        for (id, (m, v)) in store.ids().zip(self.m.iter().zip(&self.v)) {
            let shape = store.get(id).shape().to_vec();
            let name = store.name(id);
            out.insert(
                format!("{prefix}m.{name}"),
                StoredTensor::new(shape.clone(), DType::F64, m.clone())?,
            )?;
            out.insert(
                format!("{prefix}v.{name}"),
                StoredTensor::new(shape, DType::F64, v.clone())?,
            )?;
        }
        out.insert(
            format!("{prefix}step"),
            StoredTensor::new(vec![1], DType::F64, vec![self.step as f64])?,
        )
    }

    pub fn import(
        &mut self,
        prefix: &str,
        store: &ParamStore,
        src: &NamedTensorStore,
    ) -> Result<()> {
        let fetch = |key: String| {
            src.get(&key)
                .map(|t| t.values().to_vec())
                .ok_or(NnError::UnknownParam(key))
        };
        for id in store.ids() {
            let name = store.name(id);
            let m = fetch(format!("{prefix}m.{name}"))?;
            let v = fetch(format!("{prefix}v.{name}"))?;
            if m.len() != store.get(id).len() || v.len() != m.len() {
                return Err(NnError::StateMismatch(name.to_string()));
            }
            self.m[id.index()] = m;
            self.v[id.index()] = v;
        }
        self.step = fetch(format!("{prefix}step"))?[0] as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![values.len()], values).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = store_with(vec![1.0, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(id).data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        // With zeroed moments, step 1 gives m̂ = g and v̂ = g², so the update is
        // -lr·g/(|g|+ε) - lr·wd·p.
        let p0 = [0.5, -1.5, 2.0];
        let g = [0.2, -3.0, 1e-3];
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut s = store_with(p0.to_vec());
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&g).unwrap();
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        for i in 0..3 {
            let decayed = p0[i] * (1.0 - cfg.lr * cfg.weight_decay);
            let want = decayed - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((s.get(id).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_only_scales() {
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.2,
            ..Default::default()
        };
        let mut s = store_with(vec![3.0, -1.0]);
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        let id = s.id("p").unwrap();
        let f = 1.0 - 0.05 * 0.2;
        for (got, want) in s.get(id).data().iter().zip([3.0 * f, -f]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn state_round_trip() {
        let mut s = store_with(vec![1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        let id = s.id("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.3, -0.1]).unwrap();
        opt.step(&mut s).unwrap();
        let mut ck = NamedTensorStore::new();
        opt.export("opt.", &s, &mut ck).unwrap();
        let mut restored = AdamW::new(AdamWConfig::default(), &s);
        restored.import("opt.", &s, &ck).unwrap();
        assert_eq!(restored.steps(), 1);
        assert_eq!(restored.m, opt.m);
        assert_eq!(restored.v, opt.v);
    }
}
