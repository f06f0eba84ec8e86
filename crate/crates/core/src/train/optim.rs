//! AdamW with decoupled weight decay and optional global-norm clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use super::config::OptimConfig;
use crate::error::{Error, Result};
use crate::model::{HostArray, ParamStore};

/// Outcome of one optimizer update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// Global L2 norm of the raw gradients.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug)]
pub struct AdamW {
    cfg: OptimConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.iter() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self { cfg, step: 0, m, v })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn update(&mut self, params: &ParamStore, grads: &GradStore) -> Result<UpdateStats> {
        let mut sq = 0f64;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                component: "gradient".into(),
                step: self.step as usize,
            });
        }
        let clip = self.cfg.grad_clip;
        let clipped = clip > 0.0 && grad_norm > clip;
        let scale = if clipped { clip / grad_norm } else { 1.0 };

        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.cfg.lr;
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients carry autograd history; moments must not.
            let g = g.detach().affine(scale, 0.0)?;
            let m = (self.m[name].affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?;
            let v = (self.v[name].affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let denom = v.affine(1.0 / bias2, 0.0)?.sqrt()?.affine(1.0, self.cfg.eps)?;
            let step = m.affine(1.0 / bias1, 0.0)?.div(&denom)?;
            let p = var.as_tensor().affine(1.0 - lr * self.cfg.weight_decay, 0.0)?;
            var.set(&(p - step.affine(lr, 0.0)?)?.detach())?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(UpdateStats { grad_norm, clipped })
    }

    /// Moment arrays keyed `m/<param>` and `v/<param>`.
    pub fn state_arrays(&self) -> Result<BTreeMap<String, HostArray>> {
        let mut out = BTreeMap::new();
        for (prefix, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in map {
                out.insert(format!("{prefix}/{name}"), HostArray::from_tensor(t)?);
            }
        }
        Ok(out)
    }

    /// Restores moments written by [`AdamW::state_arrays`].
    pub fn load_state(&mut self, step: u64, arrays: &BTreeMap<String, HostArray>) -> Result<()> {
        for (prefix, map) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (name, t) in map.iter_mut() {
                let key = format!("{prefix}/{name}");
                let arr = arrays
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
                if arr.shape != t.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has shape {:?}", arr.shape)));
                }
                *t = arr.to_tensor(t.dtype(), t.device())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn store() -> ParamStore {
        let mut s = ParamStore::new(DType::F64, &Device::Cpu, 0);
        s.uniform("w", 3, 1.0).unwrap();
        s
    }

    fn values(s: &ParamStore) -> Vec<f64> {
        s.get("w").unwrap().as_tensor().to_vec1().unwrap()
    }

    fn cfg(clip: f64, wd: f64) -> OptimConfig {
        OptimConfig {
            lr: 0.1,
            betas: [0.8, 0.99],
            weight_decay: wd,
            eps: 1e-8,
            grad_clip: clip,
        }
    }

    #[test]
    fn first_step_moves_each_weight_by_lr_against_the_gradient_sign() {
        let s = store();
        let before = values(&s);
        let mut opt = AdamW::new(cfg(0.0, 0.0), &s).unwrap();
        let w = s.get("w").unwrap().as_tensor();
        let loss = (w * Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        opt.update(&s, &loss.backward().unwrap()).unwrap();
        let after = values(&s);
        // Bias-corrected first step: m̂/√v̂ = sign(g).
        for (i, sign) in [1.0, -1.0, 1.0].iter().enumerate() {
            assert!((before[i] - after[i] - 0.1 * sign).abs() < 1e-6);
        }
    }

    #[test]
    fn clipping_reports_the_raw_norm() {
        let s = store();
        let mut opt = AdamW::new(cfg(1.0, 0.0), &s).unwrap();
        let w = s.get("w").unwrap().as_tensor();
        let loss = w.affine(10.0, 0.0).unwrap().sum_all().unwrap();
        let stats = opt.update(&s, &loss.backward().unwrap()).unwrap();
        assert!((stats.grad_norm - 10.0 * 3f64.sqrt()).abs() < 1e-9);
        assert!(stats.clipped);
    }

    #[test]
    fn weight_decay_shrinks_weights_without_gradient_signal() {
        let s = store();
        let before = values(&s);
        let mut opt = AdamW::new(cfg(0.0, 0.5), &s).unwrap();
        let w = s.get("w").unwrap().as_tensor();
        let loss = (w * w.zeros_like().unwrap()).unwrap().sum_all().unwrap();
        opt.update(&s, &loss.backward().unwrap()).unwrap();
        for (b, a) in before.iter().zip(values(&s)) {
            assert!((a - b * 0.95).abs() < 1e-12);
        }
    }

    #[test]
    fn state_round_trips() {
        let s = store();
        let mut opt = AdamW::new(cfg(0.0, 0.0), &s).unwrap();
        let w = s.get("w").unwrap().as_tensor();
        opt.update(&s, &w.sqr().unwrap().sum_all().unwrap().backward().unwrap()).unwrap();
        let arrays = opt.state_arrays().unwrap();
        let mut fresh = AdamW::new(cfg(0.0, 0.0), &s).unwrap();
        fresh.load_state(opt.step_count(), &arrays).unwrap();
        assert_eq!(fresh.state_arrays().unwrap(), arrays);
        assert_eq!(fresh.step_count(), 1);
    }
}
