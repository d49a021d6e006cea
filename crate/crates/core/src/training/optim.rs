//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::container::TensorData;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Scale factor that brings the global gradient norm down to `max_norm`.
    pub fn clip_factor(params: &[(String, Var)], grads: &GradStore, max_norm: f64) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in params {
            if let Some(g) = grads.get(var) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        Ok(if norm > max_norm { max_norm / norm } else { 1.0 })
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient, so they still decay.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in params {
            let theta = var.as_tensor().detach();
            let g = match grads.get(var) {
                Some(g) => (g.detach() * grad_scale)?,
                None => theta.zeros_like()?,
            };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => theta.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => theta.zeros_like()?,
            };
            let m = ((m_prev * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v_prev * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + c.eps)?)?;
            let next = ((theta * (1.0 - lr * c.weight_decay))? - (update * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moments keyed `m/<param>` and `v/<param>`.
    pub fn state(&self) -> Result<BTreeMap<String, TensorData>> {
        let mut out = BTreeMap::new();
        for (prefix, map) in [("m", &self.m), ("v", &self.v)] {
            for (k, t) in map {
                out.insert(format!("{prefix}/{k}"), TensorData::from_tensor(t)?);
            }
        }
        Ok(out)
    }

    pub fn load_state(&mut self, step: u64, state: &BTreeMap<String, TensorData>, like: &[(String, Var)]) -> Result<()> {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (name, var) in like {
            let t = var.as_tensor();
            for (prefix, map) in [("m", &mut self.m), ("v", &mut self.v)] {
                let key = format!("{prefix}/{name}");
                if let Some(d) = state.get(&key) {
                    if d.dims != t.dims() {
                        return Err(Error::Container(format!("optimizer state `{key}` has dims {:?}", d.dims)));
                    }
                    map.insert(name.clone(), d.to_tensor(t.device())?.to_dtype(t.dtype())?);
                }
            }
        }
        Ok(())
    }
}
