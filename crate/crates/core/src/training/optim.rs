//! AdamW with per-sensor parameter groups.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numeric::{Scalar, Tensor};

/// Sensor owning a parameter (`embedder.<id>.*`, `decoder.<id>.*`), if any.
pub fn owner_sensor(name: &str) -> Option<usize> {
    let mut parts = name.split('.');
    match parts.next()? {
        "embedder" | "decoder" => parts.next()?.parse().ok(),
        _ => None,
    }
}

/// Weight decay applies to matrices and kernels only; biases, norms and
/// shared tokens are exempt.
pub fn decays<T: Scalar>(name: &str, t: &Tensor<T>) -> bool {
    t.ndim() >= 2 && !name.starts_with("shared.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }

    /// One update of every parameter that has a gradient. The step size of a
    /// sensor-owned parameter is `lr · scale(sensor)`; others use `lr`.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        scale: impl Fn(usize) -> f64,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let eps = T::of(self.eps);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{}`", name)))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let lr_p = T::of(lr * owner_sensor(name).map_or(1.0, &scale));
            let wd = if decays(name, p) { T::of(self.weight_decay) } else { T::zero() };
            let m = self.m.get_mut(name).unwrap().data_mut();
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr_p * (mhat / (vhat.sqrt() + eps) + wd * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn owners() {
        assert_eq!(owner_sensor("embedder.3.kernel"), Some(3));
        assert_eq!(owner_sensor("decoder.0.proj"), Some(0));
        assert_eq!(owner_sensor("encoder.block1.gate.weight"), None);
        assert_eq!(owner_sensor("shared.mask_token"), None);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::<f64>::new();
        p.insert("encoder.x", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("encoder.x".to_string(), Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap());
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.05);
        opt.step(&mut p, &g, 0.1, |_| 1.0).unwrap();
        let d = p.get("encoder.x").unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6, "{d:?}");
    }
}
