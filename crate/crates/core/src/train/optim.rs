//! Adam with disjoint parameter groups, gradient accumulation and the
//! parameter EMA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config("adam: need lr > 0, betas in [0, 1), eps > 0"))
        }
    }
}

/// First and second moments of one parameter group plus its step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of a slice, at step `t ≥ 1`.
pub fn adam_update<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let one = T::one();
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Steps every parameter that has a gradient. Parameters whose gradient is
/// `None` are left untouched, moments included. Returns whether any update
/// happened. Non-finite gradients abort before anything changes.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Option<Vec<T>>],
    moments: &mut AdamMoments<T>,
    cfg: &AdamConfig,
) -> Result<bool> {
    if grads.len() != params.len() {
        return Err(Error::shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.numel() {
                return Err(Error::shape(format!(
                    "gradient of {name} has {} values",
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
    }
    if grads.iter().all(Option::is_none) {
        return Ok(false);
    }
    moments.t += 1;
    let t = moments.t;
    for (i, (p, g)) in params.tensors_mut().zip(grads).enumerate() {
        if let Some(g) = g {
            adam_update(
                p.data_mut(),
                g,
                &mut moments.m[i],
                &mut moments.v[i],
                t,
                cfg,
            );
        }
    }
    Ok(true)
}

/// Adam over the two disjoint groups: backbone + classifier, and style nets.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub backbone: AdamMoments<T>,
    pub style: AdamMoments<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, backbone: &ParamSet<T>, style: &ParamSet<T>) -> Self {
        Self {
            cfg,
            backbone: AdamMoments::new(backbone),
            style: AdamMoments::new(style),
        }
    }
}

/// Running sum of micro-batch gradients.
#[derive(Clone, Debug)]
pub struct GradAccumulator<T> {
    sums: Vec<Option<Vec<T>>>,
    count: usize,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(len: usize) -> Self {
        Self {
            sums: vec![None; len],
            count: 0,
        }
    }

    pub fn add(&mut self, grads: Vec<Option<Vec<T>>>) {
        for (s, g) in self.sums.iter_mut().zip(grads) {
            match (s.as_mut(), g) {
                (Some(acc), Some(g)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                (None, Some(g)) => *s = Some(g),
                (_, None) => {}
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean over the accumulated micro-batches; resets the accumulator.
    pub fn take_mean(&mut self) -> Vec<Option<Vec<T>>> {
        let inv = T::lit(1.0 / self.count.max(1) as f64);
        self.count = 0;
        self.sums
            .iter_mut()
            .map(|s| {
                s.take().map(|mut v| {
                    v.iter_mut().for_each(|x| *x *= inv);
                    v
                })
            })
            .collect()
    }
}

/// `shadow ← decay·shadow + (1−decay)·live` for every tensor.
pub fn ema_update<T: Scalar>(
    shadow: &mut ParamSet<T>,
    live: &ParamSet<T>,
    decay: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::config(format!("EMA decay {decay} outside [0, 1]")));
    }
    if !shadow.same_layout(live) {
        return Err(Error::shape(
            "EMA shadow and live parameters differ in layout",
        ));
    }
    let (d, e) = (T::lit(decay), T::lit(1.0 - decay));
    for (s, (_, l)) in shadow.tensors_mut().zip(live.iter()) {
        for (a, &b) in s.data_mut().iter_mut().zip(l.data()) {
            *a = d * *a + e * b;
        }
    }
    Ok(())
}

/// Decay for the `updates`-th EMA update (0-based). With warm-up the decay
/// ramps as `(1+n)/(10+n)` until it reaches `decay`, so short runs are not
/// dominated by the initialization.
pub fn ema_decay_at(decay: f64, updates: u64, warmup: bool) -> f64 {
    if warmup {
        let n = updates as f64;
        decay.min((1.0 + n) / (10.0 + n))
    } else {
        decay
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn scalar_adam_first_step() {
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let mut p = single(0.0);
        let mut m = AdamMoments::new(&p);
        adam_step(&mut p, &[Some(vec![1.0])], &mut m, &cfg).unwrap();
        let g = 1.0;
        let expect = -cfg.lr * (g * (1.0 - cfg.beta1) / (1.0 - cfg.beta1))
            / ((g * g * (1.0 - cfg.beta2) / (1.0 - cfg.beta2)).sqrt() + cfg.eps);
        assert!((p.get("w").unwrap().item() - expect).abs() < 1e-15);
        assert!((expect + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn zero_and_missing_grads() {
        let cfg = AdamConfig::default();
        let mut p = single(0.5);
        let mut m = AdamMoments::new(&p);
        adam_step(&mut p, &[Some(vec![0.0])], &mut m, &cfg).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.5);
        adam_step(&mut p, &[Some(vec![1.0])], &mut m, &cfg).unwrap();
        let after = p.get("w").unwrap().item();
        let moments = m.clone();
        assert!(!adam_step(&mut p, &[None], &mut m, &cfg).unwrap());
        assert_eq!(p.get("w").unwrap().item(), after);
        assert_eq!(m, moments);
        assert!(matches!(
            adam_step(&mut p, &[Some(vec![f64::NAN])], &mut m, &cfg),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p.get("w").unwrap().item(), after);
    }

    #[test]
    fn ema_examples() {
        let live = single(2.0);
        let mut shadow = single(0.0);
        ema_update(&mut shadow, &live, 0.997).unwrap();
        assert!((shadow.get("w").unwrap().item() - 0.006).abs() < 1e-15);
        let mut s = single(0.0);
        ema_update(&mut s, &live, 1.0).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 0.0);
        ema_update(&mut s, &live, 0.0).unwrap();
        assert_eq!(s.get("w").unwrap().item(), 2.0);
        assert!(ema_update(&mut s, &live, 1.5).is_err());
        assert_eq!(ema_decay_at(0.997, 0, true), 0.1);
        assert_eq!(ema_decay_at(0.997, 100_000, true), 0.997);
        assert_eq!(ema_decay_at(0.997, 0, false), 0.997);
    }

    #[test]
    fn accumulator_means() {
        let mut acc = GradAccumulator::<f64>::new(2);
        acc.add(vec![Some(vec![1.0, 2.0]), None]);
        acc.add(vec![Some(vec![3.0, 4.0]), None]);
        assert_eq!(acc.count(), 2);
        assert_eq!(acc.take_mean(), vec![Some(vec![2.0, 3.0]), None]);
        assert_eq!(acc.count(), 0);
    }
}
