use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::params::{GradStore, ParamStore};
use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
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

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub config: AdamConfig,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    pub step: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, grads: &GradStore<T>, opt: &mut OptState<T>) -> Result<()> {
    params.check_layout(grads)?;
    params.check_layout(&opt.m)?;
    opt.step += 1;
    let c = opt.config;
    let t = opt.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let corr1 = T::lit(1.0 - c.beta1.powi(t));
    let corr2 = T::lit(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
    let values = params.iter_values_mut();
    let moments = opt.m.iter_values_mut().zip(opt.v.iter_values_mut());
    for ((p, g), (m, v)) in values.zip(grads.iter_values()).zip(moments) {
        *m = b1 * *m + one_b1 * *g;
        *v = b2 * *v + one_b2 * *g * *g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Recent online parameter snapshots, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotQueue<T> {
    capacity: usize,
    items: VecDeque<ParamStore<T>>,
}

impl<T: Scalar> SnapshotQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::new(),
        }
    }

    /// Queue sized to serve a given delay.
    pub fn for_delay(delay: usize) -> Self {
        Self::new(delay + 1)
    }

    pub fn push(&mut self, params: ParamStore<T>) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(params);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamStore<T>> {
        self.items.iter()
    }

    /// The snapshot pushed `delay` pushes before the newest, or the oldest
    /// held one.
    pub fn delayed(&self, delay: usize) -> Option<&ParamStore<T>> {
        let n = self.items.len();
        if n == 0 {
            return None;
        }
        self.items.get(n.saturating_sub(delay + 1))
    }
}

/// Sets the target to the online snapshot from `delay` iterations ago.
pub fn hard_update<T: Scalar>(target: &mut ParamStore<T>, queue: &SnapshotQueue<T>, delay: usize) -> Result<()> {
    let snap = queue
        .delayed(delay)
        .ok_or_else(|| Error::Usage("hard update from an empty snapshot queue".into()))?;
    target.check_layout(snap)?;
    target.clone_from(snap);
    Ok(())
}

/// `target <- (1 - tau) target + tau online`.
pub fn soft_update<T: Scalar>(target: &mut ParamStore<T>, online: &ParamStore<T>, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("soft update weight {tau} outside [0, 1]")));
    }
    target.check_layout(online)?;
    let (keep, take) = (T::lit(1.0 - tau), T::lit(tau));
    for (t, o) in target.iter_values_mut().zip(online.iter_values()) {
        *t = keep * *t + take * *o;
    }
    Ok(())
}
