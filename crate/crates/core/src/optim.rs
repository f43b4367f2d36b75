//! Adaptive moment estimation with decoupled weight decay, plus a cosine
//! annealing learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Gradients;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW,
    /// Plain gradient descent `p ← p − ξ g`.
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Cosine annealing from `base_lr` to `min_lr` over `cycle` epochs, restarted
/// every cycle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub cycle: usize,
}

impl CosineSchedule {
    /// Learning rate at fractional epoch position `t` (epoch + batch/batches).
    pub fn lr_at(&self, t: f64) -> f64 {
        if self.cycle == 0 {
            return self.base_lr;
        }
        let phase = (t % self.cycle as f64) / self.cycle as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescales the global gradient norm down to this value when exceeded.
    pub clip_norm: Option<f64>,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: None,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient are left untouched (no decay either).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let factor = match self.clip_norm {
            Some(max) => {
                let norm = params
                    .names()
                    .filter_map(|n| grads.by_name(n))
                    .flat_map(|g| g.data().iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.by_name(name) else { continue };
            let scaled: Vec<f64>;
            let g = if factor < 1.0 {
                scaled = g.data().iter().map(|v| v * factor).collect();
                &scaled[..]
            } else {
                g.data()
            };
            if g.len() != p.len() {
                return Err(Error::DimMismatch {
                    expected: p.len(),
                    got: g.len(),
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
                OptimizerKind::AdamW => {
                    let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let bc1 = 1.0 - self.beta1.powi(t);
                    let bc2 = 1.0 - self.beta2.powi(t);
                    for (i, pv) in p.data_mut().iter_mut().enumerate() {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Minibatch training settings shared by the base classifier and the
/// variational model.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Cosine restart period in epochs; 0 keeps the rate constant.
    pub cycle: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            min_lr: 1e-5,
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 1e-4,
            cycle: 10,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.min_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("min_lr and weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Optimizer {
        let mut opt = Optimizer::new(self.optimizer, self.weight_decay);
        opt.clip_norm = self.clip_norm;
        opt
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base_lr: self.lr,
            min_lr: self.min_lr.min(self.lr),
            cycle: self.cycle,
        }
    }
}

/// Splits a shuffled `0..n` into consecutive batches.
pub fn shuffled_batches<R: rand::Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule {
            base_lr: 1.0,
            min_lr: 0.0,
            cycle: 10,
        };
        assert!((s.lr_at(0.0) - 1.0).abs() < 1e-15);
        assert!((s.lr_at(5.0) - 0.5).abs() < 1e-12);
        assert!((s.lr_at(10.0) - 1.0).abs() < 1e-12);
        assert!(s.lr_at(9.9) < 0.01);
    }

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::row(vec![3.0, -2.0]));
        let mut opt = Optimizer::new(OptimizerKind::AdamW, 0.0);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape);
            let x = b.get("x").unwrap();
            let sq = tape.square(x).unwrap();
            let out = tape.sum_all(sq).unwrap();
            let g = tape.backward_scalar(out).unwrap();
            opt.step(&mut params, &g, 0.01).unwrap();
        }
        assert!(params.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn sgd_step_is_exact() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::row(vec![1.0]));
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let x = b.get("x").unwrap();
        let out = tape.square(x).unwrap();
        let g = tape.backward_scalar(out).unwrap();
        Optimizer::new(OptimizerKind::Sgd, 0.0).step(&mut params, &g, 0.25).unwrap();
        assert_eq!(params.get("x").unwrap().data()[0], 0.5);
    }
}
