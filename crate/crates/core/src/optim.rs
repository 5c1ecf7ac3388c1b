//! Adam, RecAdam and the warmup / linear-decay learning-rate schedule.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CklError, Result};
use crate::model::{Grads, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter that has a gradient. Frozen
    /// parameters are never written, whatever `grads` contains.
    pub fn step(&mut self, model: &mut ModelState, grads: &Grads, lr: f64) -> Result<()> {
        let t = self.step + 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        let mut updates: Vec<(&str, Vec<f32>, Vec<f32>, Vec<f32>)> = Vec::new();
        for (name, g) in grads {
            if model.is_frozen(name) {
                continue;
            }
            let theta = model
                .param(name)
                .ok_or_else(|| CklError::Config(format!("gradient for unknown parameter {name}")))?
                .data();
            if theta.len() != g.len() {
                return Err(CklError::Config(format!("{name}: gradient length {} for {} values", g.len(), theta.len())));
            }
            let prev = self.moments.get(name);
            let m0 = |i: usize| prev.map_or(0.0, |(m, _)| m[i]);
            let v0 = |i: usize| prev.map_or(0.0, |(_, v)| v[i]);
            let mut m = Vec::with_capacity(g.len());
            let mut v = Vec::with_capacity(g.len());
            let mut next = Vec::with_capacity(g.len());
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let mi = (beta1 * m0(i) as f64 + (1.0 - beta1) * gi) as f32;
                let vi = (beta2 * v0(i) as f64 + (1.0 - beta2) * gi * gi) as f32;
                let update = lr * (mi as f64 / c1) / ((vi as f64 / c2).sqrt() + eps);
                let p = (theta[i] as f64 - update) as f32;
                if !p.is_finite() {
                    return Err(CklError::Divergence(format!("non-finite update for {name}[{i}]")));
                }
                m.push(mi);
                v.push(vi);
                next.push(p);
            }
            updates.push((name.as_str(), m, v, next));
        }
        for (name, m, v, next) in updates {
            model
                .param_data_mut(name)
                .expect("checked above")
                .copy_from_slice(&next);
            self.moments.insert(name.to_string(), (m, v));
        }
        self.step = t;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CklError::io(dir, e))?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, (m, v)) in &self.moments {
            entries.push(MomentEntry {
                name: name.clone(),
                len: m.len(),
                offset: blob.len(),
            });
            for x in m.iter().chain(v) {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = AdamManifest {
            config: self.config,
            step: self.step,
            moments: entries,
        };
        let path = dir.join("optimizer.bin");
        fs::write(&path, blob).map_err(|e| CklError::io(&path, e))?;
        let path = dir.join("optimizer.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CklError::json(&path, e))?;
        fs::write(&path, text).map_err(|e| CklError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("optimizer.json");
        let text = fs::read_to_string(&path).map_err(|e| CklError::io(&path, e))?;
        let manifest: AdamManifest = serde_json::from_str(&text).map_err(|e| CklError::json(&path, e))?;
        let path = dir.join("optimizer.bin");
        let blob = fs::read(&path).map_err(|e| CklError::io(&path, e))?;
        let mut moments = BTreeMap::new();
        for e in manifest.moments {
            let bytes = blob
                .get(e.offset..e.offset + 8 * e.len)
                .ok_or_else(|| CklError::Checkpoint(format!("optimizer state for {} truncated", e.name)))?;
            let vals: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let (m, v) = vals.split_at(e.len);
            moments.insert(e.name, (m.to_vec(), v.to_vec()));
        }
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            moments,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    len: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct AdamManifest {
    config: AdamConfig,
    step: u64,
    moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecAdamConfig {
    /// Quadratic penalty coefficient.
    pub gamma: f64,
    /// Annealing midpoint, in steps.
    pub t0: f64,
    /// Annealing slope.
    pub k_anneal: f64,
}

impl Default for RecAdamConfig {
    fn default() -> Self {
        Self {
            gamma: 5000.0,
            t0: 250.0,
            k_anneal: 0.5,
        }
    }
}

impl RecAdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.k_anneal > 0.0) {
            return Err(CklError::Config(format!("RecAdam needs gamma > 0 and k > 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Sigmoid annealing weight of the task loss at step `t`.
pub fn recadam_lambda(t: f64, config: &RecAdamConfig) -> f64 {
    1.0 / (1.0 + (-config.k_anneal * (t - config.t0)).exp())
}

/// `λ·g + (1−λ)·γ·(θ − θ0)` for every trainable parameter in `grads`.
pub fn recadam_effective_grads(model: &ModelState, grads: &Grads, lambda: f64, gamma: f64) -> Result<Grads> {
    let theta0 = model
        .theta0()
        .ok_or_else(|| CklError::MissingTheta0("<no snapshot>".into()))?;
    let mut out = Grads::new();
    for (name, g) in grads {
        if model.is_frozen(name) {
            continue;
        }
        let reference = theta0.get(name).ok_or_else(|| CklError::MissingTheta0(name.clone()))?;
        let theta = model.param(name).expect("grad names are parameters").data();
        let eff = g
            .iter()
            .zip(theta.iter().zip(reference.data()))
            .map(|(&gi, (&p, &p0))| (lambda * gi as f64 + (1.0 - lambda) * gamma * (p as f64 - p0 as f64)) as f32)
            .collect();
        out.insert(name.clone(), eff);
    }
    Ok(out)
}

/// Adam on the annealed mix of the task gradient and the pull toward θ0.
#[derive(Debug, Clone, PartialEq)]
pub struct RecAdam {
    pub config: RecAdamConfig,
    pub adam: Adam,
}

impl RecAdam {
    pub fn new(config: RecAdamConfig, adam: AdamConfig) -> Self {
        Self {
            config,
            adam: Adam::new(adam),
        }
    }

    /// Current anneal step `t` (steps already taken).
    pub fn t(&self) -> u64 {
        self.adam.steps_taken()
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &Grads, lr: f64) -> Result<()> {
        let lambda = recadam_lambda(self.t() as f64, &self.config);
        self.step_with_lambda(model, grads, lr, lambda)
    }

    pub fn step_with_lambda(&mut self, model: &mut ModelState, grads: &Grads, lr: f64, lambda: f64) -> Result<()> {
        let eff = recadam_effective_grads(model, grads, lambda, self.config.gamma)?;
        self.adam.step(model, &eff, lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub final_multiplier: f64,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, total_steps: usize) -> Self {
        Self {
            initial_lr,
            total_steps,
            warmup_fraction: 0.1,
            final_multiplier: 0.5,
        }
    }
}

/// Linear warmup to `initial_lr` over the first `warmup_fraction` of the
/// steps, then linear decay to `final_multiplier · initial_lr` at the end.
pub fn lr_at_step(step: usize, sched: &LrSchedule) -> Result<f64> {
    let total = sched.total_steps;
    if step > total {
        return Err(CklError::StepOutOfRange { step, total });
    }
    if step == 0 {
        return Ok(0.0);
    }
    let s = step as f64;
    let warm = sched.warmup_fraction * total as f64;
    if s <= warm {
        return Ok(sched.initial_lr * s / warm);
    }
    let frac = (s - warm) / (total as f64 - warm);
    Ok(sched.initial_lr * (1.0 - (1.0 - sched.final_multiplier) * frac))
}
