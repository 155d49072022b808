//! Gradient clipping and the Adam parameter update.

use crate::autograd::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 40.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Domain {
                op: "adam",
                msg: format!("learning rate {} must be finite and ≥ 0", self.lr),
            });
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Domain {
                op: "adam",
                msg: "moment decay rates must lie in [0,1)".into(),
            });
        }
        if !(self.eps > 0.0) {
            return Err(Error::Domain {
                op: "adam",
                msg: "eps must be positive".into(),
            });
        }
        if self.clip_norm < 0.0 {
            return Err(Error::Domain {
                op: "adam",
                msg: "clip_norm must be ≥ 0".into(),
            });
        }
        Ok(())
    }
}

/// What clipping did to this step's gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub raw_norm: f64,
    pub clipped: bool,
    /// Multiplier applied to every gradient element (1.0 when inactive).
    pub factor: f64,
}

/// Scale all gradients by max_norm/‖g‖ when the global norm exceeds the
/// ceiling. The scale is one positive scalar, so direction is
/// preserved exactly.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> ClipReport {
    let raw_norm = grads.global_norm();
    if max_norm <= 0.0 || raw_norm <= max_norm {
        return ClipReport {
            raw_norm,
            clipped: false,
            factor: 1.0,
        };
    }
    let factor = max_norm / raw_norm;
    grads.scale_all(factor);
    ClipReport {
        raw_norm,
        clipped: true,
        factor,
    }
}

/// Per-parameter first/second moment state, aligned by name.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Adam> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            step: 0,
            slots: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn slot_index(&mut self, name: &str, len: usize) -> usize {
        if let Some(i) = self.slots.iter().position(|(n, _, _)| n == name) {
            return i;
        }
        self.slots.push((name.to_string(), vec![0.0; len], vec![0.0; len]));
        self.slots.len() - 1
    }

    /// Clip, update moments, and apply the bias-corrected update to
    /// every trainable parameter that received a gradient.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> Result<ClipReport> {
        let report = clip_gradients(grads, self.cfg.clip_norm);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let names: Vec<String> = store.iter_trainable().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let grad = grad.clone();
            let current = store.get(&name).expect("trainable name exists").clone();
            if grad.len() != current.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: current.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let slot = self.slot_index(&name, grad.len());
            let (_, m, v) = &mut self.slots[slot];
            let mut next = current.detached();
            let data = next.make_mut();
            for i in 0..grad.len() {
                let g = grad.data()[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            store.set(&name, next)?;
        }
        Ok(report)
    }

    /// Serializable view of the moment state.
    pub fn state_entries(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.slots.iter().map(|(n, m, v)| (n.as_str(), m.as_slice(), v.as_slice()))
    }

    /// Restore moments and step count, replacing current state.
    pub fn load_state(&mut self, step: u64, slots: Vec<(String, Vec<f64>, Vec<f64>)>) -> Result<()> {
        for (name, m, v) in &slots {
            if m.len() != v.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment lengths disagree for {name}"
                )));
            }
        }
        self.step = step;
        self.slots = slots;
        Ok(())
    }

    pub fn bit_eq(&self, other: &Adam) -> bool {
        self.step == other.step
            && self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .zip(&other.slots)
                .all(|((an, am, av), (bn, bm, bv))| {
                    an == bn
                        && am.len() == bm.len()
                        && av.len() == bv.len()
                        && am.iter().zip(bm).all(|(x, y)| x.to_bits() == y.to_bits())
                        && av.iter().zip(bv).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}
