//! Adam optimizer with per-parameter state.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::Param;

#[cfg(not(feature = "std"))]
use crate::fmath::FloatMathExt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam over a subset of model parameters. Slots are keyed by parameter id
/// and created lazily, each with its own bias-correction step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub slots: BTreeMap<usize, AdamSlot>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            slots: BTreeMap::new(),
        }
    }

    /// Apply one update for every parameter with a gradient in `grads`.
    pub fn step(&mut self, params: &mut [Param], grads: &BTreeMap<usize, Vec<f32>>) {
        for (&id, g) in grads {
            let p = &mut params[id];
            let w = p.value.data_mut();
            assert_eq!(w.len(), g.len(), "gradient size mismatch for {}", p.name);
            let slot = self.slots.entry(id).or_insert_with(|| AdamSlot {
                t: 0,
                m: vec![0.0; w.len()],
                v: vec![0.0; w.len()],
            });
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            for i in 0..w.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
