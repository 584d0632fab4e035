use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};

/// First/second moment estimates and the number of updates applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

/// Adam with per-tensor step counters.
///
/// Moments persist while a tensor is outside the trainable set, so a tensor
/// that rejoins training continues from where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(learning_rate: f32, beta1: f32, beta2: f32) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon: 1e-8,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient and passes `trainable`.
    pub fn step<F: Fn(&str) -> bool>(&mut self, params: &mut ParamStore, grads: &Grads, trainable: F) {
        for (name, g) in &grads.map {
            if !trainable(name) {
                continue;
            }
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            mom.t += 1;
            let bc1 = 1.0 - self.beta1.powi(mom.t as i32);
            let bc2 = 1.0 - self.beta2.powi(mom.t as i32);
            for (((w, &gi), m), v) in p.data.iter_mut().zip(g).zip(&mut mom.m).zip(&mut mom.v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}
