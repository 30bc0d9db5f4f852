//! SGD and Adam steps over named parameter arrays.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::GradientMap;
use crate::vit::VitModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
        }
    }

    /// Adam with the adaptation defaults: β1 = 0.99, β2 = 0.999, ε = 1e-8.
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.99,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adam_with(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// First/second Adam moments plus the step counter. SGD carries nothing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamMoments {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

/// Optimizer state that can be carried across episodes or reset per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    /// `None` until the first Adam step (zero moments, step 0).
    pub moments: Option<AdamMoments>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            moments: None,
        }
    }

    /// Drop all carried state (Adam moments and step counter).
    pub fn reset(&mut self) {
        self.moments = None;
    }

    pub fn step_count(&self) -> u64 {
        self.moments.as_ref().map_or(0, |m| m.step)
    }

    /// Apply one optimizer step to every parameter named in `grads`.
    /// Parameters absent from `grads` are untouched (that is how the
    /// adapted-parameter filter works).
    pub fn apply_step(&mut self, model: &mut VitModel, grads: &GradientMap) -> Result<()> {
        match self.config.kind {
            OptimizerKind::Sgd => self.sgd_step(model, grads),
            OptimizerKind::Adam => self.adam_step(model, grads),
        }
    }

    fn sgd_step(&mut self, model: &mut VitModel, grads: &GradientMap) -> Result<()> {
        let lr = self.config.lr;
        for (name, grad) in grads {
            let values = model.param_mut(name).ok_or_else(|| Error::GradientKeyMismatch {
                missing: Vec::new(),
                extra: vec![name.clone()],
            })?;
            for (v, g) in values.iter_mut().zip(grad) {
                *v -= lr * g;
            }
        }
        Ok(())
    }

    /// Standard Adam with bias correction:
    ///   m ← β1·m + (1−β1)·g,  v ← β2·v + (1−β2)·g²,
    ///   m̂ = m/(1−β1^t),  v̂ = v/(1−β2^t),  θ ← θ − lr·m̂/(√v̂ + ε).
    /// The step counter increments by exactly one per applied step.
    fn adam_step(&mut self, model: &mut VitModel, grads: &GradientMap) -> Result<()> {
        let cfg = self.config;
        let moments = self.moments.get_or_insert_with(|| AdamMoments {
            step: 0,
            first: grads
                .keys()
                .map(|k| (k.clone(), vec![0.0; grads[k].len()]))
                .collect(),
            second: grads
                .keys()
                .map(|k| (k.clone(), vec![0.0; grads[k].len()]))
                .collect(),
        });

        let state_keys: Vec<&String> = moments.first.keys().collect();
        let grad_keys: Vec<&String> = grads.keys().collect();
        if state_keys != grad_keys {
            let missing = state_keys
                .iter()
                .filter(|k| !grad_keys.contains(k))
                .map(|k| k.to_string())
                .collect();
            let extra = grad_keys
                .iter()
                .filter(|k| !state_keys.contains(k))
                .map(|k| k.to_string())
                .collect();
            return Err(Error::GradientKeyMismatch { missing, extra });
        }

        moments.step += 1;
        let t = moments.step;
        let bias1 = 1.0 - cfg.beta1.powi(t as i32);
        let bias2 = 1.0 - cfg.beta2.powi(t as i32);

        for (name, grad) in grads {
            let m = moments.first.get_mut(name).expect("keys checked");
            let v = moments.second.get_mut(name).expect("keys checked");
            if m.len() != grad.len() {
                return Err(Error::InvalidArgument {
                    message: format!(
                        "moment length {} for {name} does not match gradient length {}",
                        m.len(),
                        grad.len()
                    ),
                });
            }
            let values = model.param_mut(name).ok_or_else(|| Error::GradientKeyMismatch {
                missing: Vec::new(),
                extra: vec![name.clone()],
            })?;
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::vit::{VitConfig, VitModel};

    fn tiny_model(seed: u64) -> VitModel {
        VitModel::new(VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 1,
            num_register_tokens: 1,
            num_classes: 3,
            layernorm_eps: 1e-5,
            seed,
        })
        .unwrap()
    }

    fn random_grads(model: &VitModel, seed: u64) -> GradientMap {
        let mut rng = Rng::new(seed);
        model
            .parameter_names()
            .iter()
            .map(|name| {
                let len = model.param(name).unwrap().len();
                (
                    name.to_string(),
                    (0..len).map(|_| rng.range(-1.0, 1.0)).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn sgd_step_is_theta_minus_lr_grad() {
        let mut model = tiny_model(1);
        let before = model.snapshot();
        let grads = random_grads(&model, 2);
        let lr = 0.05;
        let mut state = OptimizerState::new(OptimizerConfig::sgd(lr));
        state.apply_step(&mut model, &grads).unwrap();
        for (name, values) in before.entries() {
            let after = model.param(name).unwrap();
            for (i, (&b, &a)) in values.iter().zip(after).enumerate() {
                let expected = b - lr * grads[name][i];
                assert_eq!(expected.to_bits(), a.to_bits());
            }
        }
        assert_eq!(state.step_count(), 0); // SGD carries no state
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut model = tiny_model(3);
        let before = model.snapshot();
        let grads = random_grads(&model, 4);
        let cfg = OptimizerConfig::adam(1e-4);
        let mut state = OptimizerState::new(cfg);
        state.apply_step(&mut model, &grads).unwrap();
        // From zero moments: m̂ = g, v̂ = g², so Δ = lr·g/(|g|+ε).
        for (name, values) in before.entries() {
            let after = model.param(name).unwrap();
            for (i, (&b, &a)) in values.iter().zip(after).enumerate() {
                let g = grads[name][i];
                let expected = b - cfg.lr * g / (g.abs() + cfg.epsilon);
                assert!(
                    (a - expected).abs() <= 1e-12,
                    "{name}[{i}]: {a} vs {expected}"
                );
            }
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut model = tiny_model(5);
        let before = model.snapshot();
        let zeros: GradientMap = model
            .parameter_names()
            .iter()
            .map(|n| (n.to_string(), vec![0.0; model.param(n).unwrap().len()]))
            .collect();
        let mut state = OptimizerState::new(OptimizerConfig::adam(1e-3));
        state.apply_step(&mut model, &zeros).unwrap();
        model.matches_snapshot(&before).unwrap();
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_two_steps_match_hand_unrolled_recurrence() {
        let mut model = tiny_model(6);
        let before = model.snapshot();
        let grads = random_grads(&model, 7);
        let cfg = OptimizerConfig::adam_with(2e-3, 0.99, 0.999, 1e-8);
        let mut state = OptimizerState::new(cfg);
        state.apply_step(&mut model, &grads).unwrap();
        state.apply_step(&mut model, &grads).unwrap();

        for (name, values) in before.entries() {
            let after = model.param(name).unwrap();
            for (i, (&b, &a)) in values.iter().zip(after).enumerate() {
                let g = grads[name][i];
                // Scalar oracle: unroll the recurrence explicitly.
                let (mut theta, mut m, mut v) = (b, 0.0f64, 0.0f64);
                for t in 1..=2u32 {
                    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
                    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = m / (1.0 - cfg.beta1.powi(t as i32));
                    let v_hat = v / (1.0 - cfg.beta2.powi(t as i32));
                    theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
                }
                assert!(
                    (a - theta).abs() <= 1e-15,
                    "{name}[{i}]: {a} vs oracle {theta}"
                );
            }
        }
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn carried_state_diverges_from_reset_state() {
        let grads_a;
        let carried_params;
        {
            let mut model = tiny_model(8);
            grads_a = random_grads(&model, 9);
            let mut carried = OptimizerState::new(OptimizerConfig::adam(1e-3));
            carried.apply_step(&mut model, &grads_a).unwrap();
            carried.apply_step(&mut model, &grads_a).unwrap();
            carried_params = model.snapshot();
        }
        let mut model = tiny_model(8);
        let mut fresh = OptimizerState::new(OptimizerConfig::adam(1e-3));
        fresh.apply_step(&mut model, &grads_a).unwrap();
        fresh.reset();
        fresh.apply_step(&mut model, &grads_a).unwrap();
        // Same gradient history of length 2, different carry policy:
        // outcomes must differ somewhere.
        assert!(model.matches_snapshot(&carried_params).is_err());
    }

    #[test]
    fn gradient_key_mismatch_is_an_error() {
        let mut model = tiny_model(10);
        let grads = random_grads(&model, 11);
        let mut state = OptimizerState::new(OptimizerConfig::adam(1e-3));
        state.apply_step(&mut model, &grads).unwrap();
        let mut subset = grads.clone();
        let removed = subset.keys().next().unwrap().clone();
        subset.remove(&removed);
        match state.apply_step(&mut model, &subset) {
            Err(Error::GradientKeyMismatch { missing, extra }) => {
                assert_eq!(missing, vec![removed]);
                assert!(extra.is_empty());
            }
            other => panic!("expected GradientKeyMismatch, got {other:?}"),
        }
    }

    #[test]
    fn second_moments_stay_nonnegative() {
        let mut model = tiny_model(12);
        let mut state = OptimizerState::new(OptimizerConfig::adam(1e-3));
        for seed in 0..5 {
            let grads = random_grads(&model, 100 + seed);
            state.apply_step(&mut model, &grads).unwrap();
        }
        let moments = state.moments.as_ref().unwrap();
        assert_eq!(moments.step, 5);
        for v in moments.second.values() {
            assert!(v.iter().all(|&x| x >= 0.0));
        }
    }
}
