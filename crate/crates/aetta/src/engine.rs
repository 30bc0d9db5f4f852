//! Episodic test-time adaptation.
//!
//! Per sample, the protocol is exactly three passes: a forward pass that
//! captures attention, a backward pass and optimizer step(s) on the
//! attention-entropy loss, then a second forward pass with the adapted
//! weights for the prediction. Model parameters are then reset to the
//! stream-start snapshot (bit-exactly) when the policy says so; optimizer
//! state is reset per sample or carried across episodes independently.
//!
//! The prediction always comes from the second pass, never from the first:
//! the first pass's logits are recorded as the non-adapted baseline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::objective;
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::snapshot::{GradientMap, ParameterSnapshot};
use crate::vit::VitModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetPolicy {
    /// Fresh optimizer state for every episode (truly episodic).
    PerSample,
    /// Moments carried across episodes while weights still reset.
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamFilter {
    All,
    AttentionOnly,
    LayernormOnly,
}

impl ParamFilter {
    pub fn matches(&self, name: &str) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::AttentionOnly => name.contains(".attn."),
            ParamFilter::LayernormOnly => {
                name.contains(".ln1.") || name.contains(".ln2.") || name.starts_with("ln_final.")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPolicy {
    pub optimizer: OptimizerConfig,
    /// Reset weights to the stream-start snapshot after every episode.
    pub reset_model_params: bool,
    pub reset_optimizer_state: ResetPolicy,
    pub steps_per_sample: usize,
    pub param_filter: ParamFilter,
    /// Ablation: pool head distributions before the entropy instead of
    /// averaging per-head entropies.
    pub pooled_loss: bool,
    /// Layer whose attention drives the loss; `None` means the final layer.
    pub capture_layer: Option<usize>,
}

impl AdaptationPolicy {
    /// Adam with moments carried across samples, lr 1e-4 (the defaults the
    /// harness searches around).
    pub fn adam_carried(lr: f64) -> Self {
        AdaptationPolicy {
            optimizer: OptimizerConfig::adam(lr),
            reset_model_params: true,
            reset_optimizer_state: ResetPolicy::Never,
            steps_per_sample: 1,
            param_filter: ParamFilter::All,
            pooled_loss: false,
            capture_layer: None,
        }
    }

    /// Truly episodic SGD, lr 1e-3 by default.
    pub fn sgd_episodic(lr: f64) -> Self {
        AdaptationPolicy {
            optimizer: OptimizerConfig::sgd(lr),
            reset_model_params: true,
            reset_optimizer_state: ResetPolicy::PerSample,
            steps_per_sample: 1,
            param_filter: ParamFilter::All,
            pooled_loss: false,
            capture_layer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_sample == 0 {
            return Err(Error::InvalidConfig {
                field: "steps_per_sample",
                message: "at least one step per sample required".into(),
            });
        }
        Ok(())
    }

    pub fn layer_for(&self, model: &VitModel) -> usize {
        self.capture_layer
            .unwrap_or_else(|| model.config().final_layer())
    }
}

impl Default for AdaptationPolicy {
    fn default() -> Self {
        AdaptationPolicy::adam_carried(1e-4)
    }
}

/// Outcome of one adaptation episode.
///
/// For failed episodes (non-finite loss or gradient, or attention collapsed
/// onto special tokens) the numeric fields that could not be computed are
/// zeroed and `failed` is set; the model is restored and the optimizer state
/// rolled back to its pre-episode value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub sample_id: u64,
    pub true_label: usize,
    /// Loss the step was taken on (mean per-head entropy, or pooled).
    pub loss_before: f64,
    /// Same objective re-evaluated with the adapted weights.
    pub loss_after: f64,
    pub entropies_before: Vec<f64>,
    pub entropies_after: Vec<f64>,
    /// Prediction from the adapted weights (second forward pass).
    pub predicted_class: usize,
    /// Prediction from the snapshot weights (first forward pass).
    pub baseline_class: Option<usize>,
    pub failed: bool,
    pub wall_time_secs: f64,
}

fn filter_grads(grads: GradientMap, filter: ParamFilter) -> GradientMap {
    grads
        .into_iter()
        .filter(|(name, _)| filter.matches(name))
        .collect()
}

fn all_finite(grads: &GradientMap) -> bool {
    grads
        .values()
        .all(|g| g.iter().all(|v| v.is_finite()))
}

/// Run one episode: adapt on the sample's attention entropy, predict with
/// the adapted weights, then reset per policy.
///
/// Precondition when `policy.reset_model_params` is set: the model currently
/// equals `snapshot` bit-for-bit.
pub fn adapt_and_predict(
    model: &mut VitModel,
    snapshot: &ParameterSnapshot,
    sample: &LabeledSample,
    policy: &AdaptationPolicy,
    state: &mut OptimizerState,
) -> Result<EpisodeRecord> {
    policy.validate()?;
    if policy.reset_model_params {
        if let Err(parameter) = model.matches_snapshot(snapshot) {
            return Err(Error::ModelNotAtSnapshot { parameter });
        }
    }
    let started = Instant::now();
    let layer = policy.layer_for(model);
    let t_r = model.config().num_special();
    let pre_state = state.clone();

    let fail = |model: &mut VitModel,
                    state: &mut OptimizerState,
                    baseline: Option<usize>,
                    loss_before: f64,
                    entropies_before: Vec<f64>|
     -> Result<EpisodeRecord> {
        model.restore(snapshot)?;
        *state = pre_state.clone();
        if policy.reset_optimizer_state == ResetPolicy::PerSample {
            state.reset();
        }
        Ok(EpisodeRecord {
            sample_id: sample.id,
            true_label: sample.label,
            loss_before: if loss_before.is_finite() { loss_before } else { 0.0 },
            loss_after: 0.0,
            entropies_before,
            entropies_after: Vec::new(),
            predicted_class: baseline.unwrap_or(0),
            baseline_class: baseline,
            failed: true,
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    };

    // Pass 1: forward with attention capture, entropy loss, backward.
    let mut pass1 = model.forward_graph(&sample.image, layer)?;
    let baseline = pass1.prediction();
    let attention_before = pass1.attention_tensor();

    let loss_graph = match objective::build_entropy_loss(
        &mut pass1.graph,
        &pass1.attention_heads,
        t_r,
        policy.pooled_loss,
    ) {
        Ok(lg) => lg,
        Err(Error::DegenerateAttention { .. }) => {
            return fail(model, state, Some(baseline.predicted_class), f64::NAN, Vec::new());
        }
        Err(e) => return Err(e),
    };
    let loss_before = loss_graph.loss_value(&pass1.graph);
    let entropies_before =
        objective::entropy_loss(&objective::extract_cls_to_patch(&attention_before, t_r)?).per_head;

    let grads = filter_grads(pass1.backward_gradients(loss_graph.loss)?, policy.param_filter);
    if !loss_before.is_finite() || !all_finite(&grads) {
        return fail(
            model,
            state,
            Some(baseline.predicted_class),
            loss_before,
            entropies_before,
        );
    }
    state.apply_step(model, &grads)?;

    // Additional steps rebuild the graph on the updated weights.
    for _ in 1..policy.steps_per_sample {
        let mut pass = model.forward_graph(&sample.image, layer)?;
        let lg = match objective::build_entropy_loss(
            &mut pass.graph,
            &pass.attention_heads,
            t_r,
            policy.pooled_loss,
        ) {
            Ok(lg) => lg,
            Err(Error::DegenerateAttention { .. }) => {
                return fail(
                    model,
                    state,
                    Some(baseline.predicted_class),
                    loss_before,
                    entropies_before,
                );
            }
            Err(e) => return Err(e),
        };
        let loss = lg.loss_value(&pass.graph);
        let step_grads = filter_grads(pass.backward_gradients(lg.loss)?, policy.param_filter);
        if !loss.is_finite() || !all_finite(&step_grads) {
            return fail(
                model,
                state,
                Some(baseline.predicted_class),
                loss_before,
                entropies_before,
            );
        }
        state.apply_step(model, &step_grads)?;
    }

    // Pass 2: prediction with the adapted weights.
    let (prediction, attention_after) = model.forward(&sample.image, layer)?;
    let after = match objective::extract_cls_to_patch(&attention_after, t_r) {
        Ok(dist) => dist,
        Err(Error::DegenerateAttention { .. }) => {
            return fail(
                model,
                state,
                Some(baseline.predicted_class),
                loss_before,
                entropies_before,
            );
        }
        Err(e) => return Err(e),
    };
    let entropies_after = objective::entropy_loss(&after);
    let loss_after = if policy.pooled_loss {
        objective::pooled_entropy_loss(&after)
    } else {
        entropies_after.mean
    };

    if policy.reset_model_params {
        model.restore(snapshot)?;
    }
    if policy.reset_optimizer_state == ResetPolicy::PerSample {
        state.reset();
    }

    Ok(EpisodeRecord {
        sample_id: sample.id,
        true_label: sample.label,
        loss_before,
        loss_after,
        entropies_before,
        entropies_after: entropies_after.per_head,
        predicted_class: prediction.predicted_class,
        baseline_class: Some(baseline.predicted_class),
        failed: false,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Run an ordered stream of episodes. The snapshot is taken once at stream
/// start; order matters whenever optimizer state carries over. Failed
/// episodes are recorded and the stream continues.
pub fn run_stream(
    model: &mut VitModel,
    samples: &[LabeledSample],
    policy: &AdaptationPolicy,
    state: &mut OptimizerState,
) -> Result<Vec<EpisodeRecord>> {
    let snapshot = model.snapshot();
    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        records.push(adapt_and_predict(model, &snapshot, sample, policy, state)?);
    }
    Ok(records)
}

/// A model replica bundled with its pristine snapshot, policy, and
/// optimizer state: one independent adaptation stream.
#[derive(Debug, Clone)]
pub struct TtaEngine {
    model: VitModel,
    snapshot: ParameterSnapshot,
    policy: AdaptationPolicy,
    state: OptimizerState,
}

impl TtaEngine {
    pub fn new(model: VitModel, policy: AdaptationPolicy) -> Result<Self> {
        policy.validate()?;
        if let Some(layer) = policy.capture_layer {
            if layer >= model.config().num_layers {
                return Err(Error::InvalidArgument {
                    message: format!(
                        "capture layer {layer} out of range for {} layers",
                        model.config().num_layers
                    ),
                });
            }
        }
        let snapshot = model.snapshot();
        let state = OptimizerState::new(policy.optimizer);
        Ok(TtaEngine {
            model,
            snapshot,
            policy,
            state,
        })
    }

    pub fn policy(&self) -> &AdaptationPolicy {
        &self.policy
    }

    pub fn model(&self) -> &VitModel {
        &self.model
    }

    pub fn optimizer_state(&self) -> &OptimizerState {
        &self.state
    }

    /// Drop carried optimizer state (weights are already at the snapshot
    /// unless the policy keeps them adapted).
    pub fn reset_optimizer(&mut self) {
        self.state.reset();
    }

    /// Restore weights to the snapshot and drop optimizer state.
    pub fn reset_all(&mut self) -> Result<()> {
        self.model.restore(&self.snapshot)?;
        self.state.reset();
        Ok(())
    }

    pub fn adapt_and_predict(&mut self, sample: &LabeledSample) -> Result<EpisodeRecord> {
        adapt_and_predict(
            &mut self.model,
            &self.snapshot,
            sample,
            &self.policy,
            &mut self.state,
        )
    }

    pub fn run_stream(&mut self, samples: &[LabeledSample]) -> Result<Vec<EpisodeRecord>> {
        let mut records = Vec::with_capacity(samples.len());
        for sample in samples {
            records.push(self.adapt_and_predict(sample)?);
        }
        Ok(records)
    }
}


#[cfg(test)]
mod restore_tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::vit::{VitConfig, VitModel};

    #[test]
    fn forward_after_adapt_and_restore_is_bit_identical() {
        let config = VitConfig::toy(41);
        let model = VitModel::new(config.clone()).unwrap();
        let stream = generate_dataset(config.num_classes, 1, config.image_size, 42);
        let sample = &stream[0];
        let layer = config.final_layer();

        let (before, _) = model.forward(&sample.image, layer).unwrap();
        let mut engine = TtaEngine::new(model, AdaptationPolicy::adam_carried(1e-2)).unwrap();
        let record = engine.adapt_and_predict(sample).unwrap();
        // Whatever the adapted second pass produced, the restore must put
        // the forward back exactly.
        assert!(!record.failed);
        let (after, _) = engine.model().forward(&sample.image, layer).unwrap();
        assert!(before
            .logits
            .iter()
            .zip(&after.logits)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
