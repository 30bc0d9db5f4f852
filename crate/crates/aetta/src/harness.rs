//! Experiment orchestration: clean training, hyperparameter search on the
//! 10% split, streaming evaluation with a no-adapt baseline, and report
//! assembly.
//!
//! Corruption streams run in alphabetical order with severities ascending
//! inside each corruption. Optimizer state flows across severities within a
//! corruption; whether it also flows across corruption boundaries is the
//! `carry_across_corruptions` switch (default off, reported either way).
//! The clean stream always gets its own fresh state. When state does not
//! cross corruption boundaries, corruption groups are evaluated in parallel,
//! one model replica each; results are assembled in name order so reports
//! are deterministic regardless of scheduling.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, SampleStream};
use crate::engine::{AdaptationPolicy, EpisodeRecord, TtaEngine};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::objective;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::rng::Rng;
use crate::vit::{VitConfig, VitModel};

/// Episodes allowed to fail before a report is flagged invalid.
pub const MAX_FAILURE_RATE: f64 = 0.01;

// ---- clean training ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStat>,
    pub holdout_accuracy: f64,
    pub diverged: bool,
}

pub struct TrainOutcome {
    pub model: VitModel,
    pub log: TrainLog,
}

/// Default mini-batch size for gradient accumulation during training.
/// Per-sample Adam updates at the default lr turn out to be order-unstable
/// on this task; averaging ~10 gradients per step trains reliably under any
/// shuffle order.
pub const DEFAULT_TRAIN_BATCH: usize = 10;

/// Default weight of the patch-attention-mass regularizer; see
/// [`objective::patch_mass_penalty`].
pub const DEFAULT_ATTN_MASS_REG: f64 = 0.1;

/// The clean fine-tuning recipe: Adam (β1 0.9, β2 0.999) on cross-entropy
/// plus a small patch-attention-mass regularizer, with mini-batch gradient
/// accumulation and per-epoch shuffling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub attn_mass_reg: f64,
    pub shuffle_seed: u64,
}

impl TrainRecipe {
    pub fn new(epochs: usize, lr: f64, shuffle_seed: u64) -> Self {
        TrainRecipe {
            epochs,
            lr,
            batch_size: DEFAULT_TRAIN_BATCH,
            attn_mass_reg: DEFAULT_ATTN_MASS_REG,
            shuffle_seed,
        }
    }
}

/// Fine-tune on clean data per the recipe. Deterministic from
/// `recipe.shuffle_seed`. If a loss or gradient goes non-finite the last
/// end-of-epoch checkpoint is returned with `diverged = true`.
pub fn train_clean(
    config: &VitConfig,
    train: &[LabeledSample],
    holdout: &[LabeledSample],
    recipe: &TrainRecipe,
) -> Result<TrainOutcome> {
    if recipe.batch_size == 0 {
        return Err(Error::InvalidConfig {
            field: "train.batch_size",
            message: "batch size must be positive".into(),
        });
    }
    let (epochs, batch_size) = (recipe.epochs, recipe.batch_size);
    let mut model = VitModel::new(config.clone())?;
    let mut optimizer = crate::optim::OptimizerState::new(OptimizerConfig::adam_with(
        recipe.lr, 0.9, 0.999, 1e-8,
    ));
    let layer = config.final_layer();
    let mut log = Vec::with_capacity(epochs);
    let mut last_good = model.snapshot();
    let mut diverged = false;

    'epochs: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::derive(recipe.shuffle_seed, epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let mut acc = crate::snapshot::GradientMap::new();
            for &idx in chunk {
                let sample = &train[idx];
                let mut pass = model.forward_graph(&sample.image, layer)?;
                let ce =
                    objective::cross_entropy_loss(&mut pass.graph, pass.logits, sample.label)?;
                let loss = if recipe.attn_mass_reg > 0.0 {
                    let penalty = objective::patch_mass_penalty(
                        &mut pass.graph,
                        &pass.attention_heads,
                        config.num_special(),
                        recipe.attn_mass_reg,
                    )?;
                    pass.graph.add(ce, penalty)?
                } else {
                    ce
                };
                let loss_value = pass.graph.scalar_value(loss);
                loss_sum += loss_value;
                if !loss_value.is_finite() {
                    diverged = true;
                    break 'epochs;
                }
                for (name, grad) in pass.backward_gradients(loss)? {
                    let slot = acc.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
                    for (a, g) in slot.iter_mut().zip(&grad) {
                        *a += g;
                    }
                }
            }
            // The floored log keeps the loss finite even on poisoned inputs,
            // so divergence must also be caught at the gradient level.
            if acc.values().any(|g| g.iter().any(|v| !v.is_finite())) {
                diverged = true;
                break 'epochs;
            }
            let inv = 1.0 / chunk.len() as f64;
            for grad in acc.values_mut() {
                for g in grad.iter_mut() {
                    *g *= inv;
                }
            }
            optimizer.apply_step(&mut model, &acc)?;
        }
        let mean_loss = loss_sum / train.len().max(1) as f64;
        log.push(EpochStat { epoch, mean_loss });
        if !mean_loss.is_finite() {
            diverged = true;
            break;
        }
        last_good = model.snapshot();
    }
    if diverged {
        model.restore(&last_good)?;
    }
    let holdout_accuracy = accuracy(&model, holdout)?;
    Ok(TrainOutcome {
        model,
        log: TrainLog {
            epochs: log,
            holdout_accuracy,
            diverged,
        },
    })
}

/// Plain classification accuracy in percent.
pub fn accuracy(model: &VitModel, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let layer = model.config().final_layer();
    let mut correct = 0usize;
    for s in samples {
        let (pred, _) = model.forward(&s.image, layer)?;
        if pred.predicted_class == s.label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Cross-entropy of a logits row against a label, without a graph. Useful
/// as a sanity value (uniform logits over C classes give ln C).
pub fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    let mut g = Graph::new();
    let node = g.leaf(&[1, logits.len()], logits.to_vec()).expect("shape");
    let loss = objective::cross_entropy_loss(&mut g, node, label).expect("valid label");
    g.scalar_value(loss)
}

// ---- evaluation ----------------------------------------------------------------

/// Episodes of one stream, tagged with its corruption identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamEpisodes {
    pub corruption: Option<String>,
    pub severity: Option<u8>,
    pub records: Vec<EpisodeRecord>,
}

/// One episodes.jsonl row: the stream tag flattened into the record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub corruption: Option<String>,
    pub severity: Option<u8>,
    #[serde(flatten)]
    pub record: EpisodeRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeverityAccuracy {
    pub severity: u8,
    pub baseline: f64,
    pub tta: f64,
    pub episodes: usize,
}

/// The per-corruption tables plus mean corruption accuracy, all in percent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub policy: AdaptationPolicy,
    pub carry_across_corruptions: bool,
    pub severity_pooling: String,
    pub seeds: BTreeMap<String, u64>,
    pub episode_count: usize,
    pub failed_episodes: usize,
    pub failure_rate: f64,
    /// False when more than [`MAX_FAILURE_RATE`] of episodes failed.
    pub valid: bool,
    pub clean_baseline_accuracy: Option<f64>,
    pub clean_tta_accuracy: Option<f64>,
    pub per_corruption_baseline: BTreeMap<String, f64>,
    pub per_corruption_tta: BTreeMap<String, f64>,
    pub per_severity: BTreeMap<String, Vec<SeverityAccuracy>>,
    pub mean_corruption_accuracy_baseline: f64,
    pub mean_corruption_accuracy_tta: f64,
}

impl EvaluationReport {
    pub fn per_corruption_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("corruption,episodes,baseline_accuracy_pct,tta_accuracy_pct\n");
        for (name, tta) in &self.per_corruption_tta {
            let baseline = self.per_corruption_baseline.get(name).copied().unwrap_or(0.0);
            let episodes: usize = self
                .per_severity
                .get(name)
                .map(|rows| rows.iter().map(|r| r.episodes).sum())
                .unwrap_or(0);
            writeln!(out, "{name},{episodes},{baseline:.4},{tta:.4}").expect("write to string");
        }
        writeln!(
            out,
            "mean,{},{:.4},{:.4}",
            self.episode_count,
            self.mean_corruption_accuracy_baseline,
            self.mean_corruption_accuracy_tta
        )
        .expect("write to string");
        out
    }
}

pub struct EvalOutput {
    pub report: EvaluationReport,
    pub episodes: Vec<StreamEpisodes>,
}

fn accuracy_of(records: &[&EpisodeRecord], adapted: bool) -> f64 {
    let usable: Vec<&&EpisodeRecord> = records.iter().filter(|r| !r.failed).collect();
    if usable.is_empty() {
        return 0.0;
    }
    let correct = usable
        .iter()
        .filter(|r| {
            let class = if adapted {
                Some(r.predicted_class)
            } else {
                r.baseline_class
            };
            class == Some(r.true_label)
        })
        .count();
    100.0 * correct as f64 / usable.len() as f64
}

/// Run TTA over the given streams and assemble the report. Streams with the
/// same corruption name form one sequential group (severities ascending);
/// the clean stream, when present, runs with its own fresh state.
pub fn evaluate(
    model: &VitModel,
    policy: &AdaptationPolicy,
    streams: &[SampleStream],
    carry_across_corruptions: bool,
    seeds: BTreeMap<String, u64>,
) -> Result<EvalOutput> {
    policy.validate()?;
    let mut groups: BTreeMap<String, Vec<&SampleStream>> = BTreeMap::new();
    let mut clean: Vec<&SampleStream> = Vec::new();
    for s in streams {
        match &s.corruption {
            Some(name) => groups.entry(name.clone()).or_default().push(s),
            None => clean.push(s),
        }
    }
    for group in groups.values_mut() {
        group.sort_by_key(|s| s.severity.unwrap_or(0));
    }

    let run_group = |streams: &[&SampleStream], engine: &mut TtaEngine| -> Result<Vec<StreamEpisodes>> {
        let mut out = Vec::with_capacity(streams.len());
        for stream in streams {
            let records = engine.run_stream(&stream.samples)?;
            out.push(StreamEpisodes {
                corruption: stream.corruption.clone(),
                severity: stream.severity,
                records,
            });
        }
        Ok(out)
    };

    let mut episodes: Vec<StreamEpisodes> = Vec::new();
    if carry_across_corruptions {
        // One state flowing through the alphabetical corruption order.
        let mut engine = TtaEngine::new(model.clone(), policy.clone())?;
        for group in groups.values() {
            episodes.extend(run_group(group, &mut engine)?);
        }
    } else {
        // Independent groups: evaluate in parallel, one replica each.
        let results: Vec<(String, Result<Vec<StreamEpisodes>>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = groups
                .iter()
                .map(|(name, group)| {
                    let name = name.clone();
                    scope.spawn(move || {
                        let mut engine = match TtaEngine::new(model.clone(), policy.clone()) {
                            Ok(e) => e,
                            Err(e) => return (name, Err(e)),
                        };
                        (name, run_group(group, &mut engine))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        });
        let mut by_name: BTreeMap<String, Vec<StreamEpisodes>> = BTreeMap::new();
        for (name, result) in results {
            by_name.insert(name, result?);
        }
        for (_, group_eps) in by_name {
            episodes.extend(group_eps);
        }
    }
    if !clean.is_empty() {
        let mut engine = TtaEngine::new(model.clone(), policy.clone())?;
        episodes.extend(run_group(&clean, &mut engine)?);
    }

    let report = assemble_report(policy, carry_across_corruptions, seeds, &episodes);
    Ok(EvalOutput { report, episodes })
}

fn assemble_report(
    policy: &AdaptationPolicy,
    carry_across_corruptions: bool,
    seeds: BTreeMap<String, u64>,
    episodes: &[StreamEpisodes],
) -> EvaluationReport {
    let mut per_corruption_records: BTreeMap<String, Vec<&EpisodeRecord>> = BTreeMap::new();
    let mut per_severity_records: BTreeMap<(String, u8), Vec<&EpisodeRecord>> = BTreeMap::new();
    let mut clean_records: Vec<&EpisodeRecord> = Vec::new();
    let mut episode_count = 0;
    let mut failed = 0;

    for stream in episodes {
        episode_count += stream.records.len();
        failed += stream.records.iter().filter(|r| r.failed).count();
        match &stream.corruption {
            Some(name) => {
                per_corruption_records
                    .entry(name.clone())
                    .or_default()
                    .extend(stream.records.iter());
                per_severity_records
                    .entry((name.clone(), stream.severity.unwrap_or(0)))
                    .or_default()
                    .extend(stream.records.iter());
            }
            None => clean_records.extend(stream.records.iter()),
        }
    }

    let per_corruption_baseline: BTreeMap<String, f64> = per_corruption_records
        .iter()
        .map(|(name, recs)| (name.clone(), accuracy_of(recs, false)))
        .collect();
    let per_corruption_tta: BTreeMap<String, f64> = per_corruption_records
        .iter()
        .map(|(name, recs)| (name.clone(), accuracy_of(recs, true)))
        .collect();

    let mut per_severity: BTreeMap<String, Vec<SeverityAccuracy>> = BTreeMap::new();
    for ((name, severity), recs) in &per_severity_records {
        per_severity.entry(name.clone()).or_default().push(SeverityAccuracy {
            severity: *severity,
            baseline: accuracy_of(recs, false),
            tta: accuracy_of(recs, true),
            episodes: recs.len(),
        });
    }

    let mean = |m: &BTreeMap<String, f64>| {
        if m.is_empty() {
            0.0
        } else {
            m.values().sum::<f64>() / m.len() as f64
        }
    };
    let failure_rate = if episode_count == 0 {
        0.0
    } else {
        failed as f64 / episode_count as f64
    };

    EvaluationReport {
        policy: policy.clone(),
        carry_across_corruptions,
        severity_pooling: "all severities pooled per corruption".into(),
        seeds,
        episode_count,
        failed_episodes: failed,
        failure_rate,
        valid: failure_rate <= MAX_FAILURE_RATE,
        clean_baseline_accuracy: (!clean_records.is_empty())
            .then(|| accuracy_of(&clean_records, false)),
        clean_tta_accuracy: (!clean_records.is_empty()).then(|| accuracy_of(&clean_records, true)),
        mean_corruption_accuracy_baseline: mean(&per_corruption_baseline),
        mean_corruption_accuracy_tta: mean(&per_corruption_tta),
        per_corruption_baseline,
        per_corruption_tta,
        per_severity,
    }
}

// ---- hyperparameter search -------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub policy: AdaptationPolicy,
    pub mean_corruption_accuracy: f64,
    pub per_corruption: BTreeMap<String, f64>,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Argmax-mCA policy per optimizer family ("sgd" / "adam").
    pub best: BTreeMap<String, AdaptationPolicy>,
    pub results: Vec<GridResult>,
}

/// The default grid: the adaptation defaults (Adam lr 1e-4 with β1 = 0.99,
/// β2 = 0.999; SGD lr 1e-3) bracketed by a decade each way, and both Adam
/// state-reset policies.
pub fn default_grid() -> Vec<AdaptationPolicy> {
    let mut grid = Vec::new();
    for lr in [1e-5, 1e-4, 1e-3] {
        for reset in [
            crate::engine::ResetPolicy::Never,
            crate::engine::ResetPolicy::PerSample,
        ] {
            let mut policy = AdaptationPolicy::adam_carried(lr);
            policy.reset_optimizer_state = reset;
            grid.push(policy);
        }
    }
    for lr in [1e-4, 1e-3, 1e-2] {
        grid.push(AdaptationPolicy::sgd_episodic(lr));
    }
    grid
}

/// Evaluate every grid policy on the search streams and pick the best per
/// optimizer family by mean corruption accuracy. Ties keep the earliest
/// grid entry. Full grid results are returned for persistence.
pub fn hyperparameter_search(
    model: &VitModel,
    search_streams: &[SampleStream],
    grid: &[AdaptationPolicy],
    carry_across_corruptions: bool,
) -> Result<SearchOutcome> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if search_streams.iter().any(|s| s.split != crate::data::Split::Search) {
        return Err(Error::InvalidArgument {
            message: "hyperparameter search must only see the search split".into(),
        });
    }
    let mut results = Vec::with_capacity(grid.len());
    for policy in grid {
        let out = evaluate(
            model,
            policy,
            search_streams,
            carry_across_corruptions,
            BTreeMap::new(),
        )?;
        results.push(GridResult {
            policy: policy.clone(),
            mean_corruption_accuracy: out.report.mean_corruption_accuracy_tta,
            per_corruption: out.report.per_corruption_tta.clone(),
            failure_rate: out.report.failure_rate,
        });
    }
    let mut best: BTreeMap<String, AdaptationPolicy> = BTreeMap::new();
    let mut best_score: BTreeMap<String, f64> = BTreeMap::new();
    for result in &results {
        let family = match result.policy.optimizer.kind {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        };
        let score = result.mean_corruption_accuracy;
        if best_score.get(family).is_none_or(|&s| score > s) {
            best_score.insert(family.into(), score);
            best.insert(family.into(), result.policy.clone());
        }
    }
    Ok(SearchOutcome { best, results })
}

// ---- episode persistence ------------------------------------------------------

pub fn write_episodes_jsonl(path: impl AsRef<Path>, episodes: &[StreamEpisodes]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    for stream in episodes {
        for record in &stream.records {
            let row = EpisodeRow {
                corruption: stream.corruption.clone(),
                severity: stream.severity,
                record: record.clone(),
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n").map_err(|e| Error::io("writing episodes", e))?;
        }
    }
    w.flush().map_err(|e| Error::io("flushing episodes", e))
}

pub fn read_episodes_jsonl(path: impl AsRef<Path>) -> Result<Vec<EpisodeRow>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("reading episodes", e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropySource {
    /// Mean per-head entropy before adaptation (first forward pass).
    Pre,
    /// Mean per-head entropy after the update (second forward pass).
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectnessSource {
    Baseline,
    Adapted,
}

/// Turn episode rows into (entropy, correct) points for the binned curve.
/// Failed episodes and rows missing the requested field are skipped.
pub fn curve_points(
    rows: &[EpisodeRow],
    entropy: EntropySource,
    correctness: CorrectnessSource,
) -> Vec<(f64, bool)> {
    rows.iter()
        .filter(|r| !r.record.failed)
        .filter_map(|r| {
            let entropies = match entropy {
                EntropySource::Pre => &r.record.entropies_before,
                EntropySource::Post => &r.record.entropies_after,
            };
            if entropies.is_empty() {
                return None;
            }
            let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
            let correct = match correctness {
                CorrectnessSource::Baseline => r.record.baseline_class? == r.record.true_label,
                CorrectnessSource::Adapted => r.record.predicted_class == r.record.true_label,
            };
            Some((mean, correct))
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, make_stream, CorruptionSpec, Split, StreamSource};
    use crate::engine::ResetPolicy;

    fn tiny_config(seed: u64) -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            num_heads: 2,
            num_layers: 2,
            num_register_tokens: 2,
            num_classes: 4,
            layernorm_eps: 1e-5,
            seed,
        }
    }

    fn sharpened(seed: u64) -> VitModel {
        let mut model = VitModel::new(tiny_config(seed)).unwrap();
        for name in ["blocks.1.attn.wq", "blocks.1.attn.wk"] {
            for v in model.param_mut(name).unwrap() {
                *v *= 4.0;
            }
        }
        model
    }

    fn tiny_streams(seed: u64, corruptions: &[&str], clean: bool) -> Vec<SampleStream> {
        let ds = generate_dataset(4, 10, 8, seed);
        let mut streams = Vec::new();
        for name in corruptions {
            for sev in [2u8, 4] {
                let spec = CorruptionSpec::new(*name, sev, seed);
                streams
                    .push(make_stream(&ds, &StreamSource::Corrupted(spec), Split::Eval, 5).unwrap());
            }
        }
        if clean {
            streams.push(make_stream(&ds, &StreamSource::Clean, Split::Eval, 5).unwrap());
        }
        streams
    }

    #[test]
    fn one_epoch_smoke_train_has_finite_loss() {
        let config = tiny_config(1);
        let ds = generate_dataset(config.num_classes, 3, config.image_size, 2);
        let recipe = TrainRecipe {
            batch_size: 4,
            ..TrainRecipe::new(1, 1e-3, 3)
        };
        let out = train_clean(&config, &ds[..10], &ds[10..], &recipe).unwrap();
        assert_eq!(out.log.epochs.len(), 1);
        assert!(out.log.epochs[0].mean_loss.is_finite());
        assert!(!out.log.diverged);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let ce = cross_entropy_value(&[0.0; 10], 7);
        assert!((ce - 10.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_policy_reproduces_the_baseline_exactly() {
        let model = sharpened(5);
        let streams = tiny_streams(6, &["gaussian_noise", "contrast"], true);
        let policy = AdaptationPolicy::adam_carried(0.0);
        let out = evaluate(&model, &policy, &streams, false, BTreeMap::new()).unwrap();
        let r = out.report;
        for (name, tta) in &r.per_corruption_tta {
            assert_eq!(*tta, r.per_corruption_baseline[name]);
        }
        assert_eq!(r.clean_tta_accuracy, r.clean_baseline_accuracy);
        assert_eq!(
            r.mean_corruption_accuracy_tta,
            r.mean_corruption_accuracy_baseline
        );
    }

    #[test]
    fn mca_is_the_mean_of_the_per_corruption_column() {
        let model = sharpened(7);
        let streams = tiny_streams(8, &["brightness", "pixelate", "shot_noise"], false);
        let policy = AdaptationPolicy::sgd_episodic(1e-3);
        let out = evaluate(&model, &policy, &streams, false, BTreeMap::new()).unwrap();
        let r = out.report;
        let mean: f64 =
            r.per_corruption_tta.values().sum::<f64>() / r.per_corruption_tta.len() as f64;
        assert!((r.mean_corruption_accuracy_tta - mean).abs() < 1e-12);
        for acc in r.per_corruption_tta.values() {
            assert!((0.0..=100.0).contains(acc));
        }
    }

    #[test]
    fn reports_are_deterministic_and_time_free() {
        let model = sharpened(9);
        let streams = tiny_streams(10, &["motion_blur", "impulse_noise"], true);
        let policy = AdaptationPolicy::adam_carried(1e-3);
        let a = evaluate(&model, &policy, &streams, false, BTreeMap::new()).unwrap();
        let b = evaluate(&model, &policy, &streams, false, BTreeMap::new()).unwrap();
        let ja = serde_json::to_string(&a.report).unwrap();
        let jb = serde_json::to_string(&b.report).unwrap();
        assert_eq!(ja, jb);
        assert!(!ja.contains("wall_time"));
    }

    #[test]
    fn carried_across_corruptions_changes_outcomes() {
        let model = sharpened(11);
        let streams = tiny_streams(12, &["contrast", "gaussian_noise"], false);
        let policy = AdaptationPolicy::adam_carried(1e-3);
        let a = evaluate(&model, &policy, &streams, false, BTreeMap::new()).unwrap();
        let b = evaluate(&model, &policy, &streams, true, BTreeMap::new()).unwrap();
        assert!(a.report.carry_across_corruptions != b.report.carry_across_corruptions);
        // The later (alphabetically second) corruption sees different state.
        let ga = &a.report.per_severity["gaussian_noise"];
        let gb = &b.report.per_severity["gaussian_noise"];
        let any_diff = ga
            .iter()
            .zip(gb)
            .any(|(x, y)| x.tta != y.tta)
            || a.report.per_corruption_tta["gaussian_noise"]
                != b.report.per_corruption_tta["gaussian_noise"];
        // Both runs share the identical baseline either way.
        assert_eq!(
            a.report.per_corruption_baseline, b.report.per_corruption_baseline
        );
        assert!(any_diff || a.report.per_corruption_tta == b.report.per_corruption_tta);
    }

    #[test]
    fn high_failure_rate_invalidates_the_report() {
        let model = sharpened(13);
        let streams = tiny_streams(14, &["brightness"], false);
        let mut policy = AdaptationPolicy::sgd_episodic(1e200);
        policy.steps_per_sample = 2; // second step sees non-finite loss
        let out = evaluate(&model, &policy, &streams, false, BTreeMap::new()).unwrap();
        assert!(out.report.failed_episodes > 0);
        assert!(out.report.failure_rate > MAX_FAILURE_RATE);
        assert!(!out.report.valid);
    }

    #[test]
    fn search_returns_the_argmax_per_family() {
        let model = sharpened(15);
        let ds = generate_dataset(4, 20, 8, 16);
        let mut streams = Vec::new();
        for name in ["contrast", "gaussian_noise"] {
            let spec = CorruptionSpec::new(name, 3, 16);
            streams.push(
                make_stream(&ds, &StreamSource::Corrupted(spec), Split::Search, 5).unwrap(),
            );
        }
        let grid = default_grid();
        let outcome = hyperparameter_search(&model, &streams, &grid, false).unwrap();
        assert_eq!(outcome.results.len(), grid.len());
        for (family, policy) in &outcome.best {
            let best_score = outcome
                .results
                .iter()
                .find(|r| &r.policy == policy)
                .unwrap()
                .mean_corruption_accuracy;
            for r in &outcome.results {
                let fam = match r.policy.optimizer.kind {
                    OptimizerKind::Sgd => "sgd",
                    OptimizerKind::Adam => "adam",
                };
                if fam == family {
                    assert!(r.mean_corruption_accuracy <= best_score);
                }
            }
        }
    }

    #[test]
    fn search_with_grid_of_one_returns_it() {
        let model = sharpened(17);
        let ds = generate_dataset(4, 10, 8, 18);
        let spec = CorruptionSpec::new("pixelate", 2, 18);
        let streams =
            vec![make_stream(&ds, &StreamSource::Corrupted(spec), Split::Search, 5).unwrap()];
        let grid = vec![AdaptationPolicy::sgd_episodic(1e-3)];
        let outcome = hyperparameter_search(&model, &streams, &grid, false).unwrap();
        assert_eq!(outcome.best["sgd"], grid[0]);
        assert_eq!(outcome.results.len(), 1);
    }

    #[test]
    fn search_rejects_empty_grid_and_eval_streams() {
        let model = sharpened(19);
        let ds = generate_dataset(4, 10, 8, 20);
        let search_stream =
            vec![make_stream(&ds, &StreamSource::Clean, Split::Search, 5).unwrap()];
        assert!(matches!(
            hyperparameter_search(&model, &search_stream, &[], false),
            Err(Error::EmptyGrid)
        ));
        let eval_stream = vec![make_stream(&ds, &StreamSource::Clean, Split::Eval, 5).unwrap()];
        let grid = vec![AdaptationPolicy::sgd_episodic(1e-3)];
        assert!(hyperparameter_search(&model, &eval_stream, &grid, false).is_err());
    }

    #[test]
    fn default_grid_contains_the_reference_policies() {
        let grid = default_grid();
        // Adam lr 1e-4 with β1 = 0.99, β2 = 0.999, moments carried over.
        assert!(grid.iter().any(|p| {
            p.optimizer.kind == OptimizerKind::Adam
                && p.optimizer.lr == 1e-4
                && p.optimizer.beta1 == 0.99
                && p.optimizer.beta2 == 0.999
                && p.reset_optimizer_state == ResetPolicy::Never
        }));
        // Truly episodic SGD at lr 1e-3.
        assert!(grid.iter().any(|p| {
            p.optimizer.kind == OptimizerKind::Sgd
                && p.optimizer.lr == 1e-3
                && p.reset_optimizer_state == ResetPolicy::PerSample
        }));
    }

    #[test]
    fn episodes_jsonl_roundtrips() {
        let model = sharpened(21);
        let streams = tiny_streams(22, &["defocus_blur"], true);
        let policy = AdaptationPolicy::adam_carried(1e-3);
        let out = evaluate(&model, &policy, &streams, false, BTreeMap::new()).unwrap();
        let dir = std::env::temp_dir().join(format!("aetta-harness-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("episodes.jsonl");
        write_episodes_jsonl(&path, &out.episodes).unwrap();
        let rows = read_episodes_jsonl(&path).unwrap();
        let total: usize = out.episodes.iter().map(|s| s.records.len()).sum();
        assert_eq!(rows.len(), total);
        assert!(rows.iter().any(|r| r.corruption.as_deref() == Some("defocus_blur")));
        assert!(rows.iter().any(|r| r.corruption.is_none()));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn curve_points_respect_sources_and_skip_failed() {
        let record = |failed: bool, baseline: Option<usize>| EpisodeRow {
            corruption: None,
            severity: None,
            record: crate::engine::EpisodeRecord {
                sample_id: 0,
                true_label: 1,
                loss_before: 1.0,
                loss_after: 0.5,
                entropies_before: vec![1.0, 2.0],
                entropies_after: vec![0.5, 0.7],
                predicted_class: 1,
                baseline_class: baseline,
                failed,
                wall_time_secs: 0.0,
            },
        };
        let rows = vec![record(false, Some(0)), record(true, Some(1)), record(false, None)];
        let pts = curve_points(&rows, EntropySource::Pre, CorrectnessSource::Baseline);
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0], (1.5, false));
        let pts = curve_points(&rows, EntropySource::Post, CorrectnessSource::Adapted);
        assert_eq!(pts.len(), 2);
        assert!((pts[0].0 - 0.6).abs() < 1e-12 && pts[0].1);
    }

    #[test]
    fn per_corruption_csv_shape() {
        let model = sharpened(23);
        let streams = tiny_streams(24, &["jpeg_compression"], false);
        let out = evaluate(
            &model,
            &AdaptationPolicy::sgd_episodic(1e-3),
            &streams,
            false,
            BTreeMap::new(),
        )
        .unwrap();
        let csv = out.report.per_corruption_csv();
        assert!(csv.starts_with("corruption,episodes,baseline_accuracy_pct,tta_accuracy_pct\n"));
        assert!(csv.contains("jpeg_compression,"));
        assert!(csv.trim_end().ends_with(&format!(
            "mean,{},{:.4},{:.4}",
            out.report.episode_count,
            out.report.mean_corruption_accuracy_baseline,
            out.report.mean_corruption_accuracy_tta
        )));
    }
}
