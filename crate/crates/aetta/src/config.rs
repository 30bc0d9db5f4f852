//! Flat key-value configuration for the CLI.
//!
//! The format is one `key = value` pair per line; `#` starts a comment and
//! blank lines are ignored. The same `key=value` syntax is accepted as CLI
//! overrides after the flags. Unknown keys are rejected so typos fail loudly.
//! Every key has a default, so an empty config is valid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::CORRUPTION_NAMES;
use crate::engine::{AdaptationPolicy, ParamFilter, ResetPolicy};
use crate::error::{Error, Result};
use crate::harness::{CorrectnessSource, EntropySource};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::vit::VitConfig;

/// Raw parsed key-value pairs.
#[derive(Debug, Default, Clone)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(Error::ConfigParse {
                line: lineno + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(RawConfig { values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Apply `key=value` override strings (CLI arguments).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| Error::InvalidArgument {
                message: format!("override {item:?} is not of the form key=value"),
            })?;
            self.values
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct DataConfig {
    pub samples_per_class: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub eval_samples_per_class: usize,
    pub eval_seed: u64,
    /// Optional external dataset directory (index.json schema). When set,
    /// the evaluation dataset is imported instead of generated.
    pub import_dir: Option<PathBuf>,
}

pub use crate::harness::TrainRecipe as TrainConfig;

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub adam_lrs: Vec<f64>,
    pub sgd_lrs: Vec<f64>,
    pub adam_resets: Vec<ResetPolicy>,
}

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub num_bins: usize,
    pub entropy_source: EntropySource,
    pub correctness_source: CorrectnessSource,
    pub sample_fraction: f64,
    pub tail_buckets: usize,
    pub tail_corruption: Option<String>,
    pub tail_severity: u8,
    pub episodes_file: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub model: VitConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub policy: AdaptationPolicy,
    pub carry_across_corruptions: bool,
    pub corruption_names: Vec<String>,
    pub severities: Vec<u8>,
    pub order_seed: u64,
    pub search: SearchConfig,
    pub eval_on_search_split: bool,
    pub analysis: AnalysisConfig,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl HarnessConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn episodes_path(&self) -> PathBuf {
        self.analysis
            .episodes_file
            .clone()
            .unwrap_or_else(|| self.out_dir.join("episodes.jsonl"))
    }
}

const KNOWN_KEYS: &[&str] = &[
    "model.image_size",
    "model.patch_size",
    "model.channels",
    "model.embed_dim",
    "model.num_heads",
    "model.num_layers",
    "model.num_register_tokens",
    "model.num_classes",
    "model.layernorm_eps",
    "model.seed",
    "data.samples_per_class",
    "data.seed",
    "data.holdout_fraction",
    "data.eval_samples_per_class",
    "data.eval_seed",
    "data.import_dir",
    "train.epochs",
    "train.lr",
    "train.batch_size",
    "train.attn_mass_reg",
    "train.shuffle_seed",
    "policy.optimizer",
    "policy.lr",
    "policy.beta1",
    "policy.beta2",
    "policy.epsilon",
    "policy.reset_optimizer_state",
    "policy.reset_model_params",
    "policy.steps_per_sample",
    "policy.param_filter",
    "policy.pooled_loss",
    "policy.capture_layer",
    "policy.carry_across_corruptions",
    "corruptions.names",
    "corruptions.severities",
    "stream.order_seed",
    "search.adam_lrs",
    "search.sgd_lrs",
    "search.adam_resets",
    "eval.split",
    "analysis.num_bins",
    "analysis.entropy_source",
    "analysis.correctness_source",
    "analysis.sample_fraction",
    "analysis.tail_buckets",
    "analysis.tail_corruption",
    "analysis.tail_severity",
    "analysis.episodes_file",
    "paths.out_dir",
    "paths.checkpoint",
];

struct Reader<'a> {
    raw: &'a RawConfig,
}

impl<'a> Reader<'a> {
    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw.get(key) {
            None => Ok(default),
            Some(text) => text.parse().map_err(|_| Error::ConfigParse {
                line: 0,
                message: format!("key {key}: cannot parse {text:?}"),
            }),
        }
    }

    fn string(&self, key: &str) -> Option<String> {
        self.raw
            .get(key)
            .filter(|s| !s.is_empty() && *s != "none")
            .map(|s| s.to_string())
    }

    fn list_f64(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.raw.get(key) {
            None => Ok(default.to_vec()),
            Some(text) => text
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| Error::ConfigParse {
                        line: 0,
                        message: format!("key {key}: cannot parse {s:?} as a number"),
                    })
                })
                .collect(),
        }
    }
}

/// Validate keys and assemble the typed configuration with defaults.
pub fn harness_config(raw: &RawConfig) -> Result<HarnessConfig> {
    for key in raw.values.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::UnknownConfigKey { key: key.clone() });
        }
    }
    let r = Reader { raw };
    let toy = VitConfig::toy(42);
    let model = VitConfig {
        image_size: r.parse("model.image_size", toy.image_size)?,
        patch_size: r.parse("model.patch_size", toy.patch_size)?,
        channels: r.parse("model.channels", toy.channels)?,
        embed_dim: r.parse("model.embed_dim", toy.embed_dim)?,
        num_heads: r.parse("model.num_heads", toy.num_heads)?,
        num_layers: r.parse("model.num_layers", toy.num_layers)?,
        num_register_tokens: r.parse("model.num_register_tokens", toy.num_register_tokens)?,
        num_classes: r.parse("model.num_classes", toy.num_classes)?,
        layernorm_eps: r.parse("model.layernorm_eps", toy.layernorm_eps)?,
        seed: r.parse("model.seed", toy.seed)?,
    };
    model.validate()?;

    let data = DataConfig {
        samples_per_class: r.parse("data.samples_per_class", 50)?,
        seed: r.parse("data.seed", 7)?,
        holdout_fraction: r.parse("data.holdout_fraction", 0.2)?,
        eval_samples_per_class: r.parse("data.eval_samples_per_class", 20)?,
        eval_seed: r.parse("data.eval_seed", 1007)?,
        import_dir: r.string("data.import_dir").map(PathBuf::from),
    };
    if !(data.holdout_fraction > 0.0 && data.holdout_fraction < 1.0) {
        return Err(Error::InvalidConfig {
            field: "data.holdout_fraction",
            message: "must be strictly between 0 and 1".into(),
        });
    }

    let train = TrainConfig {
        epochs: r.parse("train.epochs", 20)?,
        lr: r.parse("train.lr", 3e-3)?,
        batch_size: r.parse("train.batch_size", crate::harness::DEFAULT_TRAIN_BATCH)?,
        attn_mass_reg: r.parse(
            "train.attn_mass_reg",
            crate::harness::DEFAULT_ATTN_MASS_REG,
        )?,
        shuffle_seed: r.parse("train.shuffle_seed", 11)?,
    };

    let kind = match r.string("policy.optimizer").as_deref().unwrap_or("adam") {
        "adam" => OptimizerKind::Adam,
        "sgd" => OptimizerKind::Sgd,
        other => {
            return Err(Error::ConfigParse {
                line: 0,
                message: format!("policy.optimizer: unknown optimizer {other:?}"),
            })
        }
    };
    let default_lr = match kind {
        OptimizerKind::Adam => 1e-4,
        OptimizerKind::Sgd => 1e-3,
    };
    let optimizer = match kind {
        OptimizerKind::Adam => OptimizerConfig::adam_with(
            r.parse("policy.lr", default_lr)?,
            r.parse("policy.beta1", 0.99)?,
            r.parse("policy.beta2", 0.999)?,
            r.parse("policy.epsilon", 1e-8)?,
        ),
        OptimizerKind::Sgd => OptimizerConfig::sgd(r.parse("policy.lr", default_lr)?),
    };
    let reset_optimizer_state = match r
        .string("policy.reset_optimizer_state")
        .as_deref()
        .unwrap_or(match kind {
            OptimizerKind::Adam => "never",
            OptimizerKind::Sgd => "per-sample",
        }) {
        "never" => ResetPolicy::Never,
        "per-sample" => ResetPolicy::PerSample,
        other => {
            return Err(Error::ConfigParse {
                line: 0,
                message: format!("policy.reset_optimizer_state: expected never|per-sample, got {other:?}"),
            })
        }
    };
    let param_filter = match r.string("policy.param_filter").as_deref().unwrap_or("all") {
        "all" => ParamFilter::All,
        "attention-only" => ParamFilter::AttentionOnly,
        "layernorm-only" => ParamFilter::LayernormOnly,
        other => {
            return Err(Error::ConfigParse {
                line: 0,
                message: format!(
                    "policy.param_filter: expected all|attention-only|layernorm-only, got {other:?}"
                ),
            })
        }
    };
    let capture_layer = match r.string("policy.capture_layer").as_deref() {
        None | Some("final") => None,
        Some(text) => Some(text.parse().map_err(|_| Error::ConfigParse {
            line: 0,
            message: format!("policy.capture_layer: expected `final` or an index, got {text:?}"),
        })?),
    };
    let policy = AdaptationPolicy {
        optimizer,
        reset_model_params: r.parse("policy.reset_model_params", true)?,
        reset_optimizer_state,
        steps_per_sample: r.parse("policy.steps_per_sample", 1)?,
        param_filter,
        pooled_loss: r.parse("policy.pooled_loss", false)?,
        capture_layer,
    };
    policy.validate()?;

    let corruption_names: Vec<String> = match r.string("corruptions.names").as_deref() {
        None | Some("all") => CORRUPTION_NAMES.iter().map(|s| s.to_string()).collect(),
        Some(list) => {
            let mut names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
            names.sort();
            for name in &names {
                if !CORRUPTION_NAMES.contains(&name.as_str()) {
                    return Err(Error::UnknownCorruption {
                        name: name.clone(),
                        registry: CORRUPTION_NAMES.iter().map(|s| s.to_string()).collect(),
                    });
                }
            }
            names
        }
    };
    let severities: Vec<u8> = match raw.get("corruptions.severities") {
        None => vec![1, 2, 3, 4, 5],
        Some(list) => {
            let mut out = Vec::new();
            for item in list.split(',') {
                let s: u8 = item.trim().parse().map_err(|_| Error::ConfigParse {
                    line: 0,
                    message: format!("corruptions.severities: bad severity {item:?}"),
                })?;
                if !(1..=crate::data::SEVERITY_LEVELS).contains(&s) {
                    return Err(Error::InvalidConfig {
                        field: "corruptions.severities",
                        message: format!("severity {s} outside 1..=5"),
                    });
                }
                out.push(s);
            }
            out.sort_unstable();
            out
        }
    };

    let search = SearchConfig {
        adam_lrs: r.list_f64("search.adam_lrs", &[1e-5, 1e-4, 1e-3])?,
        sgd_lrs: r.list_f64("search.sgd_lrs", &[1e-4, 1e-3, 1e-2])?,
        adam_resets: match r.string("search.adam_resets").as_deref() {
            None => vec![ResetPolicy::Never, ResetPolicy::PerSample],
            Some(list) => {
                let mut out = Vec::new();
                for item in list.split(',') {
                    out.push(match item.trim() {
                        "never" => ResetPolicy::Never,
                        "per-sample" => ResetPolicy::PerSample,
                        other => {
                            return Err(Error::ConfigParse {
                                line: 0,
                                message: format!("search.adam_resets: bad value {other:?}"),
                            })
                        }
                    });
                }
                out
            }
        },
    };

    let eval_on_search_split = match r.string("eval.split").as_deref().unwrap_or("eval") {
        "eval" => false,
        "search" => true,
        other => {
            return Err(Error::ConfigParse {
                line: 0,
                message: format!("eval.split: expected eval|search, got {other:?}"),
            })
        }
    };

    let entropy_source = match r.string("analysis.entropy_source").as_deref().unwrap_or("pre") {
        "pre" => EntropySource::Pre,
        "post" => EntropySource::Post,
        other => {
            return Err(Error::ConfigParse {
                line: 0,
                message: format!("analysis.entropy_source: expected pre|post, got {other:?}"),
            })
        }
    };
    let correctness_source = match r
        .string("analysis.correctness_source")
        .as_deref()
        .unwrap_or("baseline")
    {
        "baseline" => CorrectnessSource::Baseline,
        "adapted" => CorrectnessSource::Adapted,
        other => {
            return Err(Error::ConfigParse {
                line: 0,
                message: format!(
                    "analysis.correctness_source: expected baseline|adapted, got {other:?}"
                ),
            })
        }
    };
    let analysis = AnalysisConfig {
        num_bins: r.parse("analysis.num_bins", 20)?,
        entropy_source,
        correctness_source,
        sample_fraction: r.parse("analysis.sample_fraction", 0.1)?,
        tail_buckets: r.parse("analysis.tail_buckets", 40)?,
        tail_corruption: r.string("analysis.tail_corruption"),
        tail_severity: r.parse("analysis.tail_severity", 3)?,
        episodes_file: r.string("analysis.episodes_file").map(PathBuf::from),
    };

    Ok(HarnessConfig {
        model,
        data,
        train,
        policy,
        carry_across_corruptions: r.parse("policy.carry_across_corruptions", false)?,
        corruption_names,
        severities,
        order_seed: r.parse("stream.order_seed", 99)?,
        search,
        eval_on_search_split,
        analysis,
        out_dir: PathBuf::from(r.string("paths.out_dir").unwrap_or_else(|| "out".into())),
        checkpoint: r.string("paths.checkpoint").map(PathBuf::from),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    #[test]
    fn empty_config_yields_the_toy_defaults() {
        let cfg = harness_config(&RawConfig::default()).unwrap();
        let toy = VitConfig::toy(42);
        assert_eq!(cfg.model, toy);
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.batch_size, crate::harness::DEFAULT_TRAIN_BATCH);
        assert_eq!(cfg.policy.optimizer.kind, OptimizerKind::Adam);
        assert_eq!(cfg.policy.optimizer.lr, 1e-4);
        assert_eq!(cfg.policy.optimizer.beta1, 0.99);
        assert_eq!(cfg.policy.reset_optimizer_state, ResetPolicy::Never);
        assert_eq!(cfg.corruption_names.len(), CORRUPTION_NAMES.len());
        assert_eq!(cfg.severities, vec![1, 2, 3, 4, 5]);
        assert!(!cfg.carry_across_corruptions);
        assert_eq!(cfg.analysis.num_bins, 20);
    }

    #[test]
    fn parses_comments_values_and_overrides() {
        let text = "\
# experiment config
model.embed_dim = 64   # wider
policy.optimizer = sgd
policy.lr = 0.01
corruptions.names = contrast, gaussian_noise
corruptions.severities = 1,3,5
";
        let mut raw = RawConfig::parse(text).unwrap();
        raw.apply_overrides(&["model.embed_dim=16".to_string(), "train.epochs=2".to_string()])
            .unwrap();
        let cfg = harness_config(&raw).unwrap();
        assert_eq!(cfg.model.embed_dim, 16); // override wins
        assert_eq!(cfg.policy.optimizer.kind, OptimizerKind::Sgd);
        assert_eq!(cfg.policy.optimizer.lr, 0.01);
        assert_eq!(cfg.policy.reset_optimizer_state, ResetPolicy::PerSample);
        assert_eq!(cfg.corruption_names, vec!["contrast", "gaussian_noise"]);
        assert_eq!(cfg.severities, vec![1, 3, 5]);
        assert_eq!(cfg.train.epochs, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let raw = RawConfig::parse("model.embd_dim = 64").unwrap();
        match harness_config(&raw) {
            Err(Error::UnknownConfigKey { key }) => assert_eq!(key, "model.embd_dim"),
            other => panic!("expected UnknownConfigKey, got {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_and_values_error() {
        assert!(matches!(
            RawConfig::parse("model.embed_dim 64"),
            Err(Error::ConfigParse { line: 1, .. })
        ));
        let raw = RawConfig::parse("model.embed_dim = banana").unwrap();
        assert!(harness_config(&raw).is_err());
        let raw = RawConfig::parse("corruptions.names = fog").unwrap();
        assert!(matches!(
            harness_config(&raw),
            Err(Error::UnknownCorruption { .. })
        ));
        let raw = RawConfig::parse("corruptions.severities = 9").unwrap();
        assert!(harness_config(&raw).is_err());
        let raw = RawConfig::parse("policy.capture_layer = first").unwrap();
        assert!(harness_config(&raw).is_err());
    }

    #[test]
    fn model_constraints_are_validated() {
        let raw = RawConfig::parse("model.patch_size = 5").unwrap();
        assert!(matches!(
            harness_config(&raw),
            Err(Error::InvalidConfig { field: "patch_size", .. })
        ));
    }

    #[test]
    fn paths_and_capture_layer_parse() {
        let raw = RawConfig::parse(
            "paths.out_dir = results\npaths.checkpoint = m.ckpt\npolicy.capture_layer = 0\n",
        )
        .unwrap();
        let cfg = harness_config(&raw).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("results"));
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("m.ckpt"));
        assert_eq!(cfg.policy.capture_layer, Some(0));
        assert_eq!(cfg.episodes_path(), PathBuf::from("results/episodes.jsonl"));
    }
}
