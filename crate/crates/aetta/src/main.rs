//! CLI for the adaptation harness.
//!
//! Verbs: `train`, `search`, `adapt-eval`, `analyze-entropy`, `analyze-tail`.
//! Each takes `--config <file>` plus `key=value` overrides; see the README
//! for the config schema. Errors are written to stderr as one JSON object
//! and exit nonzero.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use aetta::config::{harness_config, HarnessConfig, RawConfig};
use aetta::data::{
    generate_dataset, make_stream, CorruptionSpec, LabeledSample, SampleStream, Split,
    StreamSource,
};
use aetta::error::{Error, Result};
use aetta::harness;
use aetta::vit::VitModel;

const USAGE: &str = "usage: aetta <train|search|adapt-eval|analyze-entropy|analyze-tail> \
[--config <file>] [key=value ...]";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (verb, config) = match parse_args(&args) {
        Ok(parsed) => parsed,
        Err(message) => {
            eprintln!("{{\"error\":\"usage\",\"message\":{}}}", json_string(&message));
            eprintln!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    let result = match verb.as_str() {
        "train" => cmd_train(&config),
        "search" => cmd_search(&config),
        "adapt-eval" => cmd_adapt_eval(&config),
        "analyze-entropy" => cmd_analyze_entropy(&config),
        "analyze-tail" => cmd_analyze_tail(&config),
        other => {
            eprintln!(
                "{{\"error\":\"usage\",\"message\":{}}}",
                json_string(&format!("unknown command {other:?}"))
            );
            eprintln!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{{\"error\":{},\"message\":{}}}",
                json_string(e.kind()),
                json_string(&e.to_string())
            );
            ExitCode::from(1)
        }
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).unwrap_or_else(|_| "\"<unprintable>\"".into())
}

fn parse_args(args: &[String]) -> std::result::Result<(String, HarnessConfig), String> {
    let mut verb = None;
    let mut config_path: Option<String> = None;
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--config" || arg == "-c" {
            i += 1;
            config_path = Some(
                args.get(i)
                    .ok_or_else(|| format!("{arg} requires a path"))?
                    .clone(),
            );
        } else if arg.starts_with('-') {
            return Err(format!("unknown flag {arg:?}"));
        } else if verb.is_none() {
            verb = Some(arg.clone());
        } else if arg.contains('=') {
            overrides.push(arg.clone());
        } else {
            return Err(format!("unexpected argument {arg:?}"));
        }
        i += 1;
    }
    let verb = verb.ok_or_else(|| "missing command".to_string())?;
    let mut raw = match config_path {
        Some(path) => RawConfig::load(&path).map_err(|e| e.to_string())?,
        None => RawConfig::default(),
    };
    raw.apply_overrides(&overrides).map_err(|e| e.to_string())?;
    let config = harness_config(&raw).map_err(|e| e.to_string())?;
    Ok((verb, config))
}

fn ensure_out_dir(cfg: &HarnessConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(format!("creating {}", cfg.out_dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    write_text(path, &json)
}

fn eval_dataset(cfg: &HarnessConfig) -> Result<Vec<LabeledSample>> {
    match &cfg.data.import_dir {
        Some(dir) => aetta::data::import_dataset(dir),
        None => Ok(generate_dataset(
            cfg.model.num_classes,
            cfg.data.eval_samples_per_class,
            cfg.model.image_size,
            cfg.data.eval_seed,
        )),
    }
}

fn corruption_streams(
    cfg: &HarnessConfig,
    dataset: &[LabeledSample],
    split: Split,
    include_clean: bool,
) -> Result<Vec<SampleStream>> {
    let mut streams = Vec::new();
    for name in &cfg.corruption_names {
        for &severity in &cfg.severities {
            let spec = CorruptionSpec::new(name.clone(), severity, cfg.data.eval_seed);
            streams.push(make_stream(
                dataset,
                &StreamSource::Corrupted(spec),
                split,
                cfg.order_seed,
            )?);
        }
    }
    if include_clean {
        streams.push(make_stream(
            dataset,
            &StreamSource::Clean,
            split,
            cfg.order_seed,
        )?);
    }
    Ok(streams)
}

fn cmd_train(cfg: &HarnessConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let dataset = generate_dataset(
        cfg.model.num_classes,
        cfg.data.samples_per_class,
        cfg.model.image_size,
        cfg.data.seed,
    );
    // Labels cycle through the classes, so a tail holdout stays balanced.
    let holdout_len =
        ((dataset.len() as f64 * cfg.data.holdout_fraction).round() as usize).max(1);
    let cut = dataset.len() - holdout_len;
    let (train, holdout) = dataset.split_at(cut);
    println!(
        "training on {} samples ({} held out) for {} epochs, lr {}",
        train.len(),
        holdout.len(),
        cfg.train.epochs,
        cfg.train.lr
    );
    let outcome = harness::train_clean(&cfg.model, train, holdout, &cfg.train)?;
    let ckpt = cfg.checkpoint_path();
    outcome.model.save_checkpoint(&ckpt)?;
    write_json(&cfg.out_dir.join("train_log.json"), &outcome.log)?;
    for stat in &outcome.log.epochs {
        println!("epoch {:>3}  mean loss {:.6}", stat.epoch, stat.mean_loss);
    }
    println!(
        "holdout accuracy {:.2}%  diverged: {}  checkpoint: {}",
        outcome.log.holdout_accuracy,
        outcome.log.diverged,
        ckpt.display()
    );
    Ok(())
}

fn cmd_search(cfg: &HarnessConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let model = VitModel::load_checkpoint(cfg.checkpoint_path())?;
    let dataset = eval_dataset(cfg)?;
    let streams = corruption_streams(cfg, &dataset, Split::Search, false)?;

    let mut grid = Vec::new();
    for &lr in &cfg.search.adam_lrs {
        for &reset in &cfg.search.adam_resets {
            let mut policy = aetta::AdaptationPolicy::adam_carried(lr);
            policy.reset_optimizer_state = reset;
            grid.push(policy);
        }
    }
    for &lr in &cfg.search.sgd_lrs {
        grid.push(aetta::AdaptationPolicy::sgd_episodic(lr));
    }

    println!(
        "searching {} policies over {} search streams",
        grid.len(),
        streams.len()
    );
    let outcome =
        harness::hyperparameter_search(&model, &streams, &grid, cfg.carry_across_corruptions)?;
    write_json(&cfg.out_dir.join("search_results.json"), &outcome)?;
    for (family, policy) in &outcome.best {
        let score = outcome
            .results
            .iter()
            .find(|r| &r.policy == policy)
            .map(|r| r.mean_corruption_accuracy)
            .unwrap_or(0.0);
        println!(
            "best {family}: lr {:.1e}, reset {:?} -> search mCA {score:.2}%",
            policy.optimizer.lr, policy.reset_optimizer_state
        );
    }
    Ok(())
}

fn cmd_adapt_eval(cfg: &HarnessConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let model = VitModel::load_checkpoint(cfg.checkpoint_path())?;
    let dataset = eval_dataset(cfg)?;
    let split = if cfg.eval_on_search_split {
        Split::Search
    } else {
        Split::Eval
    };
    let streams = corruption_streams(cfg, &dataset, split, true)?;
    println!(
        "evaluating {} streams ({} corruption x {} severities + clean)",
        streams.len(),
        cfg.corruption_names.len(),
        cfg.severities.len()
    );
    let mut seeds = BTreeMap::new();
    seeds.insert("model".to_string(), cfg.model.seed);
    seeds.insert("eval_data".to_string(), cfg.data.eval_seed);
    seeds.insert("order".to_string(), cfg.order_seed);
    let out = harness::evaluate(
        &model,
        &cfg.policy,
        &streams,
        cfg.carry_across_corruptions,
        seeds,
    )?;
    write_json(&cfg.out_dir.join("report.json"), &out.report)?;
    write_text(
        &cfg.out_dir.join("per_corruption.csv"),
        &out.report.per_corruption_csv(),
    )?;
    harness::write_episodes_jsonl(cfg.episodes_path(), &out.episodes)?;

    for (name, tta) in &out.report.per_corruption_tta {
        let base = out.report.per_corruption_baseline[name];
        println!("{name:<18} baseline {base:6.2}%  tta {tta:6.2}%");
    }
    println!(
        "mCA baseline {:.2}%  tta {:.2}%",
        out.report.mean_corruption_accuracy_baseline, out.report.mean_corruption_accuracy_tta
    );
    if let (Some(cb), Some(ct)) = (
        out.report.clean_baseline_accuracy,
        out.report.clean_tta_accuracy,
    ) {
        println!("clean baseline {cb:.2}%  tta {ct:.2}%");
    }
    if !out.report.valid {
        println!(
            "WARNING: report flagged invalid, failure rate {:.3}%",
            100.0 * out.report.failure_rate
        );
    }
    Ok(())
}

fn cmd_analyze_entropy(cfg: &HarnessConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let rows = harness::read_episodes_jsonl(cfg.episodes_path())?;
    let points = harness::curve_points(
        &rows,
        cfg.analysis.entropy_source,
        cfg.analysis.correctness_source,
    );
    let curve = aetta::analysis::entropy_accuracy_curve(&points, cfg.analysis.num_bins)?;
    write_text(&cfg.out_dir.join("entropy_bins.csv"), &curve.to_csv())?;
    println!(
        "binned {} episodes into {} bins -> {}",
        points.len(),
        curve.num_bins,
        cfg.out_dir.join("entropy_bins.csv").display()
    );
    Ok(())
}

fn cmd_analyze_tail(cfg: &HarnessConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let model = VitModel::load_checkpoint(cfg.checkpoint_path())?;
    let dataset = eval_dataset(cfg)?;
    let source = match &cfg.analysis.tail_corruption {
        Some(name) => StreamSource::Corrupted(CorruptionSpec::new(
            name.clone(),
            cfg.analysis.tail_severity,
            cfg.data.eval_seed,
        )),
        None => StreamSource::Clean,
    };
    let stream = make_stream(&dataset, &source, Split::Eval, cfg.order_seed)?;
    let hist = aetta::analysis::attention_tail_histogram(
        &model,
        &stream.samples,
        model.config().final_layer(),
        cfg.analysis.sample_fraction,
        cfg.analysis.tail_buckets,
    )?;
    write_text(&cfg.out_dir.join("tail_hist.csv"), &hist.to_csv())?;
    println!(
        "histogrammed {} weights over {} samples; top-decade count {}",
        hist.total,
        hist.samples_used,
        hist.top_decade_count()
    );
    Ok(())
}
