//! Post-hoc analyses: entropy-vs-accuracy binning and the attention-weight
//! tail histogram. Both emit plot-ready CSV; rendering is out of scope.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::vit::VitModel;

/// One equal-frequency bin: entropy range, population, and accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub entropy_min: f64,
    pub entropy_max: f64,
    pub count: usize,
    /// Percent in [0, 100].
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedCurve {
    pub num_bins: usize,
    pub bins: Vec<BinStat>,
}

impl BinnedCurve {
    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,entropy_min,entropy_max,count,mean_accuracy_pct\n");
        for (i, b) in self.bins.iter().enumerate() {
            writeln!(
                out,
                "{},{:.12},{:.12},{},{:.6}",
                i, b.entropy_min, b.entropy_max, b.count, b.mean_accuracy
            )
            .expect("write to string");
        }
        out
    }
}

/// Sort `(entropy, correct)` points by entropy and split them into
/// equal-frequency bins (bin sizes differ by at most one; earlier bins take
/// the remainder). Mean accuracy is reported per bin.
pub fn entropy_accuracy_curve(points: &[(f64, bool)], num_bins: usize) -> Result<BinnedCurve> {
    if num_bins == 0 || num_bins > points.len() {
        return Err(Error::BinCount {
            bins: num_bins,
            records: points.len(),
        });
    }
    let mut sorted: Vec<(f64, bool)> = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let base = sorted.len() / num_bins;
    let remainder = sorted.len() % num_bins;
    let mut bins = Vec::with_capacity(num_bins);
    let mut start = 0;
    for i in 0..num_bins {
        let size = base + usize::from(i < remainder);
        let chunk = &sorted[start..start + size];
        let correct = chunk.iter().filter(|(_, c)| *c).count();
        bins.push(BinStat {
            entropy_min: chunk.first().map(|(e, _)| *e).unwrap_or(0.0),
            entropy_max: chunk.last().map(|(e, _)| *e).unwrap_or(0.0),
            count: size,
            mean_accuracy: 100.0 * correct as f64 / size as f64,
        });
        start += size;
    }
    Ok(BinnedCurve { num_bins, bins })
}

/// Log-spaced histogram of raw CLS→patch attention weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailHistogram {
    /// `bucket_edges[i]..bucket_edges[i+1]` bounds bucket i; edges are
    /// log-spaced from `lo` to 1.0. Values below `lo` land in bucket 0.
    pub bucket_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub sample_fraction: f64,
    pub samples_used: usize,
}

impl TailHistogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,weight_lo,weight_hi,count\n");
        for (i, &c) in self.counts.iter().enumerate() {
            writeln!(
                out,
                "{},{:.6e},{:.6e},{}",
                i,
                self.bucket_edges[i],
                self.bucket_edges[i + 1],
                c
            )
            .expect("write to string");
        }
        out
    }

    /// Count in the top decade [0.1, 1], a quick tail-existence probe.
    pub fn top_decade_count(&self) -> u64 {
        self.bucket_edges
            .iter()
            .zip(&self.counts)
            .filter(|(lo, _)| **lo >= 0.1 - 1e-15)
            .map(|(_, c)| *c)
            .sum()
    }
}

const TAIL_LO: f64 = 1e-10;

/// Collect the requested layer's raw CLS→patch attention weights over a
/// deterministic subsample of the stream (every k-th sample so that roughly
/// `sample_fraction` of it is visited) and bin them into `num_buckets`
/// log-spaced buckets. Counts conserve exactly: they sum to
/// heads × patches × samples_used.
pub fn attention_tail_histogram(
    model: &VitModel,
    samples: &[LabeledSample],
    layer: usize,
    sample_fraction: f64,
    num_buckets: usize,
) -> Result<TailHistogram> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::InvalidArgument {
            message: format!("sample fraction {sample_fraction} outside (0, 1]"),
        });
    }
    if num_buckets == 0 {
        return Err(Error::InvalidArgument {
            message: "at least one bucket required".into(),
        });
    }
    let t_r = model.config().num_special();
    let stride = (1.0 / sample_fraction).round().max(1.0) as usize;

    let edges: Vec<f64> = (0..=num_buckets)
        .map(|i| TAIL_LO * (1.0 / TAIL_LO).powf(i as f64 / num_buckets as f64))
        .collect();
    let scale = num_buckets as f64 / (1.0 / TAIL_LO).ln();

    let mut counts = vec![0u64; num_buckets];
    let mut samples_used = 0;
    for sample in samples.iter().step_by(stride) {
        samples_used += 1;
        let rows = model.cls_attention_rows(&sample.image, layer)?;
        for row in &rows {
            for &w in &row[t_r..] {
                let idx = if w <= TAIL_LO {
                    0
                } else {
                    (((w / TAIL_LO).ln() * scale) as usize).min(num_buckets - 1)
                };
                counts[idx] += 1;
            }
        }
    }
    let total = counts.iter().sum();
    Ok(TailHistogram {
        bucket_edges: edges,
        counts,
        total,
        sample_fraction,
        samples_used,
    })
}
