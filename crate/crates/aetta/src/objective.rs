//! The adaptation objective: CLS→patch attention entropy.
//!
//! From a layer's post-softmax attention, take each head's CLS query row,
//! drop the special-token columns (CLS + registers), L1-renormalize the
//! retained patch mass into a probability distribution, and compute the
//! Shannon entropy per head in nats. The loss is the mean entropy across
//! heads. A pooled variant (average the head distributions first, then take
//! one entropy) is provided as an ablation only.
//!
//! Entropy terms use `p · ln(max(p, LOG_FLOOR))`, so zero attention mass
//! contributes exactly zero and the gradient stays bounded; entries at or
//! below the floor contribute within 3e-11 of zero. Both the plain functions
//! here and the graph builders compute the same expressions in the same
//! order, so loss values agree bit-for-bit between the two routes.

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, LOG_FLOOR};
use crate::kernels::log_floored;
use crate::vit::AttentionTensor;

/// Minimum CLS mass on patch tokens; anything below is treated as a
/// pathological collapse onto the special tokens.
pub const MIN_RETAINED_MASS: f64 = 1e-12;

/// Renormalized CLS→patch attention rows, one probability row per head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsAttentionDistribution {
    pub heads: usize,
    pub patches: usize,
    rows: Vec<f64>,
}

impl ClsAttentionDistribution {
    pub fn from_rows(heads: usize, patches: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != heads * patches {
            return Err(Error::InvalidArgument {
                message: format!(
                    "expected {}×{} = {} entries, got {}",
                    heads,
                    patches,
                    heads * patches,
                    rows.len()
                ),
            });
        }
        Ok(ClsAttentionDistribution {
            heads,
            patches,
            rows,
        })
    }

    pub fn row(&self, head: usize) -> &[f64] {
        &self.rows[head * self.patches..(head + 1) * self.patches]
    }
}

/// Per-head entropies and their mean (the loss value), in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadEntropies {
    pub per_head: Vec<f64>,
    pub mean: f64,
}

/// Take the CLS row of each head, drop the first `t_r` (special-token)
/// columns, and renormalize the retained patch mass to sum to one.
pub fn extract_cls_to_patch(att: &AttentionTensor, t_r: usize) -> Result<ClsAttentionDistribution> {
    if t_r == 0 || t_r >= att.tokens {
        return Err(Error::InvalidArgument {
            message: format!(
                "special token count {t_r} must be in 1..{} (CLS is always special)",
                att.tokens
            ),
        });
    }
    let cls_rows: Vec<&[f64]> = (0..att.heads).map(|h| att.row(h, 0)).collect();
    extract_from_cls_rows(&cls_rows, t_r)
}

/// Same as [`extract_cls_to_patch`] but starting from already-sliced CLS
/// rows (one length-T row per head).
pub fn extract_from_cls_rows(cls_rows: &[&[f64]], t_r: usize) -> Result<ClsAttentionDistribution> {
    let heads = cls_rows.len();
    let tokens = cls_rows[0].len();
    if t_r == 0 || t_r >= tokens {
        return Err(Error::InvalidArgument {
            message: format!("special token count {t_r} must be in 1..{tokens}"),
        });
    }
    let patches = tokens - t_r;
    let mut rows = Vec::with_capacity(heads * patches);
    for (head, row) in cls_rows.iter().enumerate() {
        let retained = &row[t_r..];
        let mass: f64 = retained.iter().sum();
        if mass < MIN_RETAINED_MASS {
            return Err(Error::DegenerateAttention {
                head,
                retained_mass: mass,
            });
        }
        rows.extend(retained.iter().map(|&a| a / mass));
    }
    ClsAttentionDistribution::from_rows(heads, patches, rows)
}

/// Entropy of one probability row: −Σ p·ln(max(p, LOG_FLOOR)).
/// Mirrors the graph composition mul → log → sum → negate exactly.
pub fn entropy_of(row: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in row {
        s += p * log_floored(p, LOG_FLOOR);
    }
    // Mirrors the graph's scalar_mul(sum, -1.0) bit-for-bit.
    #[allow(clippy::neg_multiply)]
    {
        s * -1.0
    }
}

/// Per-head entropies plus their mean; the mean is the default loss.
pub fn entropy_loss(dist: &ClsAttentionDistribution) -> HeadEntropies {
    let per_head: Vec<f64> = (0..dist.heads).map(|h| entropy_of(dist.row(h))).collect();
    // Mirror the graph's add-chain followed by scalar_mul(1/H).
    let mut acc = per_head[0];
    for &e in &per_head[1..] {
        acc += e;
    }
    let mean = acc * (1.0 / dist.heads as f64);
    HeadEntropies { per_head, mean }
}

/// Ablation: average the head distributions into one row, then take a
/// single entropy. By concavity this is ≥ the per-head mean.
pub fn pooled_entropy_loss(dist: &ClsAttentionDistribution) -> f64 {
    let h = dist.heads;
    let p = dist.patches;
    let mut pooled = dist.row(0).to_vec();
    for head in 1..h {
        let row = dist.row(head);
        for j in 0..p {
            pooled[j] += row[j];
        }
    }
    let inv = 1.0 / h as f64;
    for v in &mut pooled {
        *v *= inv;
    }
    entropy_of(&pooled)
}

/// Differentiable loss nodes built on an existing forward graph.
pub struct LossGraph {
    /// Scalar loss root.
    pub loss: Tensor,
    /// Per-head entropy nodes (scalars). For the pooled variant this holds
    /// the single pooled entropy.
    pub per_head: Vec<Tensor>,
    /// Renormalized distribution nodes, one [1, P] row per head.
    pub distributions: Vec<Tensor>,
}

impl LossGraph {
    pub fn loss_value(&self, g: &Graph) -> f64 {
        g.scalar_value(self.loss)
    }

    pub fn head_entropy_values(&self, g: &Graph) -> Vec<f64> {
        self.per_head.iter().map(|&t| g.scalar_value(t)).collect()
    }
}

/// Build the differentiable mean-entropy loss (or the pooled ablation) from
/// the captured per-head attention nodes of a forward graph.
///
/// `attention_heads` are [T, T] post-softmax nodes; `t_r` is the special
/// token count. Degenerate CLS mass (< [`MIN_RETAINED_MASS`] on patches)
/// errors out before any backward runs.
pub fn build_entropy_loss(
    g: &mut Graph,
    attention_heads: &[Tensor],
    t_r: usize,
    pooled: bool,
) -> Result<LossGraph> {
    if attention_heads.is_empty() {
        return Err(Error::InvalidArgument {
            message: "no attention heads captured".into(),
        });
    }
    let tokens = g.shape(attention_heads[0])[1];
    if t_r == 0 || t_r >= tokens {
        return Err(Error::InvalidArgument {
            message: format!("special token count {t_r} must be in 1..{tokens}"),
        });
    }
    let patches = tokens - t_r;

    let mut distributions = Vec::with_capacity(attention_heads.len());
    for (head, &attn) in attention_heads.iter().enumerate() {
        let cls_row = g.slice_rows(attn, 0, 1)?;
        let retained = g.slice_cols(cls_row, t_r, patches)?;
        let mass = g.sum_all(retained)?;
        let mass_value = g.scalar_value(mass);
        if mass_value < MIN_RETAINED_MASS {
            return Err(Error::DegenerateAttention {
                head,
                retained_mass: mass_value,
            });
        }
        distributions.push(g.div_scalar(retained, mass)?);
    }

    let entropy_node = |g: &mut Graph, dist: Tensor| -> Result<Tensor> {
        let lg = g.log(dist)?;
        let prod = g.mul(dist, lg)?;
        let s = g.sum_all(prod)?;
        g.scalar_mul(s, -1.0)
    };

    if pooled {
        let heads = distributions.len();
        let mut acc = distributions[0];
        for &d in &distributions[1..] {
            acc = g.add(acc, d)?;
        }
        let pooled_row = g.scalar_mul(acc, 1.0 / heads as f64)?;
        let ent = entropy_node(g, pooled_row)?;
        Ok(LossGraph {
            loss: ent,
            per_head: vec![ent],
            distributions,
        })
    } else {
        let mut per_head = Vec::with_capacity(distributions.len());
        for &d in &distributions {
            per_head.push(entropy_node(g, d)?);
        }
        let mut acc = per_head[0];
        for &e in &per_head[1..] {
            acc = g.add(acc, e)?;
        }
        let loss = g.scalar_mul(acc, 1.0 / per_head.len() as f64)?;
        Ok(LossGraph {
            loss,
            per_head,
            distributions,
        })
    }
}

/// Training regularizer: −(weight/H)·Σ_h ln(Σ_patch A_{h,cls,j}).
///
/// Zero when the CLS token keeps all its mass on patch tokens, growing as
/// mass drains onto the special tokens. A small weight keeps the trained
/// model inside the regime where the CLS→patch distribution (and with it
/// the adaptation objective) stays well defined; otherwise a sharply
/// trained toy model can push patch mass below the degenerate-attention
/// threshold for a sizable fraction of inputs.
pub fn patch_mass_penalty(
    g: &mut Graph,
    attention_heads: &[Tensor],
    t_r: usize,
    weight: f64,
) -> Result<Tensor> {
    if attention_heads.is_empty() {
        return Err(Error::InvalidArgument {
            message: "no attention heads captured".into(),
        });
    }
    let tokens = g.shape(attention_heads[0])[1];
    if t_r == 0 || t_r >= tokens {
        return Err(Error::InvalidArgument {
            message: format!("special token count {t_r} must be in 1..{tokens}"),
        });
    }
    let patches = tokens - t_r;
    let mut acc: Option<Tensor> = None;
    for &attn in attention_heads {
        let cls_row = g.slice_rows(attn, 0, 1)?;
        let retained = g.slice_cols(cls_row, t_r, patches)?;
        let mass = g.sum_all(retained)?;
        let log_mass = g.log(mass)?;
        acc = Some(match acc {
            None => log_mass,
            Some(prev) => g.add(prev, log_mass)?,
        });
    }
    g.scalar_mul(acc.expect("at least one head"), -weight / attention_heads.len() as f64)
}

/// Cross-entropy of a [1, C] logits node against a class index, built as
/// −log softmax(logits)[label]. Used for clean training.
pub fn cross_entropy_loss(g: &mut Graph, logits: Tensor, label: usize) -> Result<Tensor> {
    let classes = g.shape(logits)[1];
    if label >= classes {
        return Err(Error::InvalidArgument {
            message: format!("label {label} out of range for {classes} classes"),
        });
    }
    let probs = g.softmax_lastdim(logits)?;
    let logp = g.log(probs)?;
    let picked = g.slice_cols(logp, label, 1)?;
    let s = g.sum_all(picked)?;
    g.scalar_mul(s, -1.0)
}

/// Fast scalar loss evaluation: straight-line early-exit forward to the
/// requested layer's CLS attention, then the plain entropy math. Matches
/// the graph-built loss bit-for-bit.
pub fn entropy_loss_value(
    model: &crate::vit::VitModel,
    image: &crate::image::Image,
    layer: usize,
    pooled: bool,
) -> Result<f64> {
    let rows = model.cls_attention_rows(image, layer)?;
    let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let dist = extract_from_cls_rows(&row_refs, model.config().num_special())?;
    Ok(if pooled {
        pooled_entropy_loss(&dist)
    } else {
        entropy_loss(&dist).mean
    })
}
