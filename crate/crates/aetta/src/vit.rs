//! Desk-scale vision transformer classifier exposing post-softmax attention.
//!
//! Token layout is a frozen contract:
//!   index 0            is the CLS token (feeds the classification head),
//!   indices 1..t_r-1   are register tokens (t_r = 1 + num_register_tokens),
//!   indices t_r..T-1   are patch tokens, row-major over the patch grid.
//!
//! Patch features are flattened channel-major: feature index
//! `c * patch² + py * patch + px`. Learned positional embeddings are added to
//! patch tokens only; CLS and register tokens are themselves learned vectors.
//! Blocks are pre-norm: `x + attn(ln1(x))`, `x + mlp(ln2(x))`, with a final
//! layer norm before the CLS head. The MLP hidden width is `2 × embed_dim`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor};
use crate::image::Image;
use crate::kernels;
use crate::rng::Rng;
use crate::snapshot::{GradientMap, ParameterSnapshot};

/// MLP hidden width as a multiple of the embedding dimension.
const MLP_RATIO: usize = 2;

/// Init std for projection matrices. At this desk scale the usual 0.02 leaves
/// the CLS representation nearly input-independent (uniform attention plus
/// mean-canceling patch statistics) and optimization stalls at chance; 0.1
/// breaks the symmetry and trains reliably.
const WEIGHT_STD: f64 = 0.1;

/// Init std for tokens and positional embeddings (they enter the residual
/// stream directly).
const TOKEN_STD: f64 = 0.02;

const CHECKPOINT_MAGIC: &[u8; 8] = b"AETTACKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_register_tokens: usize,
    pub num_classes: usize,
    pub layernorm_eps: f64,
    pub seed: u64,
}

impl VitConfig {
    /// Default desk-scale architecture: big enough for nontrivial attention
    /// structure, small enough for exhaustive finite-difference checks.
    pub fn toy(seed: u64) -> Self {
        VitConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 32,
            num_heads: 4,
            num_layers: 2,
            num_register_tokens: 4,
            num_classes: 10,
            layernorm_eps: 1e-5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, message: String| Error::InvalidConfig { field, message };
        if self.image_size == 0 || self.patch_size == 0 {
            return Err(bad(
                "image_size/patch_size",
                "image and patch sizes must be positive".into(),
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(bad(
                "patch_size",
                format!(
                    "image size {} is not divisible by patch size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if self.channels == 0 {
            return Err(bad("channels", "channels must be positive".into()));
        }
        if self.embed_dim == 0 || self.num_heads == 0 {
            return Err(bad(
                "embed_dim/num_heads",
                "embedding dimension and head count must be positive".into(),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(bad(
                "num_heads",
                format!(
                    "embed dim {} is not divisible by {} heads",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if self.num_layers == 0 {
            return Err(bad("num_layers", "at least one layer required".into()));
        }
        if self.num_classes == 0 {
            return Err(bad("num_classes", "at least one class required".into()));
        }
        if self.layernorm_eps <= 0.0 {
            return Err(bad("layernorm_eps", "eps must be positive".into()));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch token count P.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Special token count t_r (CLS + registers).
    pub fn num_special(&self) -> usize {
        1 + self.num_register_tokens
    }

    /// Sequence length T = 1 (CLS) + registers + patches.
    pub fn tokens(&self) -> usize {
        self.num_special() + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        MLP_RATIO * self.embed_dim
    }

    pub fn final_layer(&self) -> usize {
        self.num_layers - 1
    }

    /// Flattened patch feature length.
    pub fn patch_features(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Classifier output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    /// Argmax of the logits; ties resolve to the lowest index.
    pub predicted_class: usize,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Prediction {
            logits,
            predicted_class: best,
        }
    }
}

/// Post-softmax attention weights of one layer, shape heads × tokens × tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTensor {
    pub layer: usize,
    pub heads: usize,
    pub tokens: usize,
    /// weights[(h * tokens + q) * tokens + k]
    pub weights: Vec<f64>,
}

impl AttentionTensor {
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.tokens + query) * self.tokens;
        &self.weights[start..start + self.tokens]
    }

    /// Check that every (head, query) row is a probability distribution:
    /// nonnegative, summing to 1 within 1e-10.
    pub fn validate(&self) -> Result<()> {
        for h in 0..self.heads {
            for q in 0..self.tokens {
                let row = self.row(h, q);
                let mut sum = 0.0;
                for &w in row {
                    if w < 0.0 {
                        return Err(Error::InvalidArgument {
                            message: format!("attention weight {w} < 0 at head {h}, query {q}"),
                        });
                    }
                    sum += w;
                }
                if (sum - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidArgument {
                        message: format!(
                            "attention row (head {h}, query {q}) sums to {sum}, not 1"
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// A graph-building forward pass: logits, the requested layer's attention
/// nodes (one [T, T] tensor per head), and the parameter leaves for
/// gradient extraction.
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: Tensor,
    /// Post-softmax attention of the requested layer, one node per head.
    pub attention_heads: Vec<Tensor>,
    pub layer: usize,
    pub heads: usize,
    pub tokens: usize,
    param_nodes: Vec<(String, Tensor)>,
}

impl ForwardPass {
    pub fn prediction(&self) -> Prediction {
        Prediction::from_logits(self.graph.values(self.logits).to_vec())
    }

    pub fn attention_tensor(&self) -> AttentionTensor {
        let mut weights = Vec::with_capacity(self.heads * self.tokens * self.tokens);
        for &t in &self.attention_heads {
            weights.extend_from_slice(self.graph.values(t));
        }
        AttentionTensor {
            layer: self.layer,
            heads: self.heads,
            tokens: self.tokens,
            weights,
        }
    }

    /// Run backward from `loss` and collect per-parameter gradients.
    /// Parameters the loss does not reach get exact zeros.
    pub fn backward_gradients(&mut self, loss: Tensor) -> Result<GradientMap> {
        self.graph.backward(loss)?;
        let mut map = GradientMap::new();
        for (name, node) in &self.param_nodes {
            map.insert(name.clone(), self.graph.grad_or_zeros(*node));
        }
        Ok(map)
    }
}

/// The toy vision transformer with named parameters.
#[derive(Debug, Clone)]
pub struct VitModel {
    config: VitConfig,
    params: Vec<Param>,
}

impl VitModel {
    /// Deterministic initialization from `config.seed`. The parameter list
    /// and its order are stable; see `parameter_names`.
    pub fn new(config: VitConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let d = config.embed_dim;
        let f = config.patch_features();
        let hidden = config.hidden_dim();
        let r = config.num_register_tokens;
        let n = config.num_patches();
        let c = config.num_classes;

        let mut params = Vec::new();
        let normal = |name: &str, shape: Vec<usize>, std: f64, rng: &mut Rng, p: &mut Vec<Param>| {
            let len: usize = shape.iter().product();
            let values = (0..len).map(|_| rng.normal() * std).collect();
            p.push(Param {
                name: name.to_string(),
                shape,
                values,
            });
        };
        let constant = |name: &str, shape: Vec<usize>, v: f64, p: &mut Vec<Param>| {
            let len: usize = shape.iter().product();
            p.push(Param {
                name: name.to_string(),
                shape,
                values: vec![v; len],
            });
        };

        normal("patch_embed.weight", vec![f, d], WEIGHT_STD, &mut rng, &mut params);
        constant("patch_embed.bias", vec![d], 0.0, &mut params);
        normal("cls_token", vec![1, d], TOKEN_STD, &mut rng, &mut params);
        if r > 0 {
            normal("register_tokens", vec![r, d], TOKEN_STD, &mut rng, &mut params);
        }
        normal("pos_embed", vec![n, d], TOKEN_STD, &mut rng, &mut params);
        for b in 0..config.num_layers {
            let pre = format!("blocks.{b}");
            constant(&format!("{pre}.ln1.gamma"), vec![d], 1.0, &mut params);
            constant(&format!("{pre}.ln1.beta"), vec![d], 0.0, &mut params);
            // No key bias: softmax scores are shift-invariant, so a key bias
            // is unidentifiable (its gradient is identically zero).
            normal(&format!("{pre}.attn.wq"), vec![d, d], WEIGHT_STD, &mut rng, &mut params);
            constant(&format!("{pre}.attn.bq"), vec![d], 0.0, &mut params);
            normal(&format!("{pre}.attn.wk"), vec![d, d], WEIGHT_STD, &mut rng, &mut params);
            normal(&format!("{pre}.attn.wv"), vec![d, d], WEIGHT_STD, &mut rng, &mut params);
            constant(&format!("{pre}.attn.bv"), vec![d], 0.0, &mut params);
            normal(&format!("{pre}.attn.wo"), vec![d, d], WEIGHT_STD, &mut rng, &mut params);
            constant(&format!("{pre}.attn.bo"), vec![d], 0.0, &mut params);
            constant(&format!("{pre}.ln2.gamma"), vec![d], 1.0, &mut params);
            constant(&format!("{pre}.ln2.beta"), vec![d], 0.0, &mut params);
            normal(&format!("{pre}.mlp.w1"), vec![d, hidden], WEIGHT_STD, &mut rng, &mut params);
            constant(&format!("{pre}.mlp.b1"), vec![hidden], 0.0, &mut params);
            normal(&format!("{pre}.mlp.w2"), vec![hidden, d], WEIGHT_STD, &mut rng, &mut params);
            constant(&format!("{pre}.mlp.b2"), vec![d], 0.0, &mut params);
        }
        constant("ln_final.gamma", vec![d], 1.0, &mut params);
        constant("ln_final.beta", vec![d], 0.0, &mut params);
        normal("head.weight", vec![d, c], WEIGHT_STD, &mut rng, &mut params);
        constant("head.bias", vec![c], 0.0, &mut params);

        Ok(VitModel { config, params })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn parameter_names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.values.as_slice())
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.values)
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        ParameterSnapshot::new(
            self.params
                .iter()
                .map(|p| (p.name.clone(), p.values.clone()))
                .collect(),
        )
    }

    /// Restore every parameter bit-exactly from `snap`. The snapshot must
    /// carry exactly this model's parameter names and lengths.
    pub fn restore(&mut self, snap: &ParameterSnapshot) -> Result<()> {
        self.snapshot().check_same_names(snap)?;
        for (name, values) in snap.entries() {
            let param = self
                .params
                .iter_mut()
                .find(|p| &p.name == name)
                .expect("name checked above");
            if param.values.len() != values.len() {
                return Err(Error::InvalidArgument {
                    message: format!(
                        "parameter {name}: model has {} values, snapshot has {}",
                        param.values.len(),
                        values.len()
                    ),
                });
            }
            param.values.copy_from_slice(values);
        }
        Ok(())
    }

    /// True when every parameter equals the snapshot bit-for-bit. Returns
    /// the first differing name otherwise.
    pub fn matches_snapshot(&self, snap: &ParameterSnapshot) -> std::result::Result<(), String> {
        for (name, values) in snap.entries() {
            match self.param(name) {
                None => return Err(name.clone()),
                Some(mine) => {
                    if mine.len() != values.len()
                        || mine
                            .iter()
                            .zip(values)
                            .any(|(a, b)| a.to_bits() != b.to_bits())
                    {
                        return Err(name.clone());
                    }
                }
            }
        }
        if self.params.len() != snap.len() {
            return Err("<parameter count>".to_string());
        }
        Ok(())
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        if image.channels != c.channels || image.height != c.image_size || image.width != c.image_size
        {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: vec![image.channels, image.height, image.width],
                rhs: vec![c.channels, c.image_size, c.image_size],
            });
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.num_layers {
            return Err(Error::InvalidArgument {
                message: format!(
                    "layer {layer} out of range; model has {} layers",
                    self.config.num_layers
                ),
            });
        }
        Ok(())
    }

    /// Flatten an image into the [num_patches, patch_features] matrix fed to
    /// the patch embedding.
    pub fn image_to_patches(&self, image: &Image) -> Vec<f64> {
        let c = &self.config;
        let p = c.patch_size;
        let grid = c.grid();
        let feat = c.patch_features();
        let mut out = vec![0.0; c.num_patches() * feat];
        for gy in 0..grid {
            for gx in 0..grid {
                let patch = gy * grid + gx;
                for ch in 0..c.channels {
                    for py in 0..p {
                        for px in 0..p {
                            let fidx = ch * p * p + py * p + px;
                            out[patch * feat + fidx] = image.get(ch, gy * p + py, gx * p + px);
                        }
                    }
                }
            }
        }
        out
    }

    /// Graph-building forward pass capturing the post-softmax attention of
    /// `layer`. Use this when gradients are needed.
    pub fn forward_graph(&self, image: &Image, layer: usize) -> Result<ForwardPass> {
        self.check_image(image)?;
        self.check_layer(layer)?;
        let c = &self.config;
        let (heads, dh) = (c.num_heads, c.head_dim());
        let t = c.tokens();
        let eps = c.layernorm_eps;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut g = Graph::new();
        let mut param_nodes: Vec<(String, Tensor)> = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let node = g.leaf(&p.shape, p.values.clone())?;
            param_nodes.push((p.name.clone(), node));
        }
        let node = |name: &str, nodes: &[(String, Tensor)]| -> Tensor {
            nodes
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| *t)
                .expect("parameter exists")
        };

        let patches = g.leaf(
            &[c.num_patches(), c.patch_features()],
            self.image_to_patches(image),
        )?;
        let emb = g.matmul(patches, node("patch_embed.weight", &param_nodes))?;
        let emb = g.add_row(emb, node("patch_embed.bias", &param_nodes))?;
        let patch_tokens = g.add(emb, node("pos_embed", &param_nodes))?;

        let mut rows = vec![node("cls_token", &param_nodes)];
        if c.num_register_tokens > 0 {
            rows.push(node("register_tokens", &param_nodes));
        }
        rows.push(patch_tokens);
        let mut x = g.concat_rows(&rows)?;

        let mut captured: Vec<Tensor> = Vec::new();
        for b in 0..c.num_layers {
            let pre = format!("blocks.{b}");
            let ln1 = g.layernorm(
                x,
                node(&format!("{pre}.ln1.gamma"), &param_nodes),
                node(&format!("{pre}.ln1.beta"), &param_nodes),
                eps,
            )?;
            let q = g.matmul(ln1, node(&format!("{pre}.attn.wq"), &param_nodes))?;
            let q = g.add_row(q, node(&format!("{pre}.attn.bq"), &param_nodes))?;
            let k = g.matmul(ln1, node(&format!("{pre}.attn.wk"), &param_nodes))?;
            let v = g.matmul(ln1, node(&format!("{pre}.attn.wv"), &param_nodes))?;
            let v = g.add_row(v, node(&format!("{pre}.attn.bv"), &param_nodes))?;

            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scaled = g.scalar_mul(scores, scale)?;
                let attn = g.softmax_lastdim(scaled)?;
                if b == layer {
                    captured.push(attn);
                }
                head_outs.push(g.matmul(attn, vh)?);
            }
            let cat = g.concat_cols(&head_outs)?;
            let proj = g.matmul(cat, node(&format!("{pre}.attn.wo"), &param_nodes))?;
            let proj = g.add_row(proj, node(&format!("{pre}.attn.bo"), &param_nodes))?;
            x = g.add(x, proj)?;

            let ln2 = g.layernorm(
                x,
                node(&format!("{pre}.ln2.gamma"), &param_nodes),
                node(&format!("{pre}.ln2.beta"), &param_nodes),
                eps,
            )?;
            let h1 = g.matmul(ln2, node(&format!("{pre}.mlp.w1"), &param_nodes))?;
            let h1 = g.add_row(h1, node(&format!("{pre}.mlp.b1"), &param_nodes))?;
            let h1 = g.gelu(h1)?;
            let h2 = g.matmul(h1, node(&format!("{pre}.mlp.w2"), &param_nodes))?;
            let h2 = g.add_row(h2, node(&format!("{pre}.mlp.b2"), &param_nodes))?;
            x = g.add(x, h2)?;
        }

        let xf = g.layernorm(
            x,
            node("ln_final.gamma", &param_nodes),
            node("ln_final.beta", &param_nodes),
            eps,
        )?;
        let cls = g.slice_rows(xf, 0, 1)?;
        let logits = g.matmul(cls, node("head.weight", &param_nodes))?;
        let logits = g.add_row(logits, node("head.bias", &param_nodes))?;

        Ok(ForwardPass {
            graph: g,
            logits,
            attention_heads: captured,
            layer,
            heads,
            tokens: t,
            param_nodes,
        })
    }

    /// Plain forward pass (no graph): prediction plus the requested layer's
    /// attention tensor. Bit-identical to `forward_graph` because both call
    /// the same kernels in the same order.
    pub fn forward(&self, image: &Image, layer: usize) -> Result<(Prediction, AttentionTensor)> {
        self.check_image(image)?;
        self.check_layer(layer)?;
        let out = self.plain_forward(image, layer, false)?;
        Ok((
            Prediction::from_logits(out.logits.expect("full forward produces logits")),
            AttentionTensor {
                layer,
                heads: self.config.num_heads,
                tokens: self.config.tokens(),
                weights: out.attention.expect("attention captured"),
            },
        ))
    }

    /// Per-head CLS attention rows (length T) of `layer`, computed by a
    /// straight-line early-exit pass that stops after the requested layer's
    /// softmax. Used by the loss fast path and finite-difference oracles.
    pub fn cls_attention_rows(&self, image: &Image, layer: usize) -> Result<Vec<Vec<f64>>> {
        self.check_image(image)?;
        self.check_layer(layer)?;
        let out = self.plain_forward(image, layer, true)?;
        Ok(out.cls_rows.expect("early-exit pass produces CLS rows"))
    }

    fn plain_forward(&self, image: &Image, layer: usize, early_exit: bool) -> Result<PlainOut> {
        let c = &self.config;
        let (d, heads, dh) = (c.embed_dim, c.num_heads, c.head_dim());
        let t = c.tokens();
        let eps = c.layernorm_eps;
        let scale = 1.0 / (dh as f64).sqrt();
        let p = |name: &str| self.param(name).expect("parameter exists");

        let patches = self.image_to_patches(image);
        let emb = kernels::matmul(
            &patches,
            c.num_patches(),
            c.patch_features(),
            p("patch_embed.weight"),
            d,
        );
        let bias = p("patch_embed.bias");
        let pos = p("pos_embed");
        let mut x = Vec::with_capacity(t * d);
        x.extend_from_slice(p("cls_token"));
        if c.num_register_tokens > 0 {
            x.extend_from_slice(p("register_tokens"));
        }
        let base = x.len();
        x.resize(t * d, 0.0);
        for r in 0..c.num_patches() {
            for j in 0..d {
                // add_row bias then elementwise pos, same formula as the graph path
                x[base + r * d + j] = (emb[r * d + j] + bias[j]) + pos[r * d + j];
            }
        }

        let mut attention: Option<Vec<f64>> = None;
        let mut cls_rows: Option<Vec<Vec<f64>>> = None;

        for b in 0..c.num_layers {
            let pre = format!("blocks.{b}");
            let ln1 = kernels::layernorm_rows(
                &x,
                t,
                d,
                p(&format!("{pre}.ln1.gamma")),
                p(&format!("{pre}.ln1.beta")),
                eps,
            );
            let stop_here = early_exit && b == layer;

            let k = kernels::matmul(&ln1, t, d, p(&format!("{pre}.attn.wk")), d);
            let q = if stop_here {
                // Only the CLS query row is needed for the attention loss.
                add_row(
                    kernels::matmul(&ln1[0..d], 1, d, p(&format!("{pre}.attn.wq")), d),
                    p(&format!("{pre}.attn.bq")),
                )
            } else {
                add_row(
                    kernels::matmul(&ln1, t, d, p(&format!("{pre}.attn.wq")), d),
                    p(&format!("{pre}.attn.bq")),
                )
            };

            if stop_here {
                let mut rows = Vec::with_capacity(heads);
                for h in 0..heads {
                    let mut scores = vec![0.0; t];
                    for j in 0..t {
                        let mut acc = 0.0;
                        for e in 0..dh {
                            acc += q[h * dh + e] * k[j * d + h * dh + e];
                        }
                        scores[j] = acc * scale;
                    }
                    rows.push(kernels::softmax_rows(&scores, 1, t));
                }
                cls_rows = Some(rows);
                return Ok(PlainOut {
                    logits: None,
                    attention: None,
                    cls_rows,
                });
            }

            let v = add_row(
                kernels::matmul(&ln1, t, d, p(&format!("{pre}.attn.wv")), d),
                p(&format!("{pre}.attn.bv")),
            );

            let mut cat = vec![0.0; t * d];
            for h in 0..heads {
                let qh = slice_cols(&q, t, d, h * dh, dh);
                let kh = slice_cols(&k, t, d, h * dh, dh);
                let vh = slice_cols(&v, t, d, h * dh, dh);
                let kt = kernels::transpose(&kh, t, dh);
                let scores = kernels::matmul(&qh, t, dh, &kt, t);
                let scaled: Vec<f64> = scores.iter().map(|&s| s * scale).collect();
                let attn = kernels::softmax_rows(&scaled, t, t);
                if b == layer {
                    attention
                        .get_or_insert_with(|| Vec::with_capacity(heads * t * t))
                        .extend_from_slice(&attn);
                }
                let oh = kernels::matmul(&attn, t, t, &vh, dh);
                for r in 0..t {
                    cat[r * d + h * dh..r * d + (h + 1) * dh]
                        .copy_from_slice(&oh[r * dh..(r + 1) * dh]);
                }
            }
            let proj = add_row(
                kernels::matmul(&cat, t, d, p(&format!("{pre}.attn.wo")), d),
                p(&format!("{pre}.attn.bo")),
            );
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }

            let ln2 = kernels::layernorm_rows(
                &x,
                t,
                d,
                p(&format!("{pre}.ln2.gamma")),
                p(&format!("{pre}.ln2.beta")),
                eps,
            );
            let hidden = c.hidden_dim();
            let h1 = add_row(
                kernels::matmul(&ln2, t, d, p(&format!("{pre}.mlp.w1")), hidden),
                p(&format!("{pre}.mlp.b1")),
            );
            let h1: Vec<f64> = h1.iter().map(|&v| kernels::gelu(v)).collect();
            let h2 = add_row(
                kernels::matmul(&h1, t, hidden, p(&format!("{pre}.mlp.w2")), d),
                p(&format!("{pre}.mlp.b2")),
            );
            for (xi, hi) in x.iter_mut().zip(&h2) {
                *xi += hi;
            }
        }

        let xf = kernels::layernorm_rows(&x, t, d, p("ln_final.gamma"), p("ln_final.beta"), eps);
        let logits = add_row(
            kernels::matmul(&xf[0..d], 1, d, p("head.weight"), c.num_classes),
            p("head.bias"),
        );
        Ok(PlainOut {
            logits: Some(logits),
            attention,
            cls_rows,
        })
    }

    // ---- checkpoint I/O ----------------------------------------------------

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let io = |e| Error::io("writing checkpoint", e);
        file.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        file.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        let json = serde_json::to_vec(&self.config)?;
        file.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        file.write_all(&json).map_err(io)?;
        self.snapshot().write_to(&mut file)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {display}"), e))?;
        let io = |e| Error::io(format!("reading checkpoint {display}"), e);
        let bad = |message: String| Error::Format {
            path: display.clone(),
            message,
        };
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint (bad magic)".into()));
        }
        let mut v = [0u8; 4];
        file.read_exact(&mut v).map_err(io)?;
        let version = u32::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        file.read_exact(&mut len).map_err(io)?;
        let json_len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; json_len];
        file.read_exact(&mut json).map_err(io)?;
        let config: VitConfig = serde_json::from_slice(&json)?;
        config.validate()?;
        let snapshot = ParameterSnapshot::read_from(&mut file, &display)?;
        let mut model = VitModel::new(config)?;
        model.restore(&snapshot)?;
        Ok(model)
    }
}

struct PlainOut {
    logits: Option<Vec<f64>>,
    attention: Option<Vec<f64>>,
    cls_rows: Option<Vec<Vec<f64>>>,
}

fn add_row(mut m: Vec<f64>, bias: &[f64]) -> Vec<f64> {
    let cols = bias.len();
    for (i, v) in m.iter_mut().enumerate() {
        *v += bias[i % cols];
    }
    m
}

fn slice_cols(x: &[f64], rows: usize, cols: usize, start: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(seed: u64, config: &VitConfig) -> Image {
        let mut rng = Rng::new(seed);
        let mut img = Image::new(config.channels, config.image_size, config.image_size);
        for v in &mut img.data {
            *v = rng.uniform();
        }
        img
    }

    fn small_config(seed: u64) -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            num_heads: 2,
            num_layers: 2,
            num_register_tokens: 4,
            num_classes: 10,
            layernorm_eps: 1e-5,
            seed,
        }
    }

    #[test]
    fn token_arithmetic() {
        let c = small_config(0);
        assert_eq!(c.tokens(), 1 + 4 + 4);
        assert_eq!(c.num_patches(), 4);
        assert_eq!(c.num_special(), 5);

        let c2 = VitConfig {
            image_size: 16,
            num_register_tokens: 0,
            ..VitConfig::toy(0)
        };
        assert_eq!(c2.tokens(), 17);
        assert_eq!(c2.num_special(), 1);
        assert_eq!(c2.num_patches(), 16);
    }

    #[test]
    fn invalid_configs_name_the_constraint() {
        let mut c = VitConfig::toy(0);
        c.patch_size = 5;
        match VitModel::new(c) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "patch_size"),
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
        let mut c = VitConfig::toy(0);
        c.num_heads = 5;
        match VitModel::new(c) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "num_heads"),
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
        let mut c = VitConfig::toy(0);
        c.num_layers = 0;
        assert!(VitModel::new(c).is_err());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = VitModel::new(VitConfig::toy(9)).unwrap();
        let b = VitModel::new(VitConfig::toy(9)).unwrap();
        for name in a.parameter_names() {
            let (pa, pb) = (a.param(name).unwrap(), b.param(name).unwrap());
            assert!(pa.iter().zip(pb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = VitModel::new(VitConfig::toy(10)).unwrap();
        assert!(a
            .parameter_names()
            .iter()
            .any(|n| a.param(n).unwrap() != c.param(n).unwrap()));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let config = small_config(3);
        let model = VitModel::new(config.clone()).unwrap();
        let image = random_image(5, &config);
        for layer in 0..config.num_layers {
            let (_, att) = model.forward(&image, layer).unwrap();
            att.validate().unwrap();
            assert_eq!(att.layer, layer);
            assert_eq!(att.heads, config.num_heads);
            assert_eq!(att.tokens, config.tokens());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = small_config(3);
        let model = VitModel::new(config.clone()).unwrap();
        let image = random_image(6, &config);
        let (p1, a1) = model.forward(&image, 1).unwrap();
        let (p2, a2) = model.forward(&image, 1).unwrap();
        assert!(p1
            .logits
            .iter()
            .zip(&p2.logits)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(a1.weights, a2.weights);
    }

    #[test]
    fn graph_and_plain_forward_agree_bitwise() {
        let config = VitConfig::toy(11);
        let model = VitModel::new(config.clone()).unwrap();
        let image = random_image(12, &config);
        let layer = config.final_layer();
        let pass = model.forward_graph(&image, layer).unwrap();
        let graph_pred = pass.prediction();
        let graph_att = pass.attention_tensor();
        let (plain_pred, plain_att) = model.forward(&image, layer).unwrap();
        assert!(graph_pred
            .logits
            .iter()
            .zip(&plain_pred.logits)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(graph_pred.predicted_class, plain_pred.predicted_class);
        assert!(graph_att
            .weights
            .iter()
            .zip(&plain_att.weights)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn early_exit_cls_rows_match_full_attention() {
        let config = VitConfig::toy(13);
        let model = VitModel::new(config.clone()).unwrap();
        let image = random_image(14, &config);
        for layer in 0..config.num_layers {
            let (_, att) = model.forward(&image, layer).unwrap();
            let rows = model.cls_attention_rows(&image, layer).unwrap();
            for (h, row) in rows.iter().enumerate() {
                let full = att.row(h, 0);
                assert!(row.iter().zip(full).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn snapshot_restore_roundtrip_is_identity() {
        let config = small_config(4);
        let mut model = VitModel::new(config).unwrap();
        let snap = model.snapshot();
        for name in snap.names().map(|s| s.to_string()).collect::<Vec<_>>() {
            for v in model.param_mut(&name).unwrap() {
                *v += 1e-3;
            }
        }
        assert!(model.matches_snapshot(&snap).is_err());
        model.restore(&snap).unwrap();
        model.matches_snapshot(&snap).unwrap();
    }

    #[test]
    fn restore_onto_mismatched_architecture_errors() {
        let mut deep = VitModel::new(VitConfig {
            num_layers: 2,
            ..small_config(0)
        })
        .unwrap();
        let shallow = VitModel::new(VitConfig {
            num_layers: 1,
            ..small_config(0)
        })
        .unwrap();
        match deep.restore(&shallow.snapshot()) {
            Err(Error::NameSetMismatch { extra, .. }) => {
                assert!(extra.iter().any(|n| n.starts_with("blocks.1.")));
            }
            other => panic!("expected NameSetMismatch, got {other:?}"),
        }

        // Same names, different sizes.
        let wide = VitModel::new(VitConfig {
            embed_dim: 32,
            ..small_config(0)
        })
        .unwrap();
        let mut narrow = VitModel::new(small_config(0)).unwrap();
        assert!(narrow.restore(&wide.snapshot()).is_err());
    }

    #[test]
    fn forward_shape_and_layer_errors() {
        let config = small_config(0);
        let model = VitModel::new(config.clone()).unwrap();
        let bad = Image::new(3, 4, 4);
        assert!(matches!(
            model.forward(&bad, 0),
            Err(Error::ShapeMismatch { op: "forward", .. })
        ));
        let image = random_image(1, &config);
        assert!(model.forward(&image, config.num_layers).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join(format!("aetta-vit-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");

        let config = small_config(21);
        let model = VitModel::new(config.clone()).unwrap();
        model.save_checkpoint(&path).unwrap();
        let loaded = VitModel::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        loaded.matches_snapshot(&model.snapshot()).unwrap();

        let image = random_image(2, &config);
        let (p1, _) = model.forward(&image, 0).unwrap();
        let (p2, _) = loaded.forward(&image, 0).unwrap();
        assert!(p1
            .logits
            .iter()
            .zip(&p2.logits)
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        // Corrupted magic rejected.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            VitModel::load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let p = Prediction::from_logits(vec![1.0, 3.0, 3.0, -1.0]);
        assert_eq!(p.predicted_class, 1);
    }
}
