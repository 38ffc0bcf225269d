//! Transformer detection pipeline: multi-scale patch tokens, fixed 2-D
//! sinusoidal position encodings, encoder/decoder with learned object queries,
//! and class/box heads. Decoding is a confidence cut with no suppression of
//! overlapping boxes; duplicate removal is the no-object head's job.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::boxes::BoxCS;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SplitMix64;
use crate::tensor::{softmax_slice, Tensor};

const LN_EPS: f64 = 1e-9;
// Constant pre-sigmoid offset on the box width/height channels. Boxes start
// out small, matching the small-object regime instead of half-image blobs.
const BOX_SIZE_PRIOR: f64 = -2.0;
const PARAM_STREAM: u64 = 0x70_61_72_61; // "para"

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    /// Non-overlapping patch sides, one token grid per entry.
    pub patch_sizes: Vec<usize>,
    /// Token width; also the feature dimension of the attention blocks.
    pub d_model: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    /// Learned object queries, one candidate detection slot each.
    pub num_queries: usize,
    /// Foreground classes; index `num_classes` is the no-object class.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_sizes: vec![8, 16],
            d_model: 64,
            num_heads: 4,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            num_queries: 25,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.num_queries == 0 || self.num_classes == 0
        {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by 4 (x/y sine/cosine split)",
                self.d_model
            )));
        }
        if self.patch_sizes.is_empty() {
            return Err(Error::Config("at least one patch size is required".into()));
        }
        for &p in &self.patch_sizes {
            if p == 0 || self.image_size % p != 0 {
                return Err(Error::Config(format!(
                    "image size {} not divisible by patch size {p}",
                    self.image_size
                )));
            }
        }
        Ok(())
    }

    /// Tokens contributed by every scale together.
    pub fn token_count(&self) -> usize {
        self.patch_sizes
            .iter()
            .map(|p| {
                let g = self.image_size / p;
                g * g
            })
            .sum()
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.patch_sizes.iter().map(|p| self.image_size / p).collect()
    }
}

/// Per-image set prediction: one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `[num_queries x (num_classes + 1)]`, last column is no-object.
    pub class_logits: Tensor,
    /// `[num_queries x 4]` center/size boxes in (0, 1) via sigmoid.
    pub boxes: Tensor,
}

impl Predictions {
    pub fn num_queries(&self) -> usize {
        self.class_logits.dims()[0]
    }

    pub fn query_box(&self, i: usize) -> BoxCS {
        let d = self.boxes.data();
        BoxCS::new(d[i * 4], d[i * 4 + 1], d[i * 4 + 2], d[i * 4 + 3])
    }

    pub fn query_probs(&self, i: usize) -> Vec<f64> {
        let n = self.class_logits.dims()[1];
        softmax_slice(&self.class_logits.data()[i * n..(i + 1) * n])
    }
}

/// One decoded detection; `class_id` is always a foreground class.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box_cs: BoxCS,
    pub class_id: usize,
    pub score: f64,
}

/// Ordered, named parameter store. Iteration order is creation order, which
/// fixes the checkpoint layout and the optimizer state alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Parameters {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// Inserts every parameter into the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self.entries.iter().map(|(_, t)| g.param(t)).collect(),
        }
    }

    pub fn var_of(&self, b: &Binding, name: &str) -> Var {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        b.vars[i]
    }

    /// Pulls gradients of the bound leaves out of the graph, accumulating into
    /// each tensor's grad buffer.
    pub fn accumulate_grads(&mut self, g: &Graph, b: &Binding) -> Result<()> {
        for (i, (_, t)) in self.entries.iter_mut().enumerate() {
            if let Some(grad) = g.grad(b.vars[i]) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}

impl Default for Parameters {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph handles for one bound parameter set, aligned with creation order.
pub struct Binding {
    vars: Vec<Var>,
}

/// Projection weights of one attention block.
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn init_uniform(rng: &mut SplitMix64, dims: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.next_range(-bound, bound)).collect();
    Tensor::from_vec(dims, data).expect("positive extents")
}

fn push_linear(p: &mut Parameters, rng: &mut SplitMix64, prefix: &str, fan_in: usize, fan_out: usize) {
    p.push(format!("{prefix}.weight"), init_uniform(rng, vec![fan_in, fan_out], fan_in));
    p.push(format!("{prefix}.bias"), init_uniform(rng, vec![fan_out], fan_in));
}

fn push_attn(p: &mut Parameters, rng: &mut SplitMix64, prefix: &str, d: usize) {
    for name in ["wq", "wk", "wv", "wo"] {
        p.push(format!("{prefix}.{name}"), init_uniform(rng, vec![d, d], d));
    }
    for name in ["bq", "bk", "bv", "bo"] {
        p.push(format!("{prefix}.{name}"), init_uniform(rng, vec![d], d));
    }
}

fn push_norm(p: &mut Parameters, prefix: &str, d: usize) {
    p.push(format!("{prefix}.gamma"), Tensor::full(vec![d], 1.0));
    p.push(format!("{prefix}.beta"), Tensor::zeros(vec![d]));
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    /// Fresh model with seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) linear
    /// layers and identity layer norms.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::for_stream(seed, PARAM_STREAM);
        let d = config.d_model;
        let ffn = 4 * d;
        let mut p = Parameters::new();

        for &ps in &config.patch_sizes {
            push_linear(&mut p, &mut rng, &format!("patch_embed.{ps}"), ps * ps * 3, d);
        }
        for i in 0..config.num_encoder_layers {
            push_norm(&mut p, &format!("encoder.{i}.norm1"), d);
            push_attn(&mut p, &mut rng, &format!("encoder.{i}.attn"), d);
            push_norm(&mut p, &format!("encoder.{i}.norm2"), d);
            push_linear(&mut p, &mut rng, &format!("encoder.{i}.ffn.1"), d, ffn);
            push_linear(&mut p, &mut rng, &format!("encoder.{i}.ffn.2"), ffn, d);
        }
        push_norm(&mut p, "encoder.norm", d);
        for i in 0..config.num_decoder_layers {
            push_norm(&mut p, &format!("decoder.{i}.norm1"), d);
            push_attn(&mut p, &mut rng, &format!("decoder.{i}.self_attn"), d);
            push_norm(&mut p, &format!("decoder.{i}.norm2"), d);
            push_attn(&mut p, &mut rng, &format!("decoder.{i}.cross_attn"), d);
            push_norm(&mut p, &format!("decoder.{i}.norm3"), d);
            push_linear(&mut p, &mut rng, &format!("decoder.{i}.ffn.1"), d, ffn);
            push_linear(&mut p, &mut rng, &format!("decoder.{i}.ffn.2"), ffn, d);
        }
        push_norm(&mut p, "decoder.norm", d);
        p.push("queries.weight", init_uniform(&mut rng, vec![config.num_queries, d], 1));
        push_linear(&mut p, &mut rng, "head.class", d, config.num_classes + 1);
        push_linear(&mut p, &mut rng, "head.box", d, 4);

        Ok(Self { config, params: p })
    }

    fn v(&self, b: &Binding, name: &str) -> Var {
        self.params.var_of(b, name)
    }

    fn attn_vars(&self, b: &Binding, prefix: &str) -> AttnVars {
        AttnVars {
            wq: self.v(b, &format!("{prefix}.wq")),
            bq: self.v(b, &format!("{prefix}.bq")),
            wk: self.v(b, &format!("{prefix}.wk")),
            bk: self.v(b, &format!("{prefix}.bk")),
            wv: self.v(b, &format!("{prefix}.wv")),
            bv: self.v(b, &format!("{prefix}.bv")),
            wo: self.v(b, &format!("{prefix}.wo")),
            bo: self.v(b, &format!("{prefix}.bo")),
        }
    }

    fn norm(&self, g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.v(b, &format!("{prefix}.gamma"));
        let beta = self.v(b, &format!("{prefix}.beta"));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    fn ffn(&self, g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
        let w1 = self.v(b, &format!("{prefix}.1.weight"));
        let b1 = self.v(b, &format!("{prefix}.1.bias"));
        let w2 = self.v(b, &format!("{prefix}.2.weight"));
        let b2 = self.v(b, &format!("{prefix}.2.bias"));
        let h = g.matmul(x, w1)?;
        let h = g.add_bias_row(h, b1)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        g.add_bias_row(h, b2)
    }

    /// Builds the forward pass on an existing graph; returns (class_logits,
    /// boxes) handles so callers can attach a loss and back-propagate.
    pub fn forward_on(&self, g: &mut Graph, b: &Binding, image: &Tensor) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let s = cfg.image_size;
        if image.dims() != [s, s, 3] {
            return Err(Error::Dimension(format!(
                "image shape {:?} does not match configured [{s}, {s}, 3]",
                image.dims()
            )));
        }

        // Multi-scale patch tokens.
        let mut parts = Vec::with_capacity(cfg.patch_sizes.len());
        for &ps in &cfg.patch_sizes {
            let patches = patch_matrix(image, ps)?;
            let pv = g.input(&patches);
            let w = self.v(b, &format!("patch_embed.{ps}.weight"));
            let bias = self.v(b, &format!("patch_embed.{ps}.bias"));
            let proj = g.matmul(pv, w)?;
            parts.push(g.add_bias_row(proj, bias)?);
        }
        let tokens = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 0)?
        };

        let pe = positional_encoding(&cfg.grid_sizes(), cfg.d_model)?;
        let pe_v = g.input(&pe);
        let mut x = g.add(tokens, pe_v)?;

        // Pre-norm encoder. Position encodings also re-enter each layer's
        // query/key paths so attention stays location-aware at depth.
        for i in 0..cfg.num_encoder_layers {
            let ln = self.norm(g, b, &format!("encoder.{i}.norm1"), x)?;
            let qk = g.add(ln, pe_v)?;
            let attn = multi_head_attention(
                g,
                qk,
                qk,
                ln,
                &self.attn_vars(b, &format!("encoder.{i}.attn")),
                cfg.num_heads,
            )?;
            x = g.add(x, attn)?;
            let ln = self.norm(g, b, &format!("encoder.{i}.norm2"), x)?;
            let ff = self.ffn(g, b, &format!("encoder.{i}.ffn"), ln)?;
            x = g.add(x, ff)?;
        }
        let memory = self.norm(g, b, "encoder.norm", x)?;
        let memory_kv = g.add(memory, pe_v)?;

        // Pre-norm decoder over learned queries. The query embedding doubles
        // as the slot's positional tag: it seeds the content stream and is
        // re-added to the query/key paths of every attention block.
        let query_embed = self.v(b, "queries.weight");
        let mut q = query_embed;
        for i in 0..cfg.num_decoder_layers {
            let ln = self.norm(g, b, &format!("decoder.{i}.norm1"), q)?;
            let qk = g.add(ln, query_embed)?;
            let sa = multi_head_attention(
                g,
                qk,
                qk,
                ln,
                &self.attn_vars(b, &format!("decoder.{i}.self_attn")),
                cfg.num_heads,
            )?;
            q = g.add(q, sa)?;
            let ln = self.norm(g, b, &format!("decoder.{i}.norm2"), q)?;
            let cq = g.add(ln, query_embed)?;
            let ca = multi_head_attention(
                g,
                cq,
                memory_kv,
                memory_kv,
                &self.attn_vars(b, &format!("decoder.{i}.cross_attn")),
                cfg.num_heads,
            )?;
            q = g.add(q, ca)?;
            let ln = self.norm(g, b, &format!("decoder.{i}.norm3"), q)?;
            let ff = self.ffn(g, b, &format!("decoder.{i}.ffn"), ln)?;
            q = g.add(q, ff)?;
        }
        let q = self.norm(g, b, "decoder.norm", q)?;

        let wc = self.v(b, "head.class.weight");
        let bc = self.v(b, "head.class.bias");
        let logits = g.matmul(q, wc)?;
        let logits = g.add_bias_row(logits, bc)?;

        let wb = self.v(b, "head.box.weight");
        let bb = self.v(b, "head.box.bias");
        let raw = g.matmul(q, wb)?;
        let raw = g.add_bias_row(raw, bb)?;
        let size_prior = Tensor::from_vec(vec![4], vec![0.0, 0.0, BOX_SIZE_PRIOR, BOX_SIZE_PRIOR])
            .expect("static shape");
        let prior = g.input(&size_prior);
        let raw = g.add_bias_row(raw, prior)?;
        let boxes = g.sigmoid(raw);

        Ok((logits, boxes))
    }

    /// Value-level forward pass.
    pub fn forward(&self, image: &Tensor) -> Result<Predictions> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let (logits, boxes) = self.forward_on(&mut g, &b, image)?;
        Ok(Predictions {
            class_logits: g.value(logits),
            boxes: g.value(boxes),
        })
    }
}

/// Flattens non-overlapping `patch x patch` squares into rows of a
/// `[grid^2 x patch^2*3]` matrix, scanning the grid row-major.
fn patch_matrix(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.dims()[0];
    if image.dims() != [s, s, 3] || s % patch != 0 {
        return Err(Error::Dimension(format!(
            "cannot cut {:?} into {patch}x{patch} patches",
            image.dims()
        )));
    }
    let grid = s / patch;
    let row_len = patch * patch * 3;
    let mut data = Vec::with_capacity(grid * grid * row_len);
    let px = image.data();
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch {
                let y = gy * patch + py;
                for pxi in 0..patch {
                    let x = gx * patch + pxi;
                    let base = (y * s + x) * 3;
                    data.extend_from_slice(&px[base..base + 3]);
                }
            }
        }
    }
    Tensor::from_vec(vec![grid * grid, row_len], data)
}

/// Fixed 2-D sinusoidal encoding for one token grid per scale, concatenated in
/// scale order. Channels split into quarters: sin(x), cos(x), sin(y), cos(y)
/// over a geometric frequency ladder spanning roughly half a token to the full
/// grid extent, so every channel carries usable variation at desk-scale grids.
/// Positions are anchored to the finest grid: a coarse token sits at the pixel
/// location of its top-left corner, which keeps the scales spatially aligned
/// and maps position (0,0) to all-zero sines and all-one cosines.
pub fn positional_encoding(grid_sizes: &[usize], d_model: usize) -> Result<Tensor> {
    if d_model % 4 != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} not divisible by 4 (x/y sine/cosine split)"
        )));
    }
    let quarter = d_model / 4;
    let max_freq = 2.4f64;
    let min_freq = 0.3f64;
    let freqs: Vec<f64> = (0..quarter)
        .map(|i| {
            let t = if quarter == 1 { 0.0 } else { i as f64 / (quarter - 1) as f64 };
            max_freq * (min_freq / max_freq).powf(t)
        })
        .collect();
    let finest = grid_sizes.iter().copied().max().unwrap_or(1) as f64;
    let total: usize = grid_sizes.iter().map(|g| g * g).sum();
    let mut data = Vec::with_capacity(total * d_model);
    for &grid in grid_sizes {
        let stride = finest / grid.max(1) as f64;
        for gy in 0..grid {
            for gx in 0..grid {
                let (x, y) = (gx as f64 * stride, gy as f64 * stride);
                for &f in &freqs {
                    data.push((x * f).sin());
                }
                for &f in &freqs {
                    data.push((x * f).cos());
                }
                for &f in &freqs {
                    data.push((y * f).sin());
                }
                for &f in &freqs {
                    data.push((y * f).cos());
                }
            }
        }
    }
    Tensor::from_vec(vec![total, d_model], data)
}

/// Scaled dot-product attention with per-head projections; heads are column
/// slices, concatenated and output-projected. Returns the output only.
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttnVars,
    num_heads: usize,
) -> Result<Var> {
    let (out, _) = multi_head_attention_with_weights(g, q_in, k_in, v_in, p, num_heads)?;
    Ok(out)
}

/// As [`multi_head_attention`] but also returns the per-head attention weight
/// matrices (softmax rows), mostly for inspection in tests.
pub fn multi_head_attention_with_weights(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    p: &AttnVars,
    num_heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let qd = g.dims(q_in).to_vec();
    let kd = g.dims(k_in).to_vec();
    let vd = g.dims(v_in).to_vec();
    if qd.len() != 2 || kd.len() != 2 || vd.len() != 2 || qd[1] != kd[1] || kd != vd {
        return Err(Error::Dimension(format!(
            "attention inputs Q {qd:?}, K {kd:?}, V {vd:?} are inconsistent"
        )));
    }
    let d = qd[1];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "width {d} not divisible by {num_heads} heads"
        )));
    }
    let dk = d / num_heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let q = g.matmul(q_in, p.wq)?;
    let q = g.add_bias_row(q, p.bq)?;
    let k = g.matmul(k_in, p.wk)?;
    let k = g.add_bias_row(k, p.bk)?;
    let v = g.matmul(v_in, p.wv)?;
    let v = g.add_bias_row(v, p.bv)?;

    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.narrow(q, 1, h * dk, dk)?;
        let kh = g.narrow(k, 1, h * dk, dk)?;
        let vh = g.narrow(v, 1, h * dk, dk)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale);
        let attn = g.softmax(scaled, 1)?;
        heads.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let out = g.matmul(merged, p.wo)?;
    let out = g.add_bias_row(out, p.bo)?;
    Ok((out, weights))
}

/// Confidence-cut decoding with no suppression of overlapping boxes. A query
/// survives when its argmax class is foreground and that probability reaches
/// `conf_threshold`; results are sorted by score descending, ties by query
/// index, and truncated to `top_k`.
pub fn decode(p: &Predictions, conf_threshold: f64, top_k: usize) -> Result<Vec<Detection>> {
    if !(0.0..1.0).contains(&conf_threshold) {
        return Err(Error::Contract(format!(
            "conf_threshold must be in [0, 1), got {conf_threshold}"
        )));
    }
    let classes_incl_bg = p.class_logits.dims()[1];
    let no_object = classes_incl_bg - 1;
    let mut dets = Vec::new();
    for qi in 0..p.num_queries() {
        let probs = p.query_probs(qi);
        let mut best = 0;
        for c in 1..classes_incl_bg {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        if best == no_object {
            continue;
        }
        let score = probs[best];
        if score >= conf_threshold {
            dets.push(Detection { box_cs: p.query_box(qi), class_id: best, score });
        }
    }
    // Stable sort keeps query order for tied scores.
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("softmax scores are finite"));
    dets.truncate(top_k);
    Ok(dets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_sizes: vec![8, 16],
            d_model: 8,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            num_queries: 4,
            num_classes: 3,
        }
    }

    fn random_image(size: usize, seed: u64) -> Tensor {
        let mut r = SplitMix64::for_stream(seed, 0xF00D);
        let data: Vec<f64> = (0..size * size * 3).map(|_| r.next_f64()).collect();
        Tensor::from_vec(vec![size, size, 3], data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { num_heads: 5, ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig { patch_sizes: vec![7], ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn patch_token_counts() {
        let cfg = ModelConfig {
            image_size: 32,
            patch_sizes: vec![8],
            ..ModelConfig::default()
        };
        assert_eq!(cfg.token_count(), 16);
        let cfg = ModelConfig {
            image_size: 32,
            patch_sizes: vec![8, 16],
            ..ModelConfig::default()
        };
        assert_eq!(cfg.token_count(), 16 + 4);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let image = Tensor::zeros(vec![16, 16, 3]);
        let patches = patch_matrix(&image, 8).unwrap();
        let mut g = Graph::new();
        let pv = g.input(&patches);
        let w = g.input(&Tensor::full(vec![8 * 8 * 3, 4], 0.3));
        let bias = g.input(&Tensor::zeros(vec![4]));
        let proj = g.matmul(pv, w).unwrap();
        let tok = g.add_bias_row(proj, bias).unwrap();
        assert!(g.data(tok).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_matrix_shape_mismatch() {
        let image = Tensor::zeros(vec![16, 16, 3]);
        assert!(matches!(patch_matrix(&image, 7), Err(Error::Dimension(_))));
    }

    #[test]
    fn positional_encoding_origin_and_range() {
        let pe = positional_encoding(&[4], 16).unwrap();
        assert_eq!(pe.dims(), &[16, 16]);
        let quarter = 4;
        let row0 = &pe.data()[..16];
        for i in 0..quarter {
            assert_eq!(row0[i], 0.0); // sin(x=0)
            assert_eq!(row0[quarter + i], 1.0); // cos(x=0)
            assert_eq!(row0[2 * quarter + i], 0.0); // sin(y=0)
            assert_eq!(row0[3 * quarter + i], 1.0); // cos(y=0)
        }
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_encoding_deterministic_and_distinct() {
        let a = positional_encoding(&[4], 16).unwrap();
        let b = positional_encoding(&[4], 16).unwrap();
        assert_eq!(a, b);
        // All 16 grid positions receive pairwise distinct vectors.
        for i in 0..16 {
            for j in (i + 1)..16 {
                let ri = &a.data()[i * 16..(i + 1) * 16];
                let rj = &a.data()[j * 16..(j + 1) * 16];
                assert_ne!(ri, rj, "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn positional_encoding_requires_divisibility() {
        assert!(matches!(
            positional_encoding(&[4], 10),
            Err(Error::Config(_))
        ));
    }

    fn identity_attn(g: &mut Graph, d: usize) -> AttnVars {
        let eye = {
            let mut t = Tensor::zeros(vec![d, d]);
            for i in 0..d {
                let v = 1.0;
                let idx = i * d + i;
                t.data_mut()[idx] = v;
            }
            t
        };
        let zero = Tensor::zeros(vec![d]);
        AttnVars {
            wq: g.input(&eye),
            bq: g.input(&zero),
            wk: g.input(&eye),
            bk: g.input(&zero),
            wv: g.input(&eye),
            bv: g.input(&zero),
            wo: g.input(&eye),
            bo: g.input(&zero),
        }
    }

    #[test]
    fn attention_zero_query_averages_values() {
        // Zero Q projection -> uniform weights -> rows become the mean of V.
        let mut g = Graph::new();
        let d = 4;
        let x = Tensor::from_vec(
            vec![3, 4],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, -1.0, 0.0, 1.0, 2.0],
        )
        .unwrap();
        let xv = g.input(&x);
        let mut p = identity_attn(&mut g, d);
        p.wq = g.input(&Tensor::zeros(vec![d, d]));
        let (out, weights) = multi_head_attention_with_weights(&mut g, xv, xv, xv, &p, 2).unwrap();
        for w in &weights {
            for row in 0..3 {
                let r = &g.data(*w)[row * 3..(row + 1) * 3];
                for &x in r {
                    assert!((x - 1.0 / 3.0).abs() < 1e-12);
                }
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // With identity V and O projections, each output row is the column mean.
        let mean: Vec<f64> = (0..4)
            .map(|j| (x.data()[j] + x.data()[4 + j] + x.data()[8 + j]) / 3.0)
            .collect();
        for row in 0..3 {
            for j in 0..4 {
                assert!((g.data(out)[row * 4 + j] - mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_head_hand_case() {
        // Identity projections, X = I2: out = softmax(X X^T / sqrt(2)) X.
        let mut g = Graph::new();
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let xv = g.input(&x);
        let p = identity_attn(&mut g, 2);
        let out = multi_head_attention(&mut g, xv, xv, xv, &p, 1).unwrap();
        // Hand arithmetic: row scores [1/sqrt(2), 0]; softmax -> [a, 1-a].
        let s = 1.0 / 2.0f64.sqrt();
        let a = s.exp() / (s.exp() + 1.0);
        let want = [a, 1.0 - a, 1.0 - a, a];
        for (got, want) in g.data(out).iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn attention_row_sums_one() {
        let mut g = Graph::new();
        let mut r = SplitMix64::new(8);
        let data: Vec<f64> = (0..5 * 4).map(|_| r.next_range(-2.0, 2.0)).collect();
        let x = Tensor::from_vec(vec![5, 4], data).unwrap();
        let xv = g.input(&x);
        let p = identity_attn(&mut g, 4);
        let (_, weights) = multi_head_attention_with_weights(&mut g, xv, xv, xv, &p, 2).unwrap();
        for w in weights {
            for row in 0..5 {
                let s: f64 = g.data(w)[row * 5..(row + 1) * 5].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_head_divisibility_error() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![2, 6]));
        let p = identity_attn(&mut g, 6);
        assert!(matches!(
            multi_head_attention(&mut g, x, x, x, &p, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_kv_permutation_equivariance() {
        // Permuting K and V rows together leaves the output unchanged.
        let mut r = SplitMix64::new(21);
        let d = 8;
        let kv_rows = 6;
        let q_rows = 3;
        let kv_data: Vec<f64> = (0..kv_rows * d).map(|_| r.next_range(-1.0, 1.0)).collect();
        let q_data: Vec<f64> = (0..q_rows * d).map(|_| r.next_range(-1.0, 1.0)).collect();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut kv_perm = vec![0.0; kv_rows * d];
        for (dst, &src) in perm.iter().enumerate() {
            kv_perm[dst * d..(dst + 1) * d].copy_from_slice(&kv_data[src * d..(src + 1) * d]);
        }

        let mut rng_w = SplitMix64::new(99);
        let make_w = |rng: &mut SplitMix64| -> Vec<f64> {
            (0..d * d).map(|_| rng.next_range(-0.5, 0.5)).collect()
        };
        let wq = make_w(&mut rng_w);
        let wk = make_w(&mut rng_w);
        let wv = make_w(&mut rng_w);
        let wo = make_w(&mut rng_w);

        let run = |kv: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let q = g.input(&Tensor::from_vec(vec![q_rows, d], q_data.clone()).unwrap());
            let k = g.input(&Tensor::from_vec(vec![kv_rows, d], kv.to_vec()).unwrap());
            let zero = Tensor::zeros(vec![d]);
            let p = AttnVars {
                wq: g.input(&Tensor::from_vec(vec![d, d], wq.clone()).unwrap()),
                bq: g.input(&zero),
                wk: g.input(&Tensor::from_vec(vec![d, d], wk.clone()).unwrap()),
                bk: g.input(&zero),
                wv: g.input(&Tensor::from_vec(vec![d, d], wv.clone()).unwrap()),
                bv: g.input(&zero),
                wo: g.input(&Tensor::from_vec(vec![d, d], wo.clone()).unwrap()),
                bo: g.input(&zero),
            };
            let out = multi_head_attention(&mut g, q, k, k, &p, 2).unwrap();
            g.data(out).to_vec()
        };

        let base = run(&kv_data);
        let permuted = run(&kv_perm);
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes_ranges_determinism() {
        let cfg = tiny_config();
        let model = Model::new(cfg.clone(), 7).unwrap();
        let image = random_image(cfg.image_size, 1);
        let p1 = model.forward(&image).unwrap();
        assert_eq!(p1.class_logits.dims(), &[4, 4]);
        assert_eq!(p1.boxes.dims(), &[4, 4]);
        assert!(p1.boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p1.class_logits.data().iter().all(|v| v.is_finite()));
        let p2 = model.forward(&image).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn decode_all_no_object_is_empty() {
        // Strongly favor the no-object column for every query.
        let mut logits = Tensor::zeros(vec![3, 4]);
        for q in 0..3 {
            logits.set(&[q, 3], 10.0);
        }
        let boxes = Tensor::full(vec![3, 4], 0.5);
        let p = Predictions { class_logits: logits, boxes };
        assert!(decode(&p, 0.0, 10).unwrap().is_empty());
    }

    #[test]
    fn decode_keeps_every_foreground_argmax_query() {
        let mut logits = Tensor::zeros(vec![4, 4]);
        logits.set(&[0, 1], 3.0);
        logits.set(&[1, 3], 3.0); // no-object
        logits.set(&[2, 0], 1.0);
        logits.set(&[3, 2], 2.0);
        let boxes = Tensor::full(vec![4, 4], 0.5);
        let p = Predictions { class_logits: logits, boxes };
        let dets = decode(&p, 0.0, 100).unwrap();
        assert_eq!(dets.len(), 3);
        // Sorted by score descending.
        for w in dets.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn decode_keeps_overlapping_duplicates() {
        // Two queries, identical boxes, scores ~0.9 and ~0.8: both survive.
        let k = 4usize; // 3 foreground + no-object
        let make_logits = |p0: f64| -> Vec<f64> {
            let rest = (1.0 - p0) / 3.0;
            vec![p0.ln(), rest.ln(), rest.ln(), rest.ln()]
        };
        let mut data = make_logits(0.9);
        data.extend(make_logits(0.8));
        let logits = Tensor::from_vec(vec![2, k], data).unwrap();
        let boxes = Tensor::from_vec(vec![2, 4], vec![0.5, 0.5, 0.2, 0.2, 0.5, 0.5, 0.2, 0.2]).unwrap();
        let p = Predictions { class_logits: logits, boxes };
        let dets = decode(&p, 0.5, 10).unwrap();
        assert_eq!(dets.len(), 2);
        assert!((dets[0].score - 0.9).abs() < 1e-9);
        assert!((dets[1].score - 0.8).abs() < 1e-9);
        assert_eq!(dets[0].box_cs, dets[1].box_cs);
    }

    #[test]
    fn decode_threshold_contract() {
        let p = Predictions {
            class_logits: Tensor::zeros(vec![1, 3]),
            boxes: Tensor::full(vec![1, 4], 0.5),
        };
        assert!(decode(&p, 1.0, 5).is_err());
        assert!(decode(&p, -0.1, 5).is_err());
    }
}
