//! Toy DiT-style denoiser with seeded weights.
//!
//! One architecture, two presets. A forward pass maps a latent token grid
//! (`tokens × channels`) at step `t` to a noise prediction of the same shape:
//!
//! ```text
//! h      = latent · W_in + pos + temb(t)
//! h      = h + Attn(LN(h)) · W_o          (per layer, pre-norm)
//! h      = h + GELU(LN(h) · W_1) · W_2
//! body   = LN(h) · W_out
//! noise  = skip · (latent − anchor) + detail ⊙ body
//! ```
//!
//! `anchor` and `detail` are fixed, seed-free buffers that depend only on the
//! token grid, so every preset built for the same grid shares them. The
//! anchor term is the part of the prediction both tiers agree on; `detail`
//! is a radial map that is exactly zero outside a central disc, which is
//! where the learned body contributes. Tokens outside the disc therefore
//! get identical predictions from any two presets.
//!
//! The masked forward computes Q/K/V only for the selected tokens and pads
//! attention to the full context with cached K/V rows from the previous
//! step, scattered by token position.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gaussian, gelu, layer_norm_rows, matmul, softmax_rows_in_place, Grid2D, SeededRng};

const LN_EPS: f32 = 1e-5;
const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Token count, a perfect square (side² of the latent grid).
    pub tokens: usize,
    pub channels: usize,
    pub weight_seed: u64,
    pub preset_name: String,
}

impl DenoiserConfig {
    pub fn large(tokens: usize, channels: usize, weight_seed: u64) -> Self {
        Self { layers: 6, heads: 4, model_dim: 128, tokens, channels, weight_seed, preset_name: "large".into() }
    }

    pub fn small(tokens: usize, channels: usize, weight_seed: u64) -> Self {
        Self { layers: 2, heads: 4, model_dim: 64, tokens, channels, weight_seed, preset_name: "small".into() }
    }

    pub fn side(&self) -> usize {
        (self.tokens as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::DenoiserConfig { field, reason });
        if self.layers == 0 {
            return bad("layers", "must be at least 1".into());
        }
        if self.heads == 0 {
            return bad("heads", "must be at least 1".into());
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(
                "model_dim",
                format!("{} is not a positive multiple of heads = {}", self.model_dim, self.heads),
            );
        }
        if self.tokens == 0 || self.side() * self.side() != self.tokens {
            return bad("tokens", format!("{} is not a non-zero perfect square", self.tokens));
        }
        if self.channels == 0 {
            return bad("channels", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a scalar position.
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out[2 * i] = (pos * freq).sin() as f32;
        out[2 * i + 1] = (pos * freq).cos() as f32;
    }
    out
}

/// Timestep conditioning vector for step `t`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    // offset so t and token positions never produce the same vector
    sinusoidal((t as f64 + 0.5) * 0.1, dim)
}

/// Keys and values of one layer for the tokens a forward pass covered.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV {
    pub layer: usize,
    pub keys: Grid2D,
    pub values: Grid2D,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub w_q: Grid2D,
    pub w_k: Grid2D,
    pub w_v: Grid2D,
    pub w_o: Grid2D,
    pub w_ff1: Grid2D,
    pub w_ff2: Grid2D,
}

/// An immutable denoiser; forward passes allocate their own scratch.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    pub w_in: Grid2D,
    pub blocks: Vec<Block>,
    pub w_out: Grid2D,
    pub skip_gain: f32,
    pos: Grid2D,
    anchor: Grid2D,
    detail: Vec<f32>,
}

fn scaled_gaussian(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Grid2D {
    gaussian(rng, fan_in, fan_out).scale(1.0 / (fan_in as f32).sqrt())
}

/// The shared low-frequency target pattern, `tokens × channels`.
pub fn anchor_pattern(side: usize, channels: usize) -> Grid2D {
    let mut g = Grid2D::zeros(side * side, channels);
    let s = side as f64;
    for r in 0..side {
        for c in 0..side {
            let (u, v) = ((r as f64 + 0.5) / s, (c as f64 + 0.5) / s);
            for ch in 0..channels {
                let a = std::f64::consts::PI * (ch as f64 + 1.0);
                let val = 0.5 * (a * u).sin() * (a * 0.5 * v + ch as f64).cos();
                g.set(r * side + c, ch, val as f32);
            }
        }
    }
    g
}

/// Radial detail weights: `(1 − (ρ/R)²)²` inside radius `R = 0.4·side`, zero outside.
pub fn detail_map(side: usize) -> Vec<f32> {
    let centre = (side as f64 - 1.0) / 2.0;
    let radius = 0.4 * side as f64;
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let rho2 = (r as f64 - centre).powi(2) + (c as f64 - centre).powi(2);
            let w = (1.0 - rho2 / (radius * radius)).max(0.0);
            out.push((w * w) as f32);
        }
    }
    out
}

impl Denoiser {
    pub fn build(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let mut rng = SeededRng::new(config.weight_seed);
        let w_in = scaled_gaussian(&mut rng, config.channels, d);
        let blocks = (0..config.layers)
            .map(|_| Block {
                w_q: scaled_gaussian(&mut rng, d, d),
                w_k: scaled_gaussian(&mut rng, d, d),
                w_v: scaled_gaussian(&mut rng, d, d),
                w_o: scaled_gaussian(&mut rng, d, d),
                w_ff1: scaled_gaussian(&mut rng, d, FFN_MULT * d),
                w_ff2: scaled_gaussian(&mut rng, FFN_MULT * d, d),
            })
            .collect();
        let w_out = scaled_gaussian(&mut rng, d, config.channels);

        let mut pos = Grid2D::zeros(config.tokens, d);
        for i in 0..config.tokens {
            pos.row_mut(i).copy_from_slice(&sinusoidal(i as f64, d));
        }
        let side = config.side();
        Ok(Self {
            anchor: anchor_pattern(side, config.channels),
            detail: detail_map(side),
            pos,
            w_in,
            blocks,
            w_out,
            skip_gain: 4.0,
            config,
        })
    }

    /// Test hook: every weight, including the skip gain, set to zero.
    pub fn with_zero_weights(mut self) -> Self {
        let zero = |g: &mut Grid2D| g.fill(0.0);
        zero(&mut self.w_in);
        zero(&mut self.w_out);
        for b in &mut self.blocks {
            for g in [&mut b.w_q, &mut b.w_k, &mut b.w_v, &mut b.w_o, &mut b.w_ff1, &mut b.w_ff2] {
                zero(g);
            }
        }
        self.skip_gain = 0.0;
        self
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn anchor(&self) -> &Grid2D {
        &self.anchor
    }

    pub fn detail(&self) -> &[f32] {
        &self.detail
    }

    pub fn position_embeddings(&self) -> &Grid2D {
        &self.pos
    }

    pub fn tokens(&self) -> usize {
        self.config.tokens
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Full-context forward pass; returns the noise prediction and one
    /// `LayerKV` per layer covering every token.
    pub fn forward_full(&self, latent: &Grid2D, t: usize) -> Result<(Grid2D, Vec<LayerKV>)> {
        if latent.shape() != (self.tokens(), self.channels()) {
            return shape_err(
                "forward_full",
                format!("latent {:?}, denoiser expects ({}, {})", latent.shape(), self.tokens(), self.channels()),
            );
        }
        let indices: Vec<usize> = (0..self.tokens()).collect();
        self.forward_rows(latent, &indices, None, t)
    }

    /// Forward pass over the tokens at `indices` only (any order, no repeats).
    ///
    /// `latent_masked` row `j` is the latent of token `indices[j]`. Attention
    /// for each layer runs against a full-length K/V buffer: the cached rows
    /// from `prev_kv` with the fresh rows of the masked tokens written over
    /// their own positions. Returns noise rows aligned with `indices` and the
    /// fresh K/V rows for those tokens.
    pub fn forward_masked(
        &self,
        latent_masked: &Grid2D,
        indices: &[usize],
        prev_kv: &[LayerKV],
        t: usize,
    ) -> Result<(Grid2D, Vec<LayerKV>)> {
        if indices.is_empty() {
            return Err(Error::EmptyMask);
        }
        self.check_indices(indices)?;
        if latent_masked.shape() != (indices.len(), self.channels()) {
            return shape_err(
                "forward_masked",
                format!(
                    "masked latent {:?} for {} indices and {} channels",
                    latent_masked.shape(),
                    indices.len(),
                    self.channels()
                ),
            );
        }
        self.check_cache(prev_kv, "forward_masked")?;
        self.forward_rows(latent_masked, indices, Some(prev_kv), t)
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        let n = self.tokens();
        let mut seen = vec![false; n];
        for &i in indices {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            if std::mem::replace(&mut seen[i], true) {
                return shape_err("mask", format!("token {i} appears twice"));
            }
        }
        Ok(())
    }

    fn check_cache(&self, cache: &[LayerKV], op: &'static str) -> Result<()> {
        let want = (self.tokens(), self.config.model_dim);
        if cache.len() != self.config.layers {
            return shape_err(op, format!("cache has {} layers, model has {}", cache.len(), self.config.layers));
        }
        for kv in cache {
            if kv.keys.shape() != want || kv.values.shape() != want {
                return shape_err(
                    op,
                    format!(
                        "layer {} cache keys {:?} values {:?}, expected {want:?}",
                        kv.layer,
                        kv.keys.shape(),
                        kv.values.shape()
                    ),
                );
            }
        }
        Ok(())
    }

    fn forward_rows(
        &self,
        rows: &Grid2D,
        indices: &[usize],
        cache: Option<&[LayerKV]>,
        t: usize,
    ) -> Result<(Grid2D, Vec<LayerKV>)> {
        let d = self.config.model_dim;
        let mut h = matmul(rows, &self.w_in)?;
        h.add_assign(&self.pos.gather_rows(indices)?)?;
        h.add_row_broadcast(&timestep_embedding(t, d));

        let mut fresh = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let normed = layer_norm_rows(&h, LN_EPS);
            let q = matmul(&normed, &block.w_q)?;
            let k = matmul(&normed, &block.w_k)?;
            let v = matmul(&normed, &block.w_v)?;
            let attn = match cache {
                None => self.attention(&q, &k, &v)?,
                Some(cache) => {
                    let mut k_full = cache[layer].keys.clone();
                    let mut v_full = cache[layer].values.clone();
                    k_full.scatter_rows(indices, &k)?;
                    v_full.scatter_rows(indices, &v)?;
                    self.attention(&q, &k_full, &v_full)?
                }
            };
            h.add_assign(&matmul(&attn, &block.w_o)?)?;

            let normed = layer_norm_rows(&h, LN_EPS);
            let hidden = matmul(&normed, &block.w_ff1)?.map(gelu);
            h.add_assign(&matmul(&hidden, &block.w_ff2)?)?;
            fresh.push(LayerKV { layer, keys: k, values: v });
        }

        let body = matmul(&layer_norm_rows(&h, LN_EPS), &self.w_out)?;
        let mut noise = rows.clone();
        let c = self.channels();
        for (j, &tok) in indices.iter().enumerate() {
            let gate = self.detail[tok];
            let anchor = self.anchor.row(tok);
            let body_row = body.row(j);
            let out = noise.row_mut(j);
            for ch in 0..c {
                out[ch] = self.skip_gain * (out[ch] - anchor[ch]) + gate * body_row[ch];
            }
        }
        Ok((noise, fresh))
    }

    /// Multi-head scaled dot-product attention of `q` (m rows) against
    /// full-context `k`/`v` (tokens rows).
    fn attention(&self, q: &Grid2D, k: &Grid2D, v: &Grid2D) -> Result<Grid2D> {
        let heads = self.config.heads;
        let dh = self.config.model_dim / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = Grid2D::zeros(q.rows(), self.config.model_dim);
        for head in 0..heads {
            let start = head * dh;
            let qh = q.col_slice(start, dh);
            let kt = k.col_slice(start, dh).transpose();
            let mut scores = matmul(&qh, &kt)?;
            softmax_rows_in_place(&mut scores, scale);
            let oh = matmul(&scores, &v.col_slice(start, dh))?;
            out.set_col_slice(start, &oh);
        }
        Ok(out)
    }
}

/// Copies `fresh` rows over `old` at the token positions in `indices`.
pub fn refresh_kv_cache(old: &[LayerKV], fresh: &[LayerKV], indices: &[usize]) -> Result<Vec<LayerKV>> {
    if old.len() != fresh.len() {
        return shape_err("refresh_kv_cache", format!("{} cached layers, {} fresh", old.len(), fresh.len()));
    }
    old.iter()
        .zip(fresh)
        .map(|(o, f)| {
            let mut keys = o.keys.clone();
            let mut values = o.values.clone();
            keys.scatter_rows(indices, &f.keys)?;
            values.scatter_rows(indices, &f.values)?;
            Ok(LayerKV { layer: o.layer, keys, values })
        })
        .collect()
}
