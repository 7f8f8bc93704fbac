//! Vanilla ViT encoder and shallow transformer decoder.
//!
//! Blocks are pre-norm (`x + attn(ln(x))`, `x + mlp(ln(x))`) with joint
//! attention over every token in the sequence and a GELU MLP. Positional
//! embeddings are fixed 3D sin-cos tables stored as non-trainable buffers.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal, Bound, LinearIdx, NormIdx, ParamStore};
use crate::seed;
use crate::tensor::{Mat, Scalar};
use crate::tokenizer::TokenLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Video,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Image => "image",
            Modality::Video => "video",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "video" => Ok(Modality::Video),
            other => Err(Error::Config(format!("unknown modality {other:?} (expected image|video)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub layout: TokenLayout,
    pub modality: Modality,
}

impl ModelConfig {
    /// Desk-scale default: dim 64, depth 4, 4 heads; decoders of depth 2 and
    /// half the encoder width.
    pub fn desk(layout: TokenLayout, modality: Modality) -> Self {
        Self { embed_dim: 64, depth: 4, heads: 4, mlp_ratio: 4, decoder_dim: 32, decoder_depth: 2, layout, modality }
    }

    /// Wider and deeper teacher.
    pub fn large_teacher(layout: TokenLayout, modality: Modality) -> Self {
        Self { embed_dim: 96, depth: 6, decoder_dim: 48, ..Self::desk(layout, modality) }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(self.depth >= 1, format!("depth must be at least 1, got {}", self.depth))?;
        check(self.decoder_depth >= 1, format!("decoder_depth must be at least 1, got {}", self.decoder_depth))?;
        check(self.heads >= 1, "heads must be positive".into())?;
        check(self.mlp_ratio >= 1, "mlp_ratio must be positive".into())?;
        check(
            self.embed_dim.is_multiple_of(self.heads),
            format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads),
        )?;
        check(
            self.decoder_dim.is_multiple_of(self.heads),
            format!("decoder_dim {} is not divisible by heads {}", self.decoder_dim, self.heads),
        )?;
        check(self.embed_dim >= 6 && self.embed_dim.is_multiple_of(2), format!("embed_dim {} must be even and >= 6", self.embed_dim))?;
        check(
            self.decoder_dim >= 6 && self.decoder_dim.is_multiple_of(2),
            format!("decoder_dim {} must be even and >= 6", self.decoder_dim),
        )?;
        check(self.layout.total() > 0, "layout has no tokens".into())?;
        match self.modality {
            Modality::Image => check(self.layout.is_image(), format!("image model needs a single-frame layout, got {}", self.layout)),
            Modality::Video => Ok(()),
        }
    }
}

fn sincos_1d(dim: usize, pos: f64, out: &mut [f64]) {
    let half = dim / 2;
    for k in 0..half {
        let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
        out[k] = (pos * omega).sin();
        out[half + k] = (pos * omega).cos();
    }
}

/// Fixed sin-cos table over the 3D token grid, one row per token.
///
/// The width is split into time, row and column chunks; the row and column
/// chunks get `dim / 3` rounded down to even, time takes the rest.
pub fn sincos_pos_embed<T: Scalar>(layout: &TokenLayout, dim: usize) -> Mat<T> {
    let dh = (dim / 3) & !1;
    let dt = dim - 2 * dh;
    let mut out = Mat::zeros(layout.total(), dim);
    let mut buf = vec![0.0f64; dim];
    for k in 0..layout.total() {
        let (tau, i, j) = layout.coords(k);
        sincos_1d(dt, tau as f64, &mut buf[..dt]);
        sincos_1d(dh, i as f64, &mut buf[dt..dt + dh]);
        sincos_1d(dh, j as f64, &mut buf[dt + dh..]);
        for (o, &v) in out.row_mut(k).iter_mut().zip(&buf) {
            *o = T::lit(v);
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    norm1: NormIdx,
    qkv: LinearIdx,
    proj: LinearIdx,
    norm2: NormIdx,
    fc1: LinearIdx,
    fc2: LinearIdx,
}

impl BlockIdx {
    fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut seed::Rng, prefix: &str, dim: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: NormIdx::init(store, &format!("{prefix}.norm1"), dim),
            qkv: LinearIdx::init(store, rng, &format!("{prefix}.attn.qkv"), dim, 3 * dim),
            proj: LinearIdx::init(store, rng, &format!("{prefix}.attn.proj"), dim, dim),
            norm2: NormIdx::init(store, &format!("{prefix}.norm2"), dim),
            fc1: LinearIdx::init(store, rng, &format!("{prefix}.mlp.fc1"), dim, mlp_ratio * dim),
            fc2: LinearIdx::init(store, rng, &format!("{prefix}.mlp.fc2"), mlp_ratio * dim, dim),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, dim: usize, heads: usize) -> Var {
        let h = self.norm1.forward(g, p, x);
        let qkv = self.qkv.forward(g, p, h);
        let hd = dim / heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = g.slice_cols(qkv, head * hd, hd);
            let k = g.slice_cols(qkv, dim + head * hd, hd);
            let v = g.slice_cols(qkv, 2 * dim + head * hd, hd);
            let s = g.matmul_bt(q, k);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, v));
        }
        let attn = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let attn = self.proj.forward(g, p, attn);
        let x = g.add(x, attn);
        let h = self.norm2.forward(g, p, x);
        let h = self.fc1.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h);
        g.add(x, h)
    }
}

/// Transformer encoder `f`: patch projection, positional table, blocks,
/// final norm.
#[derive(Clone, Debug)]
pub struct TransformerModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    patch_embed: LinearIdx,
    pos_embed: usize,
    blocks: Vec<BlockIdx>,
    norm: NormIdx,
}

impl<T: Scalar> PartialEq for TransformerModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

pub fn init_model<T: Scalar>(config: ModelConfig, seed: u64) -> Result<TransformerModel<T>> {
    config.validate()?;
    let mut rng = seed::rng(seed, "init/encoder");
    let mut store = ParamStore::new();
    let d = config.embed_dim;
    let patch_embed = LinearIdx::init(&mut store, &mut rng, "patch_embed", config.layout.patch_dim(), d);
    let pos_embed = store.insert("pos_embed", sincos_pos_embed(&config.layout, d), false);
    let blocks = (0..config.depth)
        .map(|i| BlockIdx::init(&mut store, &mut rng, &format!("blocks.{i}"), d, config.mlp_ratio))
        .collect();
    let norm = NormIdx::init(&mut store, "norm", d);
    Ok(TransformerModel { config, params: store, patch_embed, pos_embed, blocks, norm })
}

impl<T: Scalar> TransformerModel<T> {
    /// Rebuilds a model around an existing store; names and shapes must
    /// match what [`init_model`] produces for `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let template = init_model::<T>(config, 0)?;
        check_store_matches(&template.params, &params)?;
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn modality(&self) -> Modality {
        self.config.modality
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.config.layout
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    pub fn cast<U: Scalar>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config,
            params: self.params.cast(),
            patch_embed: self.patch_embed,
            pos_embed: self.pos_embed,
            blocks: self.blocks.clone(),
            norm: self.norm,
        }
    }

    fn check_tokens(&self, tokens: &Mat<T>, indices: &[usize]) -> Result<()> {
        let l = &self.config.layout;
        if tokens.cols != l.patch_dim() {
            return Err(Error::Modality(format!(
                "{} encoder expects patch vectors of length {}, got {}",
                self.config.modality,
                l.patch_dim(),
                tokens.cols
            )));
        }
        if tokens.rows != indices.len() {
            return Err(Error::Shape(format!("{} tokens but {} indices", tokens.rows, indices.len())));
        }
        if tokens.rows == 0 {
            return Err(Error::Shape("encoder needs at least one visible token".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k >= l.total()) {
            return Err(Error::Index(format!("token index {bad} out of range for {} tokens", l.total())));
        }
        Ok(())
    }

    /// Records the encoder on `g`. `tokens` holds one patch vector per
    /// visible token and `indices` their positions in the full sequence.
    pub fn encode_on(&self, g: &mut Graph<T>, p: &Bound, tokens: &Mat<T>, indices: &[usize]) -> Result<Var> {
        self.check_tokens(tokens, indices)?;
        let x = g.constant(tokens.clone());
        let x = self.patch_embed.forward(g, p, x);
        let pos = g.gather_rows(p.var(self.pos_embed), indices);
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, p, x, self.config.embed_dim, self.config.heads);
        }
        Ok(self.norm.forward(g, p, x))
    }

    /// Inference-only encoding, `|visible| x embed_dim`.
    pub fn encode(&self, tokens: &Mat<T>, indices: &[usize]) -> Result<Mat<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.encode_on(&mut g, &p, tokens, indices)?;
        Ok(g.value(out).clone())
    }
}

fn check_store_matches<T: Scalar>(template: &ParamStore<T>, found: &ParamStore<T>) -> Result<()> {
    if template.len() != found.len() {
        return Err(Error::Config(format!(
            "parameter store has {} tensors, config implies {}",
            found.len(),
            template.len()
        )));
    }
    for i in 0..template.len() {
        if template.name(i) != found.name(i) {
            return Err(Error::Config(format!("tensor {i} is {:?}, expected {:?}", found.name(i), template.name(i))));
        }
        if template.value(i).shape() != found.value(i).shape() {
            return Err(Error::Shape(format!(
                "tensor {} has shape {:?}, expected {:?}",
                template.name(i),
                found.value(i).shape(),
                template.value(i).shape()
            )));
        }
    }
    Ok(())
}

/// Encoder whose parameters can no longer change. There is deliberately no
/// way back to a mutable [`TransformerModel`].
#[derive(Clone, Debug)]
pub struct FrozenModel<T>(TransformerModel<T>);

impl<T: Scalar> PartialEq for FrozenModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

pub fn freeze<T: Scalar>(model: TransformerModel<T>) -> FrozenModel<T> {
    FrozenModel(model)
}

impl<T: Scalar> FrozenModel<T> {
    pub fn model(&self) -> &TransformerModel<T> {
        &self.0
    }

    pub fn config(&self) -> &ModelConfig {
        &self.0.config
    }

    pub fn modality(&self) -> Modality {
        self.0.modality()
    }

    pub fn hash(&self) -> String {
        self.0.hash()
    }

    /// Binds the parameters as constants: nothing downstream can produce a
    /// gradient for them.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.0.params.bind(g, false)
    }

    pub fn encode(&self, tokens: &Mat<T>, indices: &[usize]) -> Result<Mat<T>> {
        self.0.encode(tokens, indices)
    }

    /// Full-sequence encoding of all `layout.total()` tokens.
    pub fn encode_all(&self, tokens: &Mat<T>) -> Result<Mat<T>> {
        let all: Vec<usize> = (0..self.0.layout().total()).collect();
        self.0.encode(tokens, &all)
    }

    pub fn cast<U: Scalar>(&self) -> FrozenModel<U> {
        FrozenModel(self.0.cast())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub input_dim: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub output_dim: usize,
    pub layout: TokenLayout,
}

impl DecoderConfig {
    /// Decoder on top of `encoder` predicting `output_dim` values per token.
    pub fn for_encoder(encoder: &ModelConfig, output_dim: usize) -> Self {
        Self {
            input_dim: encoder.embed_dim,
            dim: encoder.decoder_dim,
            depth: encoder.decoder_depth,
            heads: encoder.heads,
            mlp_ratio: encoder.mlp_ratio,
            output_dim,
            layout: encoder.layout,
        }
    }
}

/// Shallow decoder `g`: input projection, learned mask token, blocks, norm,
/// linear prediction head.
#[derive(Clone, Debug)]
pub struct DecoderModel<T> {
    config: DecoderConfig,
    params: ParamStore<T>,
    embed: LinearIdx,
    mask_token: usize,
    pos_embed: usize,
    blocks: Vec<BlockIdx>,
    norm: NormIdx,
    head: LinearIdx,
}

pub const MASK_TOKEN_STD: f64 = 0.02;

pub fn init_decoder<T: Scalar>(config: DecoderConfig, seed: u64) -> Result<DecoderModel<T>> {
    if !config.dim.is_multiple_of(config.heads) || config.depth == 0 || config.output_dim == 0 {
        return Err(Error::Config(format!("invalid decoder config {config:?}")));
    }
    let mut rng = seed::rng(seed, "init/decoder");
    let mut store = ParamStore::new();
    let embed = LinearIdx::init(&mut store, &mut rng, "embed", config.input_dim, config.dim);
    let mask_token = store.insert("mask_token", normal(&mut rng, 1, config.dim, MASK_TOKEN_STD), true);
    let pos_embed = store.insert("pos_embed", sincos_pos_embed(&config.layout, config.dim), false);
    let blocks = (0..config.depth)
        .map(|i| BlockIdx::init(&mut store, &mut rng, &format!("blocks.{i}"), config.dim, config.mlp_ratio))
        .collect();
    let norm = NormIdx::init(&mut store, "norm", config.dim);
    let head = LinearIdx::init(&mut store, &mut rng, "head", config.dim, config.output_dim);
    Ok(DecoderModel { config, params: store, embed, mask_token, pos_embed, blocks, norm, head })
}

impl<T: Scalar> DecoderModel<T> {
    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn hash(&self) -> String {
        self.params.hash()
    }

    pub fn mask_token(&self) -> &Mat<T> {
        self.params.value(self.mask_token)
    }

    pub fn cast<U: Scalar>(&self) -> DecoderModel<U> {
        DecoderModel {
            config: self.config,
            params: self.params.cast(),
            embed: self.embed,
            mask_token: self.mask_token,
            pos_embed: self.pos_embed,
            blocks: self.blocks.clone(),
            norm: self.norm,
            head: self.head,
        }
    }

    /// Records `g(concat(features, mask tokens))` and returns predictions
    /// for every token position (`layout.total() x output_dim`).
    pub fn decode_on(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        features: Var,
        visible: &[usize],
        masked: &[usize],
    ) -> Result<Var> {
        let total = self.config.layout.total();
        let feat = g.value(features);
        if feat.rows != visible.len() || feat.cols != self.config.input_dim {
            return Err(Error::Shape(format!(
                "decoder got {:?} features for {} visible tokens (width {})",
                feat.shape(),
                visible.len(),
                self.config.input_dim
            )));
        }
        let mut seen = vec![false; total];
        for &k in visible.iter().chain(masked) {
            if k >= total {
                return Err(Error::Index(format!("token index {k} out of range for {total} tokens")));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Index(format!("token index {k} appears more than once")));
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Index(format!(
                "{} visible + {} masked indices do not cover {total} tokens",
                visible.len(),
                masked.len()
            )));
        }
        let x = self.embed.forward(g, p, features);
        // With mask tokens the sequence is laid out in grid order; without
        // them it keeps the order of `visible`.
        let (x, order): (Var, &[usize]) = if masked.is_empty() {
            (x, visible)
        } else {
            let tokens = g.repeat_row(p.var(self.mask_token), masked.len());
            (g.scatter_rows(&[(x, visible), (tokens, masked)], total), &[])
        };
        let pos = if order.is_empty() { p.var(self.pos_embed) } else { g.gather_rows(p.var(self.pos_embed), order) };
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            x = block.forward(g, p, x, self.config.dim, self.config.heads);
        }
        let x = self.norm.forward(g, p, x);
        let y = self.head.forward(g, p, x);
        if order.is_empty() || order.iter().enumerate().all(|(i, &k)| i == k) {
            Ok(y)
        } else {
            Ok(g.scatter_rows(&[(y, order)], total))
        }
    }

    /// Inference-only decoding.
    pub fn decode(&self, features: &Mat<T>, visible: &[usize], masked: &[usize]) -> Result<Mat<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let f = g.constant(features.clone());
        let out = self.decode_on(&mut g, &p, f, visible, masked)?;
        Ok(g.value(out).clone())
    }
}

/// Multiply-accumulate estimate of one encoder pass over `tokens` tokens.
pub fn encoder_flops(config: &ModelConfig, tokens: usize) -> u64 {
    let n = tokens as u64;
    let d = config.embed_dim as u64;
    let embed = n * config.layout.patch_dim() as u64 * d;
    let per_block = n * d * 3 * d + 2 * n * n * d + n * d * d + 2 * n * d * d * config.mlp_ratio as u64;
    embed + config.depth as u64 * per_block
}
