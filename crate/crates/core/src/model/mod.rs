//! Space-time cube tokenizer, transformer encoder, reconstruction decoder and
//! phase classification head.

mod layers;
mod params;
mod posenc;

pub use layers::{log_softmax_last, softmax_last, Block, LayerNorm, Linear, Mlp};
pub use params::{Init, ParamStore};
pub use posenc::sincos_table;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::geometry::{patchify, TokenGeometry, TokenGrid};
use crate::masking::MaskPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    VitSmall,
    TinyTest,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::VitSmall => "vit_small",
            Preset::TinyTest => "tiny_test",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit_small" => Ok(Preset::VitSmall),
            "tiny_test" => Ok(Preset::TinyTest),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected vit_small or tiny_test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    ClassToken,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "class_token" => Ok(Pooling::ClassToken),
            other => Err(Error::Config(format!(
                "unknown pooling `{other}` (expected mean or class_token)"
            ))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::ClassToken => "class_token",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub token_geometry: TokenGeometry,
    /// (T, C, H, W)
    pub input_shape: (usize, usize, usize, usize),
    pub n_classes: usize,
    pub pooling: Pooling,
}

impl ModelConfig {
    /// ViT-S/16 encoder on 10 x 224 x 224 clips with 2x16x16 cubes.
    pub fn vit_small() -> Self {
        Self {
            preset: Preset::VitSmall,
            embed_dim: 384,
            encoder_depth: 12,
            encoder_heads: 6,
            decoder_dim: 192,
            decoder_depth: 4,
            decoder_heads: 3,
            mlp_ratio: 4,
            token_geometry: TokenGeometry::new(2, 16, 16),
            input_shape: (10, 3, 224, 224),
            n_classes: crate::data::NUM_PHASES,
            pooling: Pooling::Mean,
        }
    }

    /// CPU-sized model on 4 x 64 x 64 clips with 2x8x8 cubes.
    pub fn tiny_test() -> Self {
        Self {
            preset: Preset::TinyTest,
            embed_dim: 64,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 4,
            token_geometry: TokenGeometry::new(2, 8, 8),
            input_shape: (4, 3, 64, 64),
            n_classes: crate::data::NUM_PHASES,
            pooling: Pooling::Mean,
        }
    }

    pub fn from_preset(preset: Preset) -> Self {
        match preset {
            Preset::VitSmall => Self::vit_small(),
            Preset::TinyTest => Self::tiny_test(),
        }
    }

    pub fn grid(&self) -> Result<TokenGrid> {
        let (t, _, h, w) = self.input_shape;
        self.token_geometry.grid(t, h, w)
    }

    pub fn token_pixels(&self) -> Result<usize> {
        Ok(self.grid()?.token_pixels(self.input_shape.1))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        for (name, dim, heads) in [
            ("encoder", self.embed_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(Error::Config(format!(
                    "{name} width {dim} is not divisible by {heads} heads"
                )));
            }
            if dim % 2 != 0 {
                return Err(Error::Config(format!("{name} width {dim} must be even")));
            }
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        Ok(())
    }

    /// Parameters of one pre-norm block of width `dim`.
    fn block_params(&self, dim: usize) -> usize {
        let hidden = dim * self.mlp_ratio;
        let attn = dim * 3 * dim + 3 * dim + dim * dim + dim;
        let mlp = dim * hidden + hidden + hidden * dim + dim;
        let norms = 4 * dim;
        attn + mlp + norms
    }

    /// Encoder parameters: cube projection, blocks and final norm.
    /// For ViT-S this is `P*F + F + 12*(12F^2 + 13F) + 2F` = 21,884,544.
    pub fn encoder_param_count(&self) -> Result<usize> {
        let f = self.embed_dim;
        let p = self.token_pixels()?;
        Ok(p * f + f + self.encoder_depth * self.block_params(f) + 2 * f)
    }

    pub fn decoder_param_count(&self) -> Result<usize> {
        let (f, d) = (self.embed_dim, self.decoder_dim);
        let p = self.token_pixels()?;
        Ok(f * d + d + d + self.decoder_depth * self.block_params(d) + 2 * d + d * p + p)
    }

    pub fn head_param_count(&self) -> usize {
        let f = self.embed_dim;
        let cls = if self.pooling == Pooling::ClassToken { f } else { 0 };
        f * f + f + f * self.n_classes + self.n_classes + cls
    }
}

/// Converts clips into a `(B, L, P)` tensor of per-token pixel rows.
pub fn clips_to_tokens(clips: &[VideoClip], cfg: &ModelConfig, dtype: DType) -> Result<Tensor> {
    let grid = cfg.grid()?;
    let p = cfg.token_pixels()?;
    let mut data = Vec::with_capacity(clips.len() * grid.len() * p);
    for clip in clips {
        if clip.shape() != cfg.input_shape {
            return Err(Error::Shape(format!(
                "clip {}@{} has shape {:?}, model expects {:?}",
                clip.video_id,
                clip.start_frame,
                clip.shape(),
                cfg.input_shape
            )));
        }
        data.extend(patchify(&clip.pixels, cfg.token_geometry)?.iter().copied());
    }
    Ok(Tensor::from_vec(data, (clips.len(), grid.len(), p), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Wraps one `(L, P)` token matrix as a `(1, L, P)` tensor.
pub fn tokens_to_tensor(tokens: &Array2<f32>, dtype: DType) -> Result<Tensor> {
    let (l, p) = tokens.dim();
    Ok(Tensor::from_iter(tokens.iter().copied(), &Device::Cpu)?
        .reshape((1, l, p))?
        .to_dtype(dtype)?)
}

fn check_tokens(tokens: &Tensor, grid: &TokenGrid, p: usize) -> Result<usize> {
    let (b, l, pp) = tokens.dims3()?;
    if l != grid.len() || pp != p {
        return Err(Error::Shape(format!(
            "expected (B, {}, {p}) tokens, got ({b}, {l}, {pp})",
            grid.len()
        )));
    }
    Ok(b)
}

/// Cube projection, fixed position encodings and transformer blocks.
#[derive(Debug, Clone)]
pub struct Encoder {
    patch_embed: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    pos: Tensor,
    grid: TokenGrid,
    token_pixels: usize,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let grid = cfg.grid()?;
        let token_pixels = cfg.token_pixels()?;
        let f = cfg.embed_dim;
        let patch_embed = Linear::new(store, "encoder.patch_embed", token_pixels, f)?;
        let blocks = (0..cfg.encoder_depth)
            .map(|i| Block::new(store, &format!("encoder.blocks.{i}"), f, cfg.encoder_heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", f)?;
        let pos = sincos_table(&grid, f, store.dtype())?;
        Ok(Self {
            patch_embed,
            blocks,
            norm,
            pos,
            grid,
            token_pixels,
        })
    }

    /// Token embeddings `(B, L, F)`: cube projection plus position encoding.
    pub fn embed(&self, tokens: &Tensor) -> Result<Tensor> {
        check_tokens(tokens, &self.grid, self.token_pixels)?;
        Ok(self.patch_embed.forward(tokens)?.broadcast_add(&self.pos)?)
    }

    /// Runs the transformer over `(B, L', F)` embeddings.
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    pub fn position_encodings(&self) -> &Tensor {
        &self.pos
    }
}

/// Builds flat row indices into a `(B*L, .)` matrix selecting `rows[b]` of each clip.
fn gather_index(rows: &[Vec<usize>], per_clip: usize) -> Result<Tensor> {
    let idx: Vec<u32> = rows
        .iter()
        .enumerate()
        .flat_map(|(b, r)| r.iter().map(move |&i| (b * per_clip + i) as u32))
        .collect();
    Ok(Tensor::from_vec(idx.clone(), idx.len(), &Device::Cpu)?)
}

fn uniform_len(rows: &[Vec<usize>], what: &str) -> Result<usize> {
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!(
            "all clips in a batch must have the same number of {what} tokens"
        )));
    }
    Ok(n)
}

/// Masked autoencoder: the encoder sees only visible tokens, the decoder
/// fills masked slots with a shared learned token and predicts their pixels.
#[derive(Debug, Clone)]
pub struct MaskedAutoencoder {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    encoder_to_decoder: Linear,
    mask_token: Var,
    decoder_blocks: Vec<Block>,
    decoder_norm: LayerNorm,
    decoder_head: Linear,
    decoder_pos: Tensor,
}

impl MaskedAutoencoder {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let encoder = Encoder::new(&mut store, cfg)?;
        let d = cfg.decoder_dim;
        let encoder_to_decoder = Linear::new(&mut store, "decoder.embed", cfg.embed_dim, d)?;
        let mask_token = store.create("decoder.mask_token", &[d], Init::Normal(0.02))?;
        let decoder_blocks = (0..cfg.decoder_depth)
            .map(|i| Block::new(&mut store, &format!("decoder.blocks.{i}"), d, cfg.decoder_heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", d)?;
        let decoder_head = Linear::new(&mut store, "decoder.head", d, cfg.token_pixels()?)?;
        let decoder_pos = sincos_table(&cfg.grid()?, d, dtype)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            encoder_to_decoder,
            mask_token,
            decoder_blocks,
            decoder_norm,
            decoder_head,
            decoder_pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn check_plans(&self, plans: &[MaskPlan], batch: usize) -> Result<()> {
        let grid = self.encoder.grid;
        if plans.len() != batch {
            return Err(Error::Shape(format!("{} mask plans for a batch of {batch}", plans.len())));
        }
        for plan in plans {
            if plan.mask.dim() != (grid.temporal, grid.spatial()) {
                return Err(Error::Shape(format!(
                    "mask plan is {:?}, token grid is ({}, {})",
                    plan.mask.dim(),
                    grid.temporal,
                    grid.spatial()
                )));
            }
        }
        Ok(())
    }

    /// Encodes the visible tokens of each clip: `(B, L, P)` -> `(B, V, F)`,
    /// rows ordered by ascending flat token index.
    pub fn encode_visible(&self, tokens: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
        let x = self.encoder.embed(tokens)?;
        let (b, l, f) = x.dims3()?;
        self.check_plans(plans, b)?;
        let visible: Vec<Vec<usize>> = plans.iter().map(MaskPlan::visible_indices).collect();
        let v = uniform_len(&visible, "visible")?;
        if v == 0 {
            return Err(Error::Config("every token is masked; the encoder has no input".into()));
        }
        let x = x
            .reshape((b * l, f))?
            .index_select(&gather_index(&visible, l)?, 0)?
            .reshape((b, v, f))?;
        self.encoder.transform(&x)
    }

    /// Predicts the pixels of every masked token: `(B, V, F)` -> `(B, M, P)`,
    /// rows ordered by ascending flat token index.
    pub fn decode_reconstruction(&self, encoded: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
        let (b, v, f) = encoded.dims3()?;
        self.check_plans(plans, b)?;
        if f != self.cfg.embed_dim {
            return Err(Error::Shape(format!("encoded width {f}, expected {}", self.cfg.embed_dim)));
        }
        let l = self.encoder.grid.len();
        let masked: Vec<Vec<usize>> = plans.iter().map(MaskPlan::masked_indices).collect();
        let m = uniform_len(&masked, "masked")?;
        if v + m != l {
            return Err(Error::Shape(format!("{v} encoded + {m} masked tokens != {l}")));
        }
        let d = self.cfg.decoder_dim;
        let y = self.encoder_to_decoder.forward(encoded)?.reshape((b * v, d))?;
        let fill = self
            .mask_token
            .as_tensor()
            .reshape((1, d))?
            .broadcast_as((b * m, d))?;
        let pool = Tensor::cat(&[&y, &fill], 0)?;

        // Scatter visible outputs and mask tokens back to their grid slots.
        let mut order = Vec::with_capacity(b * l);
        for plan in plans {
            let (mut vi, mut mi) = (0, 0);
            let bi = order.len() / l;
            for &is_masked in plan.mask.iter() {
                if is_masked {
                    order.push((b * v + bi * m + mi) as u32);
                    mi += 1;
                } else {
                    order.push((bi * v + vi) as u32);
                    vi += 1;
                }
            }
        }
        let order = Tensor::from_vec(order, b * l, &Device::Cpu)?;
        let mut x = pool
            .index_select(&order, 0)?
            .reshape((b, l, d))?
            .broadcast_add(&self.decoder_pos)?;
        for block in &self.decoder_blocks {
            x = block.forward(&x)?;
        }
        let x = self.decoder_norm.forward(&x)?;
        let p = self.cfg.token_pixels()?;
        let x = x
            .reshape((b * l, d))?
            .index_select(&gather_index(&masked, l)?, 0)?;
        Ok(self.decoder_head.forward(&x)?.reshape((b, m, p))?)
    }

    pub fn forward(&self, tokens: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
        let encoded = self.encode_visible(tokens, plans)?;
        self.decode_reconstruction(&encoded, plans)
    }
}

/// Mean squared error over the pixels of masked tokens only.
///
/// `pred` is `(B, M, P)` in the masked-token order of `plans`; `tokens` is the
/// `(B, L, P)` ground truth.
pub fn reconstruction_loss(pred: &Tensor, tokens: &Tensor, plans: &[MaskPlan]) -> Result<Tensor> {
    let (b, l, p) = tokens.dims3()?;
    let masked: Vec<Vec<usize>> = plans.iter().map(MaskPlan::masked_indices).collect();
    if plans.len() != b {
        return Err(Error::Shape(format!("{} plans for a batch of {b}", plans.len())));
    }
    let m = uniform_len(&masked, "masked")?;
    if pred.dims() != [b, m, p] {
        return Err(Error::Shape(format!(
            "prediction is {:?}, expected [{b}, {m}, {p}]",
            pred.dims()
        )));
    }
    let target = tokens
        .reshape((b * l, p))?
        .index_select(&gather_index(&masked, l)?, 0)?
        .reshape((b, m, p))?
        .detach();
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Encoder plus a two-layer MLP head over pooled token features.
#[derive(Debug, Clone)]
pub struct PhaseClassifier {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    class_token: Option<Var>,
    head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhasePrediction {
    pub probabilities: Vec<f64>,
    pub label: usize,
}

impl PhaseClassifier {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let encoder = Encoder::new(&mut store, cfg)?;
        let class_token = match cfg.pooling {
            Pooling::ClassToken => Some(store.create("head.class_token", &[cfg.embed_dim], Init::Normal(0.02))?),
            Pooling::Mean => None,
        };
        let f = cfg.embed_dim;
        let head = Mlp::new(&mut store, "head", f, f, cfg.n_classes)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            class_token,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Logits `(B, K)` from `(B, L, P)` tokens; the encoder sees every token.
    pub fn logits(&self, tokens: &Tensor) -> Result<Tensor> {
        let x = self.encoder.embed(tokens)?;
        let (b, _, f) = x.dims3()?;
        let pooled = match &self.class_token {
            None => self.encoder.transform(&x)?.mean(1)?,
            Some(cls) => {
                let cls = cls.as_tensor().reshape((1, 1, f))?.broadcast_as((b, 1, f))?;
                let x = Tensor::cat(&[&cls, &x], 1)?;
                self.encoder.transform(&x)?.narrow(1, 0, 1)?.squeeze(1)?
            }
        };
        self.head.forward(&pooled)
    }

    pub fn predict(&self, clips: &[VideoClip]) -> Result<Vec<PhasePrediction>> {
        let tokens = clips_to_tokens(clips, &self.cfg, self.store.dtype())?;
        let probs = softmax_last(&self.logits(&tokens)?)?.to_dtype(DType::F64)?;
        let rows: Vec<Vec<f64>> = probs.to_vec2()?;
        Ok(rows
            .into_iter()
            .map(|probabilities| {
                let label = probabilities
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(i, _)| i);
                PhasePrediction { probabilities, label }
            })
            .collect())
    }

    /// Copies every `encoder.*` parameter from `source`.
    pub fn load_encoder_from(&self, source: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for (name, _) in self.store.iter().filter(|(n, _)| n.starts_with("encoder.")) {
            let var = source
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("source is missing `{name}`")))?;
            self.store.assign(name, var.as_tensor())?;
            copied += 1;
        }
        Ok(copied)
    }
}
