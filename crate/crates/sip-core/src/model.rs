//! Monaural and binaural intelligibility-prediction models.
//!
//! Pipeline per encoder layer: temporal average pooling, a shared linear
//! projection into the model width, a temporal transform block (weights
//! shared across layers), and global average pooling over time. The layer
//! embeddings are stacked with a projected audiogram row, passed through a
//! transformer-typed layer block, mean-pooled, and mapped through
//! sigmoid·100 into a percentage.

use crate::blocks::{
    BinauralBlockParams, BlockDims, TemporalBlockParams, TemporalVariant, TransformerBlockParams,
};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::params::{join, Linear, Param, ParamGroup};
use crate::real::Real;
use crate::scan::ScanMode;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Stacked encoder-layer features: `layers × frames × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<R: Real> {
    layers: usize,
    frames: usize,
    dim: usize,
    values: Vec<R>,
}

impl<R: Real> FeatureTensor<R> {
    pub fn new(layers: usize, frames: usize, dim: usize, values: Vec<R>) -> Result<Self> {
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature tensor dims must be positive, got {layers}x{frames}x{dim}"
            )));
        }
        if values.len() != layers * frames * dim {
            return Err(Error::InvalidArgument(format!(
                "feature tensor {layers}x{frames}x{dim} needs {} values, got {}",
                layers * frames * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "feature_tensor",
                detail: "input features".into(),
            });
        }
        Ok(FeatureTensor {
            layers,
            frames,
            dim,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }
    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn values(&self) -> &[R] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [R] {
        &mut self.values
    }

    /// One encoder layer as a `[frames, dim]` matrix.
    pub fn layer(&self, l: usize) -> Tensor<R> {
        let stride = self.frames * self.dim;
        Tensor::new(
            vec![self.frames, self.dim],
            self.values[l * stride..(l + 1) * stride].to_vec(),
        )
        .expect("layer slice shape")
    }

    pub fn cast<S: Real>(&self) -> FeatureTensor<S> {
        FeatureTensor {
            layers: self.layers,
            frames: self.frames,
            dim: self.dim,
            values: self.values.iter().map(|v| S::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Hearing thresholds in dB HL at the configured frequency bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audiogram {
    pub thresholds: Vec<f64>,
}

impl Audiogram {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        for &t in &thresholds {
            if !(-10.0..=120.0).contains(&t) {
                return Err(Error::InvalidArgument(format!(
                    "audiogram threshold {t} dB HL outside [-10, 120]"
                )));
            }
        }
        Ok(Audiogram { thresholds })
    }

    pub fn bands(&self) -> usize {
        self.thresholds.len()
    }
}

/// Where normalization statistics are estimated: independently per encoder
/// layer (default) or pooled over all layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormScope {
    PerLayer,
    Global,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub binaural: bool,
    pub variant: TemporalVariant,
    /// Encoder layer count L.
    pub layers: usize,
    /// Encoder feature width (1280 for the published configuration).
    pub input_dim: usize,
    /// Model width d.
    pub model_dim: usize,
    /// Audiogram frequency bands F.
    pub audiogram_bands: usize,
    /// Temporal pooling size p.
    pub pool: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub mlp_mult: usize,
    pub dropout_attn: f64,
    pub dropout_mamba: f64,
    pub d_skip: bool,
    pub scan: ScanMode,
    pub norm_scope: NormScope,
    pub seed: u64,
}

impl ModelConfig {
    /// Published full-scale monaural configuration: 32 encoder layers of
    /// 1280-dim features, d = 384, pooling 20.
    pub fn published_mono(variant: TemporalVariant) -> Self {
        ModelConfig {
            binaural: false,
            variant,
            layers: 32,
            input_dim: 1280,
            model_dim: 384,
            audiogram_bands: 8,
            pool: 20,
            state_dim: 16,
            expand: 2,
            conv_width: 4,
            mlp_mult: 4,
            dropout_attn: 0.1,
            dropout_mamba: 0.3,
            d_skip: true,
            scan: ScanMode::Sequential,
            norm_scope: NormScope::PerLayer,
            seed: 0,
        }
    }

    pub fn published_binaural(variant: TemporalVariant) -> Self {
        ModelConfig {
            binaural: true,
            ..Self::published_mono(variant)
        }
    }

    /// Desk-scale configuration for synthetic-fixture experiments.
    pub fn desk(variant: TemporalVariant, binaural: bool) -> Self {
        ModelConfig {
            binaural,
            variant,
            layers: 4,
            input_dim: 32,
            model_dim: 32,
            audiogram_bands: 8,
            pool: 4,
            state_dim: 8,
            expand: 2,
            conv_width: 4,
            mlp_mult: 4,
            dropout_attn: 0.1,
            dropout_mamba: 0.3,
            d_skip: true,
            scan: ScanMode::Sequential,
            norm_scope: NormScope::PerLayer,
            seed: 0,
        }
    }

    /// Minimal dims for gradient checks.
    pub fn tiny(variant: TemporalVariant, binaural: bool) -> Self {
        ModelConfig {
            binaural,
            variant,
            layers: 2,
            input_dim: 16,
            model_dim: 8,
            audiogram_bands: 4,
            pool: 2,
            state_dim: 2,
            expand: 2,
            conv_width: 3,
            mlp_mult: 2,
            dropout_attn: 0.1,
            dropout_mamba: 0.3,
            d_skip: true,
            scan: ScanMode::Sequential,
            norm_scope: NormScope::PerLayer,
            seed: 0,
        }
    }

    /// Low-rank width of the Mamba step projection, following the cited
    /// reference parameterization (24 at d = 384).
    pub fn dt_rank(&self) -> usize {
        self.model_dim.div_ceil(16).max(1)
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d: self.model_dim,
            mlp_hidden: self.mlp_mult * self.model_dim,
            expand: self.expand,
            state_dim: self.state_dim,
            conv_width: self.conv_width,
            dt_rank: self.dt_rank(),
            dropout_attn: self.dropout_attn,
            dropout_mamba: self.dropout_mamba,
            d_skip: self.d_skip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool < 1 {
            return Err(Error::Config("pooling size must be >= 1".into()));
        }
        if self.layers < 1 || self.input_dim < 1 || self.model_dim < 1 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.binaural && !TemporalVariant::BINAURAL.contains(&self.variant) {
            return Err(Error::Config(format!(
                "variant {} has no binaural configuration",
                self.variant
            )));
        }
        Ok(())
    }
}

/// Temporal stage: one shared monaural block, or the binaural block pair.
#[derive(Debug, Clone)]
pub enum TemporalStage<R: Real> {
    Mono(TemporalBlockParams<R>),
    Binaural(BinauralBlockParams<R>),
}

/// All trainable weights of one model configuration.
#[derive(Debug, Clone)]
pub struct SipModelParams<R: Real> {
    pub feature_proj: Linear<R>,
    pub audiogram_proj: Linear<R>,
    pub temporal: TemporalStage<R>,
    pub layer_block: TransformerBlockParams<R>,
    pub head: Linear<R>,
}

impl<R: Real> SipModelParams<R> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let dims = config.block_dims();
        let temporal = if config.binaural {
            TemporalStage::Binaural(BinauralBlockParams::init(&mut rng, config.variant, &dims)?)
        } else {
            TemporalStage::Mono(TemporalBlockParams::init(&mut rng, config.variant, &dims))
        };
        // The layer transform block is always transformer-typed (temporal
        // information is already pooled to one vector per layer).
        let layer_dims = BlockDims {
            dropout_mamba: dims.dropout_attn,
            ..dims
        };
        Ok(SipModelParams {
            feature_proj: Linear::init(&mut rng, config.model_dim, config.input_dim, true),
            audiogram_proj: Linear::init(&mut rng, config.model_dim, config.audiogram_bands, true),
            temporal,
            layer_block: TransformerBlockParams::init(&mut rng, &layer_dims, true, true),
            head: Linear::init(&mut rng, 1, config.model_dim, true),
        })
    }
}

impl<R: Real> ParamGroup<R> for SipModelParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.feature_proj.collect(&join(prefix, "feature_proj"), out);
        self.audiogram_proj
            .collect(&join(prefix, "audiogram_proj"), out);
        match &self.temporal {
            TemporalStage::Mono(p) => p.collect(&join(prefix, "temporal"), out),
            TemporalStage::Binaural(p) => p.collect(&join(prefix, "temporal"), out),
        }
        self.layer_block.collect(&join(prefix, "layer_block"), out);
        self.head.collect(&join(prefix, "head"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.feature_proj
            .collect_mut(&join(prefix, "feature_proj"), out);
        self.audiogram_proj
            .collect_mut(&join(prefix, "audiogram_proj"), out);
        match &mut self.temporal {
            TemporalStage::Mono(p) => p.collect_mut(&join(prefix, "temporal"), out),
            TemporalStage::Binaural(p) => p.collect_mut(&join(prefix, "temporal"), out),
        }
        self.layer_block
            .collect_mut(&join(prefix, "layer_block"), out);
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

/// One evaluation input: left (and optionally right) channel features with
/// the matching ear audiograms.
#[derive(Debug, Clone)]
pub struct SampleInput<R: Real> {
    pub left: FeatureTensor<R>,
    pub right: Option<FeatureTensor<R>>,
    pub audiogram_left: Audiogram,
    pub audiogram_right: Option<Audiogram>,
}

/// Non-overlapping temporal average pooling. A final partial window is
/// averaged over its actual length, so no frames are discarded.
pub fn pool_time<R: Real>(x: &Tensor<R>, p: usize) -> Result<Tensor<R>> {
    if p < 1 {
        return Err(Error::InvalidArgument(format!("pooling size {p}")));
    }
    if x.rank() != 2 || x.shape()[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "pool_time input shape {:?}",
            x.shape()
        )));
    }
    let (t_len, dim) = (x.shape()[0], x.shape()[1]);
    let out_len = t_len.div_ceil(p);
    let mut data = vec![R::ZERO; out_len * dim];
    for w in 0..out_len {
        let start = w * p;
        let end = (start + p).min(t_len);
        let inv = R::ONE / R::from_f64((end - start) as f64);
        for t in start..end {
            for c in 0..dim {
                data[w * dim + c] += x.data()[t * dim + c];
            }
        }
        for c in 0..dim {
            data[w * dim + c] *= inv;
        }
    }
    Tensor::new(vec![out_len, dim], data)
}

/// Statistical normalization with per-dimension mean/std from a training
/// split. Standard deviations are floored at 1e-8 when the stats are built.
pub fn normalize_features<R: Real>(
    feats: &FeatureTensor<R>,
    stats: &NormStats,
) -> Result<FeatureTensor<R>> {
    stats.check_compatible(feats.layers(), feats.dim())?;
    let mut out = feats.clone();
    let dim = feats.dim();
    let stride = feats.frames() * dim;
    for l in 0..feats.layers() {
        for t in 0..feats.frames() {
            for c in 0..dim {
                let (mean, std) = stats.mean_std(l, c);
                let idx = l * stride + t * dim + c;
                let v = out.values()[idx].to_f64();
                out.values_mut()[idx] = R::from_f64((v - mean) / std);
            }
        }
    }
    Ok(out)
}

/// Audiogram thresholds as a `[1, F]` tape input, linearly projected to
/// `[1, d]`. No activation.
pub fn embed_audiogram<R: Real>(
    g: &mut Tape<R>,
    params: &SipModelParams<R>,
    audiogram: &Audiogram,
    expected_bands: usize,
) -> Result<Var> {
    if audiogram.bands() != expected_bands {
        return Err(Error::Config(format!(
            "audiogram has {} bands, model expects {expected_bands}",
            audiogram.bands()
        )));
    }
    let row = Tensor::new(
        vec![1, expected_bands],
        audiogram.thresholds.iter().map(|&t| R::from_f64(t)).collect(),
    )?;
    let v = g.input(row);
    params.audiogram_proj.apply(g, v)
}

fn check_features<R: Real>(feats: &FeatureTensor<R>, config: &ModelConfig) -> Result<()> {
    if feats.layers() != config.layers || feats.dim() != config.input_dim {
        return Err(Error::Config(format!(
            "features {}x{}x{} do not match model config L={}, D_in={}",
            feats.layers(),
            feats.frames(),
            feats.dim(),
            config.layers,
            config.input_dim
        )));
    }
    Ok(())
}

/// Per-layer monaural encoding: pool, project, temporal transform, global
/// average pooling over time. Returns the `[L, d]` layer-embedding matrix.
pub fn encode_layers<R: Real>(
    g: &mut Tape<R>,
    feats: &FeatureTensor<R>,
    config: &ModelConfig,
    params: &SipModelParams<R>,
) -> Result<Var> {
    check_features(feats, config)?;
    let TemporalStage::Mono(block) = &params.temporal else {
        return Err(Error::Config("encode_layers needs a monaural model".into()));
    };
    let mut embs = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let pooled = pool_time(&feats.layer(l), config.pool)?;
        let v = g.input(pooled);
        let proj = params.feature_proj.apply(g, v)?;
        let y = block.forward(g, proj)?;
        embs.push(g.mean_rows(y)?);
    }
    g.concat_rows(&embs)
}

/// Layer-wise head: stack the audiogram row under the layer embeddings,
/// run the layer transformer, mean over the layer axis, project to one
/// logit, sigmoid, scale to percent.
pub fn layerwise_head<R: Real>(
    g: &mut Tape<R>,
    params: &SipModelParams<R>,
    layer_embs: Var,
    audio_emb: Var,
) -> Result<Var> {
    let cat = g.concat_rows(&[layer_embs, audio_emb])?;
    let y = params.layer_block.forward(g, cat)?;
    let pooled = g.mean_rows(y)?;
    let d = g.value(pooled).numel();
    let row = g.reshape(pooled, vec![1, d])?;
    percent_head(g, params, row)
}

fn percent_head<R: Real>(g: &mut Tape<R>, params: &SipModelParams<R>, row: Var) -> Result<Var> {
    let logit = params.head.apply(g, row)?;
    let sig = g.sigmoid(logit)?;
    let pct = g.scale(sig, 100.0)?;
    g.reshape(pct, vec![])
}

pub fn predict_mono<R: Real>(
    g: &mut Tape<R>,
    feats: &FeatureTensor<R>,
    audiogram: &Audiogram,
    config: &ModelConfig,
    params: &SipModelParams<R>,
) -> Result<Var> {
    if config.binaural {
        return Err(Error::Config("predict_mono on a binaural config".into()));
    }
    let embs = encode_layers(g, feats, config, params)?;
    let audio = embed_audiogram(g, params, audiogram, config.audiogram_bands)?;
    layerwise_head(g, params, embs, audio)
}

/// Binaural prediction: per-channel encoders coupled by the binaural
/// temporal block; shared layer transformer and pooling per channel; the
/// two pooled embeddings are averaged before the final linear head.
pub fn predict_binaural<R: Real>(
    g: &mut Tape<R>,
    feats_left: &FeatureTensor<R>,
    feats_right: &FeatureTensor<R>,
    audiogram_left: &Audiogram,
    audiogram_right: &Audiogram,
    config: &ModelConfig,
    params: &SipModelParams<R>,
) -> Result<Var> {
    if !config.binaural {
        return Err(Error::Config("predict_binaural on a monaural config".into()));
    }
    check_features(feats_left, config)?;
    check_features(feats_right, config)?;
    if feats_left.frames() != feats_right.frames() {
        return Err(Error::Config(format!(
            "channel frame counts differ: {} vs {}",
            feats_left.frames(),
            feats_right.frames()
        )));
    }
    let TemporalStage::Binaural(block) = &params.temporal else {
        return Err(Error::Config(
            "predict_binaural needs binaural temporal parameters".into(),
        ));
    };

    let mut embs_left = Vec::with_capacity(config.layers);
    let mut embs_right = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let pl = pool_time(&feats_left.layer(l), config.pool)?;
        let pr = pool_time(&feats_right.layer(l), config.pool)?;
        let vl = g.input(pl);
        let vr = g.input(pr);
        let jl = params.feature_proj.apply(g, vl)?;
        let jr = params.feature_proj.apply(g, vr)?;
        let (yl, yr) = block.forward(g, jl, jr)?;
        embs_left.push(g.mean_rows(yl)?);
        embs_right.push(g.mean_rows(yr)?);
    }

    let mut pooled = Vec::with_capacity(2);
    for (embs, audiogram) in [
        (embs_left, audiogram_left),
        (embs_right, audiogram_right),
    ] {
        let stack = g.concat_rows(&embs)?;
        let audio = embed_audiogram(g, params, audiogram, config.audiogram_bands)?;
        let cat = g.concat_rows(&[stack, audio])?;
        let y = params.layer_block.forward(g, cat)?;
        pooled.push(g.mean_rows(y)?);
    }
    let sum = g.add(pooled[0], pooled[1])?;
    let avg = g.scale(sum, 0.5)?;
    let d = g.value(avg).numel();
    let row = g.reshape(avg, vec![1, d])?;
    percent_head(g, params, row)
}

/// Route a sample through the mono or binaural path per the config.
pub fn predict<R: Real>(
    g: &mut Tape<R>,
    sample: &SampleInput<R>,
    config: &ModelConfig,
    params: &SipModelParams<R>,
) -> Result<Var> {
    if config.binaural {
        let right = sample
            .right
            .as_ref()
            .ok_or_else(|| Error::Config("binaural model needs a right channel".into()))?;
        let ag_right = sample
            .audiogram_right
            .as_ref()
            .ok_or_else(|| Error::Config("binaural model needs a right audiogram".into()))?;
        predict_binaural(
            g,
            &sample.left,
            right,
            &sample.audiogram_left,
            ag_right,
            config,
            params,
        )
    } else {
        predict_mono(g, &sample.left, &sample.audiogram_left, config, params)
    }
}
