//! Temporal transform blocks: Mamba (uni/bi), single-head self/cross
//! attention, the residual MLP block, LSTM baselines, and the binaural
//! wiring that couples left/right channels.
//!
//! All blocks are pure functions of (input, parameters, tape mode); dropout
//! draws from the tape's per-sample seeded stream.

use crate::error::{Error, Result};
use crate::params::{join, LayerNorm, Linear, Param, ParamGroup};
use crate::real::Real;
use crate::ssm::{selective_params, ssm_step_with, SelectiveSsmParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::fmt;
use std::str::FromStr;

/// Dimension and rate bundle used when instantiating blocks.
#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub d: usize,
    /// MLP hidden width (4·d in all published configurations).
    pub mlp_hidden: usize,
    /// Mamba expansion factor E (inner width = E·d).
    pub expand: usize,
    /// SSM state size N.
    pub state_dim: usize,
    /// Depthwise conv width K.
    pub conv_width: usize,
    /// Low-rank width of the step projection.
    pub dt_rank: usize,
    pub dropout_attn: f64,
    pub dropout_mamba: f64,
    pub d_skip: bool,
}

impl BlockDims {
    pub fn inner_dim(&self) -> usize {
        self.expand * self.d
    }
}

// ── Attention ─────────────────────────────────────────────────────────

/// Single-head attention: four d×d maps.
#[derive(Debug, Clone)]
pub struct AttentionParams<R: Real> {
    pub w_q: Linear<R>,
    pub w_k: Linear<R>,
    pub w_v: Linear<R>,
    pub w_o: Linear<R>,
    pub dropout: f64,
}

impl<R: Real> AttentionParams<R> {
    pub fn init(rng: &mut impl Rng, d: usize, dropout: f64) -> Self {
        AttentionParams {
            w_q: Linear::init(rng, d, d, true),
            w_k: Linear::init(rng, d, d, true),
            w_v: Linear::init(rng, d, d, true),
            w_o: Linear::init(rng, d, d, true),
            dropout,
        }
    }
}

impl<R: Real> ParamGroup<R> for AttentionParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.w_q.collect(&join(prefix, "w_q"), out);
        self.w_k.collect(&join(prefix, "w_k"), out);
        self.w_v.collect(&join(prefix, "w_v"), out);
        self.w_o.collect(&join(prefix, "w_o"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.w_q.collect_mut(&join(prefix, "w_q"), out);
        self.w_k.collect_mut(&join(prefix, "w_k"), out);
        self.w_v.collect_mut(&join(prefix, "w_v"), out);
        self.w_o.collect_mut(&join(prefix, "w_o"), out);
    }
}

/// Bidirectional (unmasked) single-head attention with queries from `x_q`
/// and keys/values from `x_kv`. No positional encoding. Dropout applies to
/// the attention weights and to the output in train mode.
pub fn attention<R: Real>(
    g: &mut Tape<R>,
    p: &AttentionParams<R>,
    x_q: Var,
    x_kv: Var,
) -> Result<Var> {
    let d = g.value(x_q).cols();
    let q = p.w_q.apply(g, x_q)?;
    let k = p.w_k.apply(g, x_kv)?;
    let v = p.w_v.apply(g, x_kv)?;
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax_rows(scaled)?;
    let weights = g.dropout(weights, p.dropout)?;
    let ctx = g.matmul(weights, v)?;
    let out = p.w_o.apply(g, ctx)?;
    g.dropout(out, p.dropout)
}

pub fn self_attention<R: Real>(g: &mut Tape<R>, p: &AttentionParams<R>, x: Var) -> Result<Var> {
    attention(g, p, x, x)
}

pub fn cross_attention<R: Real>(
    g: &mut Tape<R>,
    p: &AttentionParams<R>,
    x_q: Var,
    x_kv: Var,
) -> Result<Var> {
    let (tq, tk) = (g.value(x_q).shape(), g.value(x_kv).shape());
    if tq != tk {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            lhs: tq.to_vec(),
            rhs: tk.to_vec(),
        });
    }
    attention(g, p, x_q, x_kv)
}

// ── MLP block ─────────────────────────────────────────────────────────

/// Residual two-layer MLP with exact GELU: y = LN(x + drop(W2·gelu(W1·x))).
#[derive(Debug, Clone)]
pub struct MlpBlockParams<R: Real> {
    pub lift: Linear<R>,
    pub lower: Linear<R>,
    pub ln: LayerNorm<R>,
    pub dropout: f64,
}

impl<R: Real> MlpBlockParams<R> {
    pub fn init(rng: &mut impl Rng, d: usize, hidden: usize, dropout: f64) -> Self {
        MlpBlockParams {
            lift: Linear::init(rng, hidden, d, true),
            lower: Linear::init(rng, d, hidden, true),
            ln: LayerNorm::init(d),
            dropout,
        }
    }
}

impl<R: Real> ParamGroup<R> for MlpBlockParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.lift.collect(&join(prefix, "lift"), out);
        self.lower.collect(&join(prefix, "lower"), out);
        self.ln.collect(&join(prefix, "ln"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.lift.collect_mut(&join(prefix, "lift"), out);
        self.lower.collect_mut(&join(prefix, "lower"), out);
        self.ln.collect_mut(&join(prefix, "ln"), out);
    }
}

pub fn mlp_block<R: Real>(g: &mut Tape<R>, p: &MlpBlockParams<R>, x: Var) -> Result<Var> {
    let lifted = p.lift.apply(g, x)?;
    let act = g.gelu(lifted)?;
    let lowered = p.lower.apply(g, act)?;
    let dropped = g.dropout(lowered, p.dropout)?;
    let sum = g.add(x, dropped)?;
    p.ln.apply(g, sum)
}

// ── Mamba block ───────────────────────────────────────────────────────

/// Gated Mamba block: two input branches, causal depthwise conv + SiLU on
/// the scan branch, selective SSM, SiLU gate, output projection.
#[derive(Debug, Clone)]
pub struct MambaBlockParams<R: Real> {
    pub in_proj: Linear<R>,
    pub conv_w: Param<R>,
    pub conv_b: Param<R>,
    pub ssm: SelectiveSsmParams<R>,
    pub out_proj: Linear<R>,
    pub dropout: f64,
}

impl<R: Real> MambaBlockParams<R> {
    pub fn init(rng: &mut impl Rng, dims: &BlockDims) -> Self {
        let inner = dims.inner_dim();
        let bound_k = 1.0 / (dims.conv_width as f64).sqrt();
        MambaBlockParams {
            in_proj: Linear::init(rng, 2 * inner, dims.d, false),
            conv_w: Param::new(Tensor::uniform(
                rng,
                vec![inner, dims.conv_width],
                -bound_k,
                bound_k,
            )),
            conv_b: Param::new(Tensor::zeros(vec![inner])),
            ssm: SelectiveSsmParams::init(rng, inner, dims.state_dim, dims.dt_rank, dims.d_skip),
            out_proj: Linear::init(rng, dims.d, inner, false),
            dropout: dims.dropout_mamba,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.ssm.inner_dim
    }
}

impl<R: Real> ParamGroup<R> for MambaBlockParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.in_proj.collect(&join(prefix, "in_proj"), out);
        out.push((join(prefix, "conv_w"), &self.conv_w));
        out.push((join(prefix, "conv_b"), &self.conv_b));
        self.ssm.collect(&join(prefix, "ssm"), out);
        self.out_proj.collect(&join(prefix, "out_proj"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.in_proj.collect_mut(&join(prefix, "in_proj"), out);
        out.push((join(prefix, "conv_w"), &mut self.conv_w));
        out.push((join(prefix, "conv_b"), &mut self.conv_b));
        self.ssm.collect_mut(&join(prefix, "ssm"), out);
        self.out_proj.collect_mut(&join(prefix, "out_proj"), out);
    }
}

pub fn mamba_block<R: Real>(g: &mut Tape<R>, p: &MambaBlockParams<R>, x: Var) -> Result<Var> {
    let inner = p.inner_dim();
    let xz = p.in_proj.apply(g, x)?;
    let branch_x = g.slice_cols(xz, 0, inner)?;
    let branch_z = g.slice_cols(xz, inner, inner)?;

    let conv_w = g.leaf(&p.conv_w);
    let conv_b = g.leaf(&p.conv_b);
    let conv = g.causal_conv1d(branch_x, conv_w, conv_b)?;
    let u = g.silu(conv)?;

    // Input-dependent SSM parameters from the scan branch.
    let w_b = g.leaf(&p.ssm.w_b);
    let w_c = g.leaf(&p.ssm.w_c);
    let b_seq = g.matmul_nt(u, w_b)?;
    let c_seq = g.matmul_nt(u, w_c)?;
    let w_dt_down = g.leaf(&p.ssm.w_dt_down);
    let w_dt_up = g.leaf(&p.ssm.w_dt_up);
    let dt_bias = g.leaf(&p.ssm.dt_bias);
    let low = g.matmul_nt(u, w_dt_down)?;
    let dt_pre = g.matmul_nt(low, w_dt_up)?;
    let dt_pre = g.add_row(dt_pre, dt_bias)?;
    let delta = g.softplus(dt_pre)?;

    let a_log = g.leaf(&p.ssm.a_log);
    let a_exp = g.exp(a_log)?;
    let a = g.scale(a_exp, -1.0)?;

    let mut y = g.ssm_scan(u, delta, b_seq, c_seq, a)?;
    if let Some(d_skip) = &p.ssm.d_skip {
        let dv = g.leaf(d_skip);
        let skip = g.mul_row(u, dv)?;
        y = g.add(y, skip)?;
    }

    let gate = g.silu(branch_z)?;
    let gated = g.mul(y, gate)?;
    let out = p.out_proj.apply(g, gated)?;
    g.dropout(out, p.dropout)
}

/// y = Mamba_fwd(x) + flip(Mamba_bwd(flip(x))).
pub fn bidirectional_mamba<R: Real>(
    g: &mut Tape<R>,
    fwd: &MambaBlockParams<R>,
    bwd: &MambaBlockParams<R>,
    x: Var,
) -> Result<Var> {
    let yf = mamba_block(g, fwd, x)?;
    let xr = g.flip_rows(x)?;
    let yb = mamba_block(g, bwd, xr)?;
    let yb = g.flip_rows(yb)?;
    g.add(yf, yb)
}

// ── LSTM ──────────────────────────────────────────────────────────────

/// One direction of gate weights, PyTorch layout: rows ordered
/// input/forget/cell/output, separate input-to-hidden and hidden-to-hidden
/// biases. The forget-gate bias starts at 1.
#[derive(Debug, Clone)]
pub struct LstmParams<R: Real> {
    pub w_ih: Param<R>,
    pub w_hh: Param<R>,
    pub b_ih: Param<R>,
    pub b_hh: Param<R>,
    pub dim: usize,
}

impl<R: Real> LstmParams<R> {
    pub fn init(rng: &mut impl Rng, d: usize) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut b_ih = Tensor::zeros(vec![4 * d]);
        for v in &mut b_ih.data_mut()[d..2 * d] {
            *v = R::ONE;
        }
        LstmParams {
            w_ih: Param::new(Tensor::uniform(rng, vec![4 * d, d], -bound, bound)),
            w_hh: Param::new(Tensor::uniform(rng, vec![4 * d, d], -bound, bound)),
            b_ih: Param::new(b_ih),
            b_hh: Param::new(Tensor::zeros(vec![4 * d])),
            dim: d,
        }
    }
}

impl<R: Real> ParamGroup<R> for LstmParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        out.push((join(prefix, "w_ih"), &self.w_ih));
        out.push((join(prefix, "w_hh"), &self.w_hh));
        out.push((join(prefix, "b_ih"), &self.b_ih));
        out.push((join(prefix, "b_hh"), &self.b_hh));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        out.push((join(prefix, "w_ih"), &mut self.w_ih));
        out.push((join(prefix, "w_hh"), &mut self.w_hh));
        out.push((join(prefix, "b_ih"), &mut self.b_ih));
        out.push((join(prefix, "b_hh"), &mut self.b_hh));
    }
}

/// Standard LSTM recurrence over the row axis, returning all hidden states.
fn lstm_direction<R: Real>(g: &mut Tape<R>, p: &LstmParams<R>, x: Var) -> Result<Var> {
    let d = p.dim;
    let t_len = g.value(x).rows();
    let w_ih = g.leaf(&p.w_ih);
    let w_hh = g.leaf(&p.w_hh);
    let b_ih = g.leaf(&p.b_ih);
    let b_hh = g.leaf(&p.b_hh);
    let xw = g.matmul_nt(x, w_ih)?;
    let xw = g.add_row(xw, b_ih)?;
    let mut h = g.input(Tensor::zeros(vec![1, d]));
    let mut c = g.input(Tensor::zeros(vec![1, d]));
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xrow = g.slice_rows(xw, t, 1)?;
        let hw = g.matmul_nt(h, w_hh)?;
        let hw = g.add_row(hw, b_hh)?;
        let gates = g.add(xrow, hw)?;
        let i_gate = g.slice_cols(gates, 0, d)?;
        let f_gate = g.slice_cols(gates, d, d)?;
        let g_gate = g.slice_cols(gates, 2 * d, d)?;
        let o_gate = g.slice_cols(gates, 3 * d, d)?;
        let i_gate = g.sigmoid(i_gate)?;
        let f_gate = g.sigmoid(f_gate)?;
        let g_gate = g.tanh(g_gate)?;
        let o_gate = g.sigmoid(o_gate)?;
        let keep = g.mul(f_gate, c)?;
        let write = g.mul(i_gate, g_gate)?;
        c = g.add(keep, write)?;
        let c_act = g.tanh(c)?;
        h = g.mul(o_gate, c_act)?;
        rows.push(h);
    }
    g.concat_rows(&rows)
}

/// Uni/bidirectional LSTM transform. The bidirectional form concatenates
/// both directions and projects 2d -> d; the unidirectional form has no
/// projection (the published parameter counts admit none).
#[derive(Debug, Clone)]
pub struct LstmTransformParams<R: Real> {
    pub fwd: LstmParams<R>,
    pub bwd: Option<LstmParams<R>>,
    pub proj: Option<Linear<R>>,
    pub dropout: f64,
}

impl<R: Real> LstmTransformParams<R> {
    pub fn init(rng: &mut impl Rng, d: usize, bidirectional: bool, dropout: f64) -> Self {
        let fwd = LstmParams::init(rng, d);
        let (bwd, proj) = if bidirectional {
            (
                Some(LstmParams::init(rng, d)),
                Some(Linear::init(rng, d, 2 * d, true)),
            )
        } else {
            (None, None)
        };
        LstmTransformParams {
            fwd,
            bwd,
            proj,
            dropout,
        }
    }
}

impl<R: Real> ParamGroup<R> for LstmTransformParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.fwd.collect(&join(prefix, "fwd"), out);
        if let Some(b) = &self.bwd {
            b.collect(&join(prefix, "bwd"), out);
        }
        if let Some(p) = &self.proj {
            p.collect(&join(prefix, "proj"), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.fwd.collect_mut(&join(prefix, "fwd"), out);
        if let Some(b) = &mut self.bwd {
            b.collect_mut(&join(prefix, "bwd"), out);
        }
        if let Some(p) = &mut self.proj {
            p.collect_mut(&join(prefix, "proj"), out);
        }
    }
}

pub fn lstm_transform<R: Real>(
    g: &mut Tape<R>,
    p: &LstmTransformParams<R>,
    x: Var,
) -> Result<Var> {
    let hf = lstm_direction(g, &p.fwd, x)?;
    let y = match (&p.bwd, &p.proj) {
        (Some(bwd), Some(proj)) => {
            let xr = g.flip_rows(x)?;
            let hb = lstm_direction(g, bwd, xr)?;
            let hb = g.flip_rows(hb)?;
            let cat = g.concat_cols(hf, hb)?;
            proj.apply(g, cat)?
        }
        _ => hf,
    };
    g.dropout(y, p.dropout)
}

// ── Temporal transform block variants ─────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TemporalVariant {
    Transformer,
    TransformerNoSkip,
    TransformerNoMlp,
    UniMamba,
    UniMambaSkip,
    UniMambaMlp,
    BiMamba,
    BiMambaSkip,
    BiMambaMlp,
    UniLstm,
    BiLstm,
}

impl TemporalVariant {
    pub const ALL: [TemporalVariant; 11] = [
        TemporalVariant::Transformer,
        TemporalVariant::TransformerNoSkip,
        TemporalVariant::TransformerNoMlp,
        TemporalVariant::UniMamba,
        TemporalVariant::UniMambaSkip,
        TemporalVariant::UniMambaMlp,
        TemporalVariant::BiMamba,
        TemporalVariant::BiMambaSkip,
        TemporalVariant::BiMambaMlp,
        TemporalVariant::UniLstm,
        TemporalVariant::BiLstm,
    ];

    /// Variants that have a published binaural configuration.
    pub const BINAURAL: [TemporalVariant; 5] = [
        TemporalVariant::Transformer,
        TemporalVariant::UniMamba,
        TemporalVariant::UniMambaMlp,
        TemporalVariant::BiMamba,
        TemporalVariant::BiMambaMlp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TemporalVariant::Transformer => "transformer",
            TemporalVariant::TransformerNoSkip => "transformer-no-skip",
            TemporalVariant::TransformerNoMlp => "transformer-no-mlp",
            TemporalVariant::UniMamba => "uni-mamba",
            TemporalVariant::UniMambaSkip => "uni-mamba+skip",
            TemporalVariant::UniMambaMlp => "uni-mamba+mlp",
            TemporalVariant::BiMamba => "bi-mamba",
            TemporalVariant::BiMambaSkip => "bi-mamba+skip",
            TemporalVariant::BiMambaMlp => "bi-mamba+mlp",
            TemporalVariant::UniLstm => "uni-lstm",
            TemporalVariant::BiLstm => "bi-lstm",
        }
    }
}

impl fmt::Display for TemporalVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemporalVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TemporalVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown temporal block variant {s:?}; expected one of: {}",
                    TemporalVariant::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }
}

/// Transformer-typed block: self-attention with optional residual, LN,
/// optional trailing MLP block. Also used as the layer transform block.
#[derive(Debug, Clone)]
pub struct TransformerBlockParams<R: Real> {
    pub attn: AttentionParams<R>,
    pub ln: LayerNorm<R>,
    pub mlp: Option<MlpBlockParams<R>>,
    pub input_skip: bool,
}

impl<R: Real> TransformerBlockParams<R> {
    pub fn init(rng: &mut impl Rng, dims: &BlockDims, input_skip: bool, with_mlp: bool) -> Self {
        TransformerBlockParams {
            attn: AttentionParams::init(rng, dims.d, dims.dropout_attn),
            ln: LayerNorm::init(dims.d),
            mlp: with_mlp
                .then(|| MlpBlockParams::init(rng, dims.d, dims.mlp_hidden, dims.dropout_attn)),
            input_skip,
        }
    }

    pub fn forward(&self, g: &mut Tape<R>, x: Var) -> Result<Var> {
        let att = self_attention(g, &self.attn, x)?;
        let pre = if self.input_skip {
            g.add(x, att)?
        } else {
            att
        };
        let normed = self.ln.apply(g, pre)?;
        match &self.mlp {
            Some(mlp) => mlp_block(g, mlp, normed),
            None => Ok(normed),
        }
    }
}

impl<R: Real> ParamGroup<R> for TransformerBlockParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.attn.collect(&join(prefix, "attn"), out);
        self.ln.collect(&join(prefix, "ln"), out);
        if let Some(m) = &self.mlp {
            m.collect(&join(prefix, "mlp"), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.ln.collect_mut(&join(prefix, "ln"), out);
        if let Some(m) = &mut self.mlp {
            m.collect_mut(&join(prefix, "mlp"), out);
        }
    }
}

/// Mamba-typed temporal block: uni or bidirectional Mamba, LN, optional
/// input skip and trailing MLP block.
#[derive(Debug, Clone)]
pub struct MambaTemporalParams<R: Real> {
    pub fwd: MambaBlockParams<R>,
    pub bwd: Option<MambaBlockParams<R>>,
    pub ln: LayerNorm<R>,
    pub mlp: Option<MlpBlockParams<R>>,
    pub input_skip: bool,
}

impl<R: Real> MambaTemporalParams<R> {
    pub fn init(
        rng: &mut impl Rng,
        dims: &BlockDims,
        bidirectional: bool,
        input_skip: bool,
        with_mlp: bool,
    ) -> Self {
        MambaTemporalParams {
            fwd: MambaBlockParams::init(rng, dims),
            bwd: bidirectional.then(|| MambaBlockParams::init(rng, dims)),
            ln: LayerNorm::init(dims.d),
            mlp: with_mlp
                .then(|| MlpBlockParams::init(rng, dims.d, dims.mlp_hidden, dims.dropout_mamba)),
            input_skip,
        }
    }

    pub fn forward(&self, g: &mut Tape<R>, x: Var) -> Result<Var> {
        let m = match &self.bwd {
            Some(bwd) => bidirectional_mamba(g, &self.fwd, bwd, x)?,
            None => mamba_block(g, &self.fwd, x)?,
        };
        let pre = if self.input_skip { g.add(x, m)? } else { m };
        let normed = self.ln.apply(g, pre)?;
        match &self.mlp {
            Some(mlp) => mlp_block(g, mlp, normed),
            None => Ok(normed),
        }
    }
}

impl<R: Real> ParamGroup<R> for MambaTemporalParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        self.fwd.collect(&join(prefix, "fwd"), out);
        if let Some(b) = &self.bwd {
            b.collect(&join(prefix, "bwd"), out);
        }
        self.ln.collect(&join(prefix, "ln"), out);
        if let Some(m) = &self.mlp {
            m.collect(&join(prefix, "mlp"), out);
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        self.fwd.collect_mut(&join(prefix, "fwd"), out);
        if let Some(b) = &mut self.bwd {
            b.collect_mut(&join(prefix, "bwd"), out);
        }
        self.ln.collect_mut(&join(prefix, "ln"), out);
        if let Some(m) = &mut self.mlp {
            m.collect_mut(&join(prefix, "mlp"), out);
        }
    }
}

/// One monaural temporal transform block of any published variant.
#[derive(Debug, Clone)]
pub enum TemporalBlockParams<R: Real> {
    Transformer(TransformerBlockParams<R>),
    Mamba(MambaTemporalParams<R>),
    Lstm(LstmTransformParams<R>),
}

impl<R: Real> TemporalBlockParams<R> {
    pub fn init(rng: &mut impl Rng, variant: TemporalVariant, dims: &BlockDims) -> Self {
        use TemporalVariant as V;
        match variant {
            V::Transformer => {
                TemporalBlockParams::Transformer(TransformerBlockParams::init(rng, dims, true, true))
            }
            V::TransformerNoSkip => TemporalBlockParams::Transformer(
                TransformerBlockParams::init(rng, dims, false, true),
            ),
            V::TransformerNoMlp => TemporalBlockParams::Transformer(
                TransformerBlockParams::init(rng, dims, true, false),
            ),
            V::UniMamba => {
                TemporalBlockParams::Mamba(MambaTemporalParams::init(rng, dims, false, false, false))
            }
            V::UniMambaSkip => {
                TemporalBlockParams::Mamba(MambaTemporalParams::init(rng, dims, false, true, false))
            }
            V::UniMambaMlp => {
                TemporalBlockParams::Mamba(MambaTemporalParams::init(rng, dims, false, false, true))
            }
            V::BiMamba => {
                TemporalBlockParams::Mamba(MambaTemporalParams::init(rng, dims, true, false, false))
            }
            V::BiMambaSkip => {
                TemporalBlockParams::Mamba(MambaTemporalParams::init(rng, dims, true, true, false))
            }
            V::BiMambaMlp => {
                TemporalBlockParams::Mamba(MambaTemporalParams::init(rng, dims, true, false, true))
            }
            V::UniLstm => TemporalBlockParams::Lstm(LstmTransformParams::init(
                rng,
                dims.d,
                false,
                dims.dropout_mamba,
            )),
            V::BiLstm => TemporalBlockParams::Lstm(LstmTransformParams::init(
                rng,
                dims.d,
                true,
                dims.dropout_mamba,
            )),
        }
    }

    pub fn forward(&self, g: &mut Tape<R>, x: Var) -> Result<Var> {
        match self {
            TemporalBlockParams::Transformer(p) => p.forward(g, x),
            TemporalBlockParams::Mamba(p) => p.forward(g, x),
            TemporalBlockParams::Lstm(p) => lstm_transform(g, p, x),
        }
    }
}

impl<R: Real> ParamGroup<R> for TemporalBlockParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        match self {
            TemporalBlockParams::Transformer(p) => p.collect(prefix, out),
            TemporalBlockParams::Mamba(p) => p.collect(prefix, out),
            TemporalBlockParams::Lstm(p) => p.collect(prefix, out),
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        match self {
            TemporalBlockParams::Transformer(p) => p.collect_mut(prefix, out),
            TemporalBlockParams::Mamba(p) => p.collect_mut(prefix, out),
            TemporalBlockParams::Lstm(p) => p.collect_mut(prefix, out),
        }
    }
}

// ── Binaural temporal blocks ──────────────────────────────────────────

/// Binaural transformer block: shared self-attention, one cross-attention
/// weight set per direction (left-queries-right and right-queries-left),
/// residuals + LN, shared MLP block.
///
/// Binaural Mamba block: per-channel Mamba (weights shared across
/// channels), cross-channel mixing y_c = LN(x_c + GELU(M_c + P_c(M_other)))
/// with one mixing map per output channel. The bidirectional form mixes
/// each direction separately and projects the direction concatenation back
/// to d. The exact Fig-level wiring of the mixing stage is a configuration
/// point; this one reproduces the published parameter counts.
#[derive(Debug, Clone)]
pub enum BinauralBlockParams<R: Real> {
    Transformer {
        self_attn: AttentionParams<R>,
        ln_self: LayerNorm<R>,
        cross: [AttentionParams<R>; 2],
        ln_cross: LayerNorm<R>,
        mlp: MlpBlockParams<R>,
    },
    Mamba {
        fwd: MambaBlockParams<R>,
        bwd: Option<MambaBlockParams<R>>,
        mix_fwd: [Linear<R>; 2],
        mix_bwd: Option<[Linear<R>; 2]>,
        dir_proj: Option<Linear<R>>,
        ln: LayerNorm<R>,
        mlp: Option<MlpBlockParams<R>>,
    },
}

impl<R: Real> BinauralBlockParams<R> {
    pub fn init(rng: &mut impl Rng, variant: TemporalVariant, dims: &BlockDims) -> Result<Self> {
        use TemporalVariant as V;
        let d = dims.d;
        match variant {
            V::Transformer => Ok(BinauralBlockParams::Transformer {
                self_attn: AttentionParams::init(rng, d, dims.dropout_attn),
                ln_self: LayerNorm::init(d),
                cross: [
                    AttentionParams::init(rng, d, dims.dropout_attn),
                    AttentionParams::init(rng, d, dims.dropout_attn),
                ],
                ln_cross: LayerNorm::init(d),
                mlp: MlpBlockParams::init(rng, d, dims.mlp_hidden, dims.dropout_attn),
            }),
            V::UniMamba | V::UniMambaMlp | V::BiMamba | V::BiMambaMlp => {
                let bidirectional = matches!(variant, V::BiMamba | V::BiMambaMlp);
                let with_mlp = matches!(variant, V::UniMambaMlp | V::BiMambaMlp);
                Ok(BinauralBlockParams::Mamba {
                    fwd: MambaBlockParams::init(rng, dims),
                    bwd: bidirectional.then(|| MambaBlockParams::init(rng, dims)),
                    mix_fwd: [
                        Linear::init(rng, d, d, true),
                        Linear::init(rng, d, d, true),
                    ],
                    mix_bwd: bidirectional.then(|| {
                        [
                            Linear::init(rng, d, d, true),
                            Linear::init(rng, d, d, true),
                        ]
                    }),
                    dir_proj: bidirectional.then(|| Linear::init(rng, d, 2 * d, true)),
                    ln: LayerNorm::init(d),
                    mlp: with_mlp
                        .then(|| MlpBlockParams::init(rng, d, dims.mlp_hidden, dims.dropout_mamba)),
                })
            }
            other => Err(Error::Config(format!(
                "temporal block variant {other} has no binaural configuration"
            ))),
        }
    }

    pub fn forward(&self, g: &mut Tape<R>, x_left: Var, x_right: Var) -> Result<(Var, Var)> {
        if g.value(x_left).shape() != g.value(x_right).shape() {
            return Err(Error::ShapeMismatch {
                op: "binaural_temporal_block",
                lhs: g.value(x_left).shape().to_vec(),
                rhs: g.value(x_right).shape().to_vec(),
            });
        }
        match self {
            BinauralBlockParams::Transformer {
                self_attn,
                ln_self,
                cross,
                ln_cross,
                mlp,
            } => {
                let mut pooled = [x_left, x_right];
                for (c, x) in [x_left, x_right].into_iter().enumerate() {
                    let att = self_attention(g, self_attn, x)?;
                    let sum = g.add(x, att)?;
                    pooled[c] = ln_self.apply(g, sum)?;
                }
                let mut out = pooled;
                for c in 0..2 {
                    let xc = pooled[c];
                    let other = pooled[1 - c];
                    let cr = cross_attention(g, &cross[c], xc, other)?;
                    let sum = g.add(xc, cr)?;
                    let normed = ln_cross.apply(g, sum)?;
                    out[c] = mlp_block(g, mlp, normed)?;
                }
                Ok((out[0], out[1]))
            }
            BinauralBlockParams::Mamba {
                fwd,
                bwd,
                mix_fwd,
                mix_bwd,
                dir_proj,
                ln,
                mlp,
            } => {
                let xs = [x_left, x_right];
                let mf = [mamba_block(g, fwd, xs[0])?, mamba_block(g, fwd, xs[1])?];
                let mixed_fwd = mix_pair(g, mix_fwd, &mf)?;

                let combined: [Var; 2] = match (bwd, mix_bwd, dir_proj) {
                    (Some(bwd), Some(mix_bwd), Some(dir_proj)) => {
                        let mut mb = [mf[0]; 2];
                        for c in 0..2 {
                            let xr = g.flip_rows(xs[c])?;
                            let yb = mamba_block(g, bwd, xr)?;
                            mb[c] = g.flip_rows(yb)?;
                        }
                        let mixed_bwd = mix_pair(g, mix_bwd, &mb)?;
                        let mut out = [mf[0]; 2];
                        for c in 0..2 {
                            let cat = g.concat_cols(mixed_fwd[c], mixed_bwd[c])?;
                            out[c] = dir_proj.apply(g, cat)?;
                        }
                        out
                    }
                    _ => mixed_fwd,
                };

                let mut out = [combined[0]; 2];
                for c in 0..2 {
                    let sum = g.add(xs[c], combined[c])?;
                    let normed = ln.apply(g, sum)?;
                    out[c] = match mlp {
                        Some(m) => mlp_block(g, m, normed)?,
                        None => normed,
                    };
                }
                Ok((out[0], out[1]))
            }
        }
    }
}

/// Cross-channel mixing for one direction: GELU(M_c + P_c(M_other)).
fn mix_pair<R: Real>(g: &mut Tape<R>, maps: &[Linear<R>; 2], m: &[Var; 2]) -> Result<[Var; 2]> {
    let mut out = [m[0]; 2];
    for c in 0..2 {
        let crossed = maps[c].apply(g, m[1 - c])?;
        let sum = g.add(m[c], crossed)?;
        out[c] = g.gelu(sum)?;
    }
    Ok(out)
}

impl<R: Real> ParamGroup<R> for BinauralBlockParams<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        match self {
            BinauralBlockParams::Transformer {
                self_attn,
                ln_self,
                cross,
                ln_cross,
                mlp,
            } => {
                self_attn.collect(&join(prefix, "self_attn"), out);
                ln_self.collect(&join(prefix, "ln_self"), out);
                cross[0].collect(&join(prefix, "cross_lr"), out);
                cross[1].collect(&join(prefix, "cross_rl"), out);
                ln_cross.collect(&join(prefix, "ln_cross"), out);
                mlp.collect(&join(prefix, "mlp"), out);
            }
            BinauralBlockParams::Mamba {
                fwd,
                bwd,
                mix_fwd,
                mix_bwd,
                dir_proj,
                ln,
                mlp,
            } => {
                fwd.collect(&join(prefix, "fwd"), out);
                if let Some(b) = bwd {
                    b.collect(&join(prefix, "bwd"), out);
                }
                mix_fwd[0].collect(&join(prefix, "mix_fwd_l"), out);
                mix_fwd[1].collect(&join(prefix, "mix_fwd_r"), out);
                if let Some(mb) = mix_bwd {
                    mb[0].collect(&join(prefix, "mix_bwd_l"), out);
                    mb[1].collect(&join(prefix, "mix_bwd_r"), out);
                }
                if let Some(dp) = dir_proj {
                    dp.collect(&join(prefix, "dir_proj"), out);
                }
                ln.collect(&join(prefix, "ln"), out);
                if let Some(m) = mlp {
                    m.collect(&join(prefix, "mlp"), out);
                }
            }
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        match self {
            BinauralBlockParams::Transformer {
                self_attn,
                ln_self,
                cross,
                ln_cross,
                mlp,
            } => {
                self_attn.collect_mut(&join(prefix, "self_attn"), out);
                ln_self.collect_mut(&join(prefix, "ln_self"), out);
                let [c0, c1] = cross;
                c0.collect_mut(&join(prefix, "cross_lr"), out);
                c1.collect_mut(&join(prefix, "cross_rl"), out);
                ln_cross.collect_mut(&join(prefix, "ln_cross"), out);
                mlp.collect_mut(&join(prefix, "mlp"), out);
            }
            BinauralBlockParams::Mamba {
                fwd,
                bwd,
                mix_fwd,
                mix_bwd,
                dir_proj,
                ln,
                mlp,
            } => {
                fwd.collect_mut(&join(prefix, "fwd"), out);
                if let Some(b) = bwd {
                    b.collect_mut(&join(prefix, "bwd"), out);
                }
                let [m0, m1] = mix_fwd;
                m0.collect_mut(&join(prefix, "mix_fwd_l"), out);
                m1.collect_mut(&join(prefix, "mix_fwd_r"), out);
                if let Some([b0, b1]) = mix_bwd {
                    b0.collect_mut(&join(prefix, "mix_bwd_l"), out);
                    b1.collect_mut(&join(prefix, "mix_bwd_r"), out);
                }
                if let Some(dp) = dir_proj {
                    dp.collect_mut(&join(prefix, "dir_proj"), out);
                }
                ln.collect_mut(&join(prefix, "ln"), out);
                if let Some(m) = mlp {
                    m.collect_mut(&join(prefix, "mlp"), out);
                }
            }
        }
    }
}

// ── Streaming Mamba block (constant-memory inference) ─────────────────

/// Frame-by-frame Mamba block evaluation. State is one conv history window
/// plus one `[D, N]` hidden state, independent of how many frames have been
/// consumed.
pub struct MambaStream<'p, R: Real> {
    params: &'p MambaBlockParams<R>,
    conv_hist: Vec<R>,
    state: crate::ssm::HiddenState<R>,
    steps: usize,
}

impl<'p, R: Real> MambaStream<'p, R> {
    pub fn new(params: &'p MambaBlockParams<R>) -> Self {
        let inner = params.inner_dim();
        let k = params.conv_w.value.shape()[1];
        MambaStream {
            conv_hist: vec![R::ZERO; (k - 1) * inner],
            state: crate::ssm::HiddenState::zeros(inner, params.ssm.state_dim),
            params,
            steps: 0,
        }
    }

    pub fn step(&mut self, x_t: &[R]) -> Result<Vec<R>> {
        let p = self.params;
        let d = p.out_proj.out_dim();
        let inner = p.inner_dim();
        let k = p.conv_w.value.shape()[1];
        if x_t.len() != d {
            return Err(Error::ShapeMismatch {
                op: "mamba_stream",
                lhs: vec![x_t.len()],
                rhs: vec![d],
            });
        }
        // in_proj row: [2*inner]
        let w_in = &p.in_proj.weight.value;
        let mut xz = vec![R::ZERO; 2 * inner];
        for (i, out) in xz.iter_mut().enumerate() {
            let mut acc = R::ZERO;
            for (j, &xv) in x_t.iter().enumerate() {
                acc += w_in.data()[i * d + j] * xv;
            }
            *out = acc;
        }
        let (xp, z) = xz.split_at(inner);

        // Causal conv over the history window plus the current frame.
        let mut u = vec![R::ZERO; inner];
        for c in 0..inner {
            let mut acc = p.conv_b.value.data()[c];
            for kk in 0..k {
                let tap = p.conv_w.value.data()[c * k + kk];
                let v = if kk + 1 < k {
                    self.conv_hist[kk * inner + c]
                } else {
                    xp[c]
                };
                acc += tap * v;
            }
            u[c] = acc * acc.sigmoid();
        }
        // Shift history left and append the new frame.
        if k > 1 {
            self.conv_hist.copy_within(inner.., 0);
            let start = (k - 2) * inner;
            self.conv_hist[start..].copy_from_slice(xp);
        }

        let (b_t, c_t, delta_t) = selective_params(&u, &p.ssm)?;
        let a = p.ssm.a_matrix();
        let (h, mut y) = ssm_step_with(
            &self.state,
            &u,
            &b_t,
            &c_t,
            &delta_t,
            &a,
            p.ssm.d_skip.as_ref().map(|d| d.value.data()),
            self.steps,
        )?;
        self.state = h;
        self.steps += 1;

        for (yv, &zv) in y.iter_mut().zip(z) {
            *yv *= zv * zv.sigmoid();
        }
        let w_out = &p.out_proj.weight.value;
        let mut out = vec![R::ZERO; d];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = R::ZERO;
            for (j, &yv) in y.iter().enumerate() {
                acc += w_out.data()[i * inner + j] * yv;
            }
            *o = acc;
        }
        Ok(out)
    }

    /// Bytes of recurrent state (conv history + hidden state).
    pub fn state_bytes(&self) -> usize {
        (self.conv_hist.len() + self.state.h.len()) * std::mem::size_of::<R>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn dims(d: usize) -> BlockDims {
        BlockDims {
            d,
            mlp_hidden: 4 * d,
            expand: 2,
            state_dim: 4,
            conv_width: 4,
            dt_rank: d.div_ceil(16).max(1),
            dropout_attn: 0.1,
            dropout_mamba: 0.3,
            d_skip: true,
        }
    }

    fn rand_input(rng: &mut ChaCha20Rng, t: usize, d: usize) -> Tensor<f64> {
        Tensor::uniform(rng, vec![t, d], -1.0, 1.0)
    }

    #[test]
    fn mamba_param_count_matches_published_block_size() {
        // d=384, E=2, N=16, K=4, rank=24 → 0.96 M
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let dims = BlockDims {
            d: 384,
            mlp_hidden: 1536,
            expand: 2,
            state_dim: 16,
            conv_width: 4,
            dt_rank: 24,
            dropout_attn: 0.1,
            dropout_mamba: 0.3,
            d_skip: true,
        };
        let p = MambaBlockParams::<f32>::init(&mut rng, &dims);
        let count = p.param_count();
        assert_eq!(count, 963_840);
        let published = 0.96e6;
        assert!((count as f64 - published).abs() / published < 0.02);
    }

    #[test]
    fn mamba_zero_weights_give_zero_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut p = MambaBlockParams::<f64>::init(&mut rng, &dims(6));
        for (_, param) in p.params_mut() {
            param.value = Tensor::zeros(param.value.shape().to_vec());
        }
        let mut g = Tape::eval();
        let x = g.input(rand_input(&mut rng, 5, 6));
        let y = mamba_block(&mut g, &p, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mamba_block_is_causal() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let p = MambaBlockParams::<f64>::init(&mut rng, &dims(4));
        let base = rand_input(&mut rng, 10, 4);
        let mut pert = base.clone();
        let t_perturb = 6;
        for d in 0..4 {
            pert.data_mut()[t_perturb * 4 + d] += 1.5;
        }
        let mut g1 = Tape::eval();
        let x1 = g1.input(base);
        let y1 = mamba_block(&mut g1, &p, x1).unwrap();
        let mut g2 = Tape::eval();
        let x2 = g2.input(pert);
        let y2 = mamba_block(&mut g2, &p, x2).unwrap();
        assert_eq!(
            g1.value(y1).data()[..t_perturb * 4],
            g2.value(y2).data()[..t_perturb * 4]
        );
    }

    #[test]
    fn bidirectional_mamba_tied_weights_flip_equivariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let p = MambaBlockParams::<f64>::init(&mut rng, &dims(4));
        // Tie forward and backward weights.
        let fwd = p.clone();
        let bwd = p;
        let x = rand_input(&mut rng, 9, 4);
        let mut xf = x.clone();
        let flip = |t: &Tensor<f64>| {
            let (m, n) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(m * n);
            for r in (0..m).rev() {
                data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
            }
            Tensor::new(vec![m, n], data).unwrap()
        };
        xf = flip(&xf);

        let mut g1 = Tape::eval();
        let v1 = g1.input(x);
        let y1 = bidirectional_mamba(&mut g1, &fwd, &bwd, v1).unwrap();
        let mut g2 = Tape::eval();
        let v2 = g2.input(xf);
        let y2 = bidirectional_mamba(&mut g2, &fwd, &bwd, v2).unwrap();

        let y1_flipped = flip(g1.value(y1));
        for (a, b) in y1_flipped.data().iter().zip(g2.value(y2).data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn bidirectional_mamba_length_one_is_sum_of_directions() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let fwd = MambaBlockParams::<f64>::init(&mut rng, &dims(4));
        let bwd = MambaBlockParams::<f64>::init(&mut rng, &dims(4));
        let x = rand_input(&mut rng, 1, 4);

        let mut g = Tape::eval();
        let v = g.input(x.clone());
        let y_bi = bidirectional_mamba(&mut g, &fwd, &bwd, v).unwrap();

        let mut g2 = Tape::eval();
        let v2 = g2.input(x);
        let yf = mamba_block(&mut g2, &fwd, v2).unwrap();
        let yb = mamba_block(&mut g2, &bwd, v2).unwrap();
        let sum = g2.add(yf, yb).unwrap();

        for (a, b) in g.value(y_bi).data().iter().zip(g2.value(sum).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_frame_reduces_to_value_path() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = AttentionParams::<f64>::init(&mut rng, 4, 0.1);
        let x = rand_input(&mut rng, 1, 4);
        let mut g = Tape::eval();
        let v = g.input(x);
        let y = self_attention(&mut g, &p, v).unwrap();
        // Softmax over one key is 1 → out = W_O(W_V x + b_v) + b_o.
        let vv = p.w_v.apply(&mut g, v).unwrap();
        let expect = p.w_o.apply(&mut g, vv).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let p = AttentionParams::<f64>::init(&mut rng, 5, 0.1);
        let x = rand_input(&mut rng, 6, 5);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp_data = Vec::new();
        for &r in &perm {
            xp_data.extend_from_slice(&x.data()[r * 5..(r + 1) * 5]);
        }
        let xp = Tensor::new(vec![6, 5], xp_data).unwrap();

        let mut g1 = Tape::eval();
        let v1 = g1.input(x);
        let y1 = self_attention(&mut g1, &p, v1).unwrap();
        let mut g2 = Tape::eval();
        let v2 = g2.input(xp);
        let y2 = self_attention(&mut g2, &p, v2).unwrap();

        for (new_row, &src_row) in perm.iter().enumerate() {
            for c in 0..5 {
                let a = g1.value(y1).data()[src_row * 5 + c];
                let b = g2.value(y2).data()[new_row * 5 + c];
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_uniform_input_gives_uniform_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let p = AttentionParams::<f64>::init(&mut rng, 4, 0.1);
        let frame = [0.3, -0.7, 1.1, 0.05];
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&frame);
        }
        let mut g = Tape::eval();
        let v = g.input(Tensor::new(vec![5, 4], data).unwrap());
        let y = self_attention(&mut g, &p, v).unwrap();
        let out = g.value(y);
        for r in 1..5 {
            for c in 0..4 {
                assert!((out.at2(r, c) - out.at2(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_with_identical_streams_matches_self_attention() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let p = AttentionParams::<f64>::init(&mut rng, 4, 0.1);
        let x = rand_input(&mut rng, 5, 4);
        let mut g = Tape::eval();
        let v = g.input(x);
        let y_self = self_attention(&mut g, &p, v).unwrap();
        let y_cross = cross_attention(&mut g, &p, v, v).unwrap();
        assert_eq!(g.value(y_self).data(), g.value(y_cross).data());
    }

    #[test]
    fn cross_attention_constant_keys_collapse_to_value() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let p = AttentionParams::<f64>::init(&mut rng, 4, 0.1);
        let xq = rand_input(&mut rng, 5, 4);
        let c = [0.4, 0.1, -0.9, 0.7];
        let mut kv_data = Vec::new();
        for _ in 0..5 {
            kv_data.extend_from_slice(&c);
        }
        let mut g = Tape::eval();
        let q = g.input(xq);
        let kv = g.input(Tensor::new(vec![5, 4], kv_data).unwrap());
        let y = cross_attention(&mut g, &p, q, kv).unwrap();
        // Every output frame equals W_O(W_V c + b_v) + b_o.
        let cv = g.input(Tensor::new(vec![1, 4], c.to_vec()).unwrap());
        let vv = p.w_v.apply(&mut g, cv).unwrap();
        let expect = p.w_o.apply(&mut g, vv).unwrap();
        for r in 0..5 {
            for col in 0..4 {
                let a = g.value(y).at2(r, col);
                let b = g.value(expect).at2(0, col);
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_attention_rejects_length_mismatch() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let p = AttentionParams::<f64>::init(&mut rng, 4, 0.1);
        let mut g = Tape::eval();
        let a = g.input(rand_input(&mut rng, 5, 4));
        let b = g.input(rand_input(&mut rng, 6, 4));
        assert!(cross_attention(&mut g, &p, a, b).is_err());
    }

    #[test]
    fn mlp_block_zero_weights_is_layer_norm_of_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut p = MlpBlockParams::<f64>::init(&mut rng, 4, 16, 0.1);
        p.lift.weight.value = Tensor::zeros(vec![16, 4]);
        p.lift.bias.as_mut().unwrap().value = Tensor::zeros(vec![16]);
        p.lower.weight.value = Tensor::zeros(vec![4, 16]);
        p.lower.bias.as_mut().unwrap().value = Tensor::zeros(vec![4]);
        let x = rand_input(&mut rng, 3, 4);
        let mut g = Tape::eval();
        let v = g.input(x);
        let y = mlp_block(&mut g, &p, v).unwrap();
        let expect = p.ln.apply(&mut g, v).unwrap();
        assert_eq!(g.value(y).data(), g.value(expect).data());
    }

    #[test]
    fn lstm_zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut p = LstmTransformParams::<f64>::init(&mut rng, 4, false, 0.3);
        p.fwd.b_ih.value = Tensor::zeros(vec![16]);
        let mut g = Tape::eval();
        let x = g.input(Tensor::zeros(vec![5, 4]));
        let y = lstm_transform(&mut g, &p, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uni_lstm_is_causal() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let p = LstmTransformParams::<f64>::init(&mut rng, 3, false, 0.3);
        let base = rand_input(&mut rng, 8, 3);
        let mut pert = base.clone();
        let t_perturb = 5;
        pert.data_mut()[t_perturb * 3] += 2.0;
        let mut g1 = Tape::eval();
        let x1 = g1.input(base);
        let y1 = lstm_transform(&mut g1, &p, x1).unwrap();
        let mut g2 = Tape::eval();
        let x2 = g2.input(pert);
        let y2 = lstm_transform(&mut g2, &p, x2).unwrap();
        assert_eq!(
            g1.value(y1).data()[..t_perturb * 3],
            g2.value(y2).data()[..t_perturb * 3]
        );
    }

    #[test]
    fn all_variants_run_with_correct_output_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let dims = dims(8);
        for variant in TemporalVariant::ALL {
            let p = TemporalBlockParams::<f64>::init(&mut rng, variant, &dims);
            let mut g = Tape::eval();
            let x = g.input(rand_input(&mut rng, 7, 8));
            let y = p.forward(&mut g, x).unwrap();
            assert_eq!(g.value(y).shape(), &[7, 8], "variant {variant}");
        }
    }

    #[test]
    fn unknown_variant_name_rejected() {
        assert!("mamba-松".parse::<TemporalVariant>().is_err());
        assert_eq!(
            "uni-mamba+mlp".parse::<TemporalVariant>().unwrap(),
            TemporalVariant::UniMambaMlp
        );
    }

    #[test]
    fn binaural_identical_channels_with_tied_maps_are_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let dims = dims(4);
        for variant in [TemporalVariant::Transformer, TemporalVariant::UniMamba] {
            let mut p = BinauralBlockParams::<f64>::init(&mut rng, variant, &dims).unwrap();
            // Tie the direction-specific weight sets.
            match &mut p {
                BinauralBlockParams::Transformer { cross, .. } => {
                    let tied = cross[0].clone();
                    cross[1] = tied;
                }
                BinauralBlockParams::Mamba { mix_fwd, .. } => {
                    let tied = mix_fwd[0].clone();
                    mix_fwd[1] = tied;
                }
            }
            let x = rand_input(&mut rng, 6, 4);
            let mut g = Tape::eval();
            let xl = g.input(x.clone());
            let xr = g.input(x);
            let (yl, yr) = p.forward(&mut g, xl, xr).unwrap();
            assert_eq!(g.value(yl).data(), g.value(yr).data(), "variant {variant}");
        }
    }

    #[test]
    fn binaural_mamba_zeroed_mixing_decouples_channels() {
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let dims = dims(4);
        let mut p =
            BinauralBlockParams::<f64>::init(&mut rng, TemporalVariant::UniMamba, &dims).unwrap();
        if let BinauralBlockParams::Mamba { mix_fwd, .. } = &mut p {
            for m in mix_fwd.iter_mut() {
                m.weight.value = Tensor::zeros(vec![4, 4]);
                m.bias.as_mut().unwrap().value = Tensor::zeros(vec![4]);
            }
        }
        let xl = rand_input(&mut rng, 6, 4);
        let xr1 = rand_input(&mut rng, 6, 4);
        let xr2 = rand_input(&mut rng, 6, 4);
        let run = |xr: Tensor<f64>| {
            let mut g = Tape::eval();
            let l = g.input(xl.clone());
            let r = g.input(xr);
            let (yl, _) = p.forward(&mut g, l, r).unwrap();
            g.value(yl).data().to_vec()
        };
        assert_eq!(run(xr1), run(xr2));
    }

    #[test]
    fn mamba_stream_matches_batch_block() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let p = MambaBlockParams::<f64>::init(&mut rng, &dims(4));
        let t_len = 11;
        let x = rand_input(&mut rng, t_len, 4);
        let mut g = Tape::eval();
        let v = g.input(x.clone());
        let y = mamba_block(&mut g, &p, v).unwrap();
        let mut stream = MambaStream::new(&p);
        let bytes = stream.state_bytes();
        for t in 0..t_len {
            let out = stream.step(&x.data()[t * 4..(t + 1) * 4]).unwrap();
            for d in 0..4 {
                let expect = g.value(y).at2(t, d);
                assert!(
                    (out[d] - expect).abs() < 1e-10,
                    "t={t} d={d}: {} vs {expect}",
                    out[d]
                );
            }
        }
        assert_eq!(stream.state_bytes(), bytes);
    }
}
