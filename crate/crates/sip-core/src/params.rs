//! Trainable parameter containers.
//!
//! Every trainable tensor is wrapped in a [`Param`] carrying a process-wide
//! unique id. The tape registers parameters by id, so a weight used many
//! times in one forward pass (the per-layer blocks share weights across all
//! encoder layers) maps to a single tape leaf and its gradient contributions
//! accumulate.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u64);

#[derive(Debug, Clone)]
pub struct Param<R: Real> {
    id: ParamId,
    pub value: Tensor<R>,
}

impl<R: Real> Param<R> {
    pub fn new(value: Tensor<R>) -> Self {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Walk all parameters of a container in a fixed order, with slash-joined
/// path names. The order is the serialization, optimizer-update and
/// gradient-check order.
pub trait ParamGroup<R: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>);

    fn params(&self) -> Vec<(String, &Param<R>)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<R>)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    /// Total trainable element count.
    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Dense affine map stored as `weight: [out, in]` plus optional bias.
#[derive(Debug, Clone)]
pub struct Linear<R: Real> {
    pub weight: Param<R>,
    pub bias: Option<Param<R>>,
}

impl<R: Real> Linear<R> {
    /// Uniform init in ±1/sqrt(fan_in); bias zero.
    pub fn init(rng: &mut impl Rng, out_dim: usize, in_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Param::new(Tensor::uniform(rng, vec![out_dim, in_dim], -bound, bound)),
            bias: bias.then(|| Param::new(Tensor::zeros(vec![out_dim]))),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize, bias: bool) -> Self {
        Linear {
            weight: Param::new(Tensor::zeros(vec![out_dim, in_dim])),
            bias: bias.then(|| Param::new(Tensor::zeros(vec![out_dim]))),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    /// `x: [m, in] -> [m, out]`.
    pub fn apply(&self, g: &mut Tape<R>, x: Var) -> Result<Var> {
        let w = g.leaf(&self.weight);
        let y = g.matmul_nt(x, w)?;
        match &self.bias {
            Some(b) => {
                let bv = g.leaf(b);
                g.add_row(y, bv)
            }
            None => Ok(y),
        }
    }
}

impl<R: Real> ParamGroup<R> for Linear<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Per-feature affine layer-norm parameters (gamma, beta).
#[derive(Debug, Clone)]
pub struct LayerNorm<R: Real> {
    pub gamma: Param<R>,
    pub beta: Param<R>,
}

impl<R: Real> LayerNorm<R> {
    pub fn init(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Tensor::full(vec![dim], R::ONE)),
            beta: Param::new(Tensor::zeros(vec![dim])),
        }
    }

    pub fn apply(&self, g: &mut Tape<R>, x: Var) -> Result<Var> {
        let gamma = g.leaf(&self.gamma);
        let beta = g.leaf(&self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

impl<R: Real> ParamGroup<R> for LayerNorm<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// Copy values from `src` into `dst` by position, requiring matching names
/// and shapes. Used for weight tying in tests and checkpoint restore.
pub fn copy_params<R: Real, G: ParamGroup<R> + ?Sized>(dst: &mut G, src_values: &[(String, Tensor<R>)]) -> Result<()> {
    let mut dst_params = dst.params_mut();
    if dst_params.len() != src_values.len() {
        return Err(Error::Config(format!(
            "parameter set mismatch: {} vs {} tensors",
            dst_params.len(),
            src_values.len()
        )));
    }
    for ((dname, dparam), (sname, svalue)) in dst_params.iter_mut().zip(src_values.iter()) {
        if dname != sname {
            return Err(Error::Config(format!(
                "parameter name mismatch: expected {dname}, found {sname}"
            )));
        }
        if dparam.value.shape() != svalue.shape() {
            return Err(Error::Config(format!(
                "parameter shape mismatch for {dname}: {:?} vs {:?}",
                dparam.value.shape(),
                svalue.shape()
            )));
        }
        dparam.value = svalue.clone();
    }
    Ok(())
}
