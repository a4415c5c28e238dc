//! Central finite-difference gradient oracle.
//!
//! This module only evaluates closures; it never touches the tape's
//! backward rules, so it stays an independent reference for them. Run it
//! in f64: the default step of 1e-5 needs the headroom.

use crate::error::{Error, Result};
use crate::params::{Param, ParamGroup};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central differences (f(x+h·e_i) - f(x-h·e_i)) / 2h per coordinate.
pub fn finite_difference_gradient<R, F>(f: F, point: &Tensor<R>, h: f64) -> Result<Tensor<R>>
where
    R: Real,
    F: Fn(&Tensor<R>) -> Result<R>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step {h}")));
    }
    let step = R::from_f64(h);
    let mut probe = point.clone();
    let mut grad = vec![R::ZERO; point.numel()];
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_gradient",
                detail: format!("probe at coordinate {i}"),
            });
        }
        grad[i] = (plus - minus) / (step + step);
    }
    Tensor::new(point.shape().to_vec(), grad)
}

/// Relative error between two gradients, with a floor so that near-zero
/// pairs compare absolutely.
pub fn max_relative_error<R: Real>(got: &Tensor<R>, expect: &Tensor<R>) -> f64 {
    let floor = 1e-6;
    got.data()
        .iter()
        .zip(expect.data())
        .map(|(&g, &e)| {
            let (g, e) = (g.to_f64(), e.to_f64());
            (g - e).abs() / g.abs().max(e.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Check every parameter of a group against central finite differences.
///
/// `forward` evaluates the scalar loss from the (possibly perturbed)
/// parameters; `analytic` runs the differentiated path once and returns the
/// named gradients in group order. Returns the worst relative error over
/// all coordinates and the coordinate where it occurred.
///
/// Near-zero gradient pairs compare against a floor tied to the loss
/// magnitude: central differences of a loss of size |f| carry absolute
/// noise around eps·|f|/h, so coordinates whose true gradient vanishes
/// (a key bias under softmax, say) would otherwise fail on rounding noise
/// alone.
pub fn check_param_gradients<R, G, F, A>(
    params: &mut G,
    forward: F,
    analytic: A,
    h: f64,
) -> Result<(f64, String)>
where
    R: Real,
    G: ParamGroup<R>,
    F: Fn(&G) -> Result<R>,
    A: Fn(&G) -> Result<Vec<(String, Tensor<R>)>>,
{
    let grads = analytic(params)?;
    let names: Vec<String> = params.params().iter().map(|(n, _)| n.clone()).collect();
    if grads.len() != names.len() {
        return Err(Error::Config(format!(
            "analytic gradients cover {} tensors, group has {}",
            grads.len(),
            names.len()
        )));
    }
    let loss_scale = forward(params)?.to_f64().abs();
    let floor = (1e-5 * loss_scale).max(1e-6);
    let step = R::from_f64(h);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (t_idx, name) in names.iter().enumerate() {
        if &grads[t_idx].0 != name {
            return Err(Error::Config(format!(
                "gradient order mismatch: {} vs {name}",
                grads[t_idx].0
            )));
        }
        let numel = grads[t_idx].1.numel();
        for i in 0..numel {
            let orig = {
                let mut ps = params.params_mut();
                let v = ps[t_idx].1.value.data()[i];
                ps[t_idx].1.value.data_mut()[i] = v + step;
                v
            };
            let plus = forward(params)?;
            {
                let mut ps = params.params_mut();
                ps[t_idx].1.value.data_mut()[i] = orig - step;
            }
            let minus = forward(params)?;
            {
                let mut ps = params.params_mut();
                ps[t_idx].1.value.data_mut()[i] = orig;
            }
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    op: "check_param_gradients",
                    detail: format!("{name}[{i}]"),
                });
            }
            let fd = (plus.to_f64() - minus.to_f64()) / (2.0 * h);
            let ad = grads[t_idx].1.data()[i].to_f64();
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{i}]");
            }
        }
    }
    Ok((worst, worst_at))
}

/// Named analytic gradients for a parameter group, with missing gradients
/// materialized as zeros.
pub fn named_param_grads<R: Real, G: ParamGroup<R>>(
    params: &G,
    grads: &crate::tape::Grads<R>,
) -> Vec<(String, Tensor<R>)> {
    params
        .params()
        .iter()
        .map(|(name, p)| {
            let g = grads
                .param(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            (name.clone(), g)
        })
        .collect()
}

/// Ad-hoc parameter group over a list of named tensors, for checking
/// individual primitives.
pub struct TensorGroup<R: Real>(pub Vec<(String, Param<R>)>);

impl<R: Real> TensorGroup<R> {
    pub fn new(tensors: Vec<(&str, Tensor<R>)>) -> Self {
        TensorGroup(
            tensors
                .into_iter()
                .map(|(n, t)| (n.to_string(), Param::new(t)))
                .collect(),
        )
    }

    pub fn value(&self, idx: usize) -> &Tensor<R> {
        &self.0[idx].1.value
    }

    pub fn param(&self, idx: usize) -> &Param<R> {
        &self.0[idx].1
    }
}

impl<R: Real> ParamGroup<R> for TensorGroup<R> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<R>)>) {
        for (n, p) in &self.0 {
            out.push((crate::params::join(prefix, n), p));
        }
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<R>)>) {
        for (n, p) in &mut self.0 {
            out.push((crate::params::join(prefix, n), p));
        }
    }
}
