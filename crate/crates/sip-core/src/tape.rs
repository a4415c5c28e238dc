//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A forward pass pushes every intermediate tensor into an arena and, when
//! recording, one op entry per primitive. `backprop` replays the ops in
//! exact reverse order; a tensor consumed k times receives the sum of its
//! k contributions. All reductions run in a fixed left-to-right order, so
//! two identical forward passes produce bit-identical gradients regardless
//! of thread count.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{Param, ParamId};
use crate::real::Real;
use crate::scan::{self, ScanMode};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;

/// Handle to a tensor held by the tape arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Layer-norm epsilon; shared by forward and backward.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    /// out = a @ b, a: [m,k], b: [k,n]
    Matmul { a: Var, b: Var, out: Var },
    /// out = a @ b^T, a: [m,k], b: [n,k]
    MatmulNT { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    /// out = a + v broadcast over rows; v: [n]
    AddRow { a: Var, v: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    /// out = a * v broadcast over rows; v: [n]
    MulRow { a: Var, v: Var, out: Var },
    Scale { a: Var, c: f64, out: Var },
    /// Elementwise product with a captured constant (dropout mask).
    MulMask { a: Var, out: Var },
    Exp { a: Var, out: Var },
    Sigmoid { a: Var, out: Var },
    Softplus { a: Var, out: Var },
    Tanh { a: Var, out: Var },
    Silu { a: Var, out: Var },
    Gelu { a: Var, out: Var },
    SoftmaxRows { a: Var, out: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, out: Var },
    MeanRows { a: Var, out: Var },
    MeanAll { a: Var, out: Var },
    ConcatRows { parts: Vec<Var>, out: Var },
    ConcatCols { a: Var, b: Var, out: Var },
    SliceRows { a: Var, start: usize, out: Var },
    SliceCols { a: Var, start: usize, out: Var },
    FlipRows { a: Var, out: Var },
    Reshape { a: Var, out: Var },
    /// Causal depthwise conv; x: [T,C], w: [C,K], b: [C]
    CausalConv1d { x: Var, w: Var, b: Var, out: Var },
    /// Selective-SSM scan; u, delta: [T,D]; b_in, c_in: [T,N]; a: [D,N]
    SsmScan {
        u: Var,
        delta: Var,
        b_in: Var,
        c_in: Var,
        a: Var,
        out: Var,
    },
    /// Huber loss of a scalar prediction against a constant target.
    Huber {
        pred: Var,
        target: f64,
        delta: f64,
        out: Var,
    },
}

/// Saved forward-state needed by some backward rules.
enum Aux<R: Real> {
    Mask(Vec<R>),
    Norm { mean: Vec<R>, inv_std: Vec<R> },
    Scan { h: Vec<R> },
}

pub struct Tape<R: Real> {
    vals: Vec<Tensor<R>>,
    ops: Vec<Op>,
    aux: Vec<Option<Aux<R>>>,
    recording: bool,
    train: bool,
    dropout_rng: Option<ChaCha20Rng>,
    param_vars: HashMap<ParamId, Var>,
    scan_mode: ScanMode,
}

/// Gradients produced by one backward pass, indexed by tape variable and
/// addressable by parameter identity.
pub struct Grads<R: Real> {
    by_var: Vec<Option<Tensor<R>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<R: Real> Grads<R> {
    pub fn var(&self, v: Var) -> Option<&Tensor<R>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter; `None` when no gradient flowed to it.
    pub fn param(&self, p: &Param<R>) -> Option<&Tensor<R>> {
        self.param_vars.get(&p.id()).and_then(|v| self.var(*v))
    }
}

impl<R: Real> Tape<R> {
    /// Forward-only evaluation: no ops recorded, dropout disabled.
    pub fn eval() -> Self {
        Self::build(false, false, None)
    }

    /// Record for backprop with dropout disabled (deterministic paths,
    /// gradient checks).
    pub fn grad() -> Self {
        Self::build(true, false, None)
    }

    /// Record for backprop with dropout active, seeded per sample.
    pub fn train(dropout_seed: u64) -> Self {
        Self::build(true, true, Some(ChaCha20Rng::seed_from_u64(dropout_seed)))
    }

    fn build(recording: bool, train: bool, rng: Option<ChaCha20Rng>) -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            aux: Vec::new(),
            recording,
            train,
            dropout_rng: rng,
            param_vars: HashMap::new(),
            scan_mode: ScanMode::Sequential,
        }
    }

    pub fn with_scan_mode(mut self, mode: ScanMode) -> Self {
        self.scan_mode = mode;
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.vals[v.0]
    }

    /// Bytes held by the value arena; a peak-transient-memory estimate.
    pub fn arena_bytes(&self) -> usize {
        self.vals
            .iter()
            .map(|t| t.numel() * std::mem::size_of::<R>())
            .sum()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Register an input tensor (gradients may flow to it, but it is not a
    /// parameter).
    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.push_val(t)
    }

    /// Register a parameter leaf. Repeat registrations of the same
    /// parameter return the same variable, so shared weights accumulate
    /// gradients from every use.
    pub fn leaf(&mut self, p: &Param<R>) -> Var {
        if let Some(v) = self.param_vars.get(&p.id()) {
            return *v;
        }
        let v = self.push_val(p.value.clone());
        self.param_vars.insert(p.id(), v);
        v
    }

    fn push_val(&mut self, t: Tensor<R>) -> Var {
        self.vals.push(t);
        Var(self.vals.len() - 1)
    }

    fn record(&mut self, op: Op, aux: Option<Aux<R>>) {
        if self.recording {
            self.ops.push(op);
            self.aux.push(aux);
        }
    }

    fn finish(&mut self, op_name: &'static str, t: Tensor<R>) -> Result<Var> {
        t.ensure_finite(op_name)?;
        Ok(self.push_val(t))
    }

    fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    // ── Primitive forwards ────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Self::shape_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![R::ZERO; m * n];
        kernels::matmul(ta.data(), tb.data(), m, k, n, &mut out);
        let v = self.finish("matmul", Tensor::new(vec![m, n], out)?)?;
        self.record(Op::Matmul { a, b, out: v }, None);
        Ok(v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(Self::shape_err("matmul_nt", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![R::ZERO; m * n];
        kernels::matmul_nt(ta.data(), tb.data(), m, k, n, &mut out);
        let v = self.finish("matmul_nt", Tensor::new(vec![m, n], out)?)?;
        self.record(Op::MatmulNT { a, b, out: v }, None);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let v = self.finish("add", t)?;
        self.record(Op::Add { a, b, out: v }, None);
        Ok(v)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tv) = (&self.vals[a.0], &self.vals[row.0]);
        let n = ta.cols();
        if tv.numel() != n {
            return Err(Self::shape_err("add_row", ta.shape(), tv.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(tv.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let v = self.finish("add_row", t)?;
        self.record(Op::AddRow { a, v: row, out: v }, None);
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let v = self.finish("mul", t)?;
        self.record(Op::Mul { a, b, out: v }, None);
        Ok(v)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tv) = (&self.vals[a.0], &self.vals[row.0]);
        let n = ta.cols();
        if tv.numel() != n {
            return Err(Self::shape_err("mul_row", ta.shape(), tv.shape()));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(tv.data()) {
                *x *= b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let v = self.finish("mul_row", t)?;
        self.record(Op::MulRow { a, v: row, out: v }, None);
        Ok(v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = &self.vals[a.0];
        let cc = R::from_f64(c);
        let t = ta.map(|x| x * cc);
        let v = self.finish("scale", t)?;
        self.record(Op::Scale { a, c, out: v }, None);
        Ok(v)
    }

    /// Inverted dropout: identity in eval mode; in train mode keeps each
    /// element with probability 1-rate and scales survivors by 1/(1-rate).
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !self.train || rate <= 0.0 {
            return Ok(a);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        let rng = self
            .dropout_rng
            .as_mut()
            .expect("train tape always has a dropout rng");
        let keep = R::from_f64(1.0 / (1.0 - rate));
        let ta = &self.vals[a.0];
        let mask: Vec<R> = (0..ta.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    R::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let data = ta
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let v = self.finish("dropout", t)?;
        self.record(Op::MulMask { a, out: v }, Some(Aux::Mask(mask)));
        Ok(v)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(R) -> R,
        op: impl Fn(Var) -> Op,
    ) -> Result<Var> {
        let t = self.vals[a.0].map(f);
        let v = self.finish(name, t)?;
        self.record(op(v), None);
        Ok(v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), |out| Op::Exp { a, out })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| x.sigmoid(), |out| Op::Sigmoid { a, out })
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "softplus",
            a,
            |x| x.softplus(),
            |out| Op::Softplus { a, out },
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), |out| Op::Tanh { a, out })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "silu",
            a,
            |x| x * x.sigmoid(),
            |out| Op::Silu { a, out },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, kernels::gelu, |out| Op::Gelu { a, out })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let v = self.finish("softmax", t)?;
        self.record(Op::SoftmaxRows { a, out: v }, None);
        Ok(v)
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (&self.vals[x.0], &self.vals[gamma.0], &self.vals[beta.0]);
        let n = tx.cols();
        if tg.numel() != n || tb.numel() != n {
            return Err(Self::shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / n;
        let eps = R::from_f64(LAYER_NORM_EPS);
        let inv_n = R::ONE / R::from_f64(n as f64);
        let mut data = vec![R::ZERO; tx.numel()];
        let mut means = vec![R::ZERO; rows];
        let mut inv_stds = vec![R::ZERO; rows];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mut mean = R::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = R::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let inv_std = R::ONE / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv_std;
            for c in 0..n {
                let xhat = (row[c] - mean) * inv_std;
                data[r * n + c] = xhat * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let v = self.finish("layer_norm", t)?;
        self.record(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                out: v,
            },
            self.recording.then_some(Aux::Norm {
                mean: means,
                inv_std: inv_stds,
            }),
        );
        Ok(v)
    }

    /// Mean over the row axis: [m, n] -> [n].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        if ta.rank() != 2 {
            return Err(Self::shape_err("mean_rows", ta.shape(), &[]));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let inv_m = R::ONE / R::from_f64(m as f64);
        let mut data = vec![R::ZERO; n];
        for r in 0..m {
            for c in 0..n {
                data[c] += ta.data()[r * n + c];
            }
        }
        for v in data.iter_mut() {
            *v *= inv_m;
        }
        let v = self.finish("mean_rows", Tensor::new(vec![n], data)?)?;
        self.record(Op::MeanRows { a, out: v }, None);
        Ok(v)
    }

    /// Mean of all elements -> scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        let mut sum = R::ZERO;
        for &v in ta.data() {
            sum += v;
        }
        let t = Tensor::scalar(sum / R::from_f64(ta.numel() as f64));
        let v = self.finish("mean_all", t)?;
        self.record(Op::MeanAll { a, out: v }, None);
        Ok(v)
    }

    /// Stack parts vertically. Vector parts become single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let n = self.vals[parts[0].0].cols();
        let mut rows = 0;
        for p in parts {
            let t = &self.vals[p.0];
            if t.cols() != n {
                return Err(Self::shape_err("concat_rows", t.shape(), &[n]));
            }
            rows += t.numel() / n;
        }
        let mut data = Vec::with_capacity(rows * n);
        for p in parts {
            data.extend_from_slice(self.vals[p.0].data());
        }
        let v = self.finish("concat_rows", Tensor::new(vec![rows, n], data)?)?;
        self.record(
            Op::ConcatRows {
                parts: parts.to_vec(),
                out: v,
            },
            None,
        );
        Ok(v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Self::shape_err("concat_cols", ta.shape(), tb.shape()));
        }
        let (m, na, nb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            data.extend_from_slice(&ta.data()[r * na..(r + 1) * na]);
            data.extend_from_slice(&tb.data()[r * nb..(r + 1) * nb]);
        }
        let v = self.finish("concat_cols", Tensor::new(vec![m, na + nb], data)?)?;
        self.record(Op::ConcatCols { a, b, out: v }, None);
        Ok(v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.vals[a.0];
        if ta.rank() != 2 || start + len > ta.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "slice_rows [{start}, {}) of {:?}",
                start + len,
                ta.shape()
            )));
        }
        let n = ta.shape()[1];
        let data = ta.data()[start * n..(start + len) * n].to_vec();
        let v = self.finish("slice_rows", Tensor::new(vec![len, n], data)?)?;
        self.record(Op::SliceRows { a, start, out: v }, None);
        Ok(v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.vals[a.0];
        if ta.rank() != 2 || start + len > ta.shape()[1] {
            return Err(Error::InvalidArgument(format!(
                "slice_cols [{start}, {}) of {:?}",
                start + len,
                ta.shape()
            )));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&ta.data()[r * n + start..r * n + start + len]);
        }
        let v = self.finish("slice_cols", Tensor::new(vec![m, len], data)?)?;
        self.record(Op::SliceCols { a, start, out: v }, None);
        Ok(v)
    }

    /// Reverse the time (row) axis.
    pub fn flip_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.vals[a.0];
        if ta.rank() != 2 {
            return Err(Self::shape_err("flip_rows", ta.shape(), &[]));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut data = Vec::with_capacity(m * n);
        for r in (0..m).rev() {
            data.extend_from_slice(&ta.data()[r * n..(r + 1) * n]);
        }
        let v = self.finish("flip_rows", Tensor::new(vec![m, n], data)?)?;
        self.record(Op::FlipRows { a, out: v }, None);
        Ok(v)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.vals[a.0].clone().reshaped(shape)?;
        let v = self.push_val(t);
        self.record(Op::Reshape { a, out: v }, None);
        Ok(v)
    }

    /// Depthwise causal 1-D convolution: output frame t sees input frames
    /// t-K+1..=t (zero-padded on the left), per channel.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (&self.vals[x.0], &self.vals[w.0], &self.vals[b.0]);
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[0] {
            return Err(Self::shape_err("causal_conv1d", tx.shape(), tw.shape()));
        }
        let (t_len, ch, k) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
        if tb.numel() != ch {
            return Err(Self::shape_err("causal_conv1d", tw.shape(), tb.shape()));
        }
        let mut data = vec![R::ZERO; t_len * ch];
        for t in 0..t_len {
            for c in 0..ch {
                let mut acc = tb.data()[c];
                for kk in 0..k {
                    // kernel tap kk reads input frame t - (K-1) + kk
                    let src = t as isize - (k as isize - 1) + kk as isize;
                    if src >= 0 {
                        acc += tw.data()[c * k + kk] * tx.data()[src as usize * ch + c];
                    }
                }
                data[t * ch + c] = acc;
            }
        }
        let v = self.finish("causal_conv1d", Tensor::new(vec![t_len, ch], data)?)?;
        self.record(Op::CausalConv1d { x, w, b, out: v }, None);
        Ok(v)
    }

    /// Fused selective-SSM scan.
    ///
    /// Per channel d and state n:
    ///   h[t] = exp(delta[t,d] * a[d,n]) * h[t-1] + delta[t,d] * b_in[t,n] * u[t,d]
    ///   y[t,d] = sum_n c_in[t,n] * h[t,d,n]
    ///
    /// The h trajectory is saved when recording; backward replays the
    /// adjoint recurrence in reverse time.
    pub fn ssm_scan(&mut self, u: Var, delta: Var, b_in: Var, c_in: Var, a: Var) -> Result<Var> {
        let (tu, td, tb, tc, ta) = (
            &self.vals[u.0],
            &self.vals[delta.0],
            &self.vals[b_in.0],
            &self.vals[c_in.0],
            &self.vals[a.0],
        );
        if tu.shape() != td.shape() {
            return Err(Self::shape_err("ssm_scan", tu.shape(), td.shape()));
        }
        let (t_len, dim) = (tu.shape()[0], tu.shape()[1]);
        let n = tb.shape().get(1).copied().unwrap_or(0);
        if tb.shape() != [t_len, n] || tc.shape() != [t_len, n] || ta.shape() != [dim, n] {
            return Err(Self::shape_err("ssm_scan", tb.shape(), ta.shape()));
        }
        // Lane layout: lane = d * n + s for channel d, state s.
        let lanes = dim * n;
        let mut decay = vec![R::ZERO; t_len * lanes];
        let mut incr = vec![R::ZERO; t_len * lanes];
        for t in 0..t_len {
            for d in 0..dim {
                let dt = td.data()[t * dim + d];
                let ut = tu.data()[t * dim + d];
                for s in 0..n {
                    let lane = d * n + s;
                    decay[t * lanes + lane] = (dt * ta.data()[d * n + s]).exp();
                    incr[t * lanes + lane] = dt * tb.data()[t * n + s] * ut;
                }
            }
        }
        let h = scan::scan_lanes(self.scan_mode, &decay, &incr, t_len, lanes);
        let mut y = vec![R::ZERO; t_len * dim];
        for t in 0..t_len {
            for d in 0..dim {
                let mut acc = R::ZERO;
                for s in 0..n {
                    acc += tc.data()[t * n + s] * h[t * lanes + d * n + s];
                }
                if !acc.is_finite() {
                    return Err(Error::NonFinite {
                        op: "ssm_scan",
                        detail: format!("state diverged at step {t}, channel {d}"),
                    });
                }
                y[t * dim + d] = acc;
            }
        }
        let v = self.finish("ssm_scan", Tensor::new(vec![t_len, dim], y)?)?;
        self.record(
            Op::SsmScan {
                u,
                delta,
                b_in,
                c_in,
                a,
                out: v,
            },
            self.recording.then_some(Aux::Scan { h }),
        );
        Ok(v)
    }

    /// Huber loss of a scalar prediction against a constant target.
    pub fn huber(&mut self, pred: Var, target: f64, delta: f64) -> Result<Var> {
        if delta <= 0.0 {
            return Err(Error::InvalidArgument(format!("huber delta {delta}")));
        }
        if !target.is_finite() {
            return Err(Error::NonFinite {
                op: "huber",
                detail: format!("target {target}"),
            });
        }
        let tp = &self.vals[pred.0];
        if tp.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "huber prediction must be scalar, got {:?}",
                tp.shape()
            )));
        }
        let e = tp.data()[0].to_f64() - target;
        let loss = if e.abs() <= delta {
            0.5 * e * e
        } else {
            delta * (e.abs() - 0.5 * delta)
        };
        let v = self.finish("huber", Tensor::scalar(R::from_f64(loss)))?;
        self.record(
            Op::Huber {
                pred,
                target,
                delta,
                out: v,
            },
            None,
        );
        Ok(v)
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss with respect to every tape
    /// variable. Ops are replayed in exact reverse order of the forward
    /// pass; accumulation is additive.
    pub fn backprop(&self, loss: Var) -> Result<Grads<R>> {
        let lt = &self.vals[loss.0];
        if lt.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backprop loss must be scalar, got {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![R::ONE])?);

        for (idx, op) in self.ops.iter().enumerate().rev() {
            self.backward_op(op, self.aux[idx].as_ref(), &mut grads);
        }

        Ok(Grads {
            by_var: grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<R>>], v: Var, contribution: Vec<R>) {
        match &mut grads[v.0] {
            Some(g) => {
                for (dst, src) in g.data_mut().iter_mut().zip(contribution) {
                    *dst += src;
                }
            }
            None => {
                let shape = self.vals[v.0].shape().to_vec();
                grads[v.0] = Some(Tensor::new(shape, contribution).expect("gradient shape"));
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&self, op: &Op, aux: Option<&Aux<R>>, grads: &mut [Option<Tensor<R>>]) {
        // Identify the op's output; skip entirely if no gradient reached it.
        let out = match op {
            Op::Matmul { out, .. }
            | Op::MatmulNT { out, .. }
            | Op::Add { out, .. }
            | Op::AddRow { out, .. }
            | Op::Mul { out, .. }
            | Op::MulRow { out, .. }
            | Op::Scale { out, .. }
            | Op::MulMask { out, .. }
            | Op::Exp { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Softplus { out, .. }
            | Op::Tanh { out, .. }
            | Op::Silu { out, .. }
            | Op::Gelu { out, .. }
            | Op::SoftmaxRows { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::MeanRows { out, .. }
            | Op::MeanAll { out, .. }
            | Op::ConcatRows { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::SliceRows { out, .. }
            | Op::SliceCols { out, .. }
            | Op::FlipRows { out, .. }
            | Op::Reshape { out, .. }
            | Op::CausalConv1d { out, .. }
            | Op::SsmScan { out, .. }
            | Op::Huber { out, .. } => *out,
        };
        let Some(dy) = grads[out.0].take() else {
            return;
        };

        match op {
            Op::Matmul { a, b, out: _ } => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dY @ B^T
                let mut da = vec![R::ZERO; m * k];
                kernels::matmul_nt(dy.data(), tb.data(), m, n, k, &mut da);
                self.acc(grads, *a, da);
                // dB = A^T @ dY
                let mut db = vec![R::ZERO; k * n];
                kernels::matmul_tn(ta.data(), dy.data(), k, m, n, &mut db);
                self.acc(grads, *b, db);
            }
            Op::MatmulNT { a, b, out: _ } => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                // dA = dY @ B
                let mut da = vec![R::ZERO; m * k];
                kernels::matmul(dy.data(), tb.data(), m, n, k, &mut da);
                self.acc(grads, *a, da);
                // dB = dY^T @ A
                let mut db = vec![R::ZERO; n * k];
                kernels::matmul_tn(dy.data(), ta.data(), n, m, k, &mut db);
                self.acc(grads, *b, db);
            }
            Op::Add { a, b, out: _ } => {
                self.acc(grads, *a, dy.data().to_vec());
                self.acc(grads, *b, dy.data().to_vec());
            }
            Op::AddRow { a, v, out: _ } => {
                let n = self.vals[v.0].numel();
                let mut dv = vec![R::ZERO; n];
                for chunk in dy.data().chunks(n) {
                    for (d, &g) in dv.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
                self.acc(grads, *a, dy.data().to_vec());
                self.acc(grads, *v, dv);
            }
            Op::Mul { a, b, out: _ } => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let da = dy
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                let db = dy
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&g, &x)| g * x)
                    .collect();
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::MulRow { a, v, out: _ } => {
                let (ta, tv) = (&self.vals[a.0], &self.vals[v.0]);
                let n = tv.numel();
                let mut da = vec![R::ZERO; ta.numel()];
                let mut dv = vec![R::ZERO; n];
                for (r, chunk) in dy.data().chunks(n).enumerate() {
                    for c in 0..n {
                        da[r * n + c] = chunk[c] * tv.data()[c];
                        dv[c] += chunk[c] * ta.data()[r * n + c];
                    }
                }
                self.acc(grads, *a, da);
                self.acc(grads, *v, dv);
            }
            Op::Scale { a, c, out: _ } => {
                let cc = R::from_f64(*c);
                self.acc(grads, *a, dy.data().iter().map(|&g| g * cc).collect());
            }
            Op::MulMask { a, out: _ } => {
                let Some(Aux::Mask(mask)) = aux else {
                    unreachable!("mask aux")
                };
                let da = dy
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&g, &m)| g * m)
                    .collect();
                self.acc(grads, *a, da);
            }
            Op::Exp { a, out } => {
                let ty = &self.vals[out.0];
                let da = dy
                    .data()
                    .iter()
                    .zip(ty.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                self.acc(grads, *a, da);
            }
            Op::Sigmoid { a, out } => {
                let ty = &self.vals[out.0];
                let da = dy
                    .data()
                    .iter()
                    .zip(ty.data())
                    .map(|(&g, &y)| g * y * (R::ONE - y))
                    .collect();
                self.acc(grads, *a, da);
            }
            Op::Softplus { a, out: _ } => {
                let tx = &self.vals[a.0];
                let da = dy
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&g, &x)| g * x.sigmoid())
                    .collect();
                self.acc(grads, *a, da);
            }
            Op::Tanh { a, out } => {
                let ty = &self.vals[out.0];
                let da = dy
                    .data()
                    .iter()
                    .zip(ty.data())
                    .map(|(&g, &y)| g * (R::ONE - y * y))
                    .collect();
                self.acc(grads, *a, da);
            }
            Op::Silu { a, out: _ } => {
                let tx = &self.vals[a.0];
                let da = dy
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&g, &x)| {
                        let s = x.sigmoid();
                        g * (s + x * s * (R::ONE - s))
                    })
                    .collect();
                self.acc(grads, *a, da);
            }
            Op::Gelu { a, out: _ } => {
                let tx = &self.vals[a.0];
                let da = dy
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&g, &x)| g * kernels::gelu_derivative(x))
                    .collect();
                self.acc(grads, *a, da);
            }
            Op::SoftmaxRows { a, out } => {
                let ty = &self.vals[out.0];
                let n = ty.cols();
                let mut da = vec![R::ZERO; ty.numel()];
                for (r, (yrow, grow)) in ty.data().chunks(n).zip(dy.data().chunks(n)).enumerate() {
                    let mut dot = R::ZERO;
                    for c in 0..n {
                        dot += yrow[c] * grow[c];
                    }
                    for c in 0..n {
                        da[r * n + c] = yrow[c] * (grow[c] - dot);
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                out: _,
            } => {
                let Some(Aux::Norm { mean, inv_std }) = aux else {
                    unreachable!("norm aux")
                };
                let (tx, tg) = (&self.vals[x.0], &self.vals[gamma.0]);
                let n = tx.cols();
                let rows = tx.numel() / n;
                let inv_n = R::ONE / R::from_f64(n as f64);
                let mut dx = vec![R::ZERO; tx.numel()];
                let mut dgamma = vec![R::ZERO; n];
                let mut dbeta = vec![R::ZERO; n];
                for r in 0..rows {
                    let xrow = &tx.data()[r * n..(r + 1) * n];
                    let grow = &dy.data()[r * n..(r + 1) * n];
                    let (m, is) = (mean[r], inv_std[r]);
                    let mut m1 = R::ZERO;
                    let mut m2 = R::ZERO;
                    for c in 0..n {
                        let xhat = (xrow[c] - m) * is;
                        let dxhat = grow[c] * tg.data()[c];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        dgamma[c] += grow[c] * xhat;
                        dbeta[c] += grow[c];
                    }
                    m1 *= inv_n;
                    m2 *= inv_n;
                    for c in 0..n {
                        let xhat = (xrow[c] - m) * is;
                        let dxhat = grow[c] * tg.data()[c];
                        dx[r * n + c] = is * (dxhat - m1 - xhat * m2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::MeanRows { a, out: _ } => {
                let ta = &self.vals[a.0];
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let inv_m = R::ONE / R::from_f64(m as f64);
                let mut da = vec![R::ZERO; m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = dy.data()[c] * inv_m;
                    }
                }
                self.acc(grads, *a, da);
            }
            Op::MeanAll { a, out: _ } => {
                let ta = &self.vals[a.0];
                let g = dy.data()[0] / R::from_f64(ta.numel() as f64);
                self.acc(grads, *a, vec![g; ta.numel()]);
            }
            Op::ConcatRows { parts, out: _ } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.vals[p.0].numel();
                    let dp = dy.data()[offset..offset + len].to_vec();
                    self.acc(grads, *p, dp);
                    offset += len;
                }
            }
            Op::ConcatCols { a, b, out: _ } => {
                let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
                let (m, na, nb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut da = vec![R::ZERO; m * na];
                let mut db = vec![R::ZERO; m * nb];
                for r in 0..m {
                    let row = &dy.data()[r * (na + nb)..(r + 1) * (na + nb)];
                    da[r * na..(r + 1) * na].copy_from_slice(&row[..na]);
                    db[r * nb..(r + 1) * nb].copy_from_slice(&row[na..]);
                }
                self.acc(grads, *a, da);
                self.acc(grads, *b, db);
            }
            Op::SliceRows { a, start, out } => {
                let ta = &self.vals[a.0];
                let n = ta.shape()[1];
                let len = self.vals[out.0].shape()[0];
                let mut da = vec![R::ZERO; ta.numel()];
                da[start * n..(start + len) * n].copy_from_slice(dy.data());
                self.acc(grads, *a, da);
            }
            Op::SliceCols { a, start, out } => {
                let ta = &self.vals[a.0];
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let len = self.vals[out.0].shape()[1];
                let mut da = vec![R::ZERO; m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + len]
                        .copy_from_slice(&dy.data()[r * len..(r + 1) * len]);
                }
                self.acc(grads, *a, da);
            }
            Op::FlipRows { a, out: _ } => {
                let ta = &self.vals[a.0];
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![R::ZERO; m * n];
                for r in 0..m {
                    da[r * n..(r + 1) * n]
                        .copy_from_slice(&dy.data()[(m - 1 - r) * n..(m - r) * n]);
                }
                self.acc(grads, *a, da);
            }
            Op::Reshape { a, out: _ } => {
                self.acc(grads, *a, dy.data().to_vec());
            }
            Op::CausalConv1d { x, w, b, out: _ } => {
                let (tx, tw) = (&self.vals[x.0], &self.vals[w.0]);
                let (t_len, ch, k) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                let mut dx = vec![R::ZERO; t_len * ch];
                let mut dw = vec![R::ZERO; ch * k];
                let mut db = vec![R::ZERO; ch];
                for t in 0..t_len {
                    for c in 0..ch {
                        let g = dy.data()[t * ch + c];
                        db[c] += g;
                        for kk in 0..k {
                            let src = t as isize - (k as isize - 1) + kk as isize;
                            if src >= 0 {
                                let s = src as usize;
                                dw[c * k + kk] += g * tx.data()[s * ch + c];
                                dx[s * ch + c] += g * tw.data()[c * k + kk];
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::SsmScan {
                u,
                delta,
                b_in,
                c_in,
                a,
                out: _,
            } => {
                let Some(Aux::Scan { h }) = aux else {
                    unreachable!("scan aux")
                };
                let (tu, td, tb, tc, ta) = (
                    &self.vals[u.0],
                    &self.vals[delta.0],
                    &self.vals[b_in.0],
                    &self.vals[c_in.0],
                    &self.vals[a.0],
                );
                let (t_len, dim) = (tu.shape()[0], tu.shape()[1]);
                let n = tb.shape()[1];
                let lanes = dim * n;
                let mut du = vec![R::ZERO; t_len * dim];
                let mut ddelta = vec![R::ZERO; t_len * dim];
                let mut db = vec![R::ZERO; t_len * n];
                let mut dc = vec![R::ZERO; t_len * n];
                let mut da = vec![R::ZERO; dim * n];
                // Adjoint state dL/dh_t, consumed in reverse time.
                let mut dh = vec![R::ZERO; lanes];
                for t in (0..t_len).rev() {
                    // Direct contribution through y_t = sum_n c * h.
                    for d in 0..dim {
                        let g = dy.data()[t * dim + d];
                        for s in 0..n {
                            let lane = d * n + s;
                            dc[t * n + s] += g * h[t * lanes + lane];
                            dh[lane] += g * tc.data()[t * n + s];
                        }
                    }
                    // Through the recurrence h_t = decay*h_{t-1} + delta*b*u.
                    for d in 0..dim {
                        let dt = td.data()[t * dim + d];
                        let ut = tu.data()[t * dim + d];
                        for s in 0..n {
                            let lane = d * n + s;
                            let a_ds = ta.data()[lane];
                            let decay = (dt * a_ds).exp();
                            let h_prev = if t == 0 { R::ZERO } else { h[(t - 1) * lanes + lane] };
                            let b_ts = tb.data()[t * n + s];
                            let g = dh[lane];
                            ddelta[t * dim + d] += g * (a_ds * decay * h_prev + b_ts * ut);
                            da[lane] += g * dt * decay * h_prev;
                            db[t * n + s] += g * dt * ut;
                            du[t * dim + d] += g * dt * b_ts;
                            // Propagate to h_{t-1}.
                            dh[lane] = g * decay;
                        }
                    }
                }
                self.acc(grads, *u, du);
                self.acc(grads, *delta, ddelta);
                self.acc(grads, *b_in, db);
                self.acc(grads, *c_in, dc);
                self.acc(grads, *a, da);
            }
            Op::Huber {
                pred,
                target,
                delta,
                out: _,
            } => {
                let e = self.vals[pred.0].data()[0].to_f64() - target;
                let slope = e.clamp(-delta, *delta);
                let dp = dy.data()[0] * R::from_f64(slope);
                self.acc(grads, *pred, vec![dp]);
            }
        }

        grads[out.0] = Some(dy);
    }
}
