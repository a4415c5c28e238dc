//! Forward-pass scaling measurements: wall time of the attention block
//! versus the sequential selective scan across sequence lengths, plus the
//! constant-memory claim for stepwise recurrent inference.
//!
//! Measurements run single-path (no batch parallelism) in eval mode; the
//! fitted log-log slope of median wall time reports the growth exponent.

use crate::blocks::{self, AttentionParams, BlockDims, MambaBlockParams, MambaStream};
use crate::error::{Error, Result};
use crate::ssm::{scan_sequential, SelectiveSsmParams};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::time::Instant;

/// Points with medians below this are flagged as too close to timer
/// granularity to trust, and excluded from the exponent fit.
pub const MIN_RELIABLE_NS: u128 = 2_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BenchKind {
    /// Single-head self-attention block forward.
    SelfAttention,
    /// Sequential selective-SSM scan at the block's inner width.
    MambaScanSequential,
    /// Frame-by-frame Mamba block inference (state-size probe).
    MambaStepwise,
}

impl BenchKind {
    pub fn name(&self) -> &'static str {
        match self {
            BenchKind::SelfAttention => "self-attention",
            BenchKind::MambaScanSequential => "mamba-scan",
            BenchKind::MambaStepwise => "mamba-stepwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self-attention" => Ok(BenchKind::SelfAttention),
            "mamba-scan" => Ok(BenchKind::MambaScanSequential),
            "mamba-stepwise" => Ok(BenchKind::MambaStepwise),
            other => Err(Error::Config(format!(
                "unknown bench kind {other:?}; expected self-attention, mamba-scan or mamba-stepwise"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub len: usize,
    pub median_ns: u128,
    /// Peak transient memory estimate for the forward pass, in bytes.
    pub memory_bytes: usize,
    /// True when the median is too small for the timer to resolve.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub kind: BenchKind,
    pub dim: usize,
    pub repetitions: usize,
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of log time vs log length over unflagged points.
    pub exponent: Option<f64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,length,median_ns,memory_bytes,flagged\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.kind.name(),
                p.len,
                p.median_ns,
                p.memory_bytes,
                p.flagged
            ));
        }
        out
    }
}

fn median(mut times: Vec<u128>) -> u128 {
    times.sort_unstable();
    times[times.len() / 2]
}

/// Least-squares slope of ln(time) against ln(length).
pub fn fit_exponent(points: &[(usize, u128)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|(l, _)| (*l as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, t)| (*t as f64).ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - xm) * (y - ym);
        den += (x - xm) * (x - xm);
    }
    (den > 0.0).then(|| num / den)
}

fn check_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.len() < 2 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "bench lengths must be strictly increasing".into(),
        ));
    }
    let span = lengths[lengths.len() - 1] as f64 / lengths[0] as f64;
    if span < 8.0 {
        return Err(Error::InvalidArgument(format!(
            "bench lengths must span at least three doublings, got x{span:.1}"
        )));
    }
    Ok(())
}

/// Median-of-repetitions forward wall time per (kind, length) with a
/// log-log growth-exponent fit per kind.
pub fn bench_scaling(
    kinds: &[BenchKind],
    lengths: &[usize],
    dim: usize,
    repetitions: usize,
) -> Result<Vec<BenchReport>> {
    check_lengths(lengths)?;
    if repetitions == 0 {
        return Err(Error::InvalidArgument("need at least one repetition".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0x5EED);
    let dims = BlockDims {
        d: dim,
        mlp_hidden: 4 * dim,
        expand: 2,
        state_dim: 16,
        conv_width: 4,
        dt_rank: dim.div_ceil(16).max(1),
        dropout_attn: 0.1,
        dropout_mamba: 0.3,
        d_skip: true,
    };
    let attn = AttentionParams::<f32>::init(&mut rng, dim, 0.1);
    let ssm = SelectiveSsmParams::<f32>::init(
        &mut rng,
        dims.inner_dim(),
        dims.state_dim,
        dims.dt_rank,
        true,
    );
    let mamba = MambaBlockParams::<f32>::init(&mut rng, &dims);

    let mut reports = Vec::new();
    for &kind in kinds {
        let mut points = Vec::new();
        for &len in lengths {
            // One untimed warmup run per point settles the allocator and
            // page cache before the timed repetitions.
            let (elapsed, memory_bytes) = match kind {
                BenchKind::SelfAttention => {
                    let x = Tensor::<f32>::uniform(&mut rng, vec![len, dim], -1.0, 1.0);
                    let mut times = Vec::with_capacity(repetitions);
                    let mut mem = 0;
                    for rep in 0..=repetitions {
                        let mut g = Tape::<f32>::eval();
                        let v = g.input(x.clone());
                        let start = Instant::now();
                        let y = blocks::self_attention(&mut g, &attn, v)?;
                        if rep > 0 {
                            times.push(start.elapsed().as_nanos());
                        }
                        mem = g.arena_bytes();
                        std::hint::black_box(g.value(y).data()[0]);
                    }
                    (median(times), mem)
                }
                BenchKind::MambaScanSequential => {
                    let x =
                        Tensor::<f32>::uniform(&mut rng, vec![len, dims.inner_dim()], -1.0, 1.0);
                    let mut times = Vec::with_capacity(repetitions);
                    for rep in 0..=repetitions {
                        let start = Instant::now();
                        let y = scan_sequential(&x, &ssm)?;
                        if rep > 0 {
                            times.push(start.elapsed().as_nanos());
                        }
                        std::hint::black_box(y.data()[0]);
                    }
                    // Working set: the running state plus the output
                    // sequence (the sequential scan streams its steps).
                    let lanes = dims.inner_dim() * dims.state_dim;
                    let mem = (lanes + len * dims.inner_dim()) * std::mem::size_of::<f32>();
                    (median(times), mem)
                }
                BenchKind::MambaStepwise => {
                    let x = Tensor::<f32>::uniform(&mut rng, vec![len, dim], -1.0, 1.0);
                    let mut times = Vec::with_capacity(repetitions);
                    let mut state_bytes = 0;
                    for rep in 0..=repetitions {
                        let mut stream = MambaStream::new(&mamba);
                        let start = Instant::now();
                        for t in 0..len {
                            let y = stream.step(&x.data()[t * dim..(t + 1) * dim])?;
                            std::hint::black_box(y[0]);
                        }
                        if rep > 0 {
                            times.push(start.elapsed().as_nanos());
                        }
                        state_bytes = stream.state_bytes();
                    }
                    (median(times), state_bytes)
                }
            };
            points.push(BenchPoint {
                len,
                median_ns: elapsed,
                memory_bytes,
                flagged: elapsed < MIN_RELIABLE_NS,
            });
        }
        let fit_points: Vec<(usize, u128)> = points
            .iter()
            .filter(|p| !p.flagged)
            .map(|p| (p.len, p.median_ns))
            .collect();
        reports.push(BenchReport {
            kind,
            dim,
            repetitions,
            exponent: fit_exponent(&fit_points),
            points,
        });
    }
    Ok(reports)
}
