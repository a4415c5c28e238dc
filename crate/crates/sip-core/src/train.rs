//! Optimization recipe: Huber loss, Adam with bias correction, linear
//! warmup into cosine decay, and a deterministic training loop with
//! periodic validation.
//!
//! Batch members run forward/backward independently (in parallel when the
//! `parallel` feature is on); gradient reduction always folds in batch
//! order, so the parameter trajectory is bit-identical for any thread
//! count.

use crate::data::{resolve_path, ManifestEntry, NormStats};
use crate::error::{Error, Result};
use crate::gradcheck::named_param_grads;
use crate::metrics::{ncc, rmse};
use crate::model::{
    normalize_features, predict, Audiogram, ModelConfig, SampleInput, SipModelParams,
};
use crate::par::{map_indexed, ExecMode};
use crate::params::ParamGroup;
use crate::real::Real;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub huber_delta: f64,
    /// Global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Validation cadence in steps.
    pub val_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for synthetic fixtures.
    pub fn desk() -> Self {
        TrainConfig {
            total_steps: 2_000,
            warmup_steps: 100,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.90,
            beta2: 0.98,
            eps: 1e-8,
            huber_delta: 1.0,
            grad_clip: None,
            seed: 0,
            val_every: 250,
        }
    }

    /// The published full-scale recipe.
    pub fn published() -> Self {
        TrainConfig {
            total_steps: 80_000,
            warmup_steps: 2_000,
            batch_size: 160,
            lr: 3e-5,
            beta1: 0.90,
            beta2: 0.98,
            eps: 1e-8,
            huber_delta: 1.0,
            grad_clip: None,
            seed: 0,
            val_every: 1_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config("training sizes must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the schedule ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.lr <= 0.0 || self.huber_delta <= 0.0 {
            return Err(Error::Config("lr and huber delta must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

/// Huber loss of one prediction: quadratic inside ±delta, linear outside.
pub fn huber_loss(pred: f64, target: f64, delta: f64) -> Result<f64> {
    if !pred.is_finite() || !target.is_finite() {
        return Err(Error::NonFinite {
            op: "huber_loss",
            detail: format!("pred {pred}, target {target}"),
        });
    }
    if delta <= 0.0 {
        return Err(Error::InvalidArgument(format!("huber delta {delta}")));
    }
    let e = pred - target;
    Ok(if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    })
}

/// Learning rate at a step: linear warmup to `lr`, then cosine decay to
/// zero at `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    if step > config.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule end {}",
            config.total_steps
        )));
    }
    if step < config.warmup_steps {
        return Ok(config.lr * step as f64 / config.warmup_steps as f64);
    }
    let progress =
        (step - config.warmup_steps) as f64 / (config.total_steps - config.warmup_steps) as f64;
    Ok(config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam accumulators, aligned with the parameter-group order.
#[derive(Debug, Clone)]
pub struct OptimizerState<R: Real> {
    pub step: u64,
    pub first_moment: Vec<Tensor<R>>,
    pub second_moment: Vec<Tensor<R>>,
}

impl<R: Real> OptimizerState<R> {
    pub fn new<G: ParamGroup<R>>(params: &G) -> Self {
        let shapes: Vec<Vec<usize>> = params
            .params()
            .iter()
            .map(|(_, p)| p.value.shape().to_vec())
            .collect();
        OptimizerState {
            step: 0,
            first_moment: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            second_moment: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }
}

/// One bias-corrected Adam update. `grads` must be in parameter-group
/// order (as produced by [`named_param_grads`]).
pub fn adam_step<R: Real, G: ParamGroup<R>>(
    params: &mut G,
    grads: &[(String, Tensor<R>)],
    state: &mut OptimizerState<R>,
    config: &TrainConfig,
    lr_now: f64,
) -> Result<()> {
    let mut p = params.params_mut();
    if p.len() != grads.len() || p.len() != state.first_moment.len() {
        return Err(Error::Config(format!(
            "optimizer state for {} tensors applied to {} parameters",
            state.first_moment.len(),
            p.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = R::from_f64(config.beta1);
    let b2 = R::from_f64(config.beta2);
    let one_m_b1 = R::ONE - b1;
    let one_m_b2 = R::ONE - b2;
    let corr1 = R::from_f64(1.0 - config.beta1.powi(t));
    let corr2 = R::from_f64(1.0 - config.beta2.powi(t));
    let eps = R::from_f64(config.eps);
    let lr = R::from_f64(lr_now);
    for (i, (name, param)) in p.iter_mut().enumerate() {
        let (gname, grad) = &grads[i];
        if gname != name {
            return Err(Error::Config(format!(
                "gradient order mismatch: {gname} vs {name}"
            )));
        }
        if grad.shape() != param.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: grad.shape().to_vec(),
                rhs: param.value.shape().to_vec(),
            });
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let pdata = param.value.data_mut();
        for j in 0..pdata.len() {
            let g = grad.data()[j];
            m[j] = b1 * m[j] + one_m_b1 * g;
            v[j] = b2 * v[j] + one_m_b2 * g * g;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            pdata[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── Dataset ───────────────────────────────────────────────────────────

/// One in-memory training/evaluation sample.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub input: SampleInput<f32>,
    pub label: f64,
}

/// A fully loaded, normalized split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<TrainSample>,
    pub split: String,
}

impl Dataset {
    /// Load entries of one split, applying frozen normalization stats when
    /// provided.
    pub fn load(
        manifest_path: &Path,
        entries: &[ManifestEntry],
        split: &str,
        stats: Option<&NormStats>,
        config: &ModelConfig,
    ) -> Result<Self> {
        let mut samples = Vec::new();
        for e in entries.iter().filter(|e| e.split == split) {
            let mut left = crate::data::read_features(&resolve_path(manifest_path, &e.left))?;
            if let Some(s) = stats {
                left = normalize_features(&left, s)?;
            }
            let right = match &e.right {
                Some(rel) => {
                    let mut r = crate::data::read_features(&resolve_path(manifest_path, rel))?;
                    if let Some(s) = stats {
                        r = normalize_features(&r, s)?;
                    }
                    Some(r)
                }
                None => None,
            };
            if config.binaural && right.is_none() {
                return Err(Error::Config(format!(
                    "sample {} has no right channel but the model is binaural",
                    e.id
                )));
            }
            samples.push(TrainSample {
                id: e.id.clone(),
                input: SampleInput {
                    left,
                    right,
                    audiogram_left: Audiogram::new(e.audiogram_left.clone())?,
                    audiogram_right: e
                        .audiogram_right
                        .as_ref()
                        .map(|a| Audiogram::new(a.clone()))
                        .transpose()?,
                },
                label: e.label,
            });
        }
        Ok(Dataset {
            samples,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Deterministic eval-mode predictions over a dataset.
pub fn predict_dataset(
    config: &ModelConfig,
    params: &SipModelParams<f32>,
    data: &Dataset,
    mode: ExecMode,
) -> Result<Vec<f64>> {
    let results = map_indexed(mode, &data.samples, |_, sample| {
        let mut g = Tape::<f32>::eval().with_scan_mode(config.scan);
        predict(&mut g, &sample.input, config, params).map(|v| g.value(v).item().unwrap().to_f64())
    });
    results.into_iter().collect()
}

// ── Training loop ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct ValidationPoint {
    pub step: usize,
    pub rmse: f64,
    pub ncc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub validations: Vec<ValidationPoint>,
}

pub struct TrainOutcome {
    /// Parameters of the checkpoint with the best validation RMSE.
    pub best_params: SipModelParams<f32>,
    pub best_val_rmse: f64,
    pub best_val_step: usize,
    pub history: TrainHistory,
    pub optimizer: OptimizerState<f32>,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the packed inputs
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(c.wrapping_mul(0x94D0_49BB_1331_11EB));
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Train from a seeded initialization, validating at the configured
/// cadence and returning the best-validation checkpoint. Deterministic in
/// (model seed, train seed): init, shuffling and dropout are all seeded.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    let mut params = SipModelParams::<f32>::init(model_config)?;
    let mut opt = OptimizerState::new(&params);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, SipModelParams<f32>)> = None;
    let exec = ExecMode::auto();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = train_set.len(); // force an initial shuffle

    for step in 0..train_config.total_steps {
        // Draw the batch from a seeded epoch shuffle.
        let mut batch = Vec::with_capacity(train_config.batch_size);
        for _ in 0..train_config.batch_size {
            if cursor >= order.len() {
                let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(train_config.seed, epoch, 0xE));
                order.shuffle(&mut rng);
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        // Per-member forward/backward; order-preserving map.
        let member_results = map_indexed(exec, &batch, |slot, &sample_idx| {
            let sample = &train_set.samples[sample_idx];
            let dropout_seed = mix_seed(train_config.seed, step as u64, slot as u64);
            let mut g = Tape::<f32>::train(dropout_seed).with_scan_mode(model_config.scan);
            let pred = predict(&mut g, &sample.input, model_config, &params)?;
            let loss = g.huber(pred, sample.label, train_config.huber_delta)?;
            let loss_value = g.value(loss).item()?.to_f64();
            let grads = g.backprop(loss)?;
            Ok::<_, Error>((loss_value, named_param_grads(&params, &grads)))
        });

        // Fixed-order reduction.
        let mut mean_loss = 0.0f64;
        let mut acc: Option<Vec<(String, Tensor<f32>)>> = None;
        for r in member_results {
            let (loss_value, grads) = r?;
            mean_loss += loss_value;
            match &mut acc {
                None => acc = Some(grads),
                Some(acc) => {
                    for (slot, (_, g)) in acc.iter_mut().zip(grads.iter()) {
                        for (dst, src) in slot.1.data_mut().iter_mut().zip(g.data()) {
                            *dst += *src;
                        }
                    }
                }
            }
        }
        mean_loss /= batch.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite {
                op: "train",
                detail: format!("loss diverged at step {step}"),
            });
        }
        let mut grads = acc.expect("non-empty batch");
        let inv_b = 1.0 / batch.len() as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= inv_b;
            }
        }
        if let Some(max_norm) = train_config.grad_clip {
            let norm: f64 = grads
                .iter()
                .map(|(_, g)| g.data().iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let scale = (max_norm / norm) as f32;
                for (_, g) in grads.iter_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }

        history.train_loss.push(mean_loss);
        let lr_now = lr_at(step, train_config)?;
        adam_step(&mut params, &grads, &mut opt, train_config, lr_now)?;

        let last = step + 1 == train_config.total_steps;
        if (step + 1) % train_config.val_every == 0 || last {
            let preds = predict_dataset(model_config, &params, val_set, exec)?;
            let labels: Vec<f64> = val_set.samples.iter().map(|s| s.label).collect();
            let val_rmse = rmse(&preds, &labels)?;
            let val_ncc = ncc(&preds, &labels).ok();
            history.validations.push(ValidationPoint {
                step: step + 1,
                rmse: val_rmse,
                ncc: val_ncc,
            });
            let better = best.as_ref().map(|(b, _, _)| val_rmse < *b).unwrap_or(true);
            if better {
                best = Some((val_rmse, step + 1, params.clone()));
            }
        }
    }

    let (best_val_rmse, best_val_step, best_params) = best.expect("at least one validation");
    Ok(TrainOutcome {
        best_params,
        best_val_rmse,
        best_val_step,
        history,
        optimizer: opt,
    })
}
