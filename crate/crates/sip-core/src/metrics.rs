//! Evaluation metrics and harnesses: RMSE, centered NCC, checkpoint
//! evaluation, and the pooling-size sweep.

use crate::data::{load_manifest, Checkpoint, NormStats};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::par::ExecMode;
use crate::train::{predict_dataset, train, Dataset, TrainConfig};
use serde::Serialize;
use std::path::Path;

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "rmse over {} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mse = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(mse.sqrt())
}

/// Centered normalized cross-correlation (Pearson-style):
/// sum((p-p̄)(t-t̄)) / sqrt(sum((p-p̄)²)·sum((t-t̄)²)).
/// Constant inputs are rejected as undefined.
pub fn ncc(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() < 2 || preds.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "ncc needs two equal-length series, got {} vs {}",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let pm = preds.iter().sum::<f64>() / n;
    let tm = targets.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut pv = 0.0;
    let mut tv = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        cov += (p - pm) * (t - tm);
        pv += (p - pm) * (p - pm);
        tv += (t - tm) * (t - tm);
    }
    if pv == 0.0 || tv == 0.0 {
        return Err(Error::InvalidArgument(
            "ncc undefined for a constant series".into(),
        ));
    }
    Ok(cov / (pv * tv).sqrt())
}

/// Evaluation result for one split. `ncc` is `None` when undefined
/// (degenerate constant predictions), with the reason recorded.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub split: String,
    pub n: usize,
    pub rmse: f64,
    pub ncc: Option<f64>,
    pub ncc_note: Option<String>,
    /// Definition marker so reports are comparable across versions.
    pub ncc_definition: &'static str,
    pub residuals: Vec<f64>,
}

pub const NCC_DEFINITION: &str = "centered";

impl MetricReport {
    pub fn from_predictions(split: &str, preds: &[f64], labels: &[f64]) -> Result<Self> {
        let r = rmse(preds, labels)?;
        let (ncc_value, ncc_note) = match ncc(preds, labels) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(MetricReport {
            split: split.to_string(),
            n: preds.len(),
            rmse: r,
            ncc: ncc_value,
            ncc_note,
            ncc_definition: NCC_DEFINITION,
            residuals: preds.iter().zip(labels).map(|(p, t)| p - t).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report encode: {e}")))
    }
}

/// Deterministic eval-mode evaluation of a checkpoint on one manifest split.
pub fn evaluate(
    checkpoint: &Checkpoint,
    manifest_path: &Path,
    split: &str,
    stats: Option<&NormStats>,
) -> Result<MetricReport> {
    let entries = load_manifest(manifest_path)?;
    let dataset = Dataset::load(manifest_path, &entries, split, stats, &checkpoint.config)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {split:?} has no samples"
        )));
    }
    let params = checkpoint.build_params()?;
    let preds = predict_dataset(&checkpoint.config, &params, &dataset, ExecMode::auto())?;
    let labels: Vec<f64> = dataset.samples.iter().map(|s| s.label).collect();
    MetricReport::from_predictions(split, &preds, &labels)
}

// ── Pooling sweep ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub pool: usize,
    pub rmse: f64,
    pub ncc: Option<f64>,
    pub param_count: usize,
    pub pooled_frames: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Fixed, versioned CSV columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pool,rmse,ncc,param_count,pooled_frames\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.4},{},{},{}\n",
                r.pool,
                r.rmse,
                r.ncc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into()),
                r.param_count,
                r.pooled_frames
            ));
        }
        out
    }
}

/// Train and evaluate one model per pooling size on fixed seeds, emitting
/// one RMSE row per p. Parameter counts are identical across rows: pooling
/// has no weights.
pub fn pooling_sweep(
    base_config: &ModelConfig,
    train_config: &TrainConfig,
    manifest_path: &Path,
    p_values: &[usize],
) -> Result<SweepReport> {
    use crate::params::ParamGroup;
    if p_values.iter().any(|&p| p < 1) {
        return Err(Error::InvalidArgument("pooling sizes must be >= 1".into()));
    }
    let entries = load_manifest(manifest_path)?;
    let mut rows = Vec::new();
    for &p in p_values {
        let mut config = base_config.clone();
        config.pool = p;
        let train_entries: Vec<_> =
            entries.iter().filter(|e| e.split == "train").cloned().collect();
        let stats = crate::data::compute_norm_stats(
            manifest_path,
            &train_entries,
            config.norm_scope,
            "train",
        )?;
        let train_set = Dataset::load(manifest_path, &entries, "train", Some(&stats), &config)?;
        let eval_set = Dataset::load(manifest_path, &entries, "eval", Some(&stats), &config)?;
        let outcome = train(&config, train_config, &train_set, &eval_set)?;
        let preds = predict_dataset(&config, &outcome.best_params, &eval_set, ExecMode::auto())?;
        let labels: Vec<f64> = eval_set.samples.iter().map(|s| s.label).collect();
        let pooled_frames = train_set.samples[0].input.left.frames().div_ceil(p);
        rows.push(SweepRow {
            pool: p,
            rmse: rmse(&preds, &labels)?,
            ncc: ncc(&preds, &labels).ok(),
            param_count: outcome.best_params.param_count(),
            pooled_frames,
        });
    }
    Ok(SweepReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // preds [0,0] vs targets [3,4] → sqrt(12.5)
        let v = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((v - 12.5f64.sqrt()).abs() < 1e-12);
        // constant offset c → rmse = |c|
        let v = rmse(&[7.0, 8.0, 9.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_translation_invariance() {
        let p = [10.0, 20.0, 35.0];
        let t = [12.0, 19.0, 40.0];
        let shifted_p: Vec<f64> = p.iter().map(|v| v + 13.5).collect();
        let shifted_t: Vec<f64> = t.iter().map(|v| v + 13.5).collect();
        let a = rmse(&p, &t).unwrap();
        let b = rmse(&shifted_p, &shifted_t).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ncc_examples() {
        let t = [10.0, 30.0, 70.0, 90.0];
        assert!((ncc(&t, &t).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        assert!((ncc(&neg, &t).unwrap() + 1.0).abs() < 1e-12);
        // Positive affine invariance.
        let affine: Vec<f64> = t.iter().map(|v| 2.5 * v + 7.0).collect();
        assert!((ncc(&affine, &t).unwrap() - 1.0).abs() < 1e-12);
        // Constant series rejected.
        assert!(ncc(&[1.0, 1.0, 1.0], &t[..3]).is_err());
        assert!(ncc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ncc_bounded_by_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(2..20);
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            if let Ok(v) = ncc(&p, &t) {
                assert!(v.abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn report_handles_degenerate_constant_predictions() {
        let preds = vec![50.0; 4];
        let labels = vec![10.0, 20.0, 30.0, 40.0];
        let report = MetricReport::from_predictions("eval", &preds, &labels).unwrap();
        assert!(report.ncc.is_none());
        assert!(report.ncc_note.as_ref().unwrap().contains("constant"));
        assert_eq!(report.n, 4);
    }
}
