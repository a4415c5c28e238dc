//! Ingestion and persistence.
//!
//! Binary feature files, the line-delimited manifest, normalization
//! statistics, versioned checkpoints, and deterministic synthetic fixture
//! generation. Every reader rejects malformed input rather than truncating
//! or clamping it. Exact layouts are documented in FORMATS.md.

use crate::error::{Error, Result};
use crate::model::{FeatureTensor, ModelConfig, NormScope, SipModelParams};
use crate::params::{copy_params, ParamGroup};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const FEATURE_MAGIC: &[u8; 4] = b"SIPF";
const STATS_MAGIC: &[u8; 4] = b"SIPS";
const CHECKPOINT_MAGIC: &[u8; 4] = b"SIPK";
const FORMAT_VERSION: u32 = 1;
const MANIFEST_HEADER: &str = "#sip-manifest v1";
const PRECISION_F32: u8 = 4;
const PRECISION_F64: u8 = 8;
pub const STD_FLOOR: f64 = 1e-8;

// ── Little-endian helpers ─────────────────────────────────────────────

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated while reading {what} at offset {}: expected {} bytes, {} available",
                self.path,
                self.offset,
                n,
                self.bytes.len() - self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(8 * n, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid utf-8 in {what}", self.path)))
    }

    fn expect_end(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after payload",
                self.path,
                self.bytes.len() - self.offset
            )));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn check_magic(r: &mut Reader, magic: &[u8; 4]) -> Result<()> {
    let m = r.take(4, "magic")?;
    if m != magic {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}, expected {:?}",
            r.path,
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {version}",
            r.path
        )));
    }
    Ok(())
}

// ── Feature files ─────────────────────────────────────────────────────

/// Write `layers × frames × dim` features, little-endian f32 payload.
pub fn write_features(path: &Path, feats: &FeatureTensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(21 + 4 * feats.values().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, feats.layers() as u32);
    put_u32(&mut buf, feats.frames() as u32);
    put_u32(&mut buf, feats.dim() as u32);
    buf.push(PRECISION_F32);
    for v in feats.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &buf)
}

/// Byte-exact inverse of [`write_features`]; f64 payloads are also
/// accepted and narrowed.
pub fn read_features(path: &Path) -> Result<FeatureTensor<f32>> {
    let bytes = read_file(path)?;
    let display = path.display().to_string();
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path: &display,
    };
    check_magic(&mut r, FEATURE_MAGIC)?;
    let layers = r.u32("layer count")? as usize;
    let frames = r.u32("frame count")? as usize;
    let dim = r.u32("feature dim")? as usize;
    let precision = r.u8("precision code")?;
    let numel = layers
        .checked_mul(frames)
        .and_then(|v| v.checked_mul(dim))
        .ok_or_else(|| Error::Format(format!("{display}: element count overflow")))?;
    let values = match precision {
        PRECISION_F32 => r.f32_vec(numel, "payload")?,
        PRECISION_F64 => r
            .f64_vec(numel, "payload")?
            .into_iter()
            .map(|v| v as f32)
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "{display}: unknown precision code {other}"
            )))
        }
    };
    r.expect_end()?;
    FeatureTensor::new(layers, frames, dim, values)
}

// ── Manifest ──────────────────────────────────────────────────────────

/// One evaluation sample. Feature paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub left: String,
    #[serde(default)]
    pub right: Option<String>,
    pub audiogram_left: Vec<f64>,
    #[serde(default)]
    pub audiogram_right: Option<Vec<f64>>,
    /// Correctness label in percent, [0, 100].
    pub label: f64,
    pub split: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for e in entries {
        text.push_str(
            &serde_json::to_string(e)
                .map_err(|e| Error::Format(format!("manifest encode: {e}")))?,
        );
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

/// Load and validate a manifest. Labels outside [0, 100] and missing
/// feature files are rejected with the offending line number; entries keep
/// file order.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{}: manifest is not utf-8", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_display = lineno + 1;
        if lineno == 0 {
            if line.is_empty() && text.trim().is_empty() {
                break;
            }
            if line != MANIFEST_HEADER {
                return Err(Error::Format(format!(
                    "{}:{line_display}: expected header {MANIFEST_HEADER:?}, found {line:?}",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!(
                "{}:{line_display}: malformed manifest record: {e}",
                path.display()
            ))
        })?;
        if !(0.0..=100.0).contains(&entry.label) {
            return Err(Error::Format(format!(
                "{}:{line_display}: label {} outside [0, 100]",
                path.display(),
                entry.label
            )));
        }
        for rel in std::iter::once(&entry.left).chain(entry.right.iter()) {
            let p = base.join(rel);
            if !p.exists() {
                return Err(Error::Format(format!(
                    "{}:{line_display}: referenced feature file {} does not exist",
                    path.display(),
                    p.display()
                )));
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Resolve an entry-relative path against the manifest location.
pub fn resolve_path(manifest_path: &Path, rel: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(rel)
}

// ── Normalization statistics ──────────────────────────────────────────

/// Per-layer (or global) per-dimension mean and standard deviation,
/// population convention, std floored at 1e-8.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub scope: NormScope,
    pub layers: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source_split: String,
}

impl NormStats {
    pub fn mean_std(&self, layer: usize, dim: usize) -> (f64, f64) {
        let idx = match self.scope {
            NormScope::PerLayer => layer * self.dim + dim,
            NormScope::Global => dim,
        };
        (self.mean[idx], self.std[idx])
    }

    pub fn check_compatible(&self, layers: usize, dim: usize) -> Result<()> {
        let layer_ok = match self.scope {
            NormScope::PerLayer => layers == self.layers,
            NormScope::Global => true,
        };
        if !layer_ok || dim != self.dim {
            return Err(Error::Config(format!(
                "normalization stats for {}x{} applied to features with L={layers}, D={dim}",
                self.layers, self.dim
            )));
        }
        Ok(())
    }
}

/// Streaming mean/variance over all frames of all listed samples (both
/// channels when present).
pub fn compute_norm_stats(
    manifest_path: &Path,
    entries: &[ManifestEntry],
    scope: NormScope,
    source_split: &str,
) -> Result<NormStats> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument(
            "normalization stats need at least one sample".into(),
        ));
    }
    let first = read_features(&resolve_path(manifest_path, &entries[0].left))?;
    let (layers, dim) = (first.layers(), first.dim());
    let slots = match scope {
        NormScope::PerLayer => layers * dim,
        NormScope::Global => dim,
    };
    let mut count = vec![0u64; slots];
    let mut sum = vec![0.0f64; slots];
    let mut sumsq = vec![0.0f64; slots];
    let mut accumulate = |feats: &FeatureTensor<f32>| -> Result<()> {
        if feats.layers() != layers || feats.dim() != dim {
            return Err(Error::Format(format!(
                "inconsistent feature dims across manifest: {}x{} vs {layers}x{dim}",
                feats.layers(),
                feats.dim()
            )));
        }
        for l in 0..layers {
            for t in 0..feats.frames() {
                for c in 0..dim {
                    let idx = match scope {
                        NormScope::PerLayer => l * dim + c,
                        NormScope::Global => c,
                    };
                    let v = feats.values()[(l * feats.frames() + t) * dim + c] as f64;
                    count[idx] += 1;
                    sum[idx] += v;
                    sumsq[idx] += v * v;
                }
            }
        }
        Ok(())
    };
    for e in entries {
        accumulate(&read_features(&resolve_path(manifest_path, &e.left))?)?;
        if let Some(right) = &e.right {
            accumulate(&read_features(&resolve_path(manifest_path, right))?)?;
        }
    }
    let mut mean = vec![0.0f64; slots];
    let mut std = vec![0.0f64; slots];
    for i in 0..slots {
        let n = count[i] as f64;
        mean[i] = sum[i] / n;
        let var = (sumsq[i] / n - mean[i] * mean[i]).max(0.0);
        std[i] = var.sqrt().max(STD_FLOOR);
    }
    Ok(NormStats {
        scope,
        layers: if scope == NormScope::Global { 1 } else { layers },
        dim,
        mean,
        std,
        source_split: source_split.to_string(),
    })
}

pub fn write_norm_stats(path: &Path, stats: &NormStats) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(STATS_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    buf.push(match stats.scope {
        NormScope::PerLayer => 0,
        NormScope::Global => 1,
    });
    put_u32(&mut buf, stats.layers as u32);
    put_u32(&mut buf, stats.dim as u32);
    put_u32(&mut buf, stats.source_split.len() as u32);
    buf.extend_from_slice(stats.source_split.as_bytes());
    for v in stats.mean.iter().chain(stats.std.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &buf)
}

pub fn read_norm_stats(path: &Path) -> Result<NormStats> {
    let bytes = read_file(path)?;
    let display = path.display().to_string();
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path: &display,
    };
    check_magic(&mut r, STATS_MAGIC)?;
    let scope = match r.u8("scope")? {
        0 => NormScope::PerLayer,
        1 => NormScope::Global,
        other => {
            return Err(Error::Format(format!(
                "{display}: unknown stats scope {other}"
            )))
        }
    };
    let layers = r.u32("layers")? as usize;
    let dim = r.u32("dim")? as usize;
    let source_split = r.string("source split")?;
    let slots = match scope {
        NormScope::PerLayer => layers * dim,
        NormScope::Global => dim,
    };
    let mean = r.f64_vec(slots, "means")?;
    let std = r.f64_vec(slots, "stds")?;
    r.expect_end()?;
    Ok(NormStats {
        scope,
        layers,
        dim,
        mean,
        std,
        source_split,
    })
}

// ── Checkpoints ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first_moment: Vec<(String, Tensor<f32>)>,
    pub second_moment: Vec<(String, Tensor<f32>)>,
}

/// Versioned binary checkpoint: config echo plus named f32 parameter
/// tensors, with optional optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn from_params(config: &ModelConfig, params: &SipModelParams<f32>) -> Self {
        Checkpoint {
            config: config.clone(),
            tensors: params
                .params()
                .into_iter()
                .map(|(name, p)| (name, p.value.clone()))
                .collect(),
            optimizer: None,
        }
    }

    /// Rebuild model parameters, rejecting name or shape mismatches
    /// between the stored tensors and the echoed config.
    pub fn build_params(&self) -> Result<SipModelParams<f32>> {
        let mut params = SipModelParams::init(&self.config)?;
        copy_params(&mut params, &self.tensors)?;
        Ok(params)
    }
}

fn put_named_tensors(buf: &mut Vec<u8>, tensors: &[(String, Tensor<f32>)]) {
    put_u32(buf, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(buf, t.rank() as u32);
        for &d in t.shape() {
            put_u32(buf, d as u32);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_named_tensors(r: &mut Reader) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32_vec(numel, "tensor data")?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let config_json = serde_json::to_vec(&ckpt.config)
        .map_err(|e| Error::Format(format!("config encode: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, config_json.len() as u32);
    buf.extend_from_slice(&config_json);
    put_named_tensors(&mut buf, &ckpt.tensors);
    match &ckpt.optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            put_u64(&mut buf, opt.step);
            put_named_tensors(&mut buf, &opt.first_moment);
            put_named_tensors(&mut buf, &opt.second_moment);
        }
    }
    write_file(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let display = path.display().to_string();
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path: &display,
    };
    check_magic(&mut r, CHECKPOINT_MAGIC)?;
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config json")?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| Error::Format(format!("{display}: config decode: {e}")))?;
    let tensors = read_named_tensors(&mut r)?;
    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let step = r.u64("optimizer step")?;
            let first_moment = read_named_tensors(&mut r)?;
            let second_moment = read_named_tensors(&mut r)?;
            Some(OptimizerSnapshot {
                step,
                first_moment,
                second_moment,
            })
        }
        other => {
            return Err(Error::Format(format!(
                "{display}: unknown optimizer flag {other}"
            )))
        }
    };
    r.expect_end()?;
    Ok(Checkpoint {
        config,
        tensors,
        optimizer,
    })
}

// ── Synthetic fixtures ────────────────────────────────────────────────

/// Shape of a generated fixture set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    pub audiogram_bands: usize,
    pub binaural: bool,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            train_samples: 64,
            eval_samples: 32,
            layers: 4,
            frames: 48,
            dim: 32,
            audiogram_bands: 8,
            binaural: false,
        }
    }
}

/// Per-sample ground truth of the planted labeling rule, returned for
/// direct verification of learnability.
#[derive(Debug, Clone)]
pub struct PlantedSample {
    pub id: String,
    pub signal: f64,
    pub label: f64,
}

/// Generate a deterministic synthetic dataset under `out_dir`.
///
/// Features carry a per-sample signal `s ~ U(-1, 1)` along a fixed random
/// direction on top of uniform noise. Labels follow the planted rule
/// `label = clamp(50 + 40·s - 8·ā, 0, 100)` where `ā` is the mean
/// audiogram threshold scaled to [0, 1], so labels are monotone in the
/// planted statistic and span most of the percent range. Identical seeds
/// produce identical bytes.
pub fn gen_fixtures(
    out_dir: &Path,
    seed: u64,
    spec: &FixtureSpec,
) -> Result<(PathBuf, Vec<PlantedSample>)> {
    if spec.dim == 0 || spec.layers == 0 || spec.frames == 0 {
        return Err(Error::InvalidArgument(
            "fixture dims must be positive".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let direction: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    // Per-layer gain so every layer carries the signal at different scale.
    let layer_gain: Vec<f64> = (0..spec.layers).map(|_| rng.random_range(0.5..1.5)).collect();

    let mut entries = Vec::new();
    let mut planted = Vec::new();
    let total = spec.train_samples + spec.eval_samples;
    for idx in 0..total {
        let split = if idx < spec.train_samples { "train" } else { "eval" };
        let id = format!("{split}_{idx:04}");
        let signal: f64 = rng.random_range(-1.0..1.0);

        let gen_channel = |rng: &mut ChaCha20Rng, jitter: f64| -> FeatureTensor<f32> {
            let mut values = Vec::with_capacity(spec.layers * spec.frames * spec.dim);
            for l in 0..spec.layers {
                for _ in 0..spec.frames {
                    for c in 0..spec.dim {
                        let noise = rng.random_range(-0.8..0.8);
                        let v = noise + (signal + jitter) * direction[c] * layer_gain[l];
                        values.push(v as f32);
                    }
                }
            }
            FeatureTensor::new(spec.layers, spec.frames, spec.dim, values).expect("fixture dims")
        };

        let left = gen_channel(&mut rng, 0.0);
        let left_rel = format!("features/{id}_L.sipf");
        write_features(&out_dir.join(&left_rel), &left)?;

        let right_rel = if spec.binaural {
            let jitter = rng.random_range(-0.05..0.05);
            let right = gen_channel(&mut rng, jitter);
            let rel = format!("features/{id}_R.sipf");
            write_features(&out_dir.join(&rel), &right)?;
            Some(rel)
        } else {
            None
        };

        let audiogram_left: Vec<f64> = (0..spec.audiogram_bands)
            .map(|_| (rng.random_range(0.0..80.0f64) * 10.0).round() / 10.0)
            .collect();
        let audiogram_right = spec.binaural.then(|| {
            (0..spec.audiogram_bands)
                .map(|_| (rng.random_range(0.0..80.0f64) * 10.0).round() / 10.0)
                .collect::<Vec<f64>>()
        });

        let mut mean_ag: f64 =
            audiogram_left.iter().sum::<f64>() / audiogram_left.len() as f64;
        if let Some(r) = &audiogram_right {
            mean_ag = 0.5 * (mean_ag + r.iter().sum::<f64>() / r.len() as f64);
        }
        let label = (50.0 + 40.0 * signal - 8.0 * (mean_ag / 80.0)).clamp(0.0, 100.0);

        planted.push(PlantedSample {
            id: id.clone(),
            signal,
            label,
        });
        entries.push(ManifestEntry {
            id,
            left: left_rel,
            right: right_rel,
            audiogram_left,
            audiogram_right,
            label,
            split: split.to_string(),
        });
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest_path, &entries)?;
    Ok((manifest_path, planted))
}
