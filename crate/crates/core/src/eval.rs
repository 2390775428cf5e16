//! Restoration metrics, dataset evaluation and the ablation harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec;
use crate::network::{read_checkpoint, Checkpoint, ContextKind, Davanet, ForwardOptions, ModelConfig, Subnet};
use crate::synth::StereoSample;
use crate::tensor::Tensor;
use crate::training::Stage;

/// Peak signal-to-noise ratio in dB; `+∞` for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("psnr operands {:?} and {:?}", a.shape(), b.shape())));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = k.iter().enumerate().map(|(i, kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (σ = 1.5),
/// evaluated where the window fits inside the image and averaged over
/// channels and batch items.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_SIGMA, 0.01, 0.03, peak)
}

pub fn ssim_with(a: &Tensor, b: &Tensor, window: usize, sigma: f64, k1: f64, k2: f64, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("ssim operands {:?} and {:?}", a.shape(), b.shape())));
    }
    let [n, c, h, w] = a.shape();
    if h < window || w < window || window == 0 {
        return Err(Error::contract(format!("{w}x{h} image is smaller than the {window}x{window} window")));
    }
    let k = gaussian(window, sigma);
    let c1 = (k1 * peak).powi(2);
    let c2 = (k2 * peak).powi(2);
    let mut total = 0.0;
    for bn in 0..n {
        for ch in 0..c {
            let (x, y) = (a.plane(bn, ch), b.plane(bn, ch));
            let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
            let mx = filter_valid(x, h, w, &k);
            let my = filter_valid(y, h, w, &k);
            let sxx = filter_valid(&prod(x, x), h, w, &k);
            let syy = filter_valid(&prod(y, y), h, w, &k);
            let sxy = filter_valid(&prod(x, y), h, w, &k);
            let mut acc = 0.0;
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
            total += acc / mx.len() as f64;
        }
    }
    Ok(total / (n * c) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    Single,
    NoContext,
    NoDa,
    NoVa,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Single, Variant::NoContext, Variant::NoDa, Variant::NoVa];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Single => "single",
            Variant::NoContext => "no_context",
            Variant::NoDa => "no_da",
            Variant::NoVa => "no_va",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }

    /// Whether the variant runs the single-view network only.
    pub fn is_single_view(self) -> bool {
        matches!(self, Variant::Single | Variant::NoContext)
    }

    fn options(self) -> ForwardOptions {
        ForwardOptions {
            gate: None,
            zero_depth: self == Variant::NoDa,
            no_view_aggregation: self == Variant::NoVa,
        }
    }

    /// Check that a checkpoint can serve this variant.
    pub fn check(self, config: &ModelConfig) -> Result<()> {
        match (self, config.context) {
            (Variant::NoContext, ContextKind::MultiRate) => Err(Error::config(
                "no_context needs a checkpoint trained with the single-rate context block",
            )),
            (Variant::Full | Variant::NoDa | Variant::NoVa, ContextKind::SingleRate) => Err(Error::config(format!(
                "{} needs a checkpoint with the multi-rate context module",
                self.name()
            ))),
            _ => Ok(()),
        }
    }
}

/// Metrics of one stereo pair. PSNR is computed per view and averaged;
/// `None` marks an infinite PSNR (an exact restoration of some view).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr: Option<f64>,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub deblur: usize,
    pub disp: usize,
    pub fusion: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn of(model: &Davanet) -> Self {
        ParamCounts {
            deblur: model.count(Subnet::Deblur),
            disp: model.count(Subnet::Disp),
            fusion: model.count(Subnet::Fusion),
            total: model.params.total(),
        }
    }

    /// Parameters actually used by a variant.
    pub fn used_by(&self, variant: Variant) -> usize {
        if variant.is_single_view() {
            self.deblur
        } else {
            self.total
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub split: String,
    /// How per-sample PSNR is formed.
    pub psnr_mode: String,
    /// Sorted by sample id.
    pub samples: Vec<SampleMetrics>,
    /// Mean over samples with finite PSNR; `None` when there are none.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub infinite_psnr: usize,
    pub seconds_per_pair: f64,
    pub params: ParamCounts,
    pub params_used: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// The report with timing removed, for determinism comparisons.
    pub fn without_timing(&self) -> EvalReport {
        EvalReport {
            seconds_per_pair: 0.0,
            ..self.clone()
        }
    }
}

/// SHA-256 of the canonical JSON of a model configuration.
pub fn config_fingerprint(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serialises");
    hex::encode(Sha256::digest(&json))
}

/// Score a restored pair against the sharp pair.
pub fn score_pair(id: &str, restored: [&Tensor; 2], sharp: [&Tensor; 2]) -> Result<SampleMetrics> {
    let pl = psnr(restored[0], sharp[0], 1.0)?;
    let pr = psnr(restored[1], sharp[1], 1.0)?;
    let sl = ssim(restored[0], sharp[0], 1.0)?;
    let sr = ssim(restored[1], sharp[1], 1.0)?;
    let p = 0.5 * (pl + pr);
    Ok(SampleMetrics {
        id: id.to_string(),
        psnr: p.is_finite().then_some(p),
        ssim: 0.5 * (sl + sr),
    })
}

/// Build a report from per-sample metrics.
pub fn summarize(
    variant: Variant,
    split: &str,
    mut samples: Vec<SampleMetrics>,
    seconds_per_pair: f64,
    model: &Davanet,
) -> EvalReport {
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let finite: Vec<f64> = samples.iter().filter_map(|s| s.psnr).collect();
    let infinite = samples.len() - finite.len();
    if infinite > 0 {
        log::warn!("{infinite} sample(s) have infinite PSNR and are excluded from the mean");
    }
    let mean_psnr = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    let mean_ssim = if samples.is_empty() {
        0.0
    } else {
        samples.iter().map(|s| s.ssim).sum::<f64>() / samples.len() as f64
    };
    let params = ParamCounts::of(model);
    EvalReport {
        variant,
        split: split.to_string(),
        psnr_mode: "per_view_mean".to_string(),
        samples,
        mean_psnr,
        mean_ssim,
        infinite_psnr: infinite,
        seconds_per_pair,
        params,
        params_used: params.used_by(variant),
        config_fingerprint: config_fingerprint(&model.config),
    }
}

/// Restore one pair with a variant's forward path.
pub fn restore_pair(model: &Davanet, variant: Variant, left: &Tensor, right: &Tensor) -> Result<[Tensor; 2]> {
    if variant.is_single_view() {
        Ok([model.deblur(left)?, model.deblur(right)?])
    } else {
        let out = model.forward(left, right, &variant.options())?;
        Ok([out.restored_left, out.restored_right])
    }
}

/// Evaluate a model variant over samples.
pub fn evaluate(model: &Davanet, samples: &[StereoSample], variant: Variant, split: &str) -> Result<EvalReport> {
    variant.check(&model.config)?;
    let start = Instant::now();
    let metrics = exec::map_indices(samples.len(), |i| {
        let s = &samples[i];
        let restored = restore_pair(model, variant, &s.blurry_left, &s.blurry_right)?;
        if !restored.iter().all(Tensor::all_finite) {
            return Err(Error::Numeric(format!("non-finite restoration for sample {}", s.id)));
        }
        score_pair(&s.id, [&restored[0], &restored[1]], [&s.sharp_left, &s.sharp_right])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let seconds = start.elapsed().as_secs_f64() / samples.len().max(1) as f64;
    Ok(summarize(variant, split, metrics, seconds, model))
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, samples: &[StereoSample], variant: Variant, split: &str) -> Result<EvalReport> {
    evaluate(&ckpt.model, samples, variant, split)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = serde_json::to_vec_pretty(value).expect("report serialises");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<EvalReport>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub table: String,
}

/// Checkpoints used by the ablation harness: the stereo model is
/// `<dir>/joint.ckpt`; the context ablation is a separately trained
/// single-rate deblurring network at `<dir>/no_context/deblur.ckpt` (or
/// `<dir>/no_context.ckpt`).
pub fn ablation_checkpoints(dir: &Path) -> Vec<(Variant, Option<PathBuf>)> {
    let existing = |cands: &[PathBuf]| cands.iter().find(|p| p.is_file()).cloned();
    let stereo = existing(&[dir.join("joint.ckpt")]);
    let no_context = existing(&[dir.join("no_context").join("deblur.ckpt"), dir.join("no_context.ckpt")]);
    Variant::ALL
        .into_iter()
        .map(|v| {
            let p = if v == Variant::NoContext { no_context.clone() } else { stereo.clone() };
            (v, p)
        })
        .collect()
}

/// Evaluate every variant whose checkpoint is present.
pub fn ablate(dir: &Path, samples: &[StereoSample], split: &str) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (variant, path) in ablation_checkpoints(dir) {
        let Some(path) = path else {
            rows.push(AblationRow {
                variant,
                checkpoint: None,
                report: None,
                skipped: Some("checkpoint not found".to_string()),
            });
            continue;
        };
        let ckpt = read_checkpoint(&path, None)?;
        if !variant.is_single_view() && !ckpt.has_completed(Stage::Joint) {
            log::warn!("{} has not completed the joint stage", path.display());
        }
        let report = evaluate(&ckpt.model, samples, variant, split)?;
        rows.push(AblationRow {
            variant,
            checkpoint: Some(path),
            report: Some(report),
            skipped: None,
        });
    }
    let table = ablation_table(&rows);
    Ok(AblationReport { rows, table })
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<12} {:>10} {:>8} {:>10}\n", "variant", "PSNR(dB)", "SSIM", "params");
    for row in rows {
        match &row.report {
            Some(r) => {
                let p = r.mean_psnr.map_or("inf".to_string(), |p| format!("{p:.3}"));
                out.push_str(&format!(
                    "{:<12} {:>10} {:>8.4} {:>10}\n",
                    row.variant.name(),
                    p,
                    r.mean_ssim,
                    r.params_used
                ));
            }
            None => out.push_str(&format!("{:<12} {:>10}\n", row.variant.name(), "skipped")),
        }
    }
    out
}
