//! Frame quality, start/end drift, temporal consistency and flow error.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::percept::{flow_opacity_angle, FLOW_SIGMA};
use crate::world::FrameBundle;

pub const PSNR_CAP_DB: f64 = 60.0;
pub const REPORT_VERSION: &str = "1";

/// Peak signal-to-noise ratio for signals in [0, 1], capped at 60 dB.
pub fn psnr(frame: ArrayView3<f32>, reference: ArrayView3<f32>) -> Result<f64> {
    ensure_shape(frame.dim() == reference.dim(), || {
        format!("frame {:?} vs reference {:?}", frame.dim(), reference.dim())
    })?;
    let n = frame.len() as f64;
    let mse = frame
        .iter()
        .zip(reference.iter())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

fn gray(frame: ArrayView3<f32>) -> Array2<f64> {
    let (h, w, _) = frame.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        (f64::from(frame[[i, j, 0]]) + f64::from(frame[[i, j, 1]]) + f64::from(frame[[i, j, 2]])) / 3.0
    })
}

/// Variance of the 4-neighbour Laplacian of the gray image (replicated
/// border), divided by 16 and clamped to [0, 1].
pub fn sharpness(frame: ArrayView3<f32>) -> f64 {
    let g = gray(frame);
    let (h, w) = g.dim();
    let at = |i: isize, j: isize| g[[i.clamp(0, h as isize - 1) as usize, j.clamp(0, w as isize - 1) as usize]];
    let mut vals = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            vals.push(at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * at(i, j));
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (var / 16.0).clamp(0.0, 1.0)
}

/// PSNR / 60 with a reference, sharpness without.
pub fn frame_quality(frame: ArrayView3<f32>, reference: Option<ArrayView3<f32>>) -> Result<f64> {
    match reference {
        Some(r) => Ok(psnr(frame, r)? / PSNR_CAP_DB),
        None => Ok(sharpness(frame)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySeries {
    pub values: Vec<f64>,
    pub frame_rate: f64,
}

/// |mean of the first W values - mean of the last W|, W = seconds * rate.
pub fn drift_delta(series: &QualitySeries, window_seconds: f64) -> Result<f64> {
    let w = (window_seconds * series.frame_rate).round();
    if !(w >= 1.0) {
        return Err(Error::Config(format!(
            "drift window of {window_seconds} s at {} fps is empty",
            series.frame_rate
        )));
    }
    let w = w as usize;
    let n = series.values.len();
    if n < 2 * w {
        return Err(Error::Data(format!(
            "drift needs at least {} frames, series has {n}",
            2 * w
        )));
    }
    if series.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite quality value".into()));
    }
    let head = series.values[..w].iter().sum::<f64>() / w as f64;
    let tail = series.values[n - w..].iter().sum::<f64>() / w as f64;
    Ok((head - tail).abs())
}

fn pearson(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mb = b.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (f64::from(x) - ma, f64::from(y) - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean Pearson correlation of adjacent frames; constant frames are skipped.
pub fn temporal_consistency(frames: &[ArrayView3<f32>]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::Data("consistency needs at least two frames".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for pair in frames.windows(2) {
        ensure_shape(pair[0].dim() == pair[1].dim(), || "frames differ in shape".into())?;
        if let Some(r) = pearson(pair[0], pair[1]) {
            sum += r;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("every frame pair has zero variance".into()));
    }
    Ok(sum / count as f64)
}

/// Mean endpoint error over pixels where `valid` is true. Flows are H x W x 2.
pub fn flow_epe(pred: ArrayView3<f32>, gt: ArrayView3<f32>, valid: ArrayView2<bool>) -> Result<f64> {
    ensure_shape(pred.dim() == gt.dim(), || format!("flow {:?} vs {:?}", pred.dim(), gt.dim()))?;
    let (h, w, _) = pred.dim();
    ensure_shape(valid.dim() == (h, w), || "mask shape differs from flow".into())?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            if valid[[i, j]] {
                let du = f64::from(pred[[i, j, 0]]) - f64::from(gt[[i, j, 0]]);
                let dv = f64::from(pred[[i, j, 1]]) - f64::from(gt[[i, j, 1]]);
                sum += (du * du + dv * dv).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("no valid flow pixels".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub frame_rate: f64,
    pub window_seconds: f64,
    pub flow_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frame_rate: 4.0,
            window_seconds: 5.0,
            flow_sigma: FLOW_SIGMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub version: String,
    pub config_hash: String,
    pub frames: usize,
    pub frame_rate: f64,
    pub window_seconds: f64,
    pub drift_referenced: Option<f64>,
    pub drift_no_reference: f64,
    pub temporal_consistency: f64,
    pub mean_quality_referenced: Option<f64>,
    pub mean_quality_no_reference: f64,
    pub flow_epe: Option<f64>,
    pub depth_mae: Option<f64>,
    pub quality_referenced: Option<Vec<f64>>,
    pub quality_no_reference: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Score a rollout, optionally against ground truth of the same length.
/// Flow error is taken over all frames but the last (whose flow is zero by
/// construction) on pixels where the true flow is below colour saturation.
pub fn eval_rollout(
    frames: &[FrameBundle],
    truth: Option<&[FrameBundle]>,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::Data("rollout is empty".into()));
    }
    if let Some(t) = truth {
        if t.len() != frames.len() {
            return Err(Error::Data(format!(
                "{} rollout frames but {} reference frames",
                frames.len(),
                t.len()
            )));
        }
    }
    let no_ref: Vec<f64> = frames.iter().map(|b| sharpness(b.rgb.view())).collect();
    let referenced = truth
        .map(|t| {
            frames
                .iter()
                .zip(t)
                .map(|(a, b)| frame_quality(a.rgb.view(), Some(b.rgb.view())))
                .collect::<Result<Vec<f64>>>()
        })
        .transpose()?;
    let drift_no_reference = drift_delta(
        &QualitySeries {
            values: no_ref.clone(),
            frame_rate: cfg.frame_rate,
        },
        cfg.window_seconds,
    )?;
    let drift_referenced = referenced
        .as_ref()
        .map(|v| {
            drift_delta(
                &QualitySeries {
                    values: v.clone(),
                    frame_rate: cfg.frame_rate,
                },
                cfg.window_seconds,
            )
        })
        .transpose()?;
    let views: Vec<ArrayView3<f32>> = frames.iter().map(|b| b.rgb.view()).collect();
    let temporal_consistency = temporal_consistency(&views)?;

    let (flow_epe, depth_mae) = match truth {
        Some(t) => {
            let mut epe = 0.0;
            let n = frames.len().saturating_sub(1).max(1);
            for k in 0..n.min(frames.len()) {
                let h = frames[k].height();
                let w = frames[k].width();
                let gt = &t[k].flow;
                let valid = Array2::from_shape_fn((h, w), |(i, j)| {
                    let (u, v) = (f64::from(gt[[i, j, 0]]), f64::from(gt[[i, j, 1]]));
                    flow_opacity_angle(u, v, cfg.flow_sigma, h, w).0 < 1.0 - 1e-9
                });
                epe += self::flow_epe(frames[k].flow.view(), t[k].flow.view(), valid.view())?;
            }
            let mut mae = 0.0;
            for (a, b) in frames.iter().zip(t) {
                ensure_shape(a.depth.dim() == b.depth.dim(), || "depth shapes differ".into())?;
                mae += a
                    .depth
                    .iter()
                    .zip(b.depth.iter())
                    .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
                    .sum::<f64>()
                    / a.depth.len() as f64;
            }
            (Some(epe / n as f64), Some(mae / frames.len() as f64))
        }
        None => (None, None),
    };

    Ok(EvalReport {
        version: REPORT_VERSION.into(),
        config_hash: config_hash.into(),
        frames: frames.len(),
        frame_rate: cfg.frame_rate,
        window_seconds: cfg.window_seconds,
        drift_referenced,
        drift_no_reference,
        temporal_consistency,
        mean_quality_referenced: referenced.as_deref().map(mean),
        mean_quality_no_reference: mean(&no_ref),
        flow_epe,
        depth_mae,
        quality_referenced: referenced,
        quality_no_reference: no_ref,
    })
}

/// Mean of a per-frame quality across frames, used by ablation tables.
pub fn series_mean(values: &[f64]) -> f64 {
    mean(values)
}

/// Stack per-frame rgb from bundles along a new leading axis.
pub fn rgb_stack(frames: &[FrameBundle]) -> ndarray::Array4<f32> {
    let views: Vec<_> = frames.iter().map(|b| b.rgb.view()).collect();
    ndarray::stack(Axis(0), &views).expect("frames share shape")
}
