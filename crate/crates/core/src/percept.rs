//! Perceptual-condition preparation and the latent codec.
//!
//! Depth, optical flow and segmentation are turned into three-channel clips
//! that look like RGB video, then every modality is mapped into a joint
//! latent by an orthonormal space-to-depth transform. The codec is a pure
//! permutation of values, so decode is an exact inverse of encode.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::FrameBundle;

/// Flow normalization constant applied to the frame diagonal.
pub const FLOW_SIGMA: f64 = 0.15;

/// Segmentation colors; index 0 first. Background stays black.
pub const SEG_PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.90],
    [0.95, 0.55, 0.10],
    [0.60, 0.60, 0.60],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Depth,
    Flow,
    Seg,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::Depth, Modality::Flow, Modality::Seg];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Flow => "flow",
            Modality::Seg => "seg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "flow" => Ok(Modality::Flow),
            "seg" => Ok(Modality::Seg),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }

    /// Structural modalities keep their channels clean in long-term memory.
    pub fn is_structural(self) -> bool {
        matches!(self, Modality::Depth | Modality::Seg)
    }
}

/// Parse a comma-separated modality list such as `rgb,depth`.
pub fn parse_modalities(s: &str) -> Result<Vec<Modality>> {
    let mut out = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Modality::parse)
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// An F x 3 x H x W clip of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityClip {
    pub modality: Modality,
    pub data: Array4<f64>,
}

impl ModalityClip {
    pub fn frames(&self) -> usize {
        self.data.len_of(Axis(0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthNormalization {
    pub clip: ModalityClip,
    pub min: f64,
    pub max: f64,
    /// Set when the clip has a single depth value.
    pub degenerate: bool,
}

impl DepthNormalization {
    pub fn to_raw(&self, normalized: f64) -> f64 {
        if self.degenerate {
            self.min
        } else {
            normalized * (self.max - self.min) + self.min
        }
    }
}

/// Per-clip min-max normalization of raw depth (F x H x W), replicated to
/// three identical channels.
pub fn normalize_depth(raw: ArrayView3<f64>) -> Result<DepthNormalization> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite depth value".into()));
    }
    let (f, h, w) = raw.dim();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = raw.is_empty() || max <= min;
    let mut data = Array4::<f64>::zeros((f, 3, h, w));
    for k in 0..f {
        let frame = raw.index_axis(Axis(0), k);
        let norm = if degenerate {
            Array2::from_elem((h, w), 0.5)
        } else {
            frame.mapv(|v| (v - min) / (max - min))
        };
        for c in 0..3 {
            data.slice_mut(s![k, c, .., ..]).assign(&norm);
        }
    }
    Ok(DepthNormalization {
        clip: ModalityClip {
            modality: Modality::Depth,
            data,
        },
        min: if raw.is_empty() { 0.0 } else { min },
        max: if raw.is_empty() { 0.0 } else { max },
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineFit {
    pub aligned: Array2<f64>,
    pub scale: f64,
    pub shift: f64,
    /// Set when the frame has zero variance and the scale is undefined.
    pub degenerate: bool,
}

/// Least-squares fit of `scale * frame + shift` to `reference`.
pub fn fit_scale_shift(frame: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<AffineFit> {
    if frame.dim() != reference.dim() {
        return Err(Error::Shape(format!(
            "frame {:?} vs reference {:?}",
            frame.dim(),
            reference.dim()
        )));
    }
    let n = frame.len() as f64;
    if n == 0.0 {
        return Err(Error::Shape("empty depth frame".into()));
    }
    let mean_d = frame.sum() / n;
    let mean_r = reference.sum() / n;
    let (mut sdd, mut sdr) = (0.0, 0.0);
    for (&d, &r) in frame.iter().zip(reference.iter()) {
        let dc = d - mean_d;
        sdd += dc * dc;
        sdr += dc * (r - mean_r);
    }
    // Rounding in the mean leaves a tiny residual variance on constant frames.
    let degenerate = sdd <= 1e-24 * n * mean_d.abs().max(1.0).powi(2);
    let (scale, shift) = if degenerate {
        (0.0, mean_r)
    } else {
        let a = sdr / sdd;
        (a, mean_r - a * mean_d)
    };
    Ok(AffineFit {
        aligned: frame.mapv(|d| scale * d + shift),
        scale,
        shift,
        degenerate,
    })
}

/// Align every relative-depth frame to `reference` by its own scale and shift.
pub fn align_depth_scale_shift(
    frames: &[Array2<f64>],
    reference: ArrayView2<f64>,
) -> Result<Vec<AffineFit>> {
    frames
        .iter()
        .map(|f| fit_scale_shift(f.view(), reference))
        .collect()
}

/// Fully saturated color wheel; `hue` in [0, 1).
pub fn wheel(hue: f64) -> [f64; 3] {
    let h6 = hue.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    match sector {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// Hue of a color, in [0, 1). Gray maps to 0.
pub fn hue_of(c: [f64; 3]) -> f64 {
    let mx = c[0].max(c[1]).max(c[2]);
    let mn = c[0].min(c[1]).min(c[2]);
    let delta = mx - mn;
    if delta <= 0.0 {
        return 0.0;
    }
    let h = if mx == c[0] {
        ((c[1] - c[2]) / delta).rem_euclid(6.0)
    } else if mx == c[1] {
        (c[2] - c[0]) / delta + 2.0
    } else {
        (c[0] - c[1]) / delta + 4.0
    };
    (h / 6.0).rem_euclid(1.0)
}

/// Opacity and direction of one flow vector.
pub fn flow_opacity_angle(u: f64, v: f64, sigma: f64, height: usize, width: usize) -> (f64, f64) {
    let diag = ((height * height + width * width) as f64).sqrt();
    let m = ((u * u + v * v).sqrt() / (sigma * diag)).min(1.0);
    (m, v.atan2(u))
}

/// Color of one flow vector: the wheel color composited over white.
pub fn flow_color(u: f64, v: f64, sigma: f64, height: usize, width: usize) -> [f64; 3] {
    let (m, alpha) = flow_opacity_angle(u, v, sigma, height, width);
    let w = wheel((alpha + PI) / (2.0 * PI));
    [
        (1.0 - m) + m * w[0],
        (1.0 - m) + m * w[1],
        (1.0 - m) + m * w[2],
    ]
}

/// Encode an (F-1) x 2 x H x W displacement field as an F-frame color clip.
/// A white frame is appended for the final frame, which has no successor.
pub fn flow_to_rgb(flow: ArrayView4<f64>, sigma: f64) -> Result<ModalityClip> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let (n, two, h, w) = flow.dim();
    if two != 2 {
        return Err(Error::Shape(format!("flow needs 2 channels, got {two}")));
    }
    let mut data = Array4::<f64>::ones((n + 1, 3, h, w));
    for k in 0..n {
        for y in 0..h {
            for x in 0..w {
                let c = flow_color(flow[[k, 0, y, x]], flow[[k, 1, y, x]], sigma, h, w);
                for ch in 0..3 {
                    data[[k, ch, y, x]] = c[ch];
                }
            }
        }
    }
    Ok(ModalityClip {
        modality: Modality::Flow,
        data,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowDecoding {
    /// N x 2 x H x W displacement.
    pub flow: Array4<f64>,
    /// N x H x W, true where the magnitude hit the clamp and is unrecoverable.
    pub saturated: Array3<bool>,
}

/// Invert the flow color encoding on every frame of `colors` (N x 3 x H x W).
/// Colors are clamped to [0, 1] first so generated clips decode too.
pub fn decode_flow_colors(colors: ArrayView4<f64>, sigma: f64) -> FlowDecoding {
    let (n, _, h, w) = colors.dim();
    let diag = ((h * h + w * w) as f64).sqrt();
    let mut flow = Array4::<f64>::zeros((n, 2, h, w));
    let mut saturated = Array3::from_elem((n, h, w), false);
    for k in 0..n {
        for y in 0..h {
            for x in 0..w {
                let c = [
                    colors[[k, 0, y, x]].clamp(0.0, 1.0),
                    colors[[k, 1, y, x]].clamp(0.0, 1.0),
                    colors[[k, 2, y, x]].clamp(0.0, 1.0),
                ];
                let mx = c[0].max(c[1]).max(c[2]);
                let mn = c[0].min(c[1]).min(c[2]);
                let m = mx - mn;
                if m <= 0.0 {
                    continue;
                }
                let base = [(c[0] - mn) / m, (c[1] - mn) / m, (c[2] - mn) / m];
                let alpha = 2.0 * PI * hue_of(base) - PI;
                let mag = m * sigma * diag;
                flow[[k, 0, y, x]] = mag * alpha.cos();
                flow[[k, 1, y, x]] = mag * alpha.sin();
                saturated[[k, y, x]] = m >= 1.0 - 1e-9;
            }
        }
    }
    FlowDecoding { flow, saturated }
}

/// Inverse of [`flow_to_rgb`]: drops the padding frame and recovers the
/// displacement wherever the opacity is below one.
pub fn rgb_to_flow(clip: &ModalityClip, sigma: f64) -> FlowDecoding {
    let n = clip.frames().saturating_sub(1);
    decode_flow_colors(clip.data.slice(s![..n, .., .., ..]), sigma)
}

/// Paint F x K x H x W binary masks with the fixed palette. Lower mask
/// indices win on overlap.
pub fn seg_to_rgb(masks: ArrayView4<u8>) -> Result<ModalityClip> {
    let (f, k, h, w) = masks.dim();
    if k > SEG_PALETTE.len() {
        return Err(Error::Config(format!(
            "{k} masks exceed the palette size {}",
            SEG_PALETTE.len()
        )));
    }
    let mut data = Array4::<f64>::zeros((f, 3, h, w));
    for t in 0..f {
        for y in 0..h {
            for x in 0..w {
                if let Some(idx) = (0..k).find(|&i| masks[[t, i, y, x]] != 0) {
                    for c in 0..3 {
                        data[[t, c, y, x]] = SEG_PALETTE[idx][c];
                    }
                }
            }
        }
    }
    Ok(ModalityClip {
        modality: Modality::Seg,
        data,
    })
}

/// Nearest-palette decoding of a segmentation color clip into K masks.
pub fn rgb_to_seg(clip: &ModalityClip, mask_budget: usize) -> Array4<u8> {
    let (f, _, h, w) = clip.data.dim();
    let k = mask_budget.min(SEG_PALETTE.len());
    let mut masks = Array4::<u8>::zeros((f, mask_budget, h, w));
    for t in 0..f {
        for y in 0..h {
            for x in 0..w {
                let px = [
                    clip.data[[t, 0, y, x]],
                    clip.data[[t, 1, y, x]],
                    clip.data[[t, 2, y, x]],
                ];
                let dist = |c: &[f64; 3]| -> f64 { (0..3).map(|i| (px[i] - c[i]).powi(2)).sum() };
                let mut best = (dist(&[0.0; 3]), None);
                for (i, c) in SEG_PALETTE.iter().take(k).enumerate() {
                    let d = dist(c);
                    if d < best.0 {
                        best = (d, Some(i));
                    }
                }
                if let Some(i) = best.1 {
                    masks[[t, i, y, x]] = 1;
                }
            }
        }
    }
    masks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Spatial patch size of the space-to-depth map.
    pub patch: usize,
    pub modalities: Vec<Modality>,
    pub flow_sigma: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            patch: 2,
            modalities: vec![Modality::Rgb, Modality::Depth, Modality::Flow],
            flow_sigma: FLOW_SIGMA,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.modalities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "modalities must be unique and listed in rgb, depth, flow, seg order".into(),
            ));
        }
        if !(self.flow_sigma > 0.0) {
            return Err(Error::Config("flow_sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> ChannelLayout {
        ChannelLayout {
            modalities: self.modalities.clone(),
            c_per_modality: 3 * self.patch * self.patch,
            patch: self.patch,
        }
    }
}

/// Contiguous channel ranges per modality, in fixed modality order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub modalities: Vec<Modality>,
    pub c_per_modality: usize,
    pub patch: usize,
}

impl ChannelLayout {
    pub fn c_total(&self) -> usize {
        self.c_per_modality * self.modalities.len()
    }

    pub fn position(&self, m: Modality) -> Option<usize> {
        self.modalities.iter().position(|&x| x == m)
    }

    pub fn range(&self, m: Modality) -> Option<Range<usize>> {
        self.position(m)
            .map(|i| i * self.c_per_modality..(i + 1) * self.c_per_modality)
    }

    /// Modality index owning latent channel `c`.
    pub fn modality_index_of_channel(&self, c: usize) -> usize {
        c / self.c_per_modality
    }
}

/// Joint latent: f x c_total x h x w.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLatent {
    pub data: Array4<f64>,
    pub layout: ChannelLayout,
}

impl JointLatent {
    pub fn frames(&self) -> usize {
        self.data.len_of(Axis(0))
    }
}

/// Space-to-depth: (F, 3, H, W) -> (F, 3p^2, H/p, W/p).
pub fn patchify(x: ArrayView4<f64>, p: usize) -> Result<Array4<f64>> {
    let (f, c, h, w) = x.dim();
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "{h}x{w} frame is not divisible by patch {p}"
        )));
    }
    let (lh, lw) = (h / p, w / p);
    let mut out = Array4::<f64>::zeros((f, c * p * p, lh, lw));
    for t in 0..f {
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let lc = ch * p * p + dy * p + dx;
                    for i in 0..lh {
                        for j in 0..lw {
                            out[[t, lc, i, j]] = x[[t, ch, i * p + dy, j * p + dx]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(z: ArrayView4<f64>, p: usize) -> Result<Array4<f64>> {
    let (f, lc_total, lh, lw) = z.dim();
    if lc_total % (p * p) != 0 {
        return Err(Error::Format(format!(
            "{lc_total} channels not divisible by patch area {}",
            p * p
        )));
    }
    let c = lc_total / (p * p);
    let mut out = Array4::<f64>::zeros((f, c, lh * p, lw * p));
    for t in 0..f {
        for ch in 0..c {
            for dy in 0..p {
                for dx in 0..p {
                    let lc = ch * p * p + dy * p + dx;
                    for i in 0..lh {
                        for j in 0..lw {
                            out[[t, ch, i * p + dy, j * p + dx]] = z[[t, lc, i, j]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Encode every active modality and concatenate along channels.
pub fn encode(clips: &BTreeMap<Modality, ModalityClip>, cfg: &CodecConfig) -> Result<JointLatent> {
    cfg.validate()?;
    let layout = cfg.layout();
    let mut dims = None;
    let mut parts = Vec::with_capacity(layout.modalities.len());
    for &m in &layout.modalities {
        let clip = clips
            .get(&m)
            .ok_or_else(|| Error::Data(format!("missing {} clip", m.name())))?;
        let d = clip.data.dim();
        if d.1 != 3 {
            return Err(Error::Shape(format!(
                "{} clip has {} channels, expected 3",
                m.name(),
                d.1
            )));
        }
        match dims {
            None => dims = Some((d.0, d.2, d.3)),
            Some(prev) if prev != (d.0, d.2, d.3) => {
                return Err(Error::Shape(format!(
                    "{} clip is {:?}, other modalities are {:?}",
                    m.name(),
                    (d.0, d.2, d.3),
                    prev
                )))
            }
            _ => {}
        }
        parts.push(patchify(clip.data.view(), cfg.patch)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let data = ndarray::concatenate(Axis(1), &views)
        .map_err(|e| Error::Shape(format!("latent concatenation failed: {e}")))?;
    Ok(JointLatent { data, layout })
}

/// Decode one modality's channel range.
pub fn decode_modality(z: &JointLatent, m: Modality) -> Result<ModalityClip> {
    let range = z
        .layout
        .range(m)
        .ok_or_else(|| Error::Format(format!("{} is not in the latent layout", m.name())))?;
    if z.data.len_of(Axis(1)) != z.layout.c_total() {
        return Err(Error::Format(format!(
            "latent has {} channels, layout expects {}",
            z.data.len_of(Axis(1)),
            z.layout.c_total()
        )));
    }
    let data = unpatchify(z.data.slice(s![.., range, .., ..]), z.layout.patch)?;
    Ok(ModalityClip { modality: m, data })
}

/// Exact inverse of [`encode`].
pub fn decode(z: &JointLatent, cfg: &CodecConfig) -> Result<BTreeMap<Modality, ModalityClip>> {
    if z.layout != cfg.layout() {
        return Err(Error::Format(format!(
            "latent layout {:?} does not match codec layout {:?}",
            z.layout,
            cfg.layout()
        )));
    }
    z.layout
        .modalities
        .iter()
        .map(|&m| decode_modality(z, m).map(|c| (m, c)))
        .collect()
}

/// Modality clips prepared from rendered frames, plus the depth range used
/// to normalize them.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub clips: BTreeMap<Modality, ModalityClip>,
    pub depth_min: f64,
    pub depth_max: f64,
}

/// Turn rendered frames into the modality clips named by `cfg`.
pub fn prepare_clips(frames: &[FrameBundle], cfg: &CodecConfig) -> Result<PreparedClip> {
    if frames.is_empty() {
        return Err(Error::Data("cannot prepare an empty clip".into()));
    }
    let (f, h, w) = (frames.len(), frames[0].height(), frames[0].width());
    let mut raw_depth = Array3::<f64>::zeros((f, h, w));
    for (k, b) in frames.iter().enumerate() {
        raw_depth
            .index_axis_mut(Axis(0), k)
            .assign(&b.depth.mapv(f64::from));
    }
    let depth = normalize_depth(raw_depth.view())?;
    let mut clips = BTreeMap::new();
    for &m in &cfg.modalities {
        let clip = match m {
            Modality::Rgb => {
                let mut data = Array4::<f64>::zeros((f, 3, h, w));
                for (k, b) in frames.iter().enumerate() {
                    for c in 0..3 {
                        data.slice_mut(s![k, c, .., ..])
                            .assign(&b.rgb.slice(s![.., .., c]).mapv(f64::from));
                    }
                }
                ModalityClip {
                    modality: Modality::Rgb,
                    data,
                }
            }
            Modality::Depth => depth.clip.clone(),
            Modality::Flow => {
                let mut flow = Array4::<f64>::zeros((f - 1, 2, h, w));
                for (k, b) in frames.iter().take(f - 1).enumerate() {
                    for c in 0..2 {
                        flow.slice_mut(s![k, c, .., ..])
                            .assign(&b.flow.slice(s![.., .., c]).mapv(f64::from));
                    }
                }
                flow_to_rgb(flow.view(), cfg.flow_sigma)?
            }
            Modality::Seg => {
                let k = frames[0].seg.len_of(Axis(0));
                let mut masks = Array4::<u8>::zeros((f, k, h, w));
                for (t, b) in frames.iter().enumerate() {
                    masks.index_axis_mut(Axis(0), t).assign(&b.seg);
                }
                seg_to_rgb(masks.view())?
            }
        };
        clips.insert(m, clip);
    }
    Ok(PreparedClip {
        clips,
        depth_min: depth.min,
        depth_max: depth.max,
    })
}

/// Rendered frames to a joint latent plus the raw depth range used.
pub fn encode_frames(frames: &[FrameBundle], cfg: &CodecConfig) -> Result<(JointLatent, (f64, f64))> {
    cfg.validate()?;
    let prepared = prepare_clips(frames, cfg)?;
    let z = encode(&prepared.clips, cfg)?;
    Ok((z, (prepared.depth_min, prepared.depth_max)))
}

/// Joint latent back to frame bundles.
pub fn decode_frames(
    z: &JointLatent,
    cfg: &CodecConfig,
    depth_range: (f64, f64),
    mask_budget: usize,
) -> Result<Vec<FrameBundle>> {
    let clips = decode(z, cfg)?;
    clips_to_bundles(&clips, depth_range, cfg.flow_sigma, mask_budget)
}

/// Rebuild frame bundles from decoded modality clips. Missing modalities
/// are left at zero; depth is mapped back to raw scene units with the
/// context clip's range.
pub fn clips_to_bundles(
    clips: &BTreeMap<Modality, ModalityClip>,
    depth_range: (f64, f64),
    flow_sigma: f64,
    mask_budget: usize,
) -> Result<Vec<FrameBundle>> {
    let first = clips
        .values()
        .next()
        .ok_or_else(|| Error::Data("no modality clips to decode".into()))?;
    let (f, _, h, w) = first.data.dim();
    let flow = clips
        .get(&Modality::Flow)
        .map(|c| decode_flow_colors(c.data.view(), flow_sigma));
    let seg = clips
        .get(&Modality::Seg)
        .map(|c| rgb_to_seg(c, mask_budget));
    let (dmin, dmax) = depth_range;
    let mut out = Vec::with_capacity(f);
    for k in 0..f {
        let mut b = FrameBundle {
            rgb: Array3::zeros((h, w, 3)),
            depth: Array2::zeros((h, w)),
            flow: Array3::zeros((h, w, 2)),
            seg: Array3::zeros((mask_budget, h, w)),
        };
        if let Some(c) = clips.get(&Modality::Rgb) {
            for ch in 0..3 {
                b.rgb
                    .slice_mut(s![.., .., ch])
                    .assign(&c.data.slice(s![k, ch, .., ..]).mapv(|v| v.clamp(0.0, 1.0) as f32));
            }
        }
        if let Some(c) = clips.get(&Modality::Depth) {
            let mean = c.data.slice(s![k, .., .., ..]).mean_axis(Axis(0)).unwrap();
            b.depth
                .assign(&mean.mapv(|v| (v.clamp(0.0, 1.0) * (dmax - dmin) + dmin) as f32));
        }
        if let Some(d) = &flow {
            for ch in 0..2 {
                b.flow
                    .slice_mut(s![.., .., ch])
                    .assign(&d.flow.slice(s![k, ch, .., ..]).mapv(|v| v as f32));
            }
        }
        if let Some(m) = &seg {
            b.seg.assign(&m.index_axis(Axis(0), k));
        }
        out.push(b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn depth_endpoints() {
        let raw = array![[[0.2, 0.7]]];
        let n = normalize_depth(raw.view()).unwrap();
        assert!(!n.degenerate);
        assert_eq!(n.clip.data[[0, 0, 0, 0]], 0.0);
        assert_eq!(n.clip.data[[0, 0, 0, 1]], 1.0);
        for c in 1..3 {
            assert_eq!(
                n.clip.data.slice(s![0, c, .., ..]),
                n.clip.data.slice(s![0, 0, .., ..])
            );
        }
    }

    #[test]
    fn depth_three_levels() {
        let raw = array![[[1.0, 2.0, 3.0]]];
        let n = normalize_depth(raw.view()).unwrap();
        let row: Vec<f64> = n.clip.data.slice(s![0, 2, 0, ..]).to_vec();
        assert_eq!(row, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_depth_is_degenerate() {
        let raw = Array3::from_elem((2, 3, 3), 0.4);
        let n = normalize_depth(raw.view()).unwrap();
        assert!(n.degenerate);
        assert!(n.clip.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_frame_aligns_to_identity() {
        let r = array![[0.1, 0.5], [0.9, 0.3]];
        let fit = fit_scale_shift(r.view(), r.view()).unwrap();
        assert!((fit.scale - 1.0).abs() < 1e-12);
        assert!(fit.shift.abs() < 1e-12);
    }

    #[test]
    fn affine_frame_inverts() {
        let r = array![[0.1, 0.5, 0.2], [0.9, 0.3, 0.75]];
        let d = r.mapv(|v| 2.0 * v + 3.0);
        let fit = fit_scale_shift(d.view(), r.view()).unwrap();
        assert!((fit.scale - 0.5).abs() < 1e-12);
        assert!((fit.shift + 1.5).abs() < 1e-12);
        for (a, b) in fit.aligned.iter().zip(r.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_variance_frame_is_flagged() {
        let r = array![[0.1, 0.5], [0.9, 0.3]];
        let d = Array2::from_elem((2, 2), 0.1 * 3.0);
        let fit = fit_scale_shift(d.view(), r.view()).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.scale, 0.0);
        assert!((fit.shift - 0.45).abs() < 1e-12);
    }

    #[test]
    fn zero_flow_is_white() {
        let c = flow_color(0.0, 0.0, FLOW_SIGMA, 32, 32);
        assert_eq!(c, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn clamp_boundary() {
        let u = FLOW_SIGMA * 2f64.sqrt() * 32.0;
        let (m, alpha) = flow_opacity_angle(u, 0.0, FLOW_SIGMA, 32, 32);
        assert_eq!(m, 1.0);
        assert_eq!(alpha, 0.0);
    }

    #[test]
    fn opposite_vertical_motion_has_opposite_hue() {
        let (m1, a1) = flow_opacity_angle(0.0, 1.0, FLOW_SIGMA, 32, 32);
        let (m2, a2) = flow_opacity_angle(0.0, -1.0, FLOW_SIGMA, 32, 32);
        assert_eq!(m1, m2);
        let h1 = (a1 + PI) / (2.0 * PI);
        let h2 = (a2 + PI) / (2.0 * PI);
        assert!(((h1 - h2).abs() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flow_padding_frame_is_white() {
        let flow = Array4::from_elem((2, 2, 4, 4), 1.0);
        let clip = flow_to_rgb(flow.view(), FLOW_SIGMA).unwrap();
        assert_eq!(clip.frames(), 3);
        assert!(clip.data.slice(s![2, .., .., ..]).iter().all(|&v| v == 1.0));
        assert!(flow_to_rgb(flow.view(), 0.0).is_err());
    }

    #[test]
    fn white_decodes_to_zero_flow() {
        let colors = Array4::<f64>::ones((1, 3, 2, 2));
        let d = decode_flow_colors(colors.view(), FLOW_SIGMA);
        assert!(d.flow.iter().all(|&v| v == 0.0));
        assert!(d.saturated.iter().all(|&s| !s));
    }

    #[test]
    fn clamped_pixel_is_saturated_with_direction() {
        let (h, w) = (32, 32);
        let u = FLOW_SIGMA * 2f64.sqrt() * 32.0;
        let mut flow = Array4::<f64>::zeros((1, 2, h, w));
        flow[[0, 0, 0, 0]] = u;
        flow[[0, 0, 0, 1]] = 3.0 * u;
        flow[[0, 1, 0, 1]] = 3.0 * u;
        let clip = flow_to_rgb(flow.view(), FLOW_SIGMA).unwrap();
        let d = rgb_to_flow(&clip, FLOW_SIGMA);
        assert!(d.saturated[[0, 0, 0]]);
        assert!(d.saturated[[0, 0, 1]]);
        assert!(!d.saturated[[0, 1, 1]]);
        let alpha0 = d.flow[[0, 1, 0, 0]].atan2(d.flow[[0, 0, 0, 0]]);
        assert!(alpha0.abs() < 1e-6);
        let alpha1 = d.flow[[0, 1, 0, 1]].atan2(d.flow[[0, 0, 0, 1]]);
        assert!((alpha1 - PI / 4.0).abs() < 1e-6);
    }

    #[test]
    fn seg_colors() {
        let empty = Array4::<u8>::zeros((2, 3, 4, 4));
        assert!(seg_to_rgb(empty.view())
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));

        let mut full = Array4::<u8>::zeros((1, 2, 4, 4));
        full.slice_mut(s![0, 0, .., ..]).fill(1);
        let clip = seg_to_rgb(full.view()).unwrap();
        for c in 0..3 {
            assert!(clip
                .data
                .slice(s![0, c, .., ..])
                .iter()
                .all(|&v| v == SEG_PALETTE[0][c]));
        }

        let mut two = Array4::<u8>::zeros((1, 2, 4, 4));
        two[[0, 0, 0, 0]] = 1;
        two[[0, 1, 3, 3]] = 1;
        let clip = seg_to_rgb(two.view()).unwrap();
        let mut colors: Vec<[u64; 3]> = Vec::new();
        for y in 0..4 {
            for x in 0..4 {
                let px = [0, 1, 2].map(|c| clip.data[[0, c, y, x]].to_bits());
                if !colors.contains(&px) {
                    colors.push(px);
                }
            }
        }
        assert_eq!(colors.len(), 3);
        assert_eq!(rgb_to_seg(&clip, 2), two);

        let too_many = Array4::<u8>::zeros((1, 9, 2, 2));
        assert!(matches!(seg_to_rgb(too_many.view()), Err(Error::Config(_))));
    }

    fn three_modalities(f: usize, h: usize, w: usize) -> BTreeMap<Modality, ModalityClip> {
        let mut out = BTreeMap::new();
        for (i, m) in [Modality::Rgb, Modality::Depth, Modality::Flow]
            .into_iter()
            .enumerate()
        {
            let data = Array4::from_shape_fn((f, 3, h, w), |(a, b, c, d)| {
                ((a * 31 + b * 17 + c * 7 + d * 3 + i * 101) % 97) as f64 / 97.0
            });
            out.insert(m, ModalityClip { modality: m, data });
        }
        out
    }

    #[test]
    fn latent_dimensions() {
        let cfg = CodecConfig::default();
        let z = encode(&three_modalities(2, 32, 32), &cfg).unwrap();
        assert_eq!(z.data.dim(), (2, 36, 16, 16));
        assert_eq!(z.layout.range(Modality::Flow), Some(24..36));
    }

    #[test]
    fn unit_patch_is_identity() {
        let cfg = CodecConfig {
            patch: 1,
            ..Default::default()
        };
        let clips = three_modalities(2, 4, 4);
        let z = encode(&clips, &cfg).unwrap();
        assert_eq!(
            z.data.slice(s![.., 3..6, .., ..]),
            clips[&Modality::Depth].data.view()
        );
    }

    #[test]
    fn indivisible_frame_is_rejected() {
        let cfg = CodecConfig::default();
        assert!(matches!(
            encode(&three_modalities(1, 5, 4), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_latent_decodes_to_zero() {
        let cfg = CodecConfig::default();
        let z = JointLatent {
            data: Array4::zeros((2, 36, 4, 4)),
            layout: cfg.layout(),
        };
        let clips = decode(&z, &cfg).unwrap();
        assert!(clips.values().all(|c| c.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn rgb_range_decodes_alone() {
        let cfg = CodecConfig::default();
        let clips = three_modalities(2, 8, 8);
        let z = encode(&clips, &cfg).unwrap();
        assert_eq!(decode_modality(&z, Modality::Rgb).unwrap(), clips[&Modality::Rgb]);
    }

    #[test]
    fn layout_mismatch_is_format_error() {
        let cfg = CodecConfig::default();
        let z = encode(&three_modalities(1, 4, 4), &cfg).unwrap();
        let other = CodecConfig {
            modalities: vec![Modality::Rgb],
            ..Default::default()
        };
        assert!(matches!(decode(&z, &other), Err(Error::Format(_))));
    }
}
