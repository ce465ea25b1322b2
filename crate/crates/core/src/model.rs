//! Spatiotemporal velocity predictor with exact reverse-mode gradients.
//!
//! Each latent frame is cut into `h * w` tokens of `c_total` channels. The
//! tokens are projected to `d_model`, receive a per-frame noise-level
//! embedding, a descriptor embedding and fixed sinusoidal positions, then
//! pass through blocks of spatial attention (within a frame), temporal
//! attention (across every frame of the window at one site) and an MLP.
//! Attention is non-causal: memory and prediction frames see each other.
//!
//! All parameters live in one flat buffer in declaration order, which is
//! also the checkpoint order. Gradients share the same layout.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_matching::{interpolate_modal, joint_loss_grad, velocity_target, FrameNoise, LossMask};
use crate::percept::ChannelLayout;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Sinusoidal features per modality noise level; must be even.
    pub time_features: usize,
    /// Weights are drawn from U(-a, a) with a = gain * sqrt(3 / fan_in).
    pub init_gain: f64,
    pub zero_init_output: bool,
    pub param_budget: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            blocks: 2,
            heads: 4,
            mlp_ratio: 4,
            time_features: 16,
            init_gain: 1.0,
            zero_init_output: false,
            param_budget: 500_000,
        }
    }
}

/// Sizes the parameters depend on besides [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub channels: usize,
    pub modalities: usize,
    pub descriptor: usize,
}

impl ModelDims {
    pub fn from_layout(layout: &ChannelLayout, descriptor: usize) -> Self {
        Self {
            channels: layout.c_total(),
            modalities: layout.modalities.len(),
            descriptor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIdx {
    ln_g: usize,
    ln_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    spatial: AttnIdx,
    temporal: AttnIdx,
    ln_g: usize,
    ln_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Index {
    in_w: usize,
    in_b: usize,
    time_w1: usize,
    time_b1: usize,
    time_w2: usize,
    time_b2: usize,
    cond_w: usize,
    cond_b: usize,
    blocks: Vec<BlockIdx>,
    out_ln_g: usize,
    out_ln_b: usize,
    out_w: usize,
    out_b: usize,
}

fn build_specs(cfg: &ModelConfig, dims: &ModelDims) -> (Vec<TensorSpec>, Index) {
    let d = cfg.d_model;
    let r = cfg.mlp_ratio * d;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        specs.push(TensorSpec { name, shape });
        specs.len() - 1
    };
    let in_w = push("in.w".into(), vec![dims.channels, d]);
    let in_b = push("in.b".into(), vec![d]);
    let time_w1 = push("time.w1".into(), vec![dims.modalities * cfg.time_features, d]);
    let time_b1 = push("time.b1".into(), vec![d]);
    let time_w2 = push("time.w2".into(), vec![d, d]);
    let time_b2 = push("time.b2".into(), vec![d]);
    let cond_w = push("cond.w".into(), vec![dims.descriptor, d]);
    let cond_b = push("cond.b".into(), vec![d]);
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for b in 0..cfg.blocks {
        let mut attn = |kind: &str| AttnIdx {
            ln_g: push(format!("block{b}.{kind}.ln.g"), vec![d]),
            ln_b: push(format!("block{b}.{kind}.ln.b"), vec![d]),
            wq: push(format!("block{b}.{kind}.wq"), vec![d, d]),
            wk: push(format!("block{b}.{kind}.wk"), vec![d, d]),
            wv: push(format!("block{b}.{kind}.wv"), vec![d, d]),
            wo: push(format!("block{b}.{kind}.wo"), vec![d, d]),
            bo: push(format!("block{b}.{kind}.bo"), vec![d]),
        };
        let spatial = attn("spatial");
        let temporal = attn("temporal");
        blocks.push(BlockIdx {
            spatial,
            temporal,
            ln_g: push(format!("block{b}.mlp.ln.g"), vec![d]),
            ln_b: push(format!("block{b}.mlp.ln.b"), vec![d]),
            w1: push(format!("block{b}.mlp.w1"), vec![d, r]),
            b1: push(format!("block{b}.mlp.b1"), vec![r]),
            w2: push(format!("block{b}.mlp.w2"), vec![r, d]),
            b2: push(format!("block{b}.mlp.b2"), vec![d]),
        });
    }
    let out_ln_g = push("out.ln.g".into(), vec![d]);
    let out_ln_b = push("out.ln.b".into(), vec![d]);
    let out_w = push("out.w".into(), vec![d, dims.channels]);
    let out_b = push("out.b".into(), vec![dims.channels]);
    let idx = Index {
        in_w,
        in_b,
        time_w1,
        time_b1,
        time_w2,
        time_b2,
        cond_w,
        cond_b,
        blocks,
        out_ln_g,
        out_ln_b,
        out_w,
        out_b,
    };
    (specs, idx)
}

/// Closed-form parameter count:
/// `2 C D + C + D^2 (1 + B (8 + 2R)) + D (M T + Y + 6 + B (9 + R))`.
pub fn param_count(cfg: &ModelConfig, dims: &ModelDims) -> usize {
    let (c, d, b, r) = (dims.channels, cfg.d_model, cfg.blocks, cfg.mlp_ratio);
    let (m, t, y) = (dims.modalities, cfg.time_features, dims.descriptor);
    2 * c * d + c + d * d * (1 + b * (8 + 2 * r)) + d * (m * t + y + 6 + b * (9 + r))
}

/// Flat gradient buffer, shape-matched to [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub data: Vec<f64>,
}

impl GradientBundle {
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub specs: Vec<TensorSpec>,
    pub offsets: Vec<usize>,
    pub data: Vec<f64>,
    index: Index,
}

impl PartialEq for Index {
    fn eq(&self, _: &Self) -> bool {
        // Derived from config and dims, which are compared separately.
        true
    }
}

fn offsets_of(specs: &[TensorSpec]) -> Vec<usize> {
    let mut off = Vec::with_capacity(specs.len());
    let mut acc = 0;
    for s in specs {
        off.push(acc);
        acc += s.numel();
    }
    off
}

impl DenoiserParams {
    /// All-zero parameters with the layout implied by `cfg` and `dims`.
    pub fn zeros(cfg: &ModelConfig, dims: ModelDims) -> Result<Self> {
        validate(cfg, &dims)?;
        let (specs, index) = build_specs(cfg, &dims);
        let offsets = offsets_of(&specs);
        let total = specs.iter().map(TensorSpec::numel).sum();
        Ok(Self {
            config: cfg.clone(),
            dims,
            specs,
            offsets,
            data: vec![0.0; total],
            index,
        })
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn zero_grad(&self) -> GradientBundle {
        GradientBundle {
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn tensor_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn tensor(&self, i: usize) -> &[f64] {
        &self.data[self.offsets[i]..self.offsets[i] + self.specs[i].numel()]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.specs[i].numel();
        &mut self.data[self.offsets[i]..self.offsets[i] + n]
    }

    fn mat(&self, i: usize) -> ArrayView2<'_, f64> {
        let sh = &self.specs[i].shape;
        ArrayView2::from_shape((sh[0], sh[1]), self.tensor(i)).expect("matrix shape")
    }

    fn vec(&self, i: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.tensor(i))
    }

    /// Build params from a flat buffer, e.g. one read from a checkpoint.
    pub fn from_flat(cfg: &ModelConfig, dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(cfg, dims)?;
        if data.len() != p.data.len() {
            return Err(Error::Format(format!(
                "{} parameter values, layout needs {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }
}

fn validate(cfg: &ModelConfig, dims: &ModelDims) -> Result<()> {
    if cfg.d_model == 0 || cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
        return Err(Error::Config(format!(
            "d_model {} must be a positive multiple of heads {}",
            cfg.d_model, cfg.heads
        )));
    }
    if cfg.time_features == 0 || cfg.time_features % 2 != 0 {
        return Err(Error::Config("time_features must be even and positive".into()));
    }
    if cfg.mlp_ratio == 0 {
        return Err(Error::Config("mlp_ratio must be positive".into()));
    }
    if dims.channels == 0 || dims.modalities == 0 || dims.channels % dims.modalities != 0 {
        return Err(Error::Config(format!(
            "{} channels cannot be split over {} modalities",
            dims.channels, dims.modalities
        )));
    }
    let n = param_count(cfg, dims);
    if n > cfg.param_budget {
        return Err(Error::Config(format!(
            "model has {n} parameters, budget is {}",
            cfg.param_budget
        )));
    }
    Ok(())
}

fn fill_uniform<R: Rng + ?Sized>(buf: &mut [f64], fan_in: usize, gain: f64, rng: &mut R) {
    let a = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    for v in buf.iter_mut() {
        *v = rng.random_range(-a..a);
    }
}

/// Fresh parameters. Matrices are scaled-uniform, biases zero, norm gains one.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, dims: ModelDims, rng: &mut R) -> Result<DenoiserParams> {
    let mut p = DenoiserParams::zeros(cfg, dims)?;
    let out_w = p.index.out_w;
    for i in 0..p.specs.len() {
        let spec = p.specs[i].clone();
        if spec.name.ends_with(".g") {
            p.tensor_mut(i).fill(1.0);
        } else if spec.shape.len() == 2 {
            if i == out_w && cfg.zero_init_output {
                continue;
            }
            fill_uniform(p.tensor_mut(i), spec.shape[0], cfg.init_gain, rng);
        }
    }
    Ok(p)
}

/// Grow a model to a layout with more modalities. Channels of modalities
/// present in `base_layout` are copied, new input rows and output columns
/// are freshly initialized, new noise-level embedding rows start at zero,
/// and every interior tensor is copied.
pub fn extend_channels<R: Rng + ?Sized>(
    base: &DenoiserParams,
    base_layout: &ChannelLayout,
    new_layout: &ChannelLayout,
    rng: &mut R,
) -> Result<DenoiserParams> {
    if base_layout.c_total() != base.dims.channels || base_layout.modalities.len() != base.dims.modalities {
        return Err(Error::Config("base layout does not match base parameters".into()));
    }
    if base_layout.c_per_modality != new_layout.c_per_modality || base_layout.patch != new_layout.patch {
        return Err(Error::Config("layouts use different patch sizes".into()));
    }
    for m in &base_layout.modalities {
        if new_layout.position(*m).is_none() {
            return Err(Error::Config(format!(
                "new layout drops modality {}",
                m.name()
            )));
        }
    }
    let dims = ModelDims {
        channels: new_layout.c_total(),
        modalities: new_layout.modalities.len(),
        descriptor: base.dims.descriptor,
    };
    let cfg = base.config.clone();
    let mut out = DenoiserParams::zeros(&cfg, dims)?;
    let d = cfg.d_model;
    let tf = cfg.time_features;
    let cpm = new_layout.c_per_modality;

    // Interior tensors keep their shapes and are copied verbatim.
    let resized = [base.index.in_w, base.index.time_w1, base.index.out_w, base.index.out_b];
    for i in 0..base.specs.len() {
        if !resized.contains(&i) {
            out.tensor_mut(i).copy_from_slice(base.tensor(i));
        }
    }

    // Input rows: copied for known modalities, random for new ones.
    let ix = out.index.clone();
    {
        let mut fresh = vec![0.0; cpm * d];
        let mut w = Array2::<f64>::zeros((dims.channels, d));
        let bw = base.mat(base.index.in_w);
        for (mi, m) in new_layout.modalities.iter().enumerate() {
            let dst = mi * cpm..(mi + 1) * cpm;
            match base_layout.range(*m) {
                Some(src) => w.slice_mut(s![dst, ..]).assign(&bw.slice(s![src, ..])),
                None => {
                    fill_uniform(&mut fresh, dims.channels, cfg.init_gain, rng);
                    let block = ArrayView2::from_shape((cpm, d), &fresh).unwrap();
                    w.slice_mut(s![dst, ..]).assign(&block);
                }
            }
        }
        out.tensor_mut(ix.in_w).copy_from_slice(w.as_slice().unwrap());
    }

    // Noise-level embedding rows: copied per known modality, zero otherwise.
    {
        let mut w = Array2::<f64>::zeros((dims.modalities * tf, d));
        let bw = base.mat(base.index.time_w1);
        for (mi, m) in new_layout.modalities.iter().enumerate() {
            if let Some(bi) = base_layout.position(*m) {
                w.slice_mut(s![mi * tf..(mi + 1) * tf, ..])
                    .assign(&bw.slice(s![bi * tf..(bi + 1) * tf, ..]));
            }
        }
        out.tensor_mut(ix.time_w1).copy_from_slice(w.as_slice().unwrap());
    }

    // Output columns and biases.
    {
        let mut w = Array2::<f64>::zeros((d, dims.channels));
        let mut b = Array1::<f64>::zeros(dims.channels);
        let bw = base.mat(base.index.out_w);
        let bb = base.vec(base.index.out_b);
        let mut fresh = vec![0.0; d * cpm];
        for (mi, m) in new_layout.modalities.iter().enumerate() {
            let dst = mi * cpm..(mi + 1) * cpm;
            match base_layout.range(*m) {
                Some(src) => {
                    w.slice_mut(s![.., dst.clone()]).assign(&bw.slice(s![.., src.clone()]));
                    b.slice_mut(s![dst]).assign(&bb.slice(s![src]));
                }
                None if !cfg.zero_init_output => {
                    fill_uniform(&mut fresh, d, cfg.init_gain, rng);
                    let block = ArrayView2::from_shape((d, cpm), &fresh).unwrap();
                    w.slice_mut(s![.., dst]).assign(&block);
                }
                None => {}
            }
        }
        out.tensor_mut(ix.out_w).copy_from_slice(w.as_slice().unwrap());
        out.tensor_mut(ix.out_b).copy_from_slice(b.as_slice().unwrap());
    }
    Ok(out)
}

fn sinusoid(value: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
        let a = value * freq;
        out[j] = a.sin();
        out[half + j] = a.cos();
    }
}

/// Fixed sinusoidal encoding of frame slots and of the 2D token grid.
fn positional(slots: &[usize], h: usize, w: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
    let mut frame = Array2::<f64>::zeros((slots.len(), d));
    for (f, &slot) in slots.iter().enumerate() {
        sinusoid(slot as f64, d, frame.row_mut(f).as_slice_mut().unwrap());
    }
    let half = d / 2;
    let mut site = Array2::<f64>::zeros((h * w, d));
    let mut buf = vec![0.0; half.max(2)];
    for i in 0..h {
        for j in 0..w {
            let n = i * w + j;
            sinusoid(i as f64, half - half % 2, &mut buf);
            site.slice_mut(s![n, ..half - half % 2])
                .assign(&ArrayView1::from(&buf[..half - half % 2]));
            sinusoid(j as f64, half - half % 2, &mut buf);
            site.slice_mut(s![n, half..half + half - half % 2])
                .assign(&ArrayView1::from(&buf[..half - half % 2]));
        }
    }
    (frame, site)
}

fn time_features(noise: &FrameNoise, per_modality: usize) -> Array2<f64> {
    let (f, m) = noise.0.dim();
    let mut out = Array2::<f64>::zeros((f, m * per_modality));
    for k in 0..f {
        let row = out.row_mut(k);
        let row = row.into_slice().unwrap();
        for mi in 0..m {
            sinusoid(
                1000.0 * noise.get(k, mi),
                per_modality,
                &mut row[mi * per_modality..(mi + 1) * per_modality],
            );
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (n, d) = x.dim();
    let mut xhat = Array2::<f64>::zeros((n, d));
    let mut rstd = Array1::<f64>::zeros(n);
    let mut y = Array2::<f64>::zeros((n, d));
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[[r, c]] = xh;
            y[[r, c]] = xh * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::<f64>::zeros((n, d));
    for r in 0..n {
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            let dyv = dy[[r, c]];
            let xh = cache.xhat[[r, c]];
            dg[c] += dyv * xh;
            db[c] += dyv;
            let dxh = dyv * g[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh;
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let rs = cache.rstd[r];
        for c in 0..d {
            let dxh = dy[[r, c]] * g[c];
            dx[[r, c]] = rs * (dxh - mean_dxh - cache.xhat[[r, c]] * mean_dxh_xh);
        }
    }
    dx
}

fn add_bias(x: &mut Array2<f64>, b: ArrayView1<f64>) {
    for mut row in x.rows_mut() {
        row += &b;
    }
}

fn accumulate(dst: &mut [f64], src: ArrayView2<f64>) {
    for (a, b) in dst.iter_mut().zip(src.iter()) {
        *a += b;
    }
}

fn accumulate_col_sums(dst: &mut [f64], src: &Array2<f64>) {
    for row in src.rows() {
        for (a, b) in dst.iter_mut().zip(row.iter()) {
            *a += b;
        }
    }
}

/// Token groups that attend among themselves: rows `start + i * stride`.
#[derive(Debug, Clone, Copy)]
struct Groups {
    count: usize,
    len: usize,
    start_step: usize,
    stride: usize,
}

impl Groups {
    fn spatial(frames: usize, sites: usize) -> Self {
        Self {
            count: frames,
            len: sites,
            start_step: sites,
            stride: 1,
        }
    }

    fn temporal(frames: usize, sites: usize) -> Self {
        Self {
            count: sites,
            len: frames,
            start_step: 1,
            stride: sites,
        }
    }

    fn rows(&self, g: usize) -> ndarray::Slice {
        let start = g * self.start_step;
        ndarray::Slice::new(
            start as isize,
            Some((start + (self.len - 1) * self.stride + 1) as isize),
            self.stride as isize,
        )
    }
}

struct AttnCache {
    ln: LnCache,
    u: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
}

fn rows_view<'a>(m: &'a Array2<f64>, rows: ndarray::Slice, cols: std::ops::Range<usize>) -> ArrayView2<'a, f64> {
    m.slice(s![rows, cols])
}

fn rows_view_mut<'a>(
    m: &'a mut Array2<f64>,
    rows: ndarray::Slice,
    cols: std::ops::Range<usize>,
) -> ArrayViewMut2<'a, f64> {
    m.slice_mut(s![rows, cols])
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - mx).exp();
            sum += e;
            e
        });
        row /= sum;
    }
}

fn attention_forward(
    p: &DenoiserParams,
    ix: AttnIdx,
    h: &Array2<f64>,
    groups: Groups,
) -> (Array2<f64>, AttnCache) {
    let heads = p.config.heads;
    let d = p.config.d_model;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (u, ln) = layer_norm(h, p.vec(ix.ln_g), p.vec(ix.ln_b));
    let q = u.dot(&p.mat(ix.wq));
    let k = u.dot(&p.mat(ix.wk));
    let v = u.dot(&p.mat(ix.wv));
    let mut o = Array2::<f64>::zeros(h.raw_dim());
    let mut probs = Vec::with_capacity(groups.count * heads);
    for g in 0..groups.count {
        let rows = groups.rows(g);
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let qg = rows_view(&q, rows, cols.clone());
            let kg = rows_view(&k, rows, cols.clone());
            let vg = rows_view(&v, rows, cols.clone());
            let mut sc = qg.dot(&kg.t()) * scale;
            softmax_rows(&mut sc);
            rows_view_mut(&mut o, rows, cols).assign(&sc.dot(&vg));
            probs.push(sc);
        }
    }
    let mut out = o.dot(&p.mat(ix.wo));
    add_bias(&mut out, p.vec(ix.bo));
    (
        out,
        AttnCache {
            ln,
            u,
            q,
            k,
            v,
            probs,
            o,
        },
    )
}

/// Returns the gradient with respect to the block input `h` (the residual
/// branch only; the caller adds the identity path).
fn attention_backward(
    p: &DenoiserParams,
    ix: AttnIdx,
    cache: &AttnCache,
    dout: &Array2<f64>,
    groups: Groups,
    grad: &mut GradientBundle,
) -> Array2<f64> {
    let heads = p.config.heads;
    let d = p.config.d_model;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    accumulate(grad_slice(p, grad, ix.wo), cache.o.t().dot(dout).view());
    accumulate_col_sums(grad_slice(p, grad, ix.bo), dout);
    let d_o = dout.dot(&p.mat(ix.wo).t());

    let mut dq = Array2::<f64>::zeros(cache.q.raw_dim());
    let mut dk = Array2::<f64>::zeros(cache.k.raw_dim());
    let mut dv = Array2::<f64>::zeros(cache.v.raw_dim());
    for g in 0..groups.count {
        let rows = groups.rows(g);
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let pr = &cache.probs[g * heads + hd];
            let dog = rows_view(&d_o, rows, cols.clone());
            let qg = rows_view(&cache.q, rows, cols.clone());
            let kg = rows_view(&cache.k, rows, cols.clone());
            let vg = rows_view(&cache.v, rows, cols.clone());
            let dp = dog.dot(&vg.t());
            rows_view_mut(&mut dv, rows, cols.clone()).assign(&pr.t().dot(&dog));
            let mut ds = Array2::<f64>::zeros(pr.raw_dim());
            for r in 0..pr.nrows() {
                let dot: f64 = pr.row(r).iter().zip(dp.row(r).iter()).map(|(a, b)| a * b).sum();
                for c in 0..pr.ncols() {
                    ds[[r, c]] = pr[[r, c]] * (dp[[r, c]] - dot) * scale;
                }
            }
            rows_view_mut(&mut dq, rows, cols.clone()).assign(&ds.dot(&kg));
            rows_view_mut(&mut dk, rows, cols).assign(&ds.t().dot(&qg));
        }
    }

    let ut = cache.u.t();
    accumulate(grad_slice(p, grad, ix.wq), ut.dot(&dq).view());
    accumulate(grad_slice(p, grad, ix.wk), ut.dot(&dk).view());
    accumulate(grad_slice(p, grad, ix.wv), ut.dot(&dv).view());
    let du = dq.dot(&p.mat(ix.wq).t()) + dk.dot(&p.mat(ix.wk).t()) + dv.dot(&p.mat(ix.wv).t());
    let (dg, db) = grad_pair(p, grad, ix.ln_g, ix.ln_b);
    layer_norm_backward(&du, &cache.ln, p.vec(ix.ln_g), dg, db)
}

fn grad_slice<'a>(p: &DenoiserParams, grad: &'a mut GradientBundle, i: usize) -> &'a mut [f64] {
    let n = p.specs[i].numel();
    &mut grad.data[p.offsets[i]..p.offsets[i] + n]
}

fn grad_pair<'a>(
    p: &DenoiserParams,
    grad: &'a mut GradientBundle,
    a: usize,
    b: usize,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a < b);
    let (oa, ob) = (p.offsets[a], p.offsets[b]);
    let (na, nb) = (p.specs[a].numel(), p.specs[b].numel());
    let (lo, hi) = grad.data.split_at_mut(ob);
    (&mut lo[oa..oa + na], &mut hi[..nb])
}

struct MlpCache {
    ln: LnCache,
    u: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

struct BlockCache {
    spatial: AttnCache,
    temporal: AttnCache,
    mlp: MlpCache,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    frames: usize,
    sites: usize,
    height: usize,
    width: usize,
    tokens_in: Array2<f64>,
    time_feats: Array2<f64>,
    time_pre: Array2<f64>,
    time_act: Array2<f64>,
    descriptor: Array1<f64>,
    blocks: Vec<BlockCache>,
    out_ln: LnCache,
    out_u: Array2<f64>,
}

/// Model inputs for one window.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    /// f x c_total x h x w noisy latent.
    pub latent: ArrayView4<'a, f64>,
    pub noise: &'a FrameNoise,
    pub descriptor: &'a [f64],
    /// Absolute position slot of each frame; defaults to `0..f`.
    pub slots: Option<&'a [usize]>,
}

fn check_input(p: &DenoiserParams, input: &ModelInput) -> Result<()> {
    let (f, c, h, w) = input.latent.dim();
    if c != p.dims.channels {
        return Err(Error::Config(format!(
            "latent has {c} channels, model expects {}",
            p.dims.channels
        )));
    }
    if input.noise.frames() != f || input.noise.modalities() != p.dims.modalities {
        return Err(Error::Shape(format!(
            "noise levels {:?} for {f} frames and {} modalities",
            input.noise.0.dim(),
            p.dims.modalities
        )));
    }
    if input.descriptor.len() != p.dims.descriptor {
        return Err(Error::Shape(format!(
            "descriptor of length {}, model expects {}",
            input.descriptor.len(),
            p.dims.descriptor
        )));
    }
    if let Some(slots) = input.slots {
        if slots.len() != f {
            return Err(Error::Shape(format!("{} slots for {f} frames", slots.len())));
        }
    }
    if f == 0 || h == 0 || w == 0 {
        return Err(Error::Shape("empty latent".into()));
    }
    if input.latent.iter().any(|v| !v.is_finite())
        || input.noise.0.iter().any(|v| !v.is_finite())
        || input.descriptor.iter().any(|v| !v.is_finite())
    {
        return Err(Error::Numeric("non-finite model input".into()));
    }
    if !input.noise.in_unit_range() {
        return Err(Error::Range("noise level outside [0, 1]".into()));
    }
    Ok(())
}

fn forward_impl(p: &DenoiserParams, input: &ModelInput) -> Result<(Array4<f64>, ForwardCache)> {
    check_input(p, input)?;
    let (f, c, h, w) = input.latent.dim();
    let n = h * w;
    let d = p.config.d_model;
    let ix = &p.index;

    let mut tokens_in = Array2::<f64>::zeros((f * n, c));
    for k in 0..f {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    tokens_in[[k * n + i * w + j, ch]] = input.latent[[k, ch, i, j]];
                }
            }
        }
    }

    let time_feats = time_features(input.noise, p.config.time_features);
    let mut time_pre = time_feats.dot(&p.mat(ix.time_w1));
    add_bias(&mut time_pre, p.vec(ix.time_b1));
    let time_act = time_pre.mapv(silu);
    let mut time_emb = time_act.dot(&p.mat(ix.time_w2));
    add_bias(&mut time_emb, p.vec(ix.time_b2));

    let descriptor = Array1::from(input.descriptor.to_vec());
    let cond = descriptor.dot(&p.mat(ix.cond_w)) + p.vec(ix.cond_b);

    let default_slots: Vec<usize> = (0..f).collect();
    let slots = input.slots.unwrap_or(&default_slots);
    let (pos_frame, pos_site) = positional(slots, h, w, d);

    let mut x = tokens_in.dot(&p.mat(ix.in_w));
    add_bias(&mut x, p.vec(ix.in_b));
    add_bias(&mut x, cond.view());
    for k in 0..f {
        let mut frame = x.slice_mut(s![k * n..(k + 1) * n, ..]);
        frame += &time_emb.row(k);
        frame += &pos_frame.row(k);
        frame += &pos_site;
    }

    let mut blocks = Vec::with_capacity(ix.blocks.len());
    for b in &ix.blocks {
        let (a, spatial) = attention_forward(p, b.spatial, &x, Groups::spatial(f, n));
        x += &a;
        let (a, temporal) = attention_forward(p, b.temporal, &x, Groups::temporal(f, n));
        x += &a;
        let (u, ln) = layer_norm(&x, p.vec(b.ln_g), p.vec(b.ln_b));
        let mut pre = u.dot(&p.mat(b.w1));
        add_bias(&mut pre, p.vec(b.b1));
        let act = pre.mapv(silu);
        let mut m = act.dot(&p.mat(b.w2));
        add_bias(&mut m, p.vec(b.b2));
        x += &m;
        blocks.push(BlockCache {
            spatial,
            temporal,
            mlp: MlpCache { ln, u, pre, act },
        });
    }

    let (out_u, out_ln) = layer_norm(&x, p.vec(ix.out_ln_g), p.vec(ix.out_ln_b));
    let mut y = out_u.dot(&p.mat(ix.out_w));
    add_bias(&mut y, p.vec(ix.out_b));

    let mut out = Array4::<f64>::zeros((f, c, h, w));
    for k in 0..f {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[k, ch, i, j]] = y[[k * n + i * w + j, ch]];
                }
            }
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite model output".into()));
    }
    let cache = ForwardCache {
        frames: f,
        sites: n,
        height: h,
        width: w,
        tokens_in,
        time_feats,
        time_pre,
        time_act,
        descriptor,
        blocks,
        out_ln,
        out_u,
    };
    Ok((out, cache))
}

/// Predicted velocity for every frame and channel; same shape as the input.
pub fn forward(p: &DenoiserParams, input: &ModelInput) -> Result<Array4<f64>> {
    forward_impl(p, input).map(|(out, _)| out)
}

/// Forward pass that keeps activations for [`backward_from_output`].
pub fn forward_cached(p: &DenoiserParams, input: &ModelInput) -> Result<(Array4<f64>, ForwardCache)> {
    forward_impl(p, input)
}

/// Parameter gradients given the gradient of a scalar with respect to the
/// model output.
pub fn backward_from_output(p: &DenoiserParams, cache: &ForwardCache, dout: ArrayView4<f64>) -> GradientBundle {
    let (f, n, h, w) = (cache.frames, cache.sites, cache.height, cache.width);
    let c = p.dims.channels;
    let ix = &p.index;
    let mut grad = p.zero_grad();

    let mut dy = Array2::<f64>::zeros((f * n, c));
    for k in 0..f {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dy[[k * n + i * w + j, ch]] = dout[[k, ch, i, j]];
                }
            }
        }
    }
    accumulate(grad_slice(p, &mut grad, ix.out_w), cache.out_u.t().dot(&dy).view());
    accumulate_col_sums(grad_slice(p, &mut grad, ix.out_b), &dy);
    let du = dy.dot(&p.mat(ix.out_w).t());
    let (dg, db) = grad_pair(p, &mut grad, ix.out_ln_g, ix.out_ln_b);
    let mut dx = layer_norm_backward(&du, &cache.out_ln, p.vec(ix.out_ln_g), dg, db);

    for (b, bc) in ix.blocks.iter().zip(&cache.blocks).rev() {
        // MLP
        let m = &bc.mlp;
        accumulate(grad_slice(p, &mut grad, b.w2), m.act.t().dot(&dx).view());
        accumulate_col_sums(grad_slice(p, &mut grad, b.b2), &dx);
        let dact = dx.dot(&p.mat(b.w2).t());
        let mut dpre = dact;
        dpre.zip_mut_with(&m.pre, |g, &z| *g *= silu_grad(z));
        accumulate(grad_slice(p, &mut grad, b.w1), m.u.t().dot(&dpre).view());
        accumulate_col_sums(grad_slice(p, &mut grad, b.b1), &dpre);
        let du = dpre.dot(&p.mat(b.w1).t());
        let (dg, db) = grad_pair(p, &mut grad, b.ln_g, b.ln_b);
        dx += &layer_norm_backward(&du, &m.ln, p.vec(b.ln_g), dg, db);

        let dt = attention_backward(p, b.temporal, &bc.temporal, &dx, Groups::temporal(f, n), &mut grad);
        dx += &dt;
        let ds = attention_backward(p, b.spatial, &bc.spatial, &dx, Groups::spatial(f, n), &mut grad);
        dx += &ds;
    }

    // Embedding layer.
    accumulate(grad_slice(p, &mut grad, ix.in_w), cache.tokens_in.t().dot(&dx).view());
    let total = dx.sum_axis(Axis(0));
    for (a, b) in grad_slice(p, &mut grad, ix.in_b).iter_mut().zip(total.iter()) {
        *a += b;
    }
    for (a, b) in grad_slice(p, &mut grad, ix.cond_b).iter_mut().zip(total.iter()) {
        *a += b;
    }
    let dcond = cache
        .descriptor
        .view()
        .insert_axis(Axis(1))
        .dot(&total.view().insert_axis(Axis(0)));
    accumulate(grad_slice(p, &mut grad, ix.cond_w), dcond.view());

    let mut dtime = Array2::<f64>::zeros((f, p.config.d_model));
    for k in 0..f {
        dtime
            .row_mut(k)
            .assign(&dx.slice(s![k * n..(k + 1) * n, ..]).sum_axis(Axis(0)));
    }
    accumulate(grad_slice(p, &mut grad, ix.time_w2), cache.time_act.t().dot(&dtime).view());
    accumulate_col_sums(grad_slice(p, &mut grad, ix.time_b2), &dtime);
    let mut dpre = dtime.dot(&p.mat(ix.time_w2).t());
    dpre.zip_mut_with(&cache.time_pre, |g, &z| *g *= silu_grad(z));
    accumulate(grad_slice(p, &mut grad, ix.time_w1), cache.time_feats.t().dot(&dpre).view());
    accumulate_col_sums(grad_slice(p, &mut grad, ix.time_b1), &dpre);

    grad
}

/// One training example: clean latent, noise draw, levels, mask, descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x1: Array4<f64>,
    pub x0: Array4<f64>,
    pub noise: FrameNoise,
    pub mask: LossMask,
    pub descriptor: Vec<f64>,
}

/// Loss of one sample: joint loss of the forward pass on the interpolant.
pub fn sample_loss(p: &DenoiserParams, layout: &ChannelLayout, sample: &Sample) -> Result<f64> {
    let zt = interpolate_modal(sample.x1.view(), sample.x0.view(), &sample.noise, layout)?;
    let target = velocity_target(sample.x1.view(), sample.x0.view())?;
    let pred = forward(
        p,
        &ModelInput {
            latent: zt.view(),
            noise: &sample.noise,
            descriptor: &sample.descriptor,
            slots: None,
        },
    )?;
    crate::flow_matching::joint_loss(pred.view(), target.view(), &sample.mask)
}

/// Loss and exact parameter gradient of one sample.
pub fn backward(p: &DenoiserParams, layout: &ChannelLayout, sample: &Sample) -> Result<(f64, GradientBundle)> {
    let zt = interpolate_modal(sample.x1.view(), sample.x0.view(), &sample.noise, layout)?;
    let target = velocity_target(sample.x1.view(), sample.x0.view())?;
    let (pred, cache) = forward_cached(
        p,
        &ModelInput {
            latent: zt.view(),
            noise: &sample.noise,
            descriptor: &sample.descriptor,
            slots: None,
        },
    )?;
    let (loss, dpred) = joint_loss_grad(pred.view(), target.view(), &sample.mask)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    let grad = backward_from_output(p, &cache, dpred.view());
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percept::{CodecConfig, Modality};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            mlp_ratio: 2,
            time_features: 4,
            ..Default::default()
        }
    }

    fn rgb_layout() -> ChannelLayout {
        CodecConfig {
            patch: 1,
            modalities: vec![Modality::Rgb],
            ..Default::default()
        }
        .layout()
    }

    fn joint_layout() -> ChannelLayout {
        CodecConfig {
            patch: 1,
            modalities: vec![Modality::Rgb, Modality::Depth, Modality::Flow],
            ..Default::default()
        }
        .layout()
    }

    fn random_latent(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn count_matches_layout() {
        let cfg = ModelConfig::default();
        let dims = ModelDims {
            channels: 36,
            modalities: 3,
            descriptor: 56,
        };
        let p = DenoiserParams::zeros(&cfg, dims).unwrap();
        assert_eq!(p.count(), param_count(&cfg, &dims));
        assert_eq!(p.count(), 148_516);
    }

    #[test]
    fn budget_is_enforced() {
        let cfg = ModelConfig {
            param_budget: 1000,
            ..Default::default()
        };
        let dims = ModelDims {
            channels: 36,
            modalities: 3,
            descriptor: 56,
        };
        assert!(matches!(DenoiserParams::zeros(&cfg, dims), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let dims = ModelDims::from_layout(&joint_layout(), 5);
        let a = init_params(&tiny_cfg(), dims, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = init_params(&tiny_cfg(), dims, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_output_projection_gives_zero_velocity() {
        let cfg = ModelConfig {
            zero_init_output: true,
            ..tiny_cfg()
        };
        let dims = ModelDims::from_layout(&joint_layout(), 5);
        let p = init_params(&cfg, dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = Array4::<f64>::zeros((3, 9, 2, 2));
        let noise = FrameNoise(Array2::from_elem((3, 3), 0.5));
        let out = forward(
            &p,
            &ModelInput {
                latent: z.view(),
                noise: &noise,
                descriptor: &[0.0; 5],
                slots: None,
            },
        )
        .unwrap();
        assert_eq!(out.dim(), z.dim());
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nan_input_is_a_numeric_error() {
        let dims = ModelDims::from_layout(&rgb_layout(), 2);
        let p = init_params(&tiny_cfg(), dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut z = Array4::<f64>::zeros((2, 3, 2, 2));
        z[[0, 0, 0, 0]] = f64::NAN;
        let noise = FrameNoise(Array2::from_elem((2, 1), 0.5));
        let r = forward(
            &p,
            &ModelInput {
                latent: z.view(),
                noise: &noise,
                descriptor: &[0.0; 2],
                slots: None,
            },
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn extension_copies_rgb_and_preserves_rgb_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base_dims = ModelDims::from_layout(&rgb_layout(), 4);
        let base = init_params(&tiny_cfg(), base_dims, &mut rng).unwrap();
        let ext = extend_channels(&base, &rgb_layout(), &joint_layout(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let again = extend_channels(&base, &rgb_layout(), &joint_layout(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ext.data, again.data);

        let bw = base.mat(base.index.in_w);
        let ew = ext.mat(ext.index.in_w);
        assert_eq!(ew.slice(s![0..3, ..]), bw);
        assert!(ew.slice(s![3.., ..]).iter().any(|&v| v != 0.0));

        let z_rgb = random_latent(&mut rng, (3, 3, 2, 2));
        let mut z = Array4::<f64>::zeros((3, 9, 2, 2));
        z.slice_mut(s![.., 0..3, .., ..]).assign(&z_rgb);
        let t = [0.2, 0.6, 0.9];
        let base_noise = FrameNoise(Array2::from_shape_fn((3, 1), |(f, _)| t[f]));
        let ext_noise = FrameNoise(Array2::from_shape_fn((3, 3), |(f, _)| t[f]));
        let y = [0.1, -0.2, 0.3, 0.0];
        let vb = forward(
            &base,
            &ModelInput {
                latent: z_rgb.view(),
                noise: &base_noise,
                descriptor: &y,
                slots: None,
            },
        )
        .unwrap();
        let ve = forward(
            &ext,
            &ModelInput {
                latent: z.view(),
                noise: &ext_noise,
                descriptor: &y,
                slots: None,
            },
        )
        .unwrap();
        for (a, b) in vb.iter().zip(ve.slice(s![.., 0..3, .., ..]).iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn incompatible_extension_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = init_params(&tiny_cfg(), ModelDims::from_layout(&joint_layout(), 4), &mut rng).unwrap();
        assert!(matches!(
            extend_channels(&base, &joint_layout(), &rgb_layout(), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn frame_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = ModelDims::from_layout(&joint_layout(), 3);
        let p = init_params(&tiny_cfg(), dims, &mut rng).unwrap();
        let z = random_latent(&mut rng, (4, 9, 2, 3));
        let noise = FrameNoise(Array2::from_shape_fn((4, 3), |(f, m)| 0.1 + 0.2 * f as f64 + 0.01 * m as f64));
        let y = [0.3, -0.1, 0.7];
        let out = forward(
            &p,
            &ModelInput {
                latent: z.view(),
                noise: &noise,
                descriptor: &y,
                slots: None,
            },
        )
        .unwrap();
        let perm = [2usize, 1, 0, 3];
        let zp = z.select(Axis(0), &perm);
        let np = FrameNoise(noise.0.select(Axis(0), &perm));
        let outp = forward(
            &p,
            &ModelInput {
                latent: zp.view(),
                noise: &np,
                descriptor: &y,
                slots: Some(&perm),
            },
        )
        .unwrap();
        let expect = out.select(Axis(0), &perm);
        for (a, b) in outp.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = ModelDims::from_layout(&rgb_layout(), 2);
        let p = init_params(&tiny_cfg(), dims, &mut rng).unwrap();
        let z = random_latent(&mut rng, (3, 3, 2, 2));
        let noise = FrameNoise(Array2::from_elem((3, 1), 0.3));
        let input = ModelInput {
            latent: z.view(),
            noise: &noise,
            descriptor: &[0.5, 0.5],
            slots: None,
        };
        let a = forward(&p, &input).unwrap();
        let b = forward(&p, &input).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_targets_and_zero_output_give_zero_gradient() {
        let cfg = ModelConfig {
            zero_init_output: true,
            ..tiny_cfg()
        };
        let layout = rgb_layout();
        let p = init_params(&cfg, ModelDims::from_layout(&layout, 2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let zeros = Array4::<f64>::zeros((3, 3, 2, 2));
        let sample = Sample {
            x1: zeros.clone(),
            x0: zeros,
            noise: FrameNoise(Array2::from_elem((3, 1), 0.4)),
            mask: LossMask(vec![0.0, 1.0, 1.0]),
            descriptor: vec![0.2, 0.1],
        };
        let (loss, g) = backward(&p, &layout, &sample).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.norm(), 0.0);
    }
}
