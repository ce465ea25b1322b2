//! Training windows, the AdamW loop and resumable training.

use ndarray::{s, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_matching::{FrameNoise, LossMask};
use crate::model::{backward, DenoiserParams, GradientBundle, Sample};
use crate::percept::ChannelLayout;
use crate::scheduler::{assign_window_noise, compose_window, sample_group_schedule, BankNoisePolicy, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    Grouped,
    PerFrameRandom,
    LinearRamp,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 3] = [NoiseMode::Grouped, NoiseMode::PerFrameRandom, NoiseMode::LinearRamp];

    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Grouped => "grouped",
            NoiseMode::PerFrameRandom => "per-frame-random",
            NoiseMode::LinearRamp => "linear-ramp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub memory: BankNoisePolicy,
    pub group_count: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub steps: u64,
    pub batch_size: usize,
    pub uniform_prob: f64,
    pub uniform_overrides_memory: bool,
    pub noise_mode: NoiseMode,
    pub seed: u64,
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            memory: BankNoisePolicy::default(),
            group_count: 2,
            group_size: 2,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            grad_clip: Some(1.0),
            steps: 1000,
            batch_size: 1,
            uniform_prob: 0.1,
            uniform_overrides_memory: false,
            noise_mode: NoiseMode::Grouped,
            seed: 0,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.memory.validate()?;
        if self.group_count == 0 || self.group_size == 0 {
            return Err(Error::Config("group_count and group_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.uniform_prob) {
            return Err(Error::Config(format!(
                "uniform_prob {} outside [0, 1]",
                self.uniform_prob
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate, eps and weight decay must be valid".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.memory.memory_len() + self.group_count * self.group_size
    }
}

/// One encoded clip with its conditioning descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipLatent {
    /// f x c_total x h x w
    pub latent: Array4<f64>,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub sample: Sample,
    pub clip: usize,
    pub offset: usize,
    pub uniform: bool,
    pub t_m: f64,
}

/// Prediction-frame noise levels for the ablation modes.
fn prediction_levels<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<Vec<f64>> {
    let p = cfg.group_count * cfg.group_size;
    Ok(match cfg.noise_mode {
        NoiseMode::Grouped => sample_group_schedule(cfg.group_count, rng)?
            .t_values()
            .into_iter()
            .flat_map(|t| std::iter::repeat_n(t, cfg.group_size))
            .collect(),
        NoiseMode::PerFrameRandom => (0..p).map(|_| rng.random::<f64>()).collect(),
        NoiseMode::LinearRamp => {
            let u = rng.random_range(0.0..1.0 / p as f64);
            (0..p).map(|j| u + (p - 1 - j) as f64 / p as f64).collect()
        }
    })
}

/// Cut a training window from a random clip at a random offset. The window
/// holds `[short-term | long-term | groups]`; the long-term slots take the
/// oldest frames of the contiguous span, the short-term slots the frames
/// right before the first prediction.
pub fn make_window<R: Rng + ?Sized>(
    clips: &[ClipLatent],
    cfg: &TrainConfig,
    layout: &ChannelLayout,
    rng: &mut R,
) -> Result<TrainingWindow> {
    let len = cfg.window_len();
    let usable: Vec<usize> = (0..clips.len())
        .filter(|&i| clips[i].latent.len_of(Axis(0)) >= len)
        .collect();
    if usable.is_empty() {
        return Err(Error::Data(format!(
            "no clip has the {len} frames a training window needs"
        )));
    }
    let clip = usable[rng.random_range(0..usable.len())];
    let src = &clips[clip];
    if src.latent.len_of(Axis(1)) != layout.c_total() {
        return Err(Error::Config(format!(
            "clip has {} channels, layout has {}",
            src.latent.len_of(Axis(1)),
            layout.c_total()
        )));
    }
    let offset = rng.random_range(0..=src.latent.len_of(Axis(0)) - len);
    let (s_len, l_len) = (cfg.memory.short_term_len, cfg.memory.long_term_len);
    let mut order: Vec<usize> = (offset + l_len..offset + l_len + s_len).collect();
    order.extend(offset..offset + l_len);
    order.extend(offset + l_len + s_len..offset + len);
    let x1 = src.latent.select(Axis(0), &order);

    let uniform = rng.random::<f64>() < cfg.uniform_prob;
    let m = layout.modalities.len();
    let (noise, mask, t_m) = if uniform {
        let t = rng.random::<f64>();
        let t_m = cfg.memory.sample_t_m(Phase::Train, rng);
        let pred = vec![t; cfg.group_count * cfg.group_size];
        let rows = if cfg.uniform_overrides_memory {
            vec![vec![t; m]; cfg.memory.memory_len()]
        } else {
            cfg.memory.memory_rows(&layout.modalities, t_m)
        };
        let (n, k) = compose_window(&rows, &pred, m);
        (n, k, t_m)
    } else if cfg.noise_mode == NoiseMode::Grouped {
        let sched = sample_group_schedule(cfg.group_count, rng)?;
        let w = assign_window_noise(
            &sched,
            &cfg.memory,
            cfg.group_size,
            &layout.modalities,
            len,
            Phase::Train,
            rng,
        )?;
        (w.noise, w.mask, w.t_m)
    } else {
        let pred = prediction_levels(cfg, rng)?;
        let t_m = cfg.memory.sample_t_m(Phase::Train, rng);
        let (n, k) = compose_window(&cfg.memory.memory_rows(&layout.modalities, t_m), &pred, m);
        (n, k, t_m)
    };

    let x0 = Array4::from_shape_simple_fn(x1.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
    Ok(TrainingWindow {
        sample: Sample {
            x1,
            x0,
            noise,
            mask,
            descriptor: src.descriptor.clone(),
        },
        clip,
        offset,
        uniform,
        t_m,
    })
}

/// AdamW moments and the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(params: &DenoiserParams) -> Self {
        Self {
            step: 0,
            m: vec![0.0; params.count()],
            v: vec![0.0; params.count()],
        }
    }
}

/// Mean loss and gradient of a batch, reduced in batch order.
pub fn batch_gradient(
    params: &DenoiserParams,
    layout: &ChannelLayout,
    batch: &[TrainingWindow],
) -> Result<(f64, GradientBundle)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut total = params.zero_grad();
    let mut loss = 0.0;
    for w in batch {
        let (l, g) = backward(params, layout, &w.sample)?;
        loss += l;
        total.add_assign(&g);
    }
    let scale = 1.0 / batch.len() as f64;
    total.scale(scale);
    Ok((loss * scale, total))
}

/// Apply one AdamW update with a given gradient.
pub fn adamw_update(params: &mut DenoiserParams, opt: &mut OptimState, grad: &GradientBundle, cfg: &TrainConfig) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.data.len() {
        let g = grad.data[i];
        opt.m[i] = cfg.beta1 * opt.m[i] + (1.0 - cfg.beta1) * g;
        opt.v[i] = cfg.beta2 * opt.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = opt.m[i] / bc1;
        let vhat = opt.v[i] / bc2;
        let theta = params.data[i];
        params.data[i] = theta - cfg.learning_rate * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * theta);
    }
}

/// One optimizer step. Returns the pre-update batch loss; on error params
/// and optimizer state are left untouched.
pub fn train_step(
    params: &mut DenoiserParams,
    opt: &mut OptimState,
    layout: &ChannelLayout,
    batch: &[TrainingWindow],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, mut grad) = batch_gradient(params, layout, batch)?;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss} or gradient")));
    }
    if let Some(clip) = cfg.grad_clip {
        let n = grad.norm();
        if n > clip {
            grad.scale(clip / n);
        }
    }
    adamw_update(params, opt, &grad, cfg);
    Ok(loss)
}

/// RNG for training step `step`: independent of how many steps ran before,
/// so resumed runs replay the same windows.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub opt: OptimState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

/// Run from `state.opt.step` up to `cfg.steps`. `hook` is called after
/// every `eval_every`-th step and after the last one.
pub fn train(
    mut state: TrainState,
    cfg: &TrainConfig,
    layout: &ChannelLayout,
    clips: &[ClipLatent],
    mut hook: impl FnMut(&TrainState, &[LossPoint]) -> Result<()>,
) -> Result<(TrainState, Vec<LossPoint>)> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if state.opt.step > cfg.steps {
        return Err(Error::State(format!(
            "checkpoint is at step {}, past the configured {} steps",
            state.opt.step, cfg.steps
        )));
    }
    let mut curve = Vec::new();
    while state.opt.step < cfg.steps {
        let mut rng = step_rng(cfg.seed, state.opt.step);
        let batch = (0..cfg.batch_size)
            .map(|_| make_window(clips, cfg, layout, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let step = state.opt.step;
        let loss = train_step(&mut state.params, &mut state.opt, layout, &batch, cfg)?;
        curve.push(LossPoint { step, loss });
        let done = state.opt.step == cfg.steps;
        if done || (cfg.eval_every > 0 && state.opt.step % cfg.eval_every == 0) {
            hook(&state, &curve)?;
        }
    }
    Ok((state, curve))
}

/// Loss of the model on a fixed window set, without updating anything.
pub fn evaluate_loss(params: &DenoiserParams, layout: &ChannelLayout, windows: &[TrainingWindow]) -> Result<f64> {
    Ok(batch_gradient(params, layout, windows)?.0)
}

/// Frames of a clip a window with this configuration consumes.
pub fn prediction_span(cfg: &TrainConfig) -> std::ops::Range<usize> {
    cfg.memory.memory_len()..cfg.window_len()
}

/// Noise levels of a window's prediction frames (modality 0).
pub fn prediction_t(noise: &FrameNoise, cfg: &TrainConfig) -> Vec<f64> {
    noise.0.slice(s![prediction_span(cfg), 0]).to_vec()
}

/// Returns true if every prediction frame is masked in and every memory
/// frame masked out.
pub fn mask_is_prediction_only(mask: &LossMask, cfg: &TrainConfig) -> bool {
    mask.0
        .iter()
        .enumerate()
        .all(|(k, &w)| (w == 1.0) == prediction_span(cfg).contains(&k))
}
