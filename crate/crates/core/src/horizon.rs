//! Streaming long-horizon rollout over a staircase of prediction groups.
//!
//! Group progress is kept in integer ticks. One tick is one Euler step of
//! `1 / (G n)`; a group at tick `k` sits at index `1000 k / (G n)`. Groups
//! are created `n` ticks apart, so the staircase spacing is always `1000 / G`
//! index units. Groups with negative ticks have not started yet: they are
//! shown to the model at t = 0 and are not integrated.

use std::collections::VecDeque;

use ndarray::{s, Array2, Array4, ArrayView4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_matching::{euler_step, interpolate_modal, FrameNoise};
use crate::model::{forward, DenoiserParams, ModelInput};
use crate::percept::ChannelLayout;
use crate::scheduler::{BankNoisePolicy, TRAIN_TIMESTEPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub memory: BankNoisePolicy,
    pub group_count: usize,
    pub group_size: usize,
    pub steps_per_group: usize,
    /// Redraw the long-term noise at every step instead of once on migration.
    pub renoise_each_step: bool,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            memory: BankNoisePolicy::default(),
            group_count: 2,
            group_size: 2,
            steps_per_group: 5,
            renoise_each_step: false,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        self.memory.validate()?;
        if self.group_count == 0 || self.group_size == 0 || self.steps_per_group == 0 {
            return Err(Error::Config(
                "group_count, group_size and steps_per_group must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.memory.memory_len() + self.group_count * self.group_size
    }

    /// Ticks a group needs from pure noise to clean data.
    pub fn ticks_per_group(&self) -> i64 {
        (self.group_count * self.steps_per_group) as i64
    }

    pub fn warmup_steps(&self) -> usize {
        (self.group_count - 1) * self.steps_per_group
    }

    /// Frames emitted after `steps` rollout steps.
    pub fn emitted_after(&self, steps: usize) -> usize {
        if steps < self.warmup_steps() {
            0
        } else {
            self.group_size * ((steps - self.warmup_steps()) / self.steps_per_group)
        }
    }
}

/// A long-term memory frame with the draw used to noise it.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTermEntry {
    /// c_total x h x w
    pub clean: Array4<f64>,
    pub noise: Array4<f64>,
    pub stored: Array4<f64>,
    /// Temporal index of the frame in the stream (context frames first).
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    /// Clean frames (each 1 x c_total x h x w), oldest first.
    pub short_term: VecDeque<(usize, Array4<f64>)>,
    pub long_term: Vec<LongTermEntry>,
}

impl MemoryBank {
    /// Noise-level rows of the long-term frames.
    pub fn long_term_levels(policy: &BankNoisePolicy, layout: &ChannelLayout) -> Vec<f64> {
        layout
            .modalities
            .iter()
            .map(|&m| BankNoisePolicy::long_term_level(m, policy.t_m_infer))
            .collect()
    }
}

fn noise_like<R: Rng + ?Sized>(shape: (usize, usize, usize, usize), rng: &mut R) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

fn noise_long_term(clean: &Array4<f64>, noise: &Array4<f64>, levels: &[f64], layout: &ChannelLayout) -> Result<Array4<f64>> {
    let fn_ = FrameNoise(Array2::from_shape_vec((1, levels.len()), levels.to_vec()).expect("row"));
    let mut stored = interpolate_modal(clean.view(), noise.view(), &fn_, layout)?;
    for (mi, &t) in levels.iter().enumerate() {
        if t == 1.0 {
            let r = mi * layout.c_per_modality..(mi + 1) * layout.c_per_modality;
            stored
                .slice_mut(s![.., r.clone(), .., ..])
                .assign(&clean.slice(s![.., r, .., ..]));
        }
    }
    Ok(stored)
}

/// Indices of entries kept when `entries` long-term frames (oldest first)
/// must shrink to `capacity`: odd positions are dropped front to back.
pub fn stride_keep(entries: usize, capacity: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..entries).collect();
    let mut excess = entries.saturating_sub(capacity);
    while excess > 0 {
        let mut next = Vec::with_capacity(keep.len());
        for (pos, &i) in keep.iter().enumerate() {
            if excess > 0 && pos % 2 == 1 {
                excess -= 1;
            } else {
                next.push(i);
            }
        }
        keep = next;
        if capacity == 0 {
            keep.clear();
            break;
        }
    }
    keep
}

/// Push emitted frames (clean) into the bank. Overflowing short-term frames
/// migrate to long-term memory with fresh noise on their rgb/flow channels;
/// long-term overflow is evicted by [`stride_keep`].
pub fn update_memory<R: Rng + ?Sized>(
    bank: &mut MemoryBank,
    emitted: &[(usize, Array4<f64>)],
    policy: &BankNoisePolicy,
    layout: &ChannelLayout,
    rng: &mut R,
) -> Result<()> {
    let levels = MemoryBank::long_term_levels(policy, layout);
    for (idx, frame) in emitted {
        bank.short_term.push_back((*idx, frame.clone()));
    }
    while bank.short_term.len() > policy.short_term_len {
        let (frame_index, clean) = bank.short_term.pop_front().expect("non-empty");
        let noise = noise_like(clean.dim(), rng);
        let stored = noise_long_term(&clean, &noise, &levels, layout)?;
        bank.long_term.push(LongTermEntry {
            clean,
            noise,
            stored,
            frame_index,
        });
    }
    if bank.long_term.len() > policy.long_term_len {
        let keep = stride_keep(bank.long_term.len(), policy.long_term_len);
        let old = std::mem::take(&mut bank.long_term);
        bank.long_term = old
            .into_iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, e)| e)
            .collect();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveGroup {
    /// group_size x c_total x h x w
    pub latent: Array4<f64>,
    pub ticks: i64,
}

/// Schedule snapshot of one step, as presented to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    /// Raw staircase indices, leading group first; negative means not started.
    pub indices: Vec<f64>,
    /// Per-frame, per-modality noise levels of the full window.
    pub levels: Vec<Vec<f64>>,
    pub emitted: usize,
}

#[derive(Debug, Clone)]
pub struct RolloutState {
    pub config: RolloutConfig,
    pub layout: ChannelLayout,
    pub descriptor: Vec<f64>,
    pub bank: MemoryBank,
    pub groups: Vec<ActiveGroup>,
    pub emitted: Vec<Array4<f64>>,
    pub steps: usize,
    /// Stream index of the next frame to be emitted.
    pub next_frame: usize,
    rng: ChaCha8Rng,
}

impl RolloutState {
    pub fn index_of(&self, ticks: i64) -> f64 {
        ticks as f64 * TRAIN_TIMESTEPS / self.config.ticks_per_group() as f64
    }

    pub fn indices(&self) -> Vec<f64> {
        self.groups.iter().map(|g| self.index_of(g.ticks)).collect()
    }

    fn level(&self, ticks: i64) -> f64 {
        ticks.max(0) as f64 / self.config.ticks_per_group() as f64
    }

    fn fresh_group(&mut self, ticks: i64, shape: (usize, usize, usize)) -> ActiveGroup {
        let (c, h, w) = shape;
        ActiveGroup {
            latent: noise_like((self.config.group_size, c, h, w), &mut self.rng),
            ticks,
        }
    }

    /// Assemble the model window and its noise levels.
    pub fn window(&self) -> (Array4<f64>, FrameNoise) {
        let m = self.layout.modalities.len();
        let mut frames: Vec<ArrayView4<f64>> = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (_, f) in &self.bank.short_term {
            frames.push(f.view());
            rows.push(vec![1.0; m]);
        }
        let long = MemoryBank::long_term_levels(&self.config.memory, &self.layout);
        for e in &self.bank.long_term {
            frames.push(e.stored.view());
            rows.push(long.clone());
        }
        for g in &self.groups {
            frames.push(g.latent.view());
            for _ in 0..self.config.group_size {
                rows.push(vec![self.level(g.ticks); m]);
            }
        }
        let latent = ndarray::concatenate(Axis(0), &frames).expect("frames share shape");
        let f = rows.len();
        let levels = Array2::from_shape_fn((f, m), |(i, j)| rows[i][j]);
        (latent, FrameNoise(levels))
    }
}

/// Build the bank from ground-truth context latents (f x c_total x h x w)
/// and start `G` pure-noise groups at ticks `0, -n, -2n, ...`.
pub fn init_rollout(
    context: ArrayView4<f64>,
    descriptor: &[f64],
    layout: &ChannelLayout,
    cfg: &RolloutConfig,
) -> Result<RolloutState> {
    cfg.validate()?;
    let (f, c, h, w) = context.dim();
    let (s_len, l_len) = (cfg.memory.short_term_len, cfg.memory.long_term_len);
    if f < s_len + l_len || f == 0 {
        return Err(Error::Data(format!(
            "context of {f} frames, memory needs at least {}",
            (s_len + l_len).max(1)
        )));
    }
    if c != layout.c_total() {
        return Err(Error::Config(format!(
            "context has {c} channels, layout has {}",
            layout.c_total()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let levels = MemoryBank::long_term_levels(&cfg.memory, layout);
    let mut bank = MemoryBank {
        short_term: VecDeque::new(),
        long_term: Vec::new(),
    };
    for k in f - s_len - l_len..f - s_len {
        let clean = context.slice(s![k..k + 1, .., .., ..]).to_owned();
        let noise = noise_like(clean.dim(), &mut rng);
        let stored = noise_long_term(&clean, &noise, &levels, layout)?;
        bank.long_term.push(LongTermEntry {
            clean,
            noise,
            stored,
            frame_index: k,
        });
    }
    for k in f - s_len..f {
        bank.short_term
            .push_back((k, context.slice(s![k..k + 1, .., .., ..]).to_owned()));
    }
    let mut state = RolloutState {
        config: cfg.clone(),
        layout: layout.clone(),
        descriptor: descriptor.to_vec(),
        bank,
        groups: Vec::new(),
        emitted: Vec::new(),
        steps: 0,
        next_frame: f,
        rng,
    };
    let n = cfg.steps_per_group as i64;
    for k in 0..cfg.group_count as i64 {
        let g = state.fresh_group(-k * n, (c, h, w));
        state.groups.push(g);
    }
    Ok(state)
}

fn check_model(params: &DenoiserParams, state: &RolloutState) -> Result<()> {
    if params.dims.channels != state.layout.c_total() || params.dims.modalities != state.layout.modalities.len() {
        return Err(Error::Config(format!(
            "model expects {} channels over {} modalities, rollout uses {} over {}",
            params.dims.channels,
            params.dims.modalities,
            state.layout.c_total(),
            state.layout.modalities.len()
        )));
    }
    if params.dims.descriptor != state.descriptor.len() {
        return Err(Error::Config(format!(
            "model expects a descriptor of {}, rollout has {}",
            params.dims.descriptor,
            state.descriptor.len()
        )));
    }
    Ok(())
}

/// Advance every group one Euler step; returns the emitted frames (possibly
/// none) and the schedule snapshot the model saw.
pub fn rollout_step(state: &mut RolloutState, params: &DenoiserParams) -> Result<(Vec<Array4<f64>>, StepTrace)> {
    check_model(params, state)?;
    if state.config.renoise_each_step {
        let levels = MemoryBank::long_term_levels(&state.config.memory, &state.layout);
        for i in 0..state.bank.long_term.len() {
            let noise = noise_like(state.bank.long_term[i].clean.dim(), &mut state.rng);
            let e = &mut state.bank.long_term[i];
            e.stored = noise_long_term(&e.clean, &noise, &levels, &state.layout)?;
            e.noise = noise;
        }
    }
    let (latent, noise) = state.window();
    let slots: Vec<usize> = (0..latent.len_of(Axis(0))).collect();
    let trace_levels: Vec<Vec<f64>> = noise.0.rows().into_iter().map(|r| r.to_vec()).collect();
    let indices = state.indices();
    let velocity = forward(
        params,
        &ModelInput {
            latent: latent.view(),
            noise: &noise,
            descriptor: &state.descriptor,
            slots: Some(&slots),
        },
    )?;
    let dt = 1.0 / state.config.ticks_per_group() as f64;
    let first = state.bank.short_term.len() + state.bank.long_term.len();
    let size = state.config.group_size;
    for (gi, g) in state.groups.iter_mut().enumerate() {
        if g.ticks >= 0 {
            let start = first + gi * size;
            let u = velocity.slice(s![start..start + size, .., .., ..]);
            g.latent = euler_step(g.latent.view(), u, dt)?;
        }
        g.ticks += 1;
    }
    state.steps += 1;

    let mut out = Vec::new();
    if state.groups[0].ticks == state.config.ticks_per_group() {
        let done = state.groups.remove(0);
        let frames: Vec<(usize, Array4<f64>)> = (0..size)
            .map(|k| {
                (
                    state.next_frame + k,
                    done.latent.slice(s![k..k + 1, .., .., ..]).to_owned(),
                )
            })
            .collect();
        state.next_frame += size;
        update_memory(
            &mut state.bank,
            &frames,
            &state.config.memory,
            &state.layout,
            &mut state.rng,
        )?;
        for (_, f) in frames {
            state.emitted.push(f.clone());
            out.push(f);
        }
        let last = state.groups.last().map_or(done.ticks, |g| g.ticks);
        let (_, c, h, w) = done.latent.dim();
        let g = state.fresh_group(last - state.config.steps_per_group as i64, (c, h, w));
        state.groups.push(g);
    }
    let trace = StepTrace {
        step: state.steps - 1,
        indices,
        levels: trace_levels,
        emitted: out.len(),
    };
    Ok((out, trace))
}

#[derive(Debug, Clone)]
pub struct RolloutOutput {
    /// n_frames x c_total x h x w
    pub latents: Array4<f64>,
    pub trace: Vec<StepTrace>,
}

/// Step until `n_frames` frames have been emitted (the last group may be cut).
pub fn rollout(
    params: &DenoiserParams,
    context: ArrayView4<f64>,
    descriptor: &[f64],
    layout: &ChannelLayout,
    n_frames: usize,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput> {
    if n_frames == 0 {
        return Err(Error::Precondition("n_frames must be at least 1".into()));
    }
    let mut state = init_rollout(context, descriptor, layout, cfg)?;
    check_model(params, &state)?;
    let mut trace = Vec::new();
    while state.emitted.len() < n_frames {
        let (_, t) = rollout_step(&mut state, params)?;
        trace.push(t);
    }
    let views: Vec<ArrayView4<f64>> = state.emitted[..n_frames].iter().map(|a| a.view()).collect();
    let latents = ndarray::concatenate(Axis(0), &views).expect("frames share shape");
    Ok(RolloutOutput { latents, trace })
}
