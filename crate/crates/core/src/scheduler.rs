//! Group-wise noise indices, the index to noise-level curve, and the noise
//! policy applied to memory frames.
//!
//! Prediction groups share a staircase of noise indices spaced `1000 / G`
//! apart. During training the staircase is sampled at a random offset;
//! during inference it is advanced step by step until the leading group is
//! clean. Noise levels follow the flow-matching convention: t = 1 is clean.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_matching::{FrameNoise, LossMask};
use crate::percept::Modality;

/// Number of discrete training timesteps; noise indices live in [0, 1000].
pub const TRAIN_TIMESTEPS: f64 = 1000.0;

/// Maps a noise index in [0, 1000] to a noise level t in [0, 1].
pub trait NoiseCurve {
    fn t_of_index(&self, index: f64) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearCurve;

impl NoiseCurve for LinearCurve {
    fn t_of_index(&self, index: f64) -> f64 {
        index / TRAIN_TIMESTEPS
    }
}

pub fn index_to_t_with(curve: &dyn NoiseCurve, index: f64) -> Result<f64> {
    if !(0.0..=TRAIN_TIMESTEPS).contains(&index) {
        return Err(Error::Range(format!("noise index {index} outside [0, 1000]")));
    }
    Ok(curve.t_of_index(index))
}

/// Linear curve: `t = index / 1000`.
pub fn index_to_t(index: f64) -> Result<f64> {
    index_to_t_with(&LinearCurve, index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSchedule {
    pub group_count: usize,
    /// Noise index of each group; group 0 is the cleanest.
    pub indices: Vec<f64>,
    /// Set once group 0 has reached index 1000.
    pub complete: bool,
}

impl GroupSchedule {
    /// Staircase `index_k = base - k * 1000 / G`.
    pub fn from_base(group_count: usize, base: f64) -> Result<Self> {
        if group_count == 0 {
            return Err(Error::Config("group count must be at least 1".into()));
        }
        let spacing = TRAIN_TIMESTEPS / group_count as f64;
        Ok(Self {
            group_count,
            indices: (0..group_count).map(|k| base - k as f64 * spacing).collect(),
            complete: false,
        })
    }

    pub fn spacing(&self) -> f64 {
        TRAIN_TIMESTEPS / self.group_count as f64
    }

    pub fn base(&self) -> f64 {
        self.indices[0]
    }

    /// Noise level of every group. Indices below zero belong to groups that
    /// have not entered the pipeline yet and read as pure noise.
    pub fn t_values(&self) -> Vec<f64> {
        self.indices
            .iter()
            .map(|&i| LinearCurve.t_of_index(i.clamp(0.0, TRAIN_TIMESTEPS)))
            .collect()
    }
}

/// Sample `i ~ U(1000 - 1000/G, 1000)` and lay out the staircase below it.
pub fn sample_group_schedule<R: Rng + ?Sized>(group_count: usize, rng: &mut R) -> Result<GroupSchedule> {
    if group_count == 0 {
        return Err(Error::Config("group count must be at least 1".into()));
    }
    let lo = TRAIN_TIMESTEPS - TRAIN_TIMESTEPS / group_count as f64;
    let base = rng.random_range(lo..TRAIN_TIMESTEPS);
    GroupSchedule::from_base(group_count, base)
}

/// Advance every group by `steps` inference steps of `1000 / (G n)` each.
/// Group 0 is marked complete when it reaches index 1000.
pub fn advance_inference_schedule(
    schedule: &GroupSchedule,
    steps: usize,
    steps_per_group: usize,
) -> Result<GroupSchedule> {
    if steps_per_group == 0 {
        return Err(Error::Config("steps_per_group must be at least 1".into()));
    }
    if schedule.complete {
        return Err(Error::State("schedule already complete".into()));
    }
    let inc = TRAIN_TIMESTEPS / (schedule.group_count * steps_per_group) as f64;
    let delta = steps as f64 * inc;
    let mut indices: Vec<f64> = schedule.indices.iter().map(|&i| i + delta).collect();
    let complete = indices[0] >= TRAIN_TIMESTEPS;
    if complete {
        indices[0] = TRAIN_TIMESTEPS;
    }
    Ok(GroupSchedule {
        group_count: schedule.group_count,
        indices,
        complete,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Infer,
}

/// Noise levels for memory frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankNoisePolicy {
    pub short_term_len: usize,
    pub long_term_len: usize,
    /// Range of the long-term rgb/flow level during training.
    pub t_m_train: [f64; 2],
    pub t_m_infer: f64,
}

impl Default for BankNoisePolicy {
    fn default() -> Self {
        Self {
            short_term_len: 2,
            long_term_len: 2,
            t_m_train: [0.7, 0.9],
            t_m_infer: 0.8,
        }
    }
}

impl BankNoisePolicy {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.t_m_train;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::Config(format!(
                "t_m training range [{lo}, {hi}] must satisfy 0 <= min < max <= 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.t_m_infer) {
            return Err(Error::Config(format!(
                "t_m at inference {} outside [0, 1]",
                self.t_m_infer
            )));
        }
        Ok(())
    }

    pub fn memory_len(&self) -> usize {
        self.short_term_len + self.long_term_len
    }

    pub fn sample_t_m<R: Rng + ?Sized>(&self, phase: Phase, rng: &mut R) -> f64 {
        match phase {
            Phase::Train => rng.random_range(self.t_m_train[0]..self.t_m_train[1]),
            Phase::Infer => self.t_m_infer,
        }
    }

    /// Noise level of a long-term memory channel of modality `m`.
    pub fn long_term_level(m: Modality, t_m: f64) -> f64 {
        if m.is_structural() {
            1.0
        } else {
            t_m
        }
    }

    /// Rows for the memory slots: short-term first, then long-term.
    pub fn memory_rows(&self, modalities: &[Modality], t_m: f64) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![1.0; modalities.len()]; self.short_term_len];
        let long: Vec<f64> = modalities
            .iter()
            .map(|&m| Self::long_term_level(m, t_m))
            .collect();
        rows.extend(std::iter::repeat_n(long, self.long_term_len));
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowNoise {
    pub noise: FrameNoise,
    pub mask: LossMask,
    /// Long-term rgb/flow level used for this window.
    pub t_m: f64,
}

/// Assemble a window's noise levels from memory rows and prediction-frame
/// levels (one value per prediction frame, shared by all modalities).
pub fn compose_window(memory_rows: &[Vec<f64>], prediction: &[f64], modalities: usize) -> (FrameNoise, LossMask) {
    let f = memory_rows.len() + prediction.len();
    let mut levels = ndarray::Array2::<f64>::zeros((f, modalities));
    let mut mask = vec![0.0; f];
    for (k, row) in memory_rows.iter().enumerate() {
        for (m, &t) in row.iter().enumerate() {
            levels[[k, m]] = t;
        }
    }
    for (j, &t) in prediction.iter().enumerate() {
        let k = memory_rows.len() + j;
        levels.row_mut(k).fill(t);
        mask[k] = 1.0;
    }
    (FrameNoise(levels), LossMask(mask))
}

/// Noise levels and loss mask for a window laid out as
/// `[short-term | long-term | group 0 | ... | group G-1]`.
pub fn assign_window_noise<R: Rng + ?Sized>(
    schedule: &GroupSchedule,
    policy: &BankNoisePolicy,
    group_size: usize,
    modalities: &[Modality],
    window_len: usize,
    phase: Phase,
    rng: &mut R,
) -> Result<WindowNoise> {
    let expected = policy.memory_len() + schedule.group_count * group_size;
    if window_len != expected {
        return Err(Error::Shape(format!(
            "window of {window_len} frames, policy and schedule need {expected}"
        )));
    }
    let t_m = policy.sample_t_m(phase, rng);
    let prediction: Vec<f64> = schedule
        .t_values()
        .into_iter()
        .flat_map(|t| std::iter::repeat_n(t, group_size))
        .collect();
    let (noise, mask) = compose_window(&policy.memory_rows(modalities, t_m), &prediction, modalities.len());
    Ok(WindowNoise { noise, mask, t_m })
}

/// Describe why `noise` could not have been produced by
/// [`assign_window_noise`] in the inference phase, or `None` if it could.
/// Index spacing is compared with a 1e-9 tolerance in index units.
pub fn infer_support_violation(
    noise: &FrameNoise,
    policy: &BankNoisePolicy,
    group_count: usize,
    group_size: usize,
    modalities: &[Modality],
) -> Option<String> {
    let mem = policy.memory_rows(modalities, policy.t_m_infer);
    let expected = mem.len() + group_count * group_size;
    if noise.frames() != expected || noise.modalities() != modalities.len() {
        return Some(format!(
            "noise is {:?}, expected ({expected}, {})",
            noise.0.dim(),
            modalities.len()
        ));
    }
    for (k, row) in mem.iter().enumerate() {
        for (m, &t) in row.iter().enumerate() {
            if noise.get(k, m) != t {
                return Some(format!(
                    "memory frame {k} modality {m}: t = {} but policy gives {t}",
                    noise.get(k, m)
                ));
            }
        }
    }
    let spacing = TRAIN_TIMESTEPS / group_count as f64;
    let mut base = None;
    for g in 0..group_count {
        let first = mem.len() + g * group_size;
        let t = noise.get(first, 0);
        for k in first..first + group_size {
            for m in 0..modalities.len() {
                if noise.get(k, m) != t {
                    return Some(format!("group {g} is not uniform at frame {k}"));
                }
            }
        }
        let index = t * TRAIN_TIMESTEPS;
        match base {
            None => {
                if !(TRAIN_TIMESTEPS - spacing - 1e-9..TRAIN_TIMESTEPS).contains(&index) {
                    return Some(format!("leading index {index} outside the sampling interval"));
                }
                base = Some(index);
            }
            Some(b) => {
                let want = b - g as f64 * spacing;
                if (index - want).abs() > 1e-9 {
                    return Some(format!("group {g} index {index}, staircase expects {want}"));
                }
            }
        }
    }
    None
}
