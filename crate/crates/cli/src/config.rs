//! The run configuration shared by every command.

use std::path::{Path, PathBuf};

use horizon_core::horizon::RolloutConfig;
use horizon_core::io::{config_hash, read_json, FORMAT_VERSION};
use horizon_core::metrics::EvalConfig;
use horizon_core::model::ModelConfig;
use horizon_core::percept::CodecConfig;
use horizon_core::scheduler::BankNoisePolicy;
use horizon_core::trainer::{NoiseMode, TrainConfig};
use horizon_core::world::WorldConfig;
use horizon_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable that relative output paths are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "HORIZON_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub clips: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { clips: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub group_count: usize,
    pub group_size: usize,
    pub steps_per_group: usize,
    pub memory: BankNoisePolicy,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            group_count: 2,
            group_size: 2,
            steps_per_group: 5,
            memory: BankNoisePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub steps: u64,
    pub batch_size: usize,
    pub uniform_prob: f64,
    pub uniform_overrides_memory: bool,
    pub noise_mode: NoiseMode,
    pub eval_every: u64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            steps: t.steps,
            batch_size: t.batch_size,
            uniform_prob: t.uniform_prob,
            uniform_overrides_memory: t.uniform_overrides_memory,
            noise_mode: t.noise_mode,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub n_frames: usize,
    /// Ground-truth frames taken from the start of the context clip.
    pub context_frames: usize,
    /// Index of the context clip in the dataset manifest.
    pub context_clip: usize,
    pub renoise_each_step: bool,
}

impl Default for RolloutSection {
    fn default() -> Self {
        Self {
            n_frames: 48,
            context_frames: 4,
            context_clip: 0,
            renoise_each_step: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: String,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub dataset: DatasetSection,
    pub codec: CodecConfig,
    pub scheduler: SchedulerSection,
    pub model: ModelConfig,
    pub trainer: TrainerSection,
    pub rollout: RolloutSection,
    pub metrics: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION.into(),
            seed: 0,
            output_dir: None,
            world: WorldConfig::default(),
            dataset: DatasetSection::default(),
            codec: CodecConfig::default(),
            scheduler: SchedulerSection::default(),
            model: ModelConfig::default(),
            trainer: TrainerSection::default(),
            rollout: RolloutSection::default(),
            metrics: EvalConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct DataKey<'a> {
    seed: u64,
    world: &'a WorldConfig,
    dataset: &'a DatasetSection,
}

#[derive(Serialize)]
struct ModelKey<'a> {
    codec: &'a CodecConfig,
    model: &'a ModelConfig,
    width: usize,
    height: usize,
    descriptor: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("config file {} not found", path.display())));
        }
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "config format version {}, expected {FORMAT_VERSION}",
                self.format_version
            )));
        }
        self.world.validate()?;
        self.codec.validate()?;
        if self.world.width % self.codec.patch != 0 || self.world.height % self.codec.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} does not divide the {}x{} frame",
                self.codec.patch, self.world.width, self.world.height
            )));
        }
        if self.dataset.clips == 0 {
            return Err(Error::Config("dataset.clips must be positive".into()));
        }
        self.train_config().validate()?;
        self.rollout_config().validate()?;
        if self.rollout.n_frames == 0 {
            return Err(Error::Config("rollout.n_frames must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the full configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Hash of everything that determines the synthesized dataset.
    pub fn data_hash(&self) -> String {
        config_hash(&DataKey {
            seed: self.seed,
            world: &self.world,
            dataset: &self.dataset,
        })
    }

    /// Hash of everything that determines the parameter layout.
    pub fn model_hash(&self) -> String {
        config_hash(&ModelKey {
            codec: &self.codec,
            model: &self.model,
            width: self.world.width,
            height: self.world.height,
            descriptor: self.world.descriptor_len(),
        })
    }

    /// Hash of the training run ignoring its length, so a longer run can
    /// resume a shorter one.
    pub fn resume_hash(&self) -> String {
        let mut c = self.clone();
        c.trainer.steps = 0;
        c.trainer.eval_every = 0;
        c.output_dir = None;
        c.rollout = RolloutSection::default();
        c.metrics = EvalConfig::default();
        config_hash(&c)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.trainer;
        TrainConfig {
            memory: self.scheduler.memory.clone(),
            group_count: self.scheduler.group_count,
            group_size: self.scheduler.group_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            steps: t.steps,
            batch_size: t.batch_size,
            uniform_prob: t.uniform_prob,
            uniform_overrides_memory: t.uniform_overrides_memory,
            noise_mode: t.noise_mode,
            seed: derive_seed(self.seed, 1),
            eval_every: t.eval_every,
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            memory: self.scheduler.memory.clone(),
            group_count: self.scheduler.group_count,
            group_size: self.scheduler.group_size,
            steps_per_group: self.scheduler.steps_per_group,
            renoise_each_step: self.rollout.renoise_each_step,
            seed: derive_seed(self.seed, 3),
        }
    }

    /// Resolve an output path: relative paths go under `$HORIZON_OUTPUT_ROOT`
    /// when it is set.
    pub fn resolve_output(path: &Path) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if path.is_relative() => PathBuf::from(root).join(path),
            _ => path.to_path_buf(),
        }
    }
}

/// Independent seed for a pipeline stage or item.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `t_m` sweep cell: inference level and a training band of +-0.1 around it.
pub fn with_t_m(mut memory: BankNoisePolicy, t_m: f64) -> BankNoisePolicy {
    memory.t_m_infer = t_m;
    memory.t_m_train = [(t_m - 0.1).max(0.0), (t_m + 0.1).min(1.0)];
    memory
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_hashes_track_only_their_inputs() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.trainer.steps += 10;
        b.rollout.n_frames += 4;
        assert_eq!(a.data_hash(), b.data_hash());
        assert_eq!(a.model_hash(), b.model_hash());
        assert_eq!(a.resume_hash(), b.resume_hash());
        assert_ne!(a.hash(), b.hash());
        b.trainer.learning_rate *= 2.0;
        assert_ne!(a.resume_hash(), b.resume_hash());
        b.seed += 1;
        assert_ne!(a.data_hash(), b.data_hash());
        b.model.d_model = 32;
        assert_ne!(a.model_hash(), b.model_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"trainer": {"stpes": 3}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Json { .. })));
        std::fs::write(&p, r#"{"trainer": {"steps": 3}}"#).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap().trainer.steps, 3);
    }

    #[test]
    fn indivisible_patch_is_rejected() {
        let mut c = RunConfig::default();
        c.world.width = 30;
        c.codec.patch = 4;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        let s: std::collections::BTreeSet<u64> = (0..100).map(|k| derive_seed(7, k)).collect();
        assert_eq!(s.len(), 100);
        assert_ne!(derive_seed(7, 1), derive_seed(8, 1));
    }

    #[test]
    fn t_m_band_is_clipped_to_the_unit_interval() {
        let m = with_t_m(BankNoisePolicy::default(), 0.95);
        assert_eq!(m.t_m_infer, 0.95);
        assert_eq!(m.t_m_train[1], 1.0);
        assert!((m.t_m_train[0] - 0.85).abs() < 1e-12);
        m.validate().unwrap();
    }
}
