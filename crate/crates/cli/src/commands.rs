//! The five pipeline commands.

use std::fs;
use std::path::{Path, PathBuf};

use horizon_core::horizon::{rollout, StepTrace};
use horizon_core::io::{
    read_checkpoint, read_clip, read_json, write_checkpoint, write_clip, write_json, ClipMeta, Manifest,
    ManifestEntry, FORMAT_VERSION,
};
use horizon_core::metrics::{eval_rollout, EvalReport};
use horizon_core::model::{extend_channels, init_params, ModelDims};
use horizon_core::percept::{decode_frames, encode_frames, ChannelLayout, JointLatent, Modality};
use horizon_core::trainer::{train, ClipLatent, LossPoint, NoiseMode, OptimState, TrainState};
use horizon_core::world::{gen_scene, render_clip, FrameBundle};
use horizon_core::{Error, Result};
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, with_t_m, RunConfig};
use crate::sheet::write_contact_sheet;

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if is_non_empty_dir(out) {
        if !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Seed of clip `i` of a dataset.
pub fn clip_seed(cfg: &RunConfig, i: usize) -> u64 {
    derive_seed(cfg.seed, 1000 + i as u64)
}

/// Render `cfg.dataset.clips` clips and a manifest into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    prepare_out(out, force)?;
    let data_hash = cfg.data_hash();
    let mut clips = Vec::with_capacity(cfg.dataset.clips);
    for i in 0..cfg.dataset.clips {
        let seed = clip_seed(cfg, i);
        let scene = gen_scene(seed, &cfg.world)?;
        let frames = render_clip(&scene, cfg.world.clip_len)?;
        let name = format!("clip_{i:04}");
        write_clip(
            &out.join(&name),
            &frames,
            &ClipMeta {
                format_version: FORMAT_VERSION.into(),
                seed,
                width: cfg.world.width,
                height: cfg.world.height,
                frames: frames.len(),
                mask_budget: cfg.world.mask_budget,
                descriptor: scene.descriptor.clone(),
                world: Some(cfg.world.clone()),
                config_hash: data_hash.clone(),
            },
        )?;
        clips.push(ManifestEntry { path: name, seed });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        config_hash: data_hash,
        clips,
    };
    manifest.write(out)?;
    Ok(manifest)
}

fn load_dataset(data: &Path) -> Result<(Manifest, Vec<(ClipMeta, Vec<FrameBundle>)>)> {
    if !data.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", data.display())));
    }
    let manifest = Manifest::read(data)?;
    if manifest.clips.is_empty() {
        return Err(Error::Data(format!("dataset {} has no clips", data.display())));
    }
    let clips = manifest
        .clip_dirs(data)
        .iter()
        .map(|d| read_clip(d))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}

fn check_world(cfg: &RunConfig, meta: &ClipMeta) -> Result<()> {
    if meta.width != cfg.world.width || meta.height != cfg.world.height || meta.mask_budget != cfg.world.mask_budget {
        return Err(Error::Config(format!(
            "dataset frames are {}x{} with {} masks, config expects {}x{} with {}",
            meta.width, meta.height, meta.mask_budget, cfg.world.width, cfg.world.height, cfg.world.mask_budget
        )));
    }
    Ok(())
}

/// Options of `train` beyond the run config.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Start from this checkpoint, growing its channels to the configured layout.
    pub init_from: Option<PathBuf>,
    pub force: bool,
    pub quiet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub format_version: String,
    pub config_hash: String,
    pub resume_hash: String,
    pub model_hash: String,
    pub data_hash: String,
    pub step: u64,
    pub param_count: usize,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub losses: Vec<LossPoint>,
    pub param_count: usize,
}

fn model_dims(cfg: &RunConfig) -> ModelDims {
    ModelDims::from_layout(&cfg.codec.layout(), cfg.world.descriptor_len())
}

/// Train on the dataset at `data`; writes `checkpoint/`, `loss.json` and
/// `train_meta.json` under `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let (manifest, raw) = load_dataset(data)?;
    let layout = cfg.codec.layout();
    let mut clips = Vec::with_capacity(raw.len());
    for (meta, frames) in &raw {
        check_world(cfg, meta)?;
        let (z, _) = encode_frames(frames, &cfg.codec)?;
        clips.push(ClipLatent {
            latent: z.data,
            descriptor: meta.descriptor.clone(),
        });
    }
    let ckpt_dir = out.join("checkpoint");
    let tcfg = cfg.train_config();

    let (state, mut curve) = if opts.resume && ckpt_dir.join("checkpoint_meta.json").is_file() {
        let prev: TrainMeta = read_json(&out.join("train_meta.json"))?;
        if prev.resume_hash != cfg.resume_hash() {
            return Err(Error::Config(format!(
                "cannot resume {}: it was trained with a different configuration",
                out.display()
            )));
        }
        let (meta, state) = read_checkpoint(&ckpt_dir)?;
        if meta.config_hash != cfg.model_hash() {
            return Err(Error::Config("checkpoint model does not match the config".into()));
        }
        let curve: Vec<LossPoint> = read_json(&out.join("loss.json"))?;
        let curve = curve.into_iter().filter(|p| p.step < state.opt.step).collect();
        (state, curve)
    } else {
        prepare_out(out, opts.force)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
        let params = match &opts.init_from {
            None => init_params(&cfg.model, model_dims(cfg), &mut rng)?,
            Some(dir) => {
                let (meta, base) = read_checkpoint(dir)?;
                if meta.model != cfg.model {
                    return Err(Error::Config(format!(
                        "{} was trained with a different model config",
                        dir.display()
                    )));
                }
                extend_channels(&base.params, &meta.layout, &layout, &mut rng)?
            }
        };
        let opt = OptimState::new(&params);
        (TrainState { params, opt }, Vec::new())
    };

    let model_hash = cfg.model_hash();
    let train_meta = |step: u64, count: usize| TrainMeta {
        format_version: FORMAT_VERSION.into(),
        config_hash: cfg.hash(),
        resume_hash: cfg.resume_hash(),
        model_hash: model_hash.clone(),
        data_hash: manifest.config_hash.clone(),
        step,
        param_count: count,
        config: cfg.clone(),
    };
    let prior = curve.clone();
    let save = |st: &TrainState, losses: &[LossPoint]| -> Result<()> {
        write_checkpoint(&ckpt_dir, st, &layout, &model_hash)?;
        let mut all = prior.clone();
        all.extend_from_slice(losses);
        write_json(&out.join("loss.json"), &all)?;
        write_json(&out.join("train_meta.json"), &train_meta(st.opt.step, st.params.count()))
    };
    let quiet = opts.quiet;
    let (state, losses) = train(state, &tcfg, &layout, &clips, |st, losses| {
        if !quiet {
            if let Some(p) = losses.last() {
                eprintln!("step {:>6}  loss {:.6}", p.step + 1, p.loss);
            }
        }
        save(st, losses)
    })?;
    if losses.is_empty() {
        save(&state, &losses)?;
    }
    curve.extend(losses);
    Ok(TrainSummary {
        checkpoint: ckpt_dir,
        losses: curve,
        param_count: state.params.count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutMeta {
    pub format_version: String,
    pub config_hash: String,
    pub data_hash: String,
    pub model_hash: String,
    pub seed: u64,
    pub context_clip: usize,
    pub context_frames: usize,
    pub n_frames: usize,
    pub depth_range: (f64, f64),
    pub steps: usize,
    pub trace: Vec<StepTrace>,
}

/// Roll out `cfg.rollout.n_frames` frames after the first
/// `context_frames` frames of a dataset clip. Writes `frames/`,
/// `rollout_meta.json` and `contact_sheet.png` under `out`.
pub fn cmd_rollout(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path, force: bool) -> Result<RolloutMeta> {
    cfg.validate()?;
    let (meta, state) = read_checkpoint(checkpoint)?;
    if meta.config_hash != cfg.model_hash() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained for a different model configuration",
            checkpoint.display()
        )));
    }
    let (manifest, clips) = load_dataset(data)?;
    let r = &cfg.rollout;
    let (clip_meta, frames) = clips.get(r.context_clip).ok_or_else(|| {
        Error::Data(format!(
            "context clip {} not in dataset of {} clips",
            r.context_clip,
            clips.len()
        ))
    })?;
    check_world(cfg, clip_meta)?;
    if r.context_frames > frames.len() || r.context_frames == 0 {
        return Err(Error::Data(format!(
            "context of {} frames from a clip of {}",
            r.context_frames,
            frames.len()
        )));
    }
    let layout = cfg.codec.layout();
    let (z, depth_range) = encode_frames(&frames[..r.context_frames], &cfg.codec)?;
    let rcfg = cfg.rollout_config();
    let result = rollout(
        &state.params,
        z.data.slice(s![.., .., .., ..]),
        &clip_meta.descriptor,
        &layout,
        r.n_frames,
        &rcfg,
    )?;
    let emitted = decode_frames(
        &JointLatent {
            data: result.latents,
            layout: layout.clone(),
        },
        &cfg.codec,
        depth_range,
        cfg.world.mask_budget,
    )?;
    prepare_out(out, force)?;
    write_clip(
        &out.join("frames"),
        &emitted,
        &ClipMeta {
            format_version: FORMAT_VERSION.into(),
            seed: clip_meta.seed,
            width: cfg.world.width,
            height: cfg.world.height,
            frames: emitted.len(),
            mask_budget: cfg.world.mask_budget,
            descriptor: clip_meta.descriptor.clone(),
            world: clip_meta.world.clone(),
            config_hash: cfg.hash(),
        },
    )?;
    let meta = RolloutMeta {
        format_version: FORMAT_VERSION.into(),
        config_hash: cfg.hash(),
        data_hash: manifest.config_hash.clone(),
        model_hash: cfg.model_hash(),
        seed: rcfg.seed,
        context_clip: r.context_clip,
        context_frames: r.context_frames,
        n_frames: r.n_frames,
        depth_range,
        steps: result.trace.len(),
        trace: result.trace,
    };
    write_json(&out.join("rollout_meta.json"), &meta)?;
    write_contact_sheet(&out.join("contact_sheet.png"), &emitted, 8)?;
    Ok(meta)
}

/// Ground truth matching a rollout: the context clip's scene rendered past
/// the end of the stored clip.
pub fn reference_frames(data: &Path, meta: &RolloutMeta) -> Result<Vec<FrameBundle>> {
    let manifest = Manifest::read(data)?;
    let dir = manifest
        .clip_dirs(data)
        .get(meta.context_clip)
        .cloned()
        .ok_or_else(|| Error::Data(format!("dataset has no clip {}", meta.context_clip)))?;
    let (clip, _) = read_clip(&dir)?;
    let world = clip
        .world
        .ok_or_else(|| Error::Data(format!("{} has no world config to re-render", dir.display())))?;
    let scene = gen_scene(clip.seed, &world)?;
    let all = render_clip(&scene, meta.context_frames + meta.n_frames)?;
    Ok(all[meta.context_frames..].to_vec())
}

/// Score a rollout directory; with a dataset, against re-rendered ground
/// truth. Writes `report.json` into the rollout directory (or `out`).
pub fn cmd_eval(
    rollout_dir: &Path,
    data: Option<&Path>,
    cfg: &RunConfig,
    allow_mismatch: bool,
    out: Option<&Path>,
) -> Result<EvalReport> {
    if !rollout_dir.is_dir() {
        return Err(Error::Data(format!(
            "rollout directory {} does not exist",
            rollout_dir.display()
        )));
    }
    let meta: RolloutMeta = read_json(&rollout_dir.join("rollout_meta.json"))?;
    let (_, frames) = read_clip(&rollout_dir.join("frames"))?;
    let truth = match data {
        Some(d) => {
            let manifest = Manifest::read(d)?;
            if manifest.config_hash != meta.data_hash && !allow_mismatch {
                return Err(Error::Config(format!(
                    "rollout was made from dataset {} but {} is dataset {} (use --allow-mismatch)",
                    meta.data_hash,
                    d.display(),
                    manifest.config_hash
                )));
            }
            Some(reference_frames(d, &meta)?)
        }
        None => None,
    };
    let report = eval_rollout(&frames, truth.as_deref(), &cfg.metrics, &meta.config_hash)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| rollout_dir.join("report.json"));
    write_json(&path, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Modalities,
    TM,
    NoiseMode,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "modalities" => Ok(Self::Modalities),
            "t_m" | "t-m" => Ok(Self::TM),
            "noise-mode" => Ok(Self::NoiseMode),
            _ => Err(Error::Config(format!(
                "unknown ablation axis '{s}' (modalities, t_m, noise-mode)"
            ))),
        }
    }
}

/// Cells of an ablation axis: label and the config of the cell.
pub fn ablation_grid(cfg: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    match axis {
        AblationAxis::Modalities => {
            let sets: [(&str, &[Modality]); 6] = [
                ("none", &[]),
                ("depth", &[Modality::Depth]),
                ("seg", &[Modality::Seg]),
                ("flow", &[Modality::Flow]),
                ("depth&seg", &[Modality::Depth, Modality::Seg]),
                ("depth&flow", &[Modality::Depth, Modality::Flow]),
            ];
            sets.iter()
                .map(|(label, extra)| {
                    let mut c = cfg.clone();
                    c.codec.modalities = std::iter::once(Modality::Rgb).chain(extra.iter().copied()).collect();
                    (label.to_string(), c)
                })
                .collect()
        }
        AblationAxis::TM => [0.9, 0.7, 0.3]
            .iter()
            .map(|&t| {
                let mut c = cfg.clone();
                c.scheduler.memory = with_t_m(c.scheduler.memory.clone(), t);
                (format!("{t}"), c)
            })
            .collect(),
        AblationAxis::NoiseMode => NoiseMode::ALL
            .iter()
            .map(|&m| {
                let mut c = cfg.clone();
                c.trainer.noise_mode = m;
                (m.name().to_string(), c)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub cell: String,
    pub config_hash: String,
    pub final_loss: Option<f64>,
    pub drift_referenced: Option<f64>,
    pub drift_no_reference: Option<f64>,
    pub temporal_consistency: Option<f64>,
    pub mean_quality_referenced: Option<f64>,
    pub flow_epe: Option<f64>,
    pub depth_mae: Option<f64>,
    pub error: Option<String>,
}

fn run_cell(cfg: &RunConfig, data: &Path, dir: &Path) -> Result<(f64, EvalReport)> {
    let summary = cmd_train(
        cfg,
        data,
        &dir.join("train"),
        &TrainOptions {
            force: true,
            quiet: true,
            ..Default::default()
        },
    )?;
    let roll = dir.join("rollout");
    cmd_rollout(cfg, &summary.checkpoint, data, &roll, true)?;
    let report = cmd_eval(&roll, Some(data), cfg, false, None)?;
    let n = summary.losses.len().min(10).max(1);
    let tail = &summary.losses[summary.losses.len().saturating_sub(n)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().map(|p| p.loss).sum::<f64>() / tail.len() as f64
    };
    Ok((final_loss, report))
}

/// Train, roll out and evaluate every cell of `axis`; failures are recorded
/// in their row and the sweep continues. Writes `ablation.csv` and
/// `ablation.json` under `out`.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, axis: AblationAxis, out: &Path, force: bool) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    prepare_out(out, force)?;
    let axis_name = match axis {
        AblationAxis::Modalities => "modalities",
        AblationAxis::TM => "t_m",
        AblationAxis::NoiseMode => "noise-mode",
    };
    let mut rows = Vec::new();
    for (i, (label, cell)) in ablation_grid(cfg, axis).into_iter().enumerate() {
        let dir = out.join(format!("cell_{i:02}"));
        let result = cell.validate().and_then(|_| run_cell(&cell, data, &dir));
        let row = match result {
            Ok((loss, r)) => AblationRow {
                axis: axis_name.into(),
                cell: label,
                config_hash: cell.hash(),
                final_loss: Some(loss),
                drift_referenced: r.drift_referenced,
                drift_no_reference: Some(r.drift_no_reference),
                temporal_consistency: Some(r.temporal_consistency),
                mean_quality_referenced: r.mean_quality_referenced,
                flow_epe: r.flow_epe,
                depth_mae: r.depth_mae,
                error: None,
            },
            Err(e) => AblationRow {
                axis: axis_name.into(),
                cell: label,
                config_hash: cell.hash(),
                final_loss: None,
                drift_referenced: None,
                drift_no_reference: None,
                temporal_consistency: None,
                mean_quality_referenced: None,
                flow_epe: None,
                depth_mae: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    let p = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    for r in &rows {
        w.serialize(r)
            .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}

/// Layout of a run config's latent.
pub fn layout_of(cfg: &RunConfig) -> ChannelLayout {
    cfg.codec.layout()
}
