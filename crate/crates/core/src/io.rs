//! On-disk formats: clip directories, the dataset manifest, latent caches
//! and checkpoints. Raw arrays are little-endian and row-major; shapes live
//! in JSON sidecars.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DenoiserParams, ModelConfig, ModelDims, TensorSpec};
use crate::percept::{ChannelLayout, JointLatent};
use crate::trainer::{OptimState, TrainState};
use crate::world::{FrameBundle, WorldConfig};

pub const FORMAT_VERSION: &str = "1";

/// Hex SHA-256 of the canonical (sorted-key, compact) JSON of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    let text = serde_json::to_string(&v).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_bytes(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: &Path, count: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(path, count * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f64(path: &Path, count: usize) -> Result<Vec<f64>> {
    let bytes = read_bytes(path, count * 8)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    pub format_version: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub mask_budget: usize,
    pub descriptor: Vec<f64>,
    pub world: Option<WorldConfig>,
    pub config_hash: String,
}

/// Write frames as `rgb.f32` (F H W 3), `depth.f32` (F H W), `flow.f32`
/// (F H W 2), `seg.u8` (F K H W) and `meta.json`.
pub fn write_clip(dir: &Path, frames: &[FrameBundle], meta: &ClipMeta) -> Result<()> {
    if frames.len() != meta.frames {
        return Err(Error::Data(format!(
            "meta says {} frames, got {}",
            meta.frames,
            frames.len()
        )));
    }
    create_dir(dir)?;
    write_f32(&dir.join("rgb.f32"), frames.iter().flat_map(|b| b.rgb.iter().copied()))?;
    write_f32(&dir.join("depth.f32"), frames.iter().flat_map(|b| b.depth.iter().copied()))?;
    write_f32(&dir.join("flow.f32"), frames.iter().flat_map(|b| b.flow.iter().copied()))?;
    let seg: Vec<u8> = frames.iter().flat_map(|b| b.seg.iter().copied()).collect();
    let p = dir.join("seg.u8");
    fs::write(&p, seg).map_err(|e| Error::io(&p, e))?;
    write_json(&dir.join("meta.json"), meta)
}

pub fn read_clip(dir: &Path) -> Result<(ClipMeta, Vec<FrameBundle>)> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("clip directory {} does not exist", dir.display())));
    }
    let meta: ClipMeta = read_json(&dir.join("meta.json"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: format version {}, expected {FORMAT_VERSION}",
            dir.display(),
            meta.format_version
        )));
    }
    let (f, h, w, k) = (meta.frames, meta.height, meta.width, meta.mask_budget);
    let rgb = read_f32(&dir.join("rgb.f32"), f * h * w * 3)?;
    let depth = read_f32(&dir.join("depth.f32"), f * h * w)?;
    let flow = read_f32(&dir.join("flow.f32"), f * h * w * 2)?;
    let seg = read_bytes(&dir.join("seg.u8"), f * k * h * w)?;
    let rgb = Array4::from_shape_vec((f, h, w, 3), rgb).expect("sized");
    let depth = Array3::from_shape_vec((f, h, w), depth).expect("sized");
    let flow = Array4::from_shape_vec((f, h, w, 2), flow).expect("sized");
    let seg = Array4::from_shape_vec((f, k, h, w), seg).expect("sized");
    let frames = (0..f)
        .map(|t| FrameBundle {
            rgb: rgb.index_axis(Axis(0), t).to_owned(),
            depth: depth.index_axis(Axis(0), t).to_owned(),
            flow: flow.index_axis(Axis(0), t).to_owned(),
            seg: seg.index_axis(Axis(0), t).to_owned(),
        })
        .collect();
    Ok((meta, frames))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub config_hash: String,
    pub clips: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dataset: &Path) -> Result<Self> {
        let p = dataset.join("manifest.json");
        if !p.is_file() {
            return Err(Error::Data(format!(
                "no dataset at {} (manifest.json missing)",
                dataset.display()
            )));
        }
        read_json(&p)
    }

    pub fn write(&self, dataset: &Path) -> Result<()> {
        write_json(&dataset.join("manifest.json"), self)
    }

    pub fn clip_dirs(&self, dataset: &Path) -> Vec<PathBuf> {
        self.clips.iter().map(|c| dataset.join(&c.path)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentMeta {
    pub version: String,
    pub layout: ChannelLayout,
    pub dims: [usize; 4],
}

pub fn write_latent(dir: &Path, z: &JointLatent) -> Result<()> {
    create_dir(dir)?;
    write_f32(&dir.join("latent.f32"), z.data.iter().map(|&v| v as f32))?;
    let (f, c, h, w) = z.data.dim();
    write_json(
        &dir.join("latent_meta.json"),
        &LatentMeta {
            version: FORMAT_VERSION.into(),
            layout: z.layout.clone(),
            dims: [f, c, h, w],
        },
    )
}

pub fn read_latent(dir: &Path) -> Result<JointLatent> {
    let meta: LatentMeta = read_json(&dir.join("latent_meta.json"))?;
    let [f, c, h, w] = meta.dims;
    if c != meta.layout.c_total() {
        return Err(Error::Format(format!(
            "latent has {c} channels, layout describes {}",
            meta.layout.c_total()
        )));
    }
    let v = read_f32(&dir.join("latent.f32"), f * c * h * w)?;
    Ok(JointLatent {
        data: Array4::from_shape_vec((f, c, h, w), v.into_iter().map(f64::from).collect()).expect("sized"),
        layout: meta.layout,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: String,
    pub dtype: String,
    pub step: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub dims: ModelDims,
    pub layout: ChannelLayout,
    pub tensors: Vec<TensorSpec>,
    pub param_count: usize,
}

/// `params.f64` (all tensors in declaration order), `optim.f64` (first then
/// second moments) and `checkpoint_meta.json`.
pub fn write_checkpoint(dir: &Path, state: &TrainState, layout: &ChannelLayout, config_hash: &str) -> Result<()> {
    create_dir(dir)?;
    write_f64(&dir.join("params.f64"), &state.params.data)?;
    let mut moments = state.opt.m.clone();
    moments.extend_from_slice(&state.opt.v);
    write_f64(&dir.join("optim.f64"), &moments)?;
    write_json(
        &dir.join("checkpoint_meta.json"),
        &CheckpointMeta {
            format_version: FORMAT_VERSION.into(),
            dtype: "f64".into(),
            step: state.opt.step,
            config_hash: config_hash.into(),
            model: state.params.config.clone(),
            dims: state.params.dims,
            layout: layout.clone(),
            tensors: state.params.specs.clone(),
            param_count: state.params.count(),
        },
    )
}

pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointMeta, TrainState)> {
    let meta_path = dir.join("checkpoint_meta.json");
    if !meta_path.is_file() {
        return Err(Error::Data(format!("no checkpoint at {}", dir.display())));
    }
    let meta: CheckpointMeta = read_json(&meta_path)?;
    if meta.format_version != FORMAT_VERSION || meta.dtype != "f64" {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {} / dtype {}",
            dir.display(),
            meta.format_version,
            meta.dtype
        )));
    }
    let n = meta.param_count;
    let data = read_f64(&dir.join("params.f64"), n)?;
    let params = DenoiserParams::from_flat(&meta.model, meta.dims, data)?;
    if params.specs != meta.tensors {
        return Err(Error::Format("checkpoint tensor list does not match its model config".into()));
    }
    let moments = read_f64(&dir.join("optim.f64"), 2 * n)?;
    let opt = OptimState {
        step: meta.step,
        m: moments[..n].to_vec(),
        v: moments[n..].to_vec(),
    };
    Ok((meta, TrainState { params, opt }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::percept::{CodecConfig, Modality};
    use crate::world::{gen_scene, render_clip};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_ignores_key_order_and_tracks_values() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b":[1,2],"a":1}"#).unwrap();
        let c: serde_json::Value = serde_json::from_str(r#"{"b":[1,2],"a":2}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn clip_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = WorldConfig {
            width: 12,
            height: 10,
            clip_len: 4,
            ..Default::default()
        };
        let scene = gen_scene(3, &cfg).unwrap();
        let frames = render_clip(&scene, 4).unwrap();
        let meta = ClipMeta {
            format_version: FORMAT_VERSION.into(),
            seed: 3,
            width: 12,
            height: 10,
            frames: 4,
            mask_budget: cfg.mask_budget,
            descriptor: scene.descriptor.clone(),
            world: Some(cfg),
            config_hash: "x".into(),
        };
        write_clip(dir.path(), &frames, &meta).unwrap();
        let (m2, f2) = read_clip(dir.path()).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(f2, frames);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.f32");
        write_f32(&p, [1.0f32, 2.0]).unwrap();
        assert!(matches!(read_f32(&p, 3), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let layout = CodecConfig {
            patch: 1,
            modalities: vec![Modality::Rgb],
            ..Default::default()
        }
        .layout();
        let cfg = ModelConfig {
            d_model: 8,
            blocks: 1,
            heads: 2,
            ..Default::default()
        };
        let params = init_params(&cfg, ModelDims::from_layout(&layout, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut opt = OptimState::new(&params);
        opt.step = 7;
        opt.m[3] = 0.25;
        opt.v[5] = 1e-9;
        let state = TrainState { params, opt };
        write_checkpoint(dir.path(), &state, &layout, "h").unwrap();
        let (meta, back) = read_checkpoint(dir.path()).unwrap();
        assert_eq!(meta.step, 7);
        assert_eq!(meta.config_hash, "h");
        assert_eq!(back, state);
    }

    #[test]
    fn latent_cache_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = CodecConfig::default().layout();
        let z = JointLatent {
            data: Array4::from_shape_fn((2, layout.c_total(), 3, 3), |(a, b, c, d)| (a + b + c * d) as f64 * 0.25),
            layout,
        };
        write_latent(dir.path(), &z).unwrap();
        assert_eq!(read_latent(dir.path()).unwrap(), z);
    }
}
