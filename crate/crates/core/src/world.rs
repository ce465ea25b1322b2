//! Synthetic 2D world with exact ground truth.
//!
//! Scenes are a handful of flat shapes drifting over a uniform background.
//! Every shape sits at its own depth, moves with an integer velocity and
//! bounces off the frame border, so per-pixel depth, optical flow and
//! segmentation are known exactly for every rendered frame.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Depth assigned to pixels not covered by any object.
pub const BACKGROUND_DEPTH: f64 = 1.0;

/// Descriptor entries per object slot: presence, x, y, vx, vy, size, depth.
pub const DESCRIPTOR_PER_OBJECT: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub width: usize,
    pub height: usize,
    /// Frames in a dataset clip.
    pub clip_len: usize,
    pub n_objects: usize,
    /// Upper bound on object speed in pixels per frame.
    pub max_speed: i32,
    pub min_size: i32,
    pub max_size: i32,
    /// Force every velocity to zero.
    pub static_scene: bool,
    /// Number of segmentation masks carried per frame (K).
    pub mask_budget: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            clip_len: 16,
            n_objects: 3,
            max_speed: 3,
            min_size: 3,
            max_size: 6,
            static_scene: false,
            mask_budget: 8,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!(
                "world must be at least 8x8, got {}x{}",
                self.width, self.height
            )));
        }
        if self.clip_len == 0 {
            return Err(Error::Config("clip_len must be positive".into()));
        }
        if self.n_objects > self.mask_budget {
            return Err(Error::Config(format!(
                "{} objects exceed the mask budget of {}",
                self.n_objects, self.mask_budget
            )));
        }
        if self.min_size < 1 || self.max_size < self.min_size {
            return Err(Error::Config(format!(
                "invalid object size range [{}, {}]",
                self.min_size, self.max_size
            )));
        }
        if self.max_speed < 0 {
            return Err(Error::Config("max_speed must be non-negative".into()));
        }
        Ok(())
    }

    pub fn descriptor_len(&self) -> usize {
        DESCRIPTOR_PER_OBJECT * self.mask_budget
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Half-extent in pixels.
    pub size: i32,
    /// In (0, 1); smaller is nearer.
    pub depth: f64,
    /// Center at frame 0, as (x, y).
    pub start: [i64; 2],
    /// Pixels per frame, as (vx, vy).
    pub velocity: [i64; 2],
}

fn reflect(p: i64, extent: usize) -> i64 {
    let hi = extent as i64 - 1;
    if hi <= 0 {
        return 0;
    }
    let period = 2 * hi;
    let m = p.rem_euclid(period);
    if m <= hi {
        m
    } else {
        period - m
    }
}

impl ObjectSpec {
    /// Center at frame `k`. The path is a triangle wave per axis, so the
    /// center never leaves the frame.
    pub fn position(&self, k: usize, width: usize, height: usize) -> [i64; 2] {
        let k = k as i64;
        [
            reflect(self.start[0] + self.velocity[0] * k, width),
            reflect(self.start[1] + self.velocity[1] * k, height),
        ]
    }

    /// Whether the object covers the pixel at offset (dx, dy) from its center.
    pub fn covers(&self, dx: i64, dy: i64) -> bool {
        let r = self.size as i64;
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Rectangle => dx.abs() <= r && dy.abs() <= (r - 1).max(0),
            ShapeKind::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r,
        }
    }

    pub fn is_moving(&self) -> bool {
        self.velocity != [0, 0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub clip_len: usize,
    pub mask_budget: usize,
    pub objects: Vec<ObjectSpec>,
    pub background: [f64; 3],
    /// Conditioning vector, entries in [-1, 1].
    pub descriptor: Vec<f64>,
}

/// One rendered frame with its exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    /// H x W x 3, values in [0, 1].
    pub rgb: Array3<f32>,
    /// H x W raw scene depth.
    pub depth: Array2<f32>,
    /// H x W x 2 displacement (u, v) to the next frame.
    pub flow: Array3<f32>,
    /// K x H x W binary masks, one per object slot.
    pub seg: Array3<u8>,
}

impl FrameBundle {
    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }
}

fn sample_velocity(rng: &mut ChaCha8Rng, max_speed: i32) -> [i64; 2] {
    let s = max_speed as i64;
    let mut choices = Vec::new();
    for vy in -s..=s {
        for vx in -s..=s {
            if vx * vx + vy * vy <= s * s {
                choices.push([vx, vy]);
            }
        }
    }
    choices[rng.random_range(0..choices.len())]
}

fn to_unit(value: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    (2.0 * (value - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

/// Sample a scene. Deterministic in `(seed, cfg)`.
pub fn gen_scene(seed: u64, cfg: &WorldConfig) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = [
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
    ];

    // Distinct depth bins guarantee a strict z-order.
    const DEPTH_BINS: usize = 16;
    let mut bins: Vec<usize> = (0..DEPTH_BINS).collect();
    let mut objects = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        let pick = rng.random_range(0..bins.len());
        let bin = bins.swap_remove(pick);
        let depth = 0.05 + 0.9 * (bin as f64 + rng.random_range(0.25..0.75)) / DEPTH_BINS as f64;
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Rectangle,
            _ => ShapeKind::Triangle,
        };
        let color = [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ];
        let size = rng.random_range(cfg.min_size..=cfg.max_size);
        let start = [
            rng.random_range(0..cfg.width as i64),
            rng.random_range(0..cfg.height as i64),
        ];
        let velocity = if cfg.static_scene {
            [0, 0]
        } else {
            sample_velocity(&mut rng, cfg.max_speed)
        };
        objects.push(ObjectSpec {
            kind,
            color,
            size,
            depth,
            start,
            velocity,
        });
    }

    let mut descriptor = vec![0.0; cfg.descriptor_len()];
    for (slot, obj) in objects.iter().enumerate() {
        let speed = cfg.max_speed.max(1) as f64;
        let d = &mut descriptor[slot * DESCRIPTOR_PER_OBJECT..(slot + 1) * DESCRIPTOR_PER_OBJECT];
        d[0] = 1.0;
        d[1] = to_unit(obj.start[0] as f64, 0.0, (cfg.width - 1) as f64);
        d[2] = to_unit(obj.start[1] as f64, 0.0, (cfg.height - 1) as f64);
        d[3] = (obj.velocity[0] as f64 / speed).clamp(-1.0, 1.0);
        d[4] = (obj.velocity[1] as f64 / speed).clamp(-1.0, 1.0);
        d[5] = to_unit(obj.size as f64, cfg.min_size as f64, cfg.max_size as f64);
        d[6] = to_unit(obj.depth, 0.0, 1.0);
    }

    Ok(SceneSpec {
        seed,
        width: cfg.width,
        height: cfg.height,
        clip_len: cfg.clip_len,
        mask_budget: cfg.mask_budget,
        objects,
        background,
        descriptor,
    })
}

fn render_at(scene: &SceneSpec, k: usize) -> FrameBundle {
    let (h, w) = (scene.height, scene.width);
    let mut rgb = Array3::<f32>::zeros((h, w, 3));
    let mut depth = Array2::<f32>::from_elem((h, w), BACKGROUND_DEPTH as f32);
    let mut zbuf = Array2::<f64>::from_elem((h, w), BACKGROUND_DEPTH);
    let mut owner: Array2<Option<usize>> = Array2::from_elem((h, w), None);

    for (idx, obj) in scene.objects.iter().enumerate() {
        let [cx, cy] = obj.position(k, w, h);
        let r = obj.size as i64;
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                if !obj.covers(x - cx, y - cy) {
                    continue;
                }
                let (yi, xi) = (y as usize, x as usize);
                if obj.depth < zbuf[[yi, xi]] {
                    zbuf[[yi, xi]] = obj.depth;
                    owner[[yi, xi]] = Some(idx);
                }
            }
        }
    }

    let displacement: Vec<[i64; 2]> = scene
        .objects
        .iter()
        .map(|o| {
            let a = o.position(k, w, h);
            let b = o.position(k + 1, w, h);
            [b[0] - a[0], b[1] - a[1]]
        })
        .collect();

    let mut flow = Array3::<f32>::zeros((h, w, 2));
    let mut seg = Array3::<u8>::zeros((scene.mask_budget, h, w));
    for y in 0..h {
        for x in 0..w {
            match owner[[y, x]] {
                Some(idx) => {
                    let obj = &scene.objects[idx];
                    for c in 0..3 {
                        rgb[[y, x, c]] = obj.color[c] as f32;
                    }
                    depth[[y, x]] = obj.depth as f32;
                    flow[[y, x, 0]] = displacement[idx][0] as f32;
                    flow[[y, x, 1]] = displacement[idx][1] as f32;
                    seg[[idx, y, x]] = 1;
                }
                None => {
                    for c in 0..3 {
                        rgb[[y, x, c]] = scene.background[c] as f32;
                    }
                }
            }
        }
    }

    FrameBundle {
        rgb,
        depth,
        flow,
        seg,
    }
}

/// Render frame `k` of the scene's clip. Flow points to frame `k + 1`.
pub fn render_frame(scene: &SceneSpec, k: usize) -> Result<FrameBundle> {
    if k >= scene.clip_len {
        return Err(Error::Range(format!(
            "frame {k} outside clip of length {}",
            scene.clip_len
        )));
    }
    Ok(render_at(scene, k))
}

/// Render `frames` consecutive frames starting at 0. The horizon may exceed
/// the configured clip length; trajectories are defined for every frame.
/// The last frame has no successor and carries zero flow.
pub fn render_clip(scene: &SceneSpec, frames: usize) -> Result<Vec<FrameBundle>> {
    if frames == 0 {
        return Err(Error::Range("clip must have at least one frame".into()));
    }
    let mut out: Vec<FrameBundle> = (0..frames).map(|k| render_at(scene, k)).collect();
    if let Some(last) = out.last_mut() {
        last.flow.fill(0.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(depth: f64, start: [i64; 2], velocity: [i64; 2], color: [f64; 3]) -> ObjectSpec {
        ObjectSpec {
            kind: ShapeKind::Disk,
            color,
            size: 3,
            depth,
            start,
            velocity,
        }
    }

    fn scene_with(objects: Vec<ObjectSpec>) -> SceneSpec {
        SceneSpec {
            seed: 0,
            width: 32,
            height: 32,
            clip_len: 16,
            mask_budget: 8,
            objects,
            background: [0.1, 0.2, 0.3],
            descriptor: vec![0.0; 56],
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = WorldConfig::default();
        assert_eq!(gen_scene(7, &cfg).unwrap(), gen_scene(7, &cfg).unwrap());
        assert_ne!(gen_scene(7, &cfg).unwrap(), gen_scene(8, &cfg).unwrap());
    }

    #[test]
    fn empty_scene_has_zero_descriptor() {
        let cfg = WorldConfig {
            n_objects: 0,
            ..Default::default()
        };
        let scene = gen_scene(1, &cfg).unwrap();
        assert!(scene.objects.is_empty());
        assert_eq!(scene.descriptor.len(), cfg.descriptor_len());
        assert!(scene.descriptor.iter().all(|&v| v == 0.0));
        let f = render_frame(&scene, 0).unwrap();
        assert!(f.depth.iter().all(|&d| d == 1.0));
        assert!(f.seg.iter().all(|&m| m == 0));
    }

    #[test]
    fn depths_are_distinct_and_descriptor_bounded() {
        for seed in 0..50 {
            let cfg = WorldConfig {
                n_objects: 4,
                ..Default::default()
            };
            let scene = gen_scene(seed, &cfg).unwrap();
            for i in 0..scene.objects.len() {
                for j in i + 1..scene.objects.len() {
                    assert!((scene.objects[i].depth - scene.objects[j].depth).abs() > 0.0);
                }
                let v = scene.objects[i].velocity;
                assert!(v[0] * v[0] + v[1] * v[1] <= 9);
            }
            assert!(scene.descriptor.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let too_small = WorldConfig {
            width: 4,
            ..Default::default()
        };
        assert!(matches!(gen_scene(0, &too_small), Err(Error::Config(_))));
        let too_many = WorldConfig {
            n_objects: 9,
            ..Default::default()
        };
        assert!(matches!(gen_scene(0, &too_many), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_range_frame() {
        let scene = gen_scene(0, &WorldConfig::default()).unwrap();
        assert!(matches!(render_frame(&scene, 16), Err(Error::Range(_))));
        assert!(matches!(render_clip(&scene, 0), Err(Error::Range(_))));
    }

    #[test]
    fn static_scene_has_no_flow() {
        let cfg = WorldConfig {
            static_scene: true,
            n_objects: 4,
            ..Default::default()
        };
        let scene = gen_scene(3, &cfg).unwrap();
        let clip = render_clip(&scene, 16).unwrap();
        for f in &clip {
            assert!(f.flow.iter().all(|&v| v == 0.0));
            assert_eq!(f.rgb, clip[0].rgb);
        }
    }

    #[test]
    fn translating_disk_flow() {
        let scene = scene_with(vec![disk(0.5, [10, 12], [1, 0], [1.0, 0.0, 0.0])]);
        let a = render_frame(&scene, 0).unwrap();
        let b = render_frame(&scene, 1).unwrap();
        let mut checked = 0;
        for y in 0..32 {
            for x in 0..32 {
                let in_a = a.seg[[0, y, x]] == 1;
                let moved_in_b = x + 1 < 32 && b.seg[[0, y, x + 1]] == 1;
                if in_a && moved_in_b {
                    assert_eq!(a.flow[[y, x, 0]], 1.0);
                    assert_eq!(a.flow[[y, x, 1]], 0.0);
                    checked += 1;
                }
                if !in_a {
                    assert_eq!(a.flow[[y, x, 0]], 0.0);
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn nearer_object_wins_overlap() {
        let scene = scene_with(vec![
            disk(0.7, [10, 10], [0, 0], [0.0, 1.0, 0.0]),
            disk(0.2, [12, 10], [0, 0], [0.0, 0.0, 1.0]),
        ]);
        let f = render_frame(&scene, 0).unwrap();
        // (11, 10) is inside both disks.
        assert_eq!(f.depth[[10, 11]], 0.2f32);
        assert_eq!(f.rgb[[10, 11, 2]], 1.0);
        assert_eq!(f.seg[[1, 10, 11]], 1);
        assert_eq!(f.seg[[0, 10, 11]], 0);
    }

    #[test]
    fn single_frame_clip_has_zero_flow() {
        let scene = scene_with(vec![disk(0.5, [10, 12], [2, 1], [1.0, 0.0, 0.0])]);
        let clip = render_clip(&scene, 1).unwrap();
        assert_eq!(clip.len(), 1);
        assert!(clip[0].flow.iter().all(|&v| v == 0.0));
    }

    fn centroid(mask: ndarray::ArrayView2<u8>) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for ((y, x), &m) in mask.indexed_iter() {
            if m == 1 {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn constant_velocity_centroids_are_arithmetic() {
        // Kept clear of the border so the disk is never clipped or reflected.
        let scene = scene_with(vec![disk(0.5, [4, 20], [1, -1], [1.0, 1.0, 0.0])]);
        let clip = render_clip(&scene, 16).unwrap();
        let c: Vec<(f64, f64)> = clip
            .iter()
            .map(|f| centroid(f.seg.index_axis(ndarray::Axis(0), 0)))
            .collect();
        for k in 1..c.len() {
            assert!((c[k].0 - c[k - 1].0 - 1.0).abs() < 1e-12);
            assert!((c[k].1 - c[k - 1].1 + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn positions_stay_inside_frame() {
        let obj = disk(0.5, [30, 1], [3, -2], [1.0, 1.0, 1.0]);
        for k in 0..500 {
            let [x, y] = obj.position(k, 32, 32);
            assert!((0..32).contains(&x) && (0..32).contains(&y));
        }
    }
}
