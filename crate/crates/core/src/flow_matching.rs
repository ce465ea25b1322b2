//! Straight-line flow matching between Gaussian noise (t = 0) and data
//! (t = 1): the interpolant, its velocity, the masked joint loss and the
//! explicit Euler integrator used at sampling time.

use ndarray::{s, Array2, Array4, ArrayView4, Axis, Zip};
use rand::Rng;

use crate::error::{ensure_shape, Error, Result};
use crate::percept::ChannelLayout;

/// One noise level per latent frame; 1 is clean data, 0 is pure noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLevelVector(pub Vec<f64>);

impl NoiseLevelVector {
    pub fn uniform(frames: usize, t: f64) -> Self {
        Self(vec![t; frames])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Noise level per frame and per modality (frames x modalities), used when
/// modalities of one frame sit at different points of the path.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameNoise(pub Array2<f64>);

impl FrameNoise {
    pub fn broadcast(t: &NoiseLevelVector, modalities: usize) -> Self {
        Self(Array2::from_shape_fn((t.len(), modalities), |(f, _)| t.0[f]))
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn modalities(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, frame: usize, modality: usize) -> f64 {
        self.0[[frame, modality]]
    }

    pub fn in_unit_range(&self) -> bool {
        self.0.iter().all(|t| (0.0..=1.0).contains(t))
    }
}

/// Per-frame loss weights: 1 for prediction frames, 0 for memory frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMask(pub Vec<f64>);

impl LossMask {
    pub fn active(&self) -> usize {
        self.0.iter().filter(|&&w| w != 0.0).count()
    }
}

fn same_shape(a: &ArrayView4<f64>, b: &ArrayView4<f64>) -> Result<()> {
    ensure_shape(a.dim() == b.dim(), || {
        format!("shape mismatch {:?} vs {:?}", a.dim(), b.dim())
    })
}

/// `x_t = t x1 + (1 - t) x0`, frame by frame.
pub fn interpolate(
    x1: ArrayView4<f64>,
    x0: ArrayView4<f64>,
    t: &NoiseLevelVector,
) -> Result<Array4<f64>> {
    same_shape(&x1, &x0)?;
    ensure_shape(t.len() == x1.len_of(Axis(0)), || {
        format!("{} noise levels for {} frames", t.len(), x1.len_of(Axis(0)))
    })?;
    let mut out = Array4::<f64>::zeros(x1.raw_dim());
    for (k, &tk) in t.0.iter().enumerate() {
        Zip::from(out.index_axis_mut(Axis(0), k))
            .and(x1.index_axis(Axis(0), k))
            .and(x0.index_axis(Axis(0), k))
            .for_each(|o, &a, &b| *o = tk * a + (1.0 - tk) * b);
    }
    Ok(out)
}

/// Interpolate each modality's channel range at its own noise level.
pub fn interpolate_modal(
    x1: ArrayView4<f64>,
    x0: ArrayView4<f64>,
    noise: &FrameNoise,
    layout: &ChannelLayout,
) -> Result<Array4<f64>> {
    same_shape(&x1, &x0)?;
    let (f, c, _, _) = x1.dim();
    ensure_shape(
        noise.frames() == f && noise.modalities() == layout.modalities.len(),
        || {
            format!(
                "noise levels {:?} for {f} frames and {} modalities",
                noise.0.dim(),
                layout.modalities.len()
            )
        },
    )?;
    ensure_shape(c == layout.c_total(), || {
        format!("{c} channels, layout expects {}", layout.c_total())
    })?;
    let mut out = Array4::<f64>::zeros(x1.raw_dim());
    for k in 0..f {
        for (mi, _) in layout.modalities.iter().enumerate() {
            let tk = noise.get(k, mi);
            let r = mi * layout.c_per_modality..(mi + 1) * layout.c_per_modality;
            Zip::from(out.slice_mut(s![k, r.clone(), .., ..]))
                .and(x1.slice(s![k, r.clone(), .., ..]))
                .and(x0.slice(s![k, r, .., ..]))
                .for_each(|o, &a, &b| *o = tk * a + (1.0 - tk) * b);
        }
    }
    Ok(out)
}

/// `v = x1 - x0`; the interpolant's constant time derivative.
pub fn velocity_target(x1: ArrayView4<f64>, x0: ArrayView4<f64>) -> Result<Array4<f64>> {
    same_shape(&x1, &x0)?;
    Ok(&x1 - &x0)
}

fn check_mask(pred: &ArrayView4<f64>, mask: &LossMask) -> Result<f64> {
    ensure_shape(mask.0.len() == pred.len_of(Axis(0)), || {
        format!(
            "mask of length {} for {} frames",
            mask.0.len(),
            pred.len_of(Axis(0))
        )
    })?;
    let per_frame = (pred.len() / pred.len_of(Axis(0)).max(1)) as f64;
    let count = mask.0.iter().sum::<f64>() * per_frame;
    if mask.active() == 0 || count <= 0.0 {
        return Err(Error::Precondition("loss mask has no active frame".into()));
    }
    Ok(count)
}

/// Mean squared error over the unmasked frames, all channels included.
pub fn joint_loss(pred: ArrayView4<f64>, target: ArrayView4<f64>, mask: &LossMask) -> Result<f64> {
    same_shape(&pred, &target)?;
    let count = check_mask(&pred, mask)?;
    let mut total = 0.0;
    for (k, &w) in mask.0.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let sq: f64 = pred
            .index_axis(Axis(0), k)
            .iter()
            .zip(target.index_axis(Axis(0), k).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += w * sq;
    }
    Ok(total / count)
}

/// Loss and its gradient with respect to `pred`.
pub fn joint_loss_grad(
    pred: ArrayView4<f64>,
    target: ArrayView4<f64>,
    mask: &LossMask,
) -> Result<(f64, Array4<f64>)> {
    let loss = joint_loss(pred, target, mask)?;
    let count = check_mask(&pred, mask)?;
    let mut grad = Array4::<f64>::zeros(pred.raw_dim());
    for (k, &w) in mask.0.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let scale = 2.0 * w / count;
        Zip::from(grad.index_axis_mut(Axis(0), k))
            .and(pred.index_axis(Axis(0), k))
            .and(target.index_axis(Axis(0), k))
            .for_each(|g, &a, &b| *g = scale * (a - b));
    }
    Ok((loss, grad))
}

/// `z + dt u`.
pub fn euler_step(z: ArrayView4<f64>, u: ArrayView4<f64>, dt: f64) -> Result<Array4<f64>> {
    same_shape(&z, &u)?;
    if !(dt > 0.0) {
        return Err(Error::Precondition(format!(
            "Euler step needs dt > 0, got {dt}"
        )));
    }
    Ok(&z + &(&u * dt))
}

/// One shared noise level, drawn from U(0, 1), for every frame.
pub fn sample_uniform_window_t<R: Rng + ?Sized>(rng: &mut R, frames: usize) -> NoiseLevelVector {
    NoiseLevelVector::uniform(frames, rng.random_range(0.0..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn filled(v: f64) -> Array4<f64> {
        Array4::from_elem((3, 2, 2, 2), v)
    }

    fn ramp(seed: usize) -> Array4<f64> {
        Array4::from_shape_fn((3, 2, 2, 2), |(a, b, c, d)| {
            (((a + 1) * (b + 3) * (c + 5) * (d + 7) + seed) % 13) as f64 / 6.5 - 1.0
        })
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let (x1, x0) = (ramp(1), ramp(2));
        let clean = interpolate(x1.view(), x0.view(), &NoiseLevelVector::uniform(3, 1.0)).unwrap();
        assert_eq!(clean, x1);
        let noise = interpolate(x1.view(), x0.view(), &NoiseLevelVector::uniform(3, 0.0)).unwrap();
        assert_eq!(noise, x0);
        let mid = interpolate(
            filled(2.0).view(),
            filled(0.0).view(),
            &NoiseLevelVector::uniform(3, 0.5),
        )
        .unwrap();
        assert!(mid.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let bad = Array4::<f64>::zeros((2, 2, 2, 2));
        assert!(matches!(
            interpolate(filled(0.0).view(), bad.view(), &NoiseLevelVector::uniform(3, 0.5)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            interpolate(filled(0.0).view(), filled(0.0).view(), &NoiseLevelVector::uniform(2, 0.5)),
            Err(Error::Shape(_))
        ));
        assert!(velocity_target(filled(0.0).view(), bad.view()).is_err());
    }

    #[test]
    fn velocity_examples() {
        let v = velocity_target(filled(1.0).view(), filled(-1.0).view()).unwrap();
        assert!(v.iter().all(|&x| x == 2.0));
        let same = velocity_target(ramp(3).view(), ramp(3).view()).unwrap();
        assert!(same.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn interpolant_plus_remaining_velocity_is_data() {
        let (x1, x0) = (ramp(4), ramp(9));
        let v = velocity_target(x1.view(), x0.view()).unwrap();
        let t = NoiseLevelVector(vec![0.1, 0.55, 0.93]);
        let xt = interpolate(x1.view(), x0.view(), &t).unwrap();
        for k in 0..3 {
            for ((a, b), c) in xt
                .index_axis(Axis(0), k)
                .iter()
                .zip(v.index_axis(Axis(0), k).iter())
                .zip(x1.index_axis(Axis(0), k).iter())
            {
                assert!((a + (1.0 - t.0[k]) * b - c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let full = LossMask(vec![1.0; 3]);
        assert_eq!(joint_loss(ramp(1).view(), ramp(1).view(), &full).unwrap(), 0.0);
        let p = ramp(1);
        let q = &p - 1.0;
        assert_eq!(joint_loss(p.view(), q.view(), &full).unwrap(), 1.0);
        assert!(matches!(
            joint_loss(p.view(), q.view(), &LossMask(vec![0.0; 3])),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn masked_frames_do_not_matter() {
        let mask = LossMask(vec![0.0, 1.0, 1.0]);
        let (p, target) = (ramp(5), ramp(6));
        let base = joint_loss(p.view(), target.view(), &mask).unwrap();
        let mut perturbed = p.clone();
        perturbed.index_axis_mut(Axis(0), 0).mapv_inplace(|v| v * 17.0 + 3.0);
        let after = joint_loss(perturbed.view(), target.view(), &mask).unwrap();
        assert_eq!(base.to_bits(), after.to_bits());
        let (_, g) = joint_loss_grad(p.view(), target.view(), &mask).unwrap();
        assert!(g.index_axis(Axis(0), 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn euler_examples() {
        let (x1, x0) = (ramp(2), ramp(7));
        let v = velocity_target(x1.view(), x0.view()).unwrap();
        let one = euler_step(x0.view(), v.view(), 1.0).unwrap();
        for (a, b) in one.iter().zip(x1.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let half = euler_step(x0.view(), v.view(), 0.5).unwrap();
        let two = euler_step(half.view(), v.view(), 0.5).unwrap();
        for (a, b) in two.iter().zip(x1.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let zero = Array4::<f64>::zeros(x0.raw_dim());
        assert_eq!(euler_step(x0.view(), zero.view(), 0.3).unwrap(), x0);
        assert!(matches!(
            euler_step(x0.view(), v.view(), 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn uniform_window_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let t = sample_uniform_window_t(&mut rng, 5);
            assert!(t.0.iter().all(|&x| x == t.0[0]));
            assert!((0.0..=1.0).contains(&t.0[0]));
            sum += t.0[0];
        }
        let mean = sum / 10_000.0;
        assert!((0.47..=0.53).contains(&mean), "mean {mean}");
    }
}
