use horizon_core::flow_matching::{FrameNoise, LossMask};
use horizon_core::model::{backward, init_params, sample_loss, ModelConfig, ModelDims, Sample};
use horizon_core::percept::{CodecConfig, Modality};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (horizon_core::model::DenoiserParams, horizon_core::percept::ChannelLayout, Sample) {
    let layout = CodecConfig {
        patch: 1,
        modalities: vec![Modality::Rgb, Modality::Depth],
        ..Default::default()
    }
    .layout();
    let cfg = ModelConfig {
        d_model: 8,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        time_features: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&cfg, ModelDims::from_layout(&layout, 3), &mut rng).unwrap();
    let dim = (4, layout.c_total(), 2, 2);
    let x1 = Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
    let x0 = Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
    let noise = FrameNoise(Array2::from_shape_fn((4, 2), |_| rng.random_range(0.05..0.95)));
    let sample = Sample {
        x1,
        x0,
        noise,
        mask: LossMask(vec![0.0, 1.0, 1.0, 1.0]),
        descriptor: vec![0.4, -0.3, 0.8],
    };
    (params, layout, sample)
}

/// Every parameter's analytic gradient agrees with a central difference.
/// Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator so
/// that entries whose gradient is round-off sized are judged absolutely.
#[test]
fn analytic_gradient_matches_central_differences() {
    let (mut params, layout, sample) = setup(17);
    let (_, grad) = backward(&params, &layout, &sample).unwrap();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = 0;
    for i in 0..params.data.len() {
        let keep = params.data[i];
        params.data[i] = keep + eps;
        let up = sample_loss(&params, &layout, &sample).unwrap();
        params.data[i] = keep - eps;
        let down = sample_loss(&params, &layout, &sample).unwrap();
        params.data[i] = keep;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grad.data[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        if rel > worst {
            worst = rel;
            worst_at = i;
        }
    }
    assert!(worst < 1e-4, "max relative error {worst:e} at parameter {worst_at}");
}

#[test]
fn loss_is_mean_squared_velocity_error_over_active_frames() {
    use horizon_core::flow_matching::interpolate_modal;
    use horizon_core::model::{forward, ModelInput};
    let (params, layout, sample) = setup(3);
    let zt = interpolate_modal(sample.x1.view(), sample.x0.view(), &sample.noise, &layout).unwrap();
    let pred = forward(
        &params,
        &ModelInput {
            latent: zt.view(),
            noise: &sample.noise,
            descriptor: &sample.descriptor,
            slots: None,
        },
    )
    .unwrap();
    let mut sum = 0.0;
    let mut count = 0usize;
    for f in 1..4 {
        for ((p, a), b) in pred
            .index_axis(ndarray::Axis(0), f)
            .iter()
            .zip(sample.x1.index_axis(ndarray::Axis(0), f).iter())
            .zip(sample.x0.index_axis(ndarray::Axis(0), f).iter())
        {
            sum += (p - (a - b)).powi(2);
            count += 1;
        }
    }
    let loss = sample_loss(&params, &layout, &sample).unwrap();
    assert!((loss - sum / count as f64).abs() < 1e-12);
}
