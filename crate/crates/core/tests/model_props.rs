use horizon_core::flow_matching::FrameNoise;
use horizon_core::model::{forward, init_params, ModelConfig, ModelDims, ModelInput};
use horizon_core::percept::{encode_frames, CodecConfig, Modality};
use horizon_core::trainer::{train, ClipLatent, OptimState, TrainConfig, TrainState};
use horizon_core::world::{gen_scene, render_clip, WorldConfig};
use ndarray::{s, Array2, Array4, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        blocks: 1,
        heads: 2,
        mlp_ratio: 2,
        time_features: 8,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn forward_preserves_shape(seed in any::<u64>(), f in 1usize..7, hw in 1usize..4, mods in 1usize..4) {
        let codec = CodecConfig {
            patch: 1,
            modalities: Modality::ALL[..mods].to_vec(),
            ..CodecConfig::default()
        };
        let layout = codec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = init_params(&small(), ModelDims::from_layout(&layout, 2), &mut rng).unwrap();
        let z = Array4::from_shape_simple_fn((f, layout.c_total(), hw, hw), || rng.random_range(-1.0..1.0));
        let noise = FrameNoise(Array2::from_shape_simple_fn((f, mods), || rng.random_range(0.0..1.0)));
        let out = forward(&p, &ModelInput { latent: z.view(), noise: &noise, descriptor: &[0.1, -0.2], slots: None }).unwrap();
        prop_assert_eq!(out.dim(), z.dim());
    }
}

#[test]
fn trained_model_responds_to_each_frames_noise_level() {
    let world = WorldConfig {
        width: 8,
        height: 8,
        n_objects: 2,
        max_speed: 1,
        min_size: 1,
        max_size: 2,
        ..WorldConfig::default()
    };
    let codec = CodecConfig {
        patch: 2,
        modalities: vec![Modality::Rgb, Modality::Depth],
        ..CodecConfig::default()
    };
    let layout = codec.layout();
    let scene = gen_scene(3, &world).unwrap();
    let (z, _) = encode_frames(&render_clip(&scene, 16).unwrap(), &codec).unwrap();
    let clips = vec![ClipLatent {
        latent: z.data.clone(),
        descriptor: scene.descriptor.clone(),
    }];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_params(&small(), ModelDims::from_layout(&layout, scene.descriptor.len()), &mut rng).unwrap();
    let opt = OptimState::new(&params);
    let cfg = TrainConfig {
        steps: 40,
        learning_rate: 3e-3,
        ..TrainConfig::default()
    };
    let (state, _) = train(TrainState { params, opt }, &cfg, &layout, &clips, |_, _| Ok(())).unwrap();

    let f = cfg.window_len();
    let latent = z.data.slice(s![..f, .., .., ..]).to_owned();
    let base = FrameNoise(Array2::from_elem((f, 2), 0.5));
    let run = |noise: &FrameNoise| {
        forward(
            &state.params,
            &ModelInput {
                latent: latent.view(),
                noise,
                descriptor: &scene.descriptor,
                slots: None,
            },
        )
        .unwrap()
    };
    let reference = run(&base);
    for k in 0..f {
        let mut probe = base.clone();
        probe.0.row_mut(k).fill(0.9);
        let out = run(&probe);
        let delta = (&out.index_axis(Axis(0), k) - &reference.index_axis(Axis(0), k))
            .mapv(|v| v * v)
            .sum()
            .sqrt();
        assert!(delta > 0.0, "frame {k} ignores its noise level");
    }
}
