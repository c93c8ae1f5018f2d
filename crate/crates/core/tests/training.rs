use laser_core::data::{CorpusEntry, LipTrack};
use laser_core::lip::encode_lip_landmarks;
use laser_core::losses::LossConfig;
use laser_core::model::{AudioEncoderConfig, ContextModuleConfig, LipIntegration, ModelConfig, VisualEncoderConfig};
use laser_core::synth::{generate_corpus, SynthConfig};
use laser_core::train::{
    checkpoint_path, sample_gradients, train, train_step, AugmentConfig, Geometric, Sample, TrainConfig, TrainOutput,
    TrainState, METRICS_FILE,
};
use laser_core::Error;
use proptest::prelude::*;

fn tiny_model(integration: LipIntegration) -> ModelConfig {
    ModelConfig {
        crop_size: 16,
        integration,
        visual: VisualEncoderConfig {
            conv3d_out_channels: 4,
            resnet_stage_widths: vec![4, 8],
            vtcn_blocks: 1,
            embed_dim: 8,
            pool_grid: 2,
            ..Default::default()
        },
        audio: AudioEncoderConfig {
            embed_dim: 8,
            ..Default::default()
        },
        context: ContextModuleConfig {
            heads: 2,
            hidden_dim: 8,
            positional_encoding: true,
            local_kernel: 3,
        },
        ..Default::default()
    }
}

fn tiny_corpus(n: usize, seed: u64) -> Vec<CorpusEntry> {
    generate_corpus(&SynthConfig {
        num_tracks: n,
        min_frames: 6,
        max_frames: 10,
        crop_size: 16,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs,
        batch_tracks: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn sample(entry: &CorpusEntry, lips: &LipTrack) -> Sample {
    Sample::new(&entry.track, lips, &entry.audio, 40).unwrap()
}

#[test]
fn lr_after_two_epochs() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.learning_rate, 5e-5);
    assert!((cfg.lr_at_epoch(2) - 5e-5 * 0.995 * 0.995).abs() < 1e-15);
    assert!((cfg.lr_at_epoch(2) - 4.95e-5).abs() < 1e-7);
    let lrs: Vec<f64> = (0..10).map(|e| cfg.lr_at_epoch(e)).collect();
    assert!(lrs.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn zero_consistency_weight_matches_single_pass() {
    let corpus = tiny_corpus(1, 2);
    let state = TrainState::new(tiny_model(LipIntegration::Laser), LossConfig::default(), train_config(1)).unwrap();
    let s = sample(&corpus[0], &corpus[0].lips);
    let loss = LossConfig {
        lambda_c: 0.0,
        ..LossConfig::default()
    };
    let dual = sample_gradients(
        &state.model,
        &s,
        &loss,
        &TrainConfig {
            consistency: true,
            ..train_config(1)
        },
    )
    .unwrap();
    let single = sample_gradients(
        &state.model,
        &s,
        &loss,
        &TrainConfig {
            consistency: false,
            ..train_config(1)
        },
    )
    .unwrap();
    assert!(dual.consistency_applied && !single.consistency_applied);
    for (a, b) in dual.grads.iter().zip(&single.grads) {
        match (a, b) {
            (Some(a), Some(b)) => assert!(a.max_abs_diff(b) <= 1e-7),
            (a, b) => assert_eq!(a.is_some(), b.is_some()),
        }
    }
}

#[test]
fn landmark_free_batch_reports_zero_consistency() {
    let corpus = tiny_corpus(2, 3);
    let mut state = TrainState::new(tiny_model(LipIntegration::Laser), LossConfig::default(), train_config(1)).unwrap();
    let samples: Vec<Sample> = corpus
        .iter()
        .map(|e| sample(e, &LipTrack::absent(e.track.num_frames, 82)))
        .collect();
    let rec = train_step(&mut state, &samples).unwrap();
    assert_eq!(rec.l_consistency, 0.0);
    assert!(rec.l_asd > 0.0);
}

#[test]
fn consistency_only_leaves_aggregator_untouched() {
    let corpus = tiny_corpus(1, 4);
    let state = TrainState::new(tiny_model(LipIntegration::Laser), LossConfig::default(), train_config(1)).unwrap();
    let loss = LossConfig {
        lambda_av: 0.0,
        lambda_a: 0.0,
        lambda_v: 0.0,
        lambda_c: 1.0,
    };
    let out = sample_gradients(&state.model, &sample(&corpus[0], &corpus[0].lips), &loss, &train_config(1)).unwrap();
    assert!(out.l_consistency >= 0.0);
    let (wx, wy) = state.model.aggregator_params().unwrap();
    for id in [wx, wy] {
        if let Some(g) = &out.grads[id.0] {
            assert!(g.data().iter().all(|v| *v == 0.0));
        }
    }
    // something upstream of the landmark-free prediction does move
    let moved = out.grads.iter().flatten().any(|g| g.data().iter().any(|v| *v != 0.0));
    assert!(moved);
}

#[test]
fn non_finite_loss_names_the_batch() {
    let corpus = tiny_corpus(1, 6);
    let mut state = TrainState::new(tiny_model(LipIntegration::None), LossConfig::default(), train_config(1)).unwrap();
    let id = state.model.params.find("head.av.bias").unwrap();
    state.model.params.get_mut(id).data_mut()[0] = f32::NAN;
    let err = train_step(&mut state, &[sample(&corpus[0], &corpus[0].lips)]).unwrap_err();
    match err {
        Error::Numerical(msg) => assert!(msg.contains(&corpus[0].track.track_id), "{msg}"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(2, 7);
    let mut state = TrainState::new(tiny_model(LipIntegration::Laser), LossConfig::default(), train_config(0)).unwrap();
    let out = TrainOutput {
        dir: dir.path().to_path_buf(),
        header: serde_json::json!({"command": "test"}),
    };
    let records = train(&mut state, &corpus, Some(&out)).unwrap();
    assert!(records.is_empty());
    assert!(checkpoint_path(dir.path(), 0).exists());
    assert!(!checkpoint_path(dir.path(), 1).exists());
    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap_or_default();
    assert!(log.lines().skip(1).all(|l| l.trim().is_empty()));
}

#[test]
fn empty_corpus_is_an_error() {
    let mut state = TrainState::new(tiny_model(LipIntegration::Laser), LossConfig::default(), train_config(1)).unwrap();
    assert!(matches!(train(&mut state, &[], None), Err(Error::Data(_))));
}

#[test]
fn same_seed_same_records() {
    let corpus = tiny_corpus(4, 8);
    let run = || {
        let mut s = TrainState::new(tiny_model(LipIntegration::Laser), LossConfig::default(), train_config(2)).unwrap();
        train(&mut s, &corpus, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 4);
    let bits = |r: &[laser_core::train::StepRecord]| -> Vec<u64> {
        r.iter().flat_map(|r| [r.l_asd.to_bits(), r.l_consistency.to_bits(), r.lr.to_bits()]).collect()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(4, 9);
    let mut full = TrainState::new(tiny_model(LipIntegration::Laser), LossConfig::default(), train_config(2)).unwrap();
    let all = train(&mut full, &corpus, None).unwrap();

    let mut first = TrainState::new(tiny_model(LipIntegration::Laser), LossConfig::default(), train_config(1)).unwrap();
    let out = TrainOutput {
        dir: dir.path().to_path_buf(),
        header: serde_json::json!({}),
    };
    let head = train(&mut first, &corpus, Some(&out)).unwrap();
    let mut resumed = TrainState::load(&checkpoint_path(dir.path(), 1)).unwrap();
    resumed.config.epochs = 2;
    let tail = train(&mut resumed, &corpus, None).unwrap();
    let joined: Vec<_> = head.into_iter().chain(tail).collect();
    assert_eq!(joined, all);
    assert_eq!(resumed.model.params, full.model.params);
}

#[test]
fn augmentation_keeps_shapes_and_landmark_count() {
    use rand::SeedableRng;
    let corpus = tiny_corpus(2, 10);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let e = &corpus[0];
    let (t, l, a) = laser_core::train::augment(
        &e.track,
        &e.lips,
        &e.audio,
        Some(&corpus[1].audio),
        &AugmentConfig {
            mix_probability: 1.0,
            ..AugmentConfig::default()
        },
        &mut rng,
    );
    assert_eq!(t.frames.len(), e.track.frames.len());
    assert_eq!(l.len(), e.lips.len());
    assert_eq!(a.samples.len(), e.audio.samples.len());
    assert!(t.frames.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(l.frames.iter().flatten().all(|p| p.len() == 82));
}

fn geometric() -> impl Strategy<Value = Geometric> {
    (any::<bool>(), 0.8f64..=1.0, 0.0f64..1.0, 0.0f64..1.0, -10.0f64..10.0).prop_map(|(flip, scale, fx, fy, deg)| {
        let size = 16usize;
        let side = scale * size as f64;
        let slack = size as f64 - side;
        let mut g = if flip { Geometric::flip(size) } else { Geometric::identity() };
        g = Geometric::crop_resize(fx * slack, fy * slack, side, size).after(&g);
        Geometric::rotation(deg, size).after(&g)
    })
}

proptest! {
    #[test]
    fn flip_twice_is_identity(x in -5i32..30, y in -5i32..30, w in 1usize..40) {
        let f = Geometric::flip(w);
        prop_assert_eq!(f.map_landmark(x, y), (w as i32 - 1 - x, y));
        let (x1, y1) = f.map_landmark(x, y);
        prop_assert_eq!(f.map_landmark(x1, y1), (x, y));
    }

    #[test]
    fn encoded_positions_follow_the_landmark_transform(
        g in geometric(),
        pts in prop::collection::vec((0i32..16, 0i32..16), 5),
    ) {
        let lips = LipTrack { num_landmarks: 5, frames: vec![Some(pts.clone())] };
        let moved = g.map_lips(&lips);
        let maps = encode_lip_landmarks(&moved, 16, 16).unwrap();
        let before = encode_lip_landmarks(&lips, 16, 16).unwrap();
        for (k, &(x, y)) in pts.iter().enumerate() {
            let (u, v) = g.map_landmark(x, y);
            let inside = (0..16).contains(&u) && (0..16).contains(&v);
            // the original hit, carried through the transform
            prop_assert!(before.plan.frames[0].iter().any(|h| h.k == k && h.pixel == y as usize * 16 + x as usize));
            let hit = maps.plan.frames[0].iter().find(|h| h.k == k);
            if inside {
                let hit = hit.unwrap();
                prop_assert_eq!(hit.pixel, v as usize * 16 + u as usize);
                prop_assert_eq!(hit.vx, u as f64 / 16.0);
                prop_assert_eq!(hit.vy, v as f64 / 16.0);
            } else {
                prop_assert!(hit.is_none());
            }
        }
    }
}
