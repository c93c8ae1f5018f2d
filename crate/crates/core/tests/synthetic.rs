use laser_core::data::{load_corpus_dir, write_corpus};
use laser_core::synth::{
    correlation, degrade_landmarks, frame_rms, generate_corpus, generate_track, landmark_aperture, sync_classifier,
    SynthConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(n: usize) -> SynthConfig {
    SynthConfig {
        num_tracks: n,
        crop_size: 16,
        min_frames: 40,
        max_frames: 60,
        ..SynthConfig::default()
    }
}

#[test]
fn no_speaking_means_no_correlation() {
    let cfg = SynthConfig {
        speaking_fraction: 0.0,
        ..small(100)
    };
    let mut corrs = Vec::new();
    for i in 0..cfg.num_tracks {
        let (e, truth) = generate_track(&cfg, i);
        assert!(e.track.labels.iter().all(|l| !l));
        if let Some(c) = correlation(&truth.aperture, &truth.envelope) {
            corrs.push(c);
        }
    }
    let mean = corrs.iter().sum::<f64>() / corrs.len() as f64;
    assert!(mean.abs() < 0.1, "mean correlation {mean}");
}

#[test]
fn windowed_correlation_recovers_labels() {
    let cfg = SynthConfig {
        noise_rms: vec![0.0],
        crop_size: 112,
        ..small(60)
    };
    let (mut correct, mut total) = (0usize, 0usize);
    for i in 0..cfg.num_tracks {
        let (e, _) = generate_track(&cfg, i);
        let t = e.track.num_frames;
        let env = frame_rms(&e.audio, e.track.fps, t);
        let ap = landmark_aperture(&e.lips);
        let pred = sync_classifier(&env, &ap, 10, 0.5);
        correct += pred.iter().zip(&e.track.labels).filter(|(a, b)| a == b).count();
        total += t;
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.95, "label fidelity {acc}");
}

#[test]
fn dropout_rate_concentrates() {
    let (e, _) = generate_track(&small(1), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dropped = (0..1000)
        .filter(|_| degrade_landmarks(&e.lips, 0.15, 0.0, &mut rng).all_absent())
        .count();
    let frac = dropped as f64 / 1000.0;
    assert!((0.12..=0.18).contains(&frac), "{frac}");
}

#[test]
fn configured_dropout_removes_whole_tracks() {
    let cfg = SynthConfig {
        landmark_dropout: 1.0,
        ..small(3)
    };
    for e in generate_corpus(&cfg).unwrap() {
        assert!(e.lips.all_absent());
    }
}

#[test]
fn landmarks_stay_inside_the_crop() {
    for e in generate_corpus(&small(10)).unwrap() {
        for &(x, y) in e.lips.frames.iter().flatten().flatten() {
            assert!((0..16).contains(&x) && (0..16).contains(&y));
        }
        assert!(e.track.frames.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn written_corpus_passes_validation_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&small(4)).unwrap();
    write_corpus(dir.path(), &corpus).unwrap();
    let back = load_corpus_dir(dir.path()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in corpus.iter().zip(&back) {
        assert_eq!(a.track, b.track);
        assert_eq!(a.lips, b.lips);
        assert_eq!(a.audio.samples.len(), b.audio.samples.len());
    }
}

#[test]
fn same_seed_same_corpus() {
    let a = generate_corpus(&small(3)).unwrap();
    let b = generate_corpus(&small(3)).unwrap();
    assert_eq!(a, b);
}
