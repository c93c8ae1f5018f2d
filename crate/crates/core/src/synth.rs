//! Procedural audiovisual tracks with known synchronization.
//!
//! Each track is a sequence of segments. In speaking segments the mouth
//! aperture follows the speech envelope. Elsewhere the mouth is either still
//! or moving on its own, and the audio is either silent or carries speech
//! from someone off screen. Faces carry blinking eyes, head jitter, lighting
//! changes and pixel noise; landmarks sit exactly on the mouth outline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{CorpusEntry, FaceTrack, LipTrack, Waveform, DEFAULT_LANDMARKS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_tracks: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: f64,
    pub crop_size: usize,
    pub sample_rate: u32,
    /// Probability that a segment is speaking.
    pub speaking_fraction: f64,
    /// Background noise levels, assigned to tracks round-robin.
    pub noise_rms: Vec<f64>,
    pub seed: u64,
    pub landmarks: usize,
    pub tracks_per_video: usize,
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
    /// Peak amplitude of the voiced signal.
    pub speech_amplitude: f64,
    /// Standard deviation of per-pixel noise.
    pub pixel_noise: f64,
    /// Probability that a non-speaking segment carries off-screen speech.
    pub offscreen_speech: f64,
    /// Largest head displacement, as a fraction of the crop.
    pub max_jitter: f64,
    /// How far the mouth interior darkens toward its shade, in `[0, 1]`.
    pub mouth_contrast: f64,
    /// Probability that a track loses all its landmarks, simulating a
    /// failed detector.
    pub landmark_dropout: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_tracks: 200,
            min_frames: 40,
            max_frames: 80,
            fps: 25.0,
            crop_size: 112,
            sample_rate: 16000,
            speaking_fraction: 0.5,
            noise_rms: vec![0.01, 0.05],
            seed: 0,
            landmarks: DEFAULT_LANDMARKS,
            tracks_per_video: 2,
            min_segment_frames: 20,
            max_segment_frames: 50,
            speech_amplitude: 0.2,
            pixel_noise: 0.06,
            offscreen_speech: 0.5,
            max_jitter: 0.05,
            mouth_contrast: 1.0,
            landmark_dropout: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_frames == 0 || self.max_frames < self.min_frames {
            return Err(Error::Config("frame range must satisfy 1 <= min_frames <= max_frames".into()));
        }
        if self.min_segment_frames == 0 || self.max_segment_frames < self.min_segment_frames {
            return Err(Error::Config("segment range is empty".into()));
        }
        if !(self.fps > 0.0) || self.sample_rate == 0 || self.landmarks == 0 || self.tracks_per_video == 0 {
            return Err(Error::Config("fps, sample_rate, landmarks and tracks_per_video must be positive".into()));
        }
        if self.crop_size < 16 {
            return Err(Error::Config("crop_size must be at least 16".into()));
        }
        if self.noise_rms.is_empty() || self.noise_rms.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("noise_rms needs at least one nonnegative level".into()));
        }
        for (name, p) in [
            ("speaking_fraction", self.speaking_fraction),
            ("offscreen_speech", self.offscreen_speech),
            ("mouth_contrast", self.mouth_contrast),
            ("landmark_dropout", self.landmark_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Ground truth of one generated track beyond what the corpus stores.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTruth {
    /// Per-frame mouth aperture in `[0, 1]`.
    pub aperture: Vec<f64>,
    /// Per-frame speech envelope in `[0, 1]` of the track's audio.
    pub envelope: Vec<f64>,
}

const MOUTH_DRAWS: usize = 50;
const SYNC_WINDOW: usize = 10;
const SYNC_THRESHOLD: f64 = 0.5;

/// Whether any window correlates strongly in either direction; screening
/// both signs keeps the accepted mouths unbiased.
fn locally_correlated(a: &[f64], b: &[f64]) -> bool {
    let n = a.len();
    (0..n.saturating_sub(SYNC_WINDOW) + 1).any(|i| {
        let j = (i + SYNC_WINDOW).min(n);
        correlation(&a[i..j], &b[i..j]).is_some_and(|c| c.abs() > SYNC_THRESHOLD)
    })
}

/// A syllable-like envelope: bumps of 3..=7 frames separated by 1..=5
/// silent frames.
fn syllables(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        for _ in 0..rng.random_range(1..=5) {
            out.push(0.0);
        }
        let l = rng.random_range(3..=7);
        let peak = rng.random_range(0.5..=1.0);
        for i in 0..l {
            out.push(peak * (std::f64::consts::PI * (i as f64 + 0.5) / l as f64).sin());
        }
    }
    out.truncate(len);
    out
}

fn still(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let level: f64 = rng.random_range(0.0..0.15);
    let n = Normal::new(0.0, 0.02).unwrap();
    (0..len).map(|_| (level + n.sample(rng)).clamp(0.0, 1.0)).collect()
}

/// Generates track `index` of the corpus described by `cfg`.
pub fn generate_track(cfg: &SynthConfig, index: usize) -> (CorpusEntry, TrackTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let t = rng.random_range(cfg.min_frames..=cfg.max_frames);

    let mut labels = Vec::with_capacity(t);
    let mut aperture = Vec::with_capacity(t);
    let mut envelope = Vec::with_capacity(t);
    let jitter = Normal::new(0.0, 0.03).unwrap();
    while labels.len() < t {
        let len = rng.random_range(cfg.min_segment_frames..=cfg.max_segment_frames).min(t - labels.len());
        let speaking = rng.random_bool(cfg.speaking_fraction);
        if speaking {
            let e = syllables(len, &mut rng);
            aperture.extend(e.iter().map(|v| (v + jitter.sample(&mut rng)).clamp(0.0, 1.0)));
            envelope.extend(e);
        } else {
            let moving = rng.random_bool(0.5);
            let audio = if rng.random_bool(cfg.offscreen_speech) {
                syllables(len, &mut rng)
            } else {
                vec![0.0; len]
            };
            // redraw mouths that line up with the off-screen speech by chance
            let mut mouth = Vec::new();
            for _ in 0..MOUTH_DRAWS {
                mouth = if moving { syllables(len, &mut rng) } else { still(len, &mut rng) };
                if !locally_correlated(&audio, &mouth) {
                    break;
                }
                mouth = vec![mouth[0]; len];
            }
            aperture.extend(mouth);
            envelope.extend(audio);
        }
        labels.extend(std::iter::repeat_n(speaking, len));
    }

    let noise_rms = cfg.noise_rms[index % cfg.noise_rms.len()];
    let audio = render_audio(cfg, &envelope, noise_rms, &mut rng);
    let (frames, mut lips) = render_frames(cfg, &aperture, &mut rng);
    if cfg.landmark_dropout > 0.0 {
        lips = degrade_landmarks(&lips, cfg.landmark_dropout, 0.0, &mut rng);
    }
    let track = FaceTrack {
        track_id: format!("trk{index:05}"),
        video_id: format!("vid{:05}", index / cfg.tracks_per_video),
        fps: cfg.fps,
        frames,
        num_frames: t,
        height: cfg.crop_size,
        width: cfg.crop_size,
        labels,
        start_time: 0.0,
    };
    (
        CorpusEntry {
            track,
            lips,
            audio,
            noise_rms: Some(noise_rms),
        },
        TrackTruth { aperture, envelope },
    )
}

fn render_audio(cfg: &SynthConfig, envelope: &[f64], noise_rms: f64, rng: &mut impl Rng) -> Waveform {
    let sr = f64::from(cfg.sample_rate);
    let n = (envelope.len() as f64 / cfg.fps * sr).round() as usize;
    let f0 = rng.random_range(110.0..240.0);
    let phases: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let norm: f64 = (1..=4).map(|h| 1.0 / h as f64).sum();
    let noise = Normal::new(0.0, noise_rms.max(f64::MIN_POSITIVE)).unwrap();
    let samples = (0..n)
        .map(|i| {
            let time = i as f64 / sr;
            // frame-center interpolation of the envelope
            let pos = (time * cfg.fps - 0.5).max(0.0);
            let j = (pos as usize).min(envelope.len() - 1);
            let frac = (pos - j as f64).min(1.0);
            let e = envelope[j] * (1.0 - frac) + envelope[(j + 1).min(envelope.len() - 1)] * frac;
            let tone: f64 = (1..=4)
                .map(|h| (std::f64::consts::TAU * h as f64 * f0 * time + phases[h - 1]).sin() / h as f64)
                .sum();
            let v = cfg.speech_amplitude * e * tone / norm + if noise_rms > 0.0 { noise.sample(rng) } else { 0.0 };
            v as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate: cfg.sample_rate,
    }
}

/// Coverage of an anti-aliased ellipse at pixel center `(px, py)`.
fn ellipse_alpha(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (dx, dy) = ((px - cx) / rx.max(1e-3), (py - cy) / ry.max(1e-3));
    let r = (dx * dx + dy * dy).sqrt();
    ((1.0 - r) * rx.min(ry).max(0.5) + 0.5).clamp(0.0, 1.0)
}

fn render_frames(cfg: &SynthConfig, aperture: &[f64], rng: &mut impl Rng) -> (Vec<f32>, LipTrack) {
    let s = cfg.crop_size as f64;
    let n = cfg.crop_size;
    let background = rng.random_range(0.1..0.4);
    let skin = rng.random_range(0.55..0.85);
    let mouth_shade = rng.random_range(0.0..0.2);
    let (cx0, cy0) = (s / 2.0 + rng.random_range(-0.04..0.04) * s, s / 2.0 + rng.random_range(-0.04..0.04) * s);
    let face_r = 0.42 * s;
    let mouth_w = rng.random_range(0.17..0.22) * s;
    let pixel = Normal::new(0.0, cfg.pixel_noise.max(f64::MIN_POSITIVE)).unwrap();
    let light = Normal::new(0.0, 0.05).unwrap();
    let mut frames = Vec::with_capacity(aperture.len() * n * n);
    let mut lips = Vec::with_capacity(aperture.len());
    let (mut dx, mut dy) = (0.0f64, 0.0f64);
    let mut blink = 0usize;
    for &a in aperture {
        let lim = cfg.max_jitter * s;
        dx = (dx + rng.random_range(-0.6..0.6)).clamp(-lim, lim);
        dy = (dy + rng.random_range(-0.6..0.6)).clamp(-lim, lim);
        if blink == 0 && rng.random_bool(0.06) {
            blink = rng.random_range(2..=4);
        }
        let eye_open = if blink > 0 {
            blink -= 1;
            0.15
        } else {
            1.0
        };
        let (cx, cy) = (cx0 + dx, cy0 + dy);
        let (mx, my) = (cx, cy + 0.2 * s);
        let mouth_h = (0.03 + 0.15 * a) * s;
        let gain = 1.0 + 2.0 * light.sample(rng);
        let offset = light.sample(rng);
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let face = ellipse_alpha(px, py, cx, cy, face_r, face_r * 1.1);
                let mut v = background + (skin - background) * face;
                for side in [-1.0, 1.0] {
                    let eye = ellipse_alpha(px, py, cx + side * 0.16 * s, cy - 0.12 * s, 0.06 * s, 0.05 * s * eye_open);
                    v += (0.1 - v) * eye;
                }
                let m = ellipse_alpha(px, py, mx, my, mouth_w, mouth_h);
                v += (mouth_shade - v) * m * cfg.mouth_contrast;
                let v = (v - 0.5) * gain + 0.5 + offset + pixel.sample(rng);
                frames.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        let points = (0..cfg.landmarks)
            .map(|k| {
                let th = std::f64::consts::TAU * k as f64 / cfg.landmarks as f64;
                // pixel centers sit at half-integer positions
                let x = (mx + mouth_w * th.cos() - 0.5).round().clamp(0.0, s - 1.0);
                let y = (my + mouth_h * th.sin() - 0.5).round().clamp(0.0, s - 1.0);
                (x as i32, y as i32)
            })
            .collect();
        lips.push(Some(points));
    }
    (
        frames,
        LipTrack {
            num_landmarks: cfg.landmarks,
            frames: lips,
        },
    )
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Vec<CorpusEntry>> {
    cfg.validate()?;
    Ok((0..cfg.num_tracks).map(|i| generate_track(cfg, i).0).collect())
}

/// Marks the whole track absent with probability `drop_rate`; otherwise
/// each frame independently with probability `frame_drop_rate`.
pub fn degrade_landmarks(lips: &LipTrack, drop_rate: f64, frame_drop_rate: f64, rng: &mut impl Rng) -> LipTrack {
    if rng.random_bool(drop_rate.clamp(0.0, 1.0)) {
        return LipTrack::absent(lips.len(), lips.num_landmarks);
    }
    let p = frame_drop_rate.clamp(0.0, 1.0);
    LipTrack {
        num_landmarks: lips.num_landmarks,
        frames: lips
            .frames
            .iter()
            .map(|f| if rng.random_bool(p) { None } else { f.clone() })
            .collect(),
    }
}

/// Pearson correlation; `None` when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 1e-12 && sbb > 1e-12).then(|| sab / (saa * sbb).sqrt())
}

/// Per-frame audio envelope estimate: RMS of each frame's samples.
pub fn frame_rms(audio: &Waveform, fps: f64, frames: usize) -> Vec<f64> {
    let per = f64::from(audio.sample_rate) / fps;
    (0..frames)
        .map(|t| {
            let a = (t as f64 * per).round() as usize;
            let b = (((t + 1) as f64 * per).round() as usize).min(audio.samples.len());
            if a >= b {
                return 0.0;
            }
            let s: f64 = audio.samples[a..b].iter().map(|&v| f64::from(v) * f64::from(v)).sum();
            (s / (b - a) as f64).sqrt()
        })
        .collect()
}

/// Vertical spread of the landmarks per frame (0 when absent).
pub fn landmark_aperture(lips: &LipTrack) -> Vec<f64> {
    lips.frames
        .iter()
        .map(|f| {
            f.as_ref().map_or(0.0, |pts| {
                let (lo, hi) = pts
                    .iter()
                    .fold((i32::MAX, i32::MIN), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
                f64::from(hi - lo)
            })
        })
        .collect()
}

/// Labels a frame speaking when envelope and aperture correlate above
/// `threshold` over a `window`-frame neighbourhood.
pub fn sync_classifier(envelope: &[f64], aperture: &[f64], window: usize, threshold: f64) -> Vec<bool> {
    let t = envelope.len();
    (0..t)
        .map(|i| {
            let a = i.saturating_sub(window / 2);
            let b = (a + window).min(t);
            let a = b.saturating_sub(window);
            correlation(&envelope[a..b], &aperture[a..b]).is_some_and(|c| c > threshold)
        })
        .collect()
}
