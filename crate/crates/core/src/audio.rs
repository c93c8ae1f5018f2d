//! Log-mel features aligned four rows per video frame.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::{FaceTrack, MelSpectrogram, Waveform, MEL_FRAMES_PER_VIDEO_FRAME};
use crate::error::{Error, Result};

pub const DEFAULT_N_MELS: usize = 40;
/// Added to mel energies before the logarithm.
pub const LOG_OFFSET: f64 = 1e-6;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Analysis geometry for a given sample rate and video frame rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelGeometry {
    /// Samples between consecutive rows (may be fractional).
    pub hop: f64,
    pub n_fft: usize,
}

impl MelGeometry {
    pub fn new(sample_rate: u32, fps: f64) -> Self {
        let hop = sample_rate as f64 / (MEL_FRAMES_PER_VIDEO_FRAME as f64 * fps);
        let n_fft = ((2.0 * hop).ceil() as usize).max(2).next_power_of_two();
        Self { hop, n_fft }
    }
}

/// Center frequencies (Hz) of `n_mels` triangular filters spanning
/// `0..sample_rate / 2` evenly on the mel scale.
pub fn mel_center_frequencies(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// `n_mels x (n_fft / 2 + 1)` triangular filterbank with unit peaks.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Log-mel spectrogram with exactly `4T` rows for `track`.
///
/// Row `i` is a Hann-windowed frame centered on the middle of its hop
/// interval `[i * hop, (i + 1) * hop)`; samples past the end of the audio
/// read as zeros.
pub fn compute_mel(audio: &Waveform, track: &FaceTrack, n_mels: usize) -> Result<MelSpectrogram> {
    if audio.sample_rate == 0 {
        return Err(Error::Data("sample rate must be positive".into()));
    }
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be positive".into()));
    }
    let span = track.duration();
    if audio.duration() < 0.5 * span {
        return Err(Error::track(
            &track.track_id,
            format!(
                "audio lasts {:.3} s, less than half the {:.3} s track",
                audio.duration(),
                span
            ),
        ));
    }
    let geom = MelGeometry::new(audio.sample_rate, track.fps);
    let n_fft = geom.n_fft;
    let rows = MEL_FRAMES_PER_VIDEO_FRAME * track.num_frames;
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
        .collect();
    let window_energy: f64 = window.iter().map(|w| w * w).sum();
    let bank = mel_filterbank(audio.sample_rate, n_fft, n_mels);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut values = Vec::with_capacity(rows * n_mels);
    let n = audio.samples.len() as i64;
    for i in 0..rows {
        let center = ((i as f64 + 0.5) * geom.hop).round() as i64;
        let start = center - (n_fft / 2) as i64;
        for (j, slot) in buf.iter_mut().enumerate() {
            let s = start + j as i64;
            let x = if (0..n).contains(&s) {
                f64::from(audio.samples[s as usize])
            } else {
                0.0
            };
            *slot = Complex::new(x * window[j], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / window_energy)
            .collect();
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            values.push((e + LOG_OFFSET).ln() as f32);
        }
    }
    Ok(MelSpectrogram {
        values,
        rows,
        n_mels,
        sample_rate: audio.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(t: usize, fps: f64) -> FaceTrack {
        FaceTrack {
            track_id: "t".into(),
            video_id: "v".into(),
            fps,
            frames: vec![0.0; t],
            num_frames: t,
            height: 1,
            width: 1,
            labels: vec![false; t],
            start_time: 0.0,
        }
    }

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform {
            samples,
            sample_rate: 16000,
        }
    }

    #[test]
    fn hop_arithmetic_at_25_fps() {
        let g = MelGeometry::new(16000, 25.0);
        assert_eq!(g.hop, 160.0);
        assert_eq!(g.n_fft, 512);
        let m = compute_mel(&wave(vec![0.0; 16000]), &track(25, 25.0), 40).unwrap();
        assert_eq!(m.rows, 100);
        assert_eq!(m.values.len(), 100 * 40);
    }

    #[test]
    fn silence_gives_constant_rows() {
        let m = compute_mel(&wave(vec![0.0; 6400]), &track(10, 25.0), 40).unwrap();
        assert_eq!(m.rows, 40);
        let floor = LOG_OFFSET.ln() as f32;
        assert!(m.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn short_audio_and_bad_rate_are_errors() {
        assert!(compute_mel(&wave(vec![0.0; 3000]), &track(25, 25.0), 40).is_err());
        let mut w = wave(vec![0.0; 16000]);
        w.sample_rate = 0;
        assert!(compute_mel(&w, &track(25, 25.0), 40).is_err());
        // more than half is enough; the tail is zero padded
        assert_eq!(compute_mel(&wave(vec![0.0; 9000]), &track(25, 25.0), 40).unwrap().rows, 100);
    }

    #[test]
    fn filter_peaks_sit_at_centers() {
        let centers = mel_center_frequencies(16000, 40);
        assert!(centers.windows(2).all(|w| w[0] < w[1]));
        assert!((hz_to_mel(mel_to_hz(1234.5)) - 1234.5).abs() < 1e-9);
    }
}
