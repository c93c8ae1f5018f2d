//! Benchmark curation: face-track filtering and gap filling, a reference
//! energy VAD, background RMS and the low/high noise split.
//!
//! All RMS values assume samples normalized to `[-1, 1]` full scale.

use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::data::{FaceTrack, Waveform};
use crate::error::{Error, Result};

pub const NORMALIZATION: &str = "fullscale_pm1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VadConfig {
    pub frame_ms: f64,
    /// Frame RMS above which a frame counts as speech.
    pub threshold: f64,
    /// Padding added around each detected segment.
    pub pad_ms: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_ms: 20.0,
            threshold: 0.1,
            pad_ms: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub min_track_seconds: f64,
    pub rms_threshold: f64,
    /// `energy`, or `external:<command>`.
    pub vad: String,
    pub energy_vad: VadConfig,
    /// Background shorter than this leaves the RMS undetermined.
    pub min_background_seconds: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            min_track_seconds: 0.2,
            rms_threshold: 0.03,
            vad: "energy".into(),
            energy_vad: VadConfig::default(),
            min_background_seconds: 0.1,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_track_seconds > 0.0) || !(self.rms_threshold >= 0.0) {
            return Err(Error::Config("curation thresholds must be positive".into()));
        }
        if !(self.energy_vad.frame_ms > 0.0) {
            return Err(Error::Config("vad frame_ms must be positive".into()));
        }
        if self.vad != "energy" && !self.vad.starts_with("external:") {
            return Err(Error::Config(format!("unknown vad {:?}", self.vad)));
        }
        Ok(())
    }
}

/// Sorted, disjoint speech intervals in seconds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VadSegments {
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl VadSegments {
    /// Sorts and merges arbitrary intervals, dropping empty ones.
    pub fn from_intervals(mut raw: Vec<Segment>) -> Self {
        raw.retain(|s| s.end > s.start);
        raw.sort_by(|a, b| a.start.total_cmp(&b.start));
        let mut segments: Vec<Segment> = Vec::with_capacity(raw.len());
        for s in raw {
            match segments.last_mut() {
                Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
                _ => segments.push(s),
            }
        }
        Self { segments }
    }

    pub fn is_valid(&self) -> bool {
        self.segments.iter().all(|s| s.start >= 0.0 && s.start < s.end)
            && self.segments.windows(2).all(|w| w[0].end < w[1].start)
    }

    /// Widens each segment by `pad` seconds, clipped to `[0, duration]`.
    pub fn padded(&self, pad: f64, duration: f64) -> Self {
        Self::from_intervals(
            self.segments
                .iter()
                .map(|s| Segment {
                    start: (s.start - pad).max(0.0),
                    end: (s.end + pad).min(duration),
                })
                .collect(),
        )
    }
}

/// Marks frames whose RMS exceeds `threshold` and merges adjacent ones.
pub fn energy_vad(wave: &Waveform, frame_ms: f64, threshold: f64) -> VadSegments {
    let sr = f64::from(wave.sample_rate);
    let frame = ((frame_ms / 1000.0 * sr).round() as usize).max(1);
    let mut segments = Vec::new();
    let mut open: Option<usize> = None;
    let n = wave.samples.len();
    let frames = n.div_ceil(frame);
    for f in 0..=frames {
        let speech = f < frames && {
            let chunk = &wave.samples[f * frame..((f + 1) * frame).min(n)];
            let ms = chunk.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / chunk.len() as f64;
            ms.sqrt() > threshold
        };
        match (speech, open) {
            (true, None) => open = Some(f),
            (false, Some(s)) => {
                segments.push(Segment {
                    start: (s * frame) as f64 / sr,
                    end: ((f * frame).min(n)) as f64 / sr,
                });
                open = None;
            }
            _ => {}
        }
    }
    VadSegments { segments }
}

/// Runs `command <wav>` and parses a JSON array of `{start, end}` from its
/// standard output.
pub fn external_vad(command: &str, wav: &Path) -> Result<VadSegments> {
    let mut parts = command.split_whitespace();
    let program = parts.next().ok_or_else(|| Error::Config("empty external VAD command".into()))?;
    let out = Command::new(program)
        .args(parts)
        .arg(wav)
        .output()
        .map_err(|e| Error::io(program, e))?;
    if !out.status.success() {
        return Err(Error::Data(format!(
            "external VAD exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let raw: Vec<Segment> = serde_json::from_slice(&out.stdout)?;
    Ok(VadSegments::from_intervals(raw))
}

/// RMS of the samples outside all speech segments, or `None` when less
/// than `min_seconds` of background remains.
pub fn background_rms(wave: &Waveform, vad: &VadSegments, min_seconds: f64) -> Option<f64> {
    let sr = f64::from(wave.sample_rate);
    let mut speech = vec![false; wave.samples.len()];
    for s in &vad.segments {
        let a = ((s.start * sr).floor().max(0.0) as usize).min(speech.len());
        let b = ((s.end * sr).ceil().max(0.0) as usize).min(speech.len());
        speech[a..b].iter_mut().for_each(|v| *v = true);
    }
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (&x, &sp) in wave.samples.iter().zip(&speech) {
        if !sp {
            sum += f64::from(x) * f64::from(x);
            count += 1;
        }
    }
    if count == 0 || (count as f64) < min_seconds * sr {
        return None;
    }
    Some((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSplit {
    pub low: Vec<String>,
    pub high: Vec<String>,
    pub undetermined: Vec<String>,
    pub threshold: f64,
    pub normalization: String,
}

/// `rms < threshold` is low, `rms >= threshold` is high.
pub fn noise_split(clips: &[(String, Option<f64>)], threshold: f64) -> NoiseSplit {
    let mut split = NoiseSplit {
        low: Vec::new(),
        high: Vec::new(),
        undetermined: Vec::new(),
        threshold,
        normalization: NORMALIZATION.into(),
    };
    for (id, rms) in clips {
        match rms {
            Some(r) if *r < threshold => split.low.push(id.clone()),
            Some(_) => split.high.push(id.clone()),
            None => split.undetermined.push(id.clone()),
        }
    }
    split
}

/// VAD followed by background RMS for one clip under `cfg`'s energy VAD.
pub fn clip_background_rms(wave: &Waveform, cfg: &CurationConfig) -> Option<f64> {
    let v = &cfg.energy_vad;
    let vad = energy_vad(wave, v.frame_ms, v.threshold).padded(v.pad_ms / 1000.0, wave.duration());
    background_rms(wave, &vad, cfg.min_background_seconds)
}

/// Whether `frames` at `fps` last at least `min_seconds`.
pub fn meets_min_duration(frames: usize, fps: f64, min_seconds: f64) -> bool {
    frames as f64 / fps + 1e-9 >= min_seconds
}

/// One detected face in a raw track.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_index: i64,
    /// `[x0, y0, x1, y1]` in source video pixels.
    pub bbox: [f64; 4],
    /// Face crop, `H x W`.
    pub pixels: Vec<f32>,
    pub label: bool,
}

/// A face track as it comes out of a detector, possibly with gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrack {
    pub track_id: String,
    pub video_id: String,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    /// Sorted by frame index.
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CuratedTrack {
    pub track: FaceTrack,
    /// Per-frame bounding boxes, interpolated across gaps.
    pub boxes: Vec<[f64; 4]>,
}

/// Drops tracks spanning less than `min_seconds` and fills interior gaps:
/// boxes are interpolated linearly and pixels and labels copied from the
/// nearest detection.
pub fn filter_and_interpolate(raw: &[RawTrack], min_seconds: f64) -> Vec<CuratedTrack> {
    raw.iter()
        .filter_map(|r| {
            let first = r.detections.first()?;
            let last = r.detections.last()?;
            let span = (last.frame_index - first.frame_index + 1) as usize;
            if !meets_min_duration(span, r.fps, min_seconds) {
                return None;
            }
            let mut frames = Vec::with_capacity(span * r.height * r.width);
            let mut labels = Vec::with_capacity(span);
            let mut boxes = Vec::with_capacity(span);
            for pair in r.detections.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let gap = (b.frame_index - a.frame_index) as f64;
                for i in a.frame_index..b.frame_index {
                    let w = (i - a.frame_index) as f64 / gap;
                    let near = if w <= 0.5 { a } else { b };
                    frames.extend_from_slice(&near.pixels);
                    labels.push(near.label);
                    boxes.push(std::array::from_fn(|k| a.bbox[k] * (1.0 - w) + b.bbox[k] * w));
                }
            }
            frames.extend_from_slice(&last.pixels);
            labels.push(last.label);
            boxes.push(last.bbox);
            Some(CuratedTrack {
                track: FaceTrack {
                    track_id: r.track_id.clone(),
                    video_id: r.video_id.clone(),
                    fps: r.fps,
                    frames,
                    num_frames: span,
                    height: r.height,
                    width: r.width,
                    labels,
                    start_time: first.frame_index as f64 / r.fps,
                },
                boxes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform {
            samples,
            sample_rate: 16000,
        }
    }

    #[test]
    fn silence_has_no_segments() {
        assert!(energy_vad(&wave(vec![0.0; 16000]), 20.0, 0.1).segments.is_empty());
        assert!(energy_vad(&wave(vec![]), 20.0, 0.1).segments.is_empty());
    }

    #[test]
    fn single_burst_single_segment() {
        let mut s = vec![0.0f32; 16000];
        for (i, v) in s[6400..9600].iter_mut().enumerate() {
            *v = 0.5 * (i as f32 * 0.3).sin();
        }
        let vad = energy_vad(&wave(s), 20.0, 0.1);
        assert_eq!(vad.segments.len(), 1);
        let seg = vad.segments[0];
        assert!(seg.start <= 0.4 && seg.end >= 0.6);
    }

    #[test]
    fn constant_signal_rms_is_amplitude() {
        let w = wave(vec![0.25; 8000]);
        assert_eq!(background_rms(&w, &VadSegments::default(), 0.1), Some(0.25));
        let all = VadSegments {
            segments: vec![Segment { start: 0.0, end: 0.5 }],
        };
        assert_eq!(background_rms(&w, &all, 0.1), None);
    }

    #[test]
    fn split_boundaries() {
        let clips = vec![
            ("a".to_string(), Some(0.01)),
            ("b".to_string(), Some(0.05)),
            ("c".to_string(), Some(0.03)),
            ("d".to_string(), None),
        ];
        let s = noise_split(&clips, 0.03);
        assert_eq!(s.low, ["a"]);
        assert_eq!(s.high, ["b", "c"]);
        assert_eq!(s.undetermined, ["d"]);
    }

    fn raw(indices: &[i64]) -> RawTrack {
        RawTrack {
            track_id: "r".into(),
            video_id: "v".into(),
            fps: 25.0,
            height: 1,
            width: 1,
            detections: indices
                .iter()
                .map(|&i| Detection {
                    frame_index: i,
                    bbox: [i as f64, 0.0, i as f64 + 10.0, 10.0],
                    pixels: vec![i as f32 / 100.0],
                    label: i % 2 == 0,
                })
                .collect(),
        }
    }

    #[test]
    fn track_length_filter() {
        assert!(filter_and_interpolate(&[raw(&[0, 1])], 0.2).is_empty());
        assert_eq!(filter_and_interpolate(&[raw(&[0, 1, 2, 3, 4])], 0.2).len(), 1);
    }

    #[test]
    fn interior_gap_is_filled() {
        let out = filter_and_interpolate(&[raw(&[0, 1, 3, 4, 5])], 0.2);
        let t = &out[0];
        assert_eq!(t.track.num_frames, 6);
        assert_eq!(t.boxes[2][0], 2.0);
        t.track.validate().unwrap();
    }
}
