//! Evaluation protocols: ranked mAP on synchronized data, per-frame
//! accuracy on audio-swapped and audio-delayed data, and accuracy split by
//! background-noise level.
//!
//! Report schema (JSON):
//!
//! ```text
//! {
//!   "protocol": "standard" | "swap" | "shift" | "noise_split",
//!   "with_lte": bool,
//!   "tracks": int, "frames": int,
//!   "subsets": [
//!     { "name": str, "tracks": int, "frames": int,
//!       "map": float | null, "accuracy": float,
//!       "not_speaking_recall": float | null }
//!   ],
//!   "undetermined": [track_id],        // noise_split only
//!   "config": { "protocol", "delays", "rms_threshold", "with_lte", "seed" }
//! }
//! ```

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::compute_mel;
use crate::curation::{clip_background_rms, noise_split, CurationConfig};
use crate::data::{CorpusEntry, FramePredictions, Waveform};
use crate::error::{Error, Result};
use crate::model::{AsdModel, TrackTensors};
use crate::scalar::Scalar;

pub const SPEAKING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Standard,
    Swap,
    Shift,
    NoiseSplit,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "swap" => Ok(Self::Swap),
            "shift" => Ok(Self::Shift),
            "noise-split" | "noise_split" => Ok(Self::NoiseSplit),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Audio delays in seconds for the shift protocol.
    pub delays: Vec<f64>,
    pub rms_threshold: f64,
    /// Feed landmarks to the model when it has a landmark branch.
    pub with_lte: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Standard,
            delays: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            rms_threshold: 0.03,
            with_lte: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub name: String,
    pub tracks: usize,
    pub frames: usize,
    pub map: Option<f64>,
    pub accuracy: f64,
    pub not_speaking_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub with_lte: bool,
    pub tracks: usize,
    pub frames: usize,
    pub subsets: Vec<SubsetMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undetermined: Vec<String>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn subset(&self, name: &str) -> Option<&SubsetMetrics> {
        self.subsets.iter().find(|s| s.name == name)
    }
}

/// Average precision over the score-ranked frames, ties kept in input
/// order, precision taken raw at each positive.
pub fn mean_average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Protocol(
            "mAP is undefined without positive frames; use per-frame accuracy instead".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Fraction of frames whose speaking decision matches the label.
pub fn per_frame_accuracy(preds: &[FramePredictions], labels: &[Vec<bool>]) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for (p, l) in preds.iter().zip(labels) {
        for (s, &y) in p.speaking_scores().iter().zip(l) {
            correct += usize::from((*s >= SPEAKING_THRESHOLD) == y);
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}

fn not_speaking_recall(preds: &[FramePredictions], labels: &[Vec<bool>]) -> Option<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for (p, l) in preds.iter().zip(labels) {
        for (s, &y) in p.speaking_scores().iter().zip(l) {
            if !y {
                correct += usize::from(*s < SPEAKING_THRESHOLD);
                total += 1;
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Repeats or truncates `donor` to `len` samples.
fn tile(donor: &[f32], len: usize) -> Vec<f32> {
    if donor.is_empty() {
        return vec![0.0; len];
    }
    donor.iter().copied().cycle().take(len).collect()
}

/// Replaces every track's audio with that of a uniformly chosen track from
/// another video, tiled or cut to the original length, and marks every
/// frame not-speaking.
pub fn swap_audio(corpus: &[CorpusEntry], rng: &mut impl Rng) -> Result<Vec<CorpusEntry>> {
    let videos: BTreeSet<&str> = corpus.iter().map(|e| e.track.video_id.as_str()).collect();
    if videos.len() < 2 {
        return Err(Error::Protocol("audio swap needs at least two videos".into()));
    }
    corpus
        .iter()
        .map(|e| {
            let donors: Vec<&CorpusEntry> = corpus
                .iter()
                .filter(|d| d.track.video_id != e.track.video_id)
                .collect();
            let donor = donors[rng.random_range(0..donors.len())];
            if donor.audio.sample_rate != e.audio.sample_rate {
                return Err(Error::track(&e.track.track_id, "swap donor has a different sample rate"));
            }
            let mut out = e.clone();
            out.audio.samples = tile(&donor.audio.samples, e.audio.samples.len());
            out.track.labels.iter_mut().for_each(|l| *l = false);
            Ok(out)
        })
        .collect()
}

/// Delays `audio` by `delay` seconds of leading zeros, keeping its length.
pub fn shift_audio(audio: &Waveform, delay: f64) -> Result<Waveform> {
    if !(delay >= 0.0) {
        return Err(Error::Protocol(format!("audio delay must be non-negative, got {delay}")));
    }
    if delay > audio.duration() {
        return Err(Error::Protocol(format!(
            "audio delay {delay} s exceeds the {} s clip",
            audio.duration()
        )));
    }
    let n = audio.samples.len();
    let pad = ((delay * f64::from(audio.sample_rate)).round() as usize).min(n);
    let mut samples = vec![0.0; pad];
    samples.extend_from_slice(&audio.samples[..n - pad]);
    Ok(Waveform {
        samples,
        sample_rate: audio.sample_rate,
    })
}

/// Delayed copy of the corpus with every frame marked not-speaking.
pub fn shift_corpus(corpus: &[CorpusEntry], delay: f64) -> Result<Vec<CorpusEntry>> {
    corpus
        .iter()
        .map(|e| {
            let mut out = e.clone();
            out.audio = shift_audio(&e.audio, delay).map_err(|err| Error::track(&e.track.track_id, err.to_string()))?;
            out.track.labels.iter_mut().for_each(|l| *l = false);
            Ok(out)
        })
        .collect()
}

/// Runs the model over every track, in parallel, preserving order.
pub fn predict_corpus<S: Scalar>(model: &AsdModel<S>, corpus: &[CorpusEntry], with_lte: bool) -> Result<Vec<FramePredictions>> {
    let n_mels = model.config.audio.n_mels;
    corpus
        .par_iter()
        .map(|e| {
            let mel = compute_mel(&e.audio, &e.track, n_mels)?;
            let input = TrackTensors::new(&e.track, &mel)?;
            let lips = (with_lte && model.uses_landmarks()).then_some(&e.lips);
            model
                .predict(&input, lips)
                .map_err(|err| Error::track(&e.track.track_id, err.to_string()))
        })
        .collect()
}

fn subset_metrics(name: &str, preds: &[FramePredictions], labels: &[Vec<bool>], want_map: bool) -> Result<SubsetMetrics> {
    let map = if want_map {
        let scores: Vec<f64> = preds.iter().flat_map(|p| p.speaking_scores()).collect();
        let flat: Vec<bool> = labels.iter().flatten().copied().collect();
        Some(mean_average_precision(&scores, &flat)?)
    } else {
        None
    };
    Ok(SubsetMetrics {
        name: name.to_string(),
        tracks: preds.len(),
        frames: labels.iter().map(Vec::len).sum(),
        map,
        accuracy: per_frame_accuracy(preds, labels),
        not_speaking_recall: not_speaking_recall(preds, labels),
    })
}

fn labels_of(corpus: &[CorpusEntry]) -> Vec<Vec<bool>> {
    corpus.iter().map(|e| e.track.labels.clone()).collect()
}

/// Runs `cfg.protocol` over `corpus`. The noise split measures background
/// RMS with the VAD settings of `curation` and the threshold of `cfg`.
pub fn evaluate<S: Scalar>(
    model: &AsdModel<S>,
    corpus: &[CorpusEntry],
    cfg: &EvalConfig,
    curation: &CurationConfig,
) -> Result<EvalReport> {
    let mut undetermined = Vec::new();
    let subsets = match cfg.protocol {
        Protocol::Standard => {
            let preds = predict_corpus(model, corpus, cfg.with_lte)?;
            vec![subset_metrics("all", &preds, &labels_of(corpus), true)?]
        }
        Protocol::Swap => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let swapped = swap_audio(corpus, &mut rng)?;
            let preds = predict_corpus(model, &swapped, cfg.with_lte)?;
            vec![subset_metrics("swap", &preds, &labels_of(&swapped), false)?]
        }
        Protocol::Shift => {
            if cfg.delays.is_empty() {
                return Err(Error::Config("shift protocol needs at least one delay".into()));
            }
            cfg.delays
                .iter()
                .map(|&d| {
                    let shifted = shift_corpus(corpus, d)?;
                    let preds = predict_corpus(model, &shifted, cfg.with_lte)?;
                    subset_metrics(&format!("delay_{d:.2}"), &preds, &labels_of(&shifted), false)
                })
                .collect::<Result<Vec<_>>>()?
        }
        Protocol::NoiseSplit => {
            let rms: Vec<(String, Option<f64>)> = corpus
                .par_iter()
                .map(|e| (e.track.track_id.clone(), clip_background_rms(&e.audio, curation)))
                .collect();
            let split = noise_split(&rms, cfg.rms_threshold);
            undetermined = split.undetermined.clone();
            let preds = predict_corpus(model, corpus, cfg.with_lte)?;
            let mut out = Vec::new();
            for (name, ids) in [("low", &split.low), ("high", &split.high)] {
                let members: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
                let (p, l): (Vec<_>, Vec<_>) = corpus
                    .iter()
                    .zip(&preds)
                    .filter(|(e, _)| members.contains(e.track.track_id.as_str()))
                    .map(|(e, p)| (p.clone(), e.track.labels.clone()))
                    .unzip();
                let has_positive = l.iter().flatten().any(|&y| y);
                out.push(subset_metrics(name, &p, &l, has_positive)?);
            }
            out
        }
    };
    Ok(EvalReport {
        protocol: cfg.protocol,
        with_lte: cfg.with_lte,
        tracks: corpus.len(),
        frames: corpus.iter().map(|e| e.track.num_frames).sum(),
        subsets,
        undetermined,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_small_cases() {
        assert_eq!(mean_average_precision(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(mean_average_precision(&[0.1, 0.9], &[true, false]).unwrap(), 0.5);
        assert!(matches!(
            mean_average_precision(&[0.5], &[false]),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(mean_average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(mean_average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    fn preds(scores: &[f64]) -> FramePredictions {
        let rows: Vec<[f64; 2]> = scores.iter().map(|&s| [1.0 - s, s]).collect();
        FramePredictions {
            probs_av: rows.clone(),
            probs_v: rows.clone(),
            probs_a: rows,
        }
    }

    #[test]
    fn accuracy_threshold_and_arithmetic() {
        assert_eq!(per_frame_accuracy(&[preds(&[0.5])], &[vec![true]]), 1.0);
        let acc = per_frame_accuracy(&[preds(&[0.9, 0.2, 0.7])], &[vec![true, false, false]]);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shift_contract() {
        let w = Waveform {
            samples: (0..1600).map(|i| i as f32).collect(),
            sample_rate: 16000,
        };
        assert_eq!(shift_audio(&w, 0.0).unwrap(), w);
        let s = shift_audio(&w, 0.01).unwrap();
        assert_eq!(s.samples.len(), w.samples.len());
        assert_eq!(s.samples[160], 0.0);
        assert_eq!(s.samples[161], 1.0);
        assert!(shift_audio(&w, 0.2).is_err());
        assert!(shift_audio(&w, -0.1).is_err());
    }
}
