//! Dual-pass training.
//!
//! Every track goes through the network twice with shared weights: once
//! with its lip maps and once landmark-free. The detection loss is taken on
//! the lip-aware pass (optionally on both), and the consistency term pulls
//! the landmark-free audiovisual head toward the detached lip-aware one.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::compute_mel;
use crate::autograd::Graph;
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
use crate::data::{CorpusEntry, FaceTrack, LipTrack, Waveform};
use crate::error::{Error, Result};
use crate::losses::{asd_loss_graph, consistency_graph, LossConfig};
use crate::model::{AsdModel, LipCondition, ModelConfig, TrackTensors};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsdLossTarget {
    LipAware,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop_resize: bool,
    pub rotation: bool,
    pub audio_mix: bool,
    pub flip_probability: f64,
    /// Smallest crop side relative to the frame.
    pub min_crop_scale: f64,
    pub max_rotation_deg: f64,
    pub mix_probability: f64,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            crop_resize: true,
            rotation: true,
            audio_mix: true,
            flip_probability: 0.5,
            min_crop_scale: 0.85,
            max_rotation_deg: 10.0,
            mix_probability: 0.5,
            snr_db_min: 0.0,
            snr_db_max: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_per_epoch: f64,
    pub epochs: usize,
    pub batch_tracks: usize,
    pub seed: u64,
    pub max_track_len: usize,
    /// Train the landmark-free pass toward the lip-aware one.
    pub consistency: bool,
    pub asd_loss_target: AsdLossTarget,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            lr_decay_per_epoch: 0.995,
            epochs: 5,
            batch_tracks: 4,
            seed: 0,
            max_track_len: 200,
            consistency: true,
            asd_loss_target: AsdLossTarget::LipAware,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config("lr_decay_per_epoch must lie in (0, 1]".into()));
        }
        if self.batch_tracks == 0 || self.max_track_len == 0 {
            return Err(Error::Config("batch_tracks and max_track_len must be positive".into()));
        }
        let a = &self.augment;
        if a.min_crop_scale <= 0.0 || a.min_crop_scale > 1.0 || a.snr_db_min > a.snr_db_max {
            return Err(Error::Config("invalid augmentation ranges".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

/// A similarity transform of the crop, acting on pixel-center coordinates:
/// `p' = A p + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometric {
    pub a: [[f64; 2]; 2],
    pub b: [f64; 2],
}

impl Geometric {
    pub fn identity() -> Self {
        Self {
            a: [[1.0, 0.0], [0.0, 1.0]],
            b: [0.0, 0.0],
        }
    }

    pub fn flip(width: usize) -> Self {
        Self {
            a: [[-1.0, 0.0], [0.0, 1.0]],
            b: [width as f64, 0.0],
        }
    }

    /// Crops the square `[x0, x0 + side) x [y0, y0 + side)` and resizes it to
    /// `size x size`.
    pub fn crop_resize(x0: f64, y0: f64, side: f64, size: usize) -> Self {
        let s = size as f64 / side;
        Self {
            a: [[s, 0.0], [0.0, s]],
            b: [-x0 * s, -y0 * s],
        }
    }

    /// Rotation by `deg` degrees about the crop center.
    pub fn rotation(deg: f64, size: usize) -> Self {
        if deg == 0.0 {
            return Self::identity();
        }
        let (s, c) = deg.to_radians().sin_cos();
        let m = size as f64 / 2.0;
        Self {
            a: [[c, -s], [s, c]],
            b: [m - c * m + s * m, m - s * m - c * m],
        }
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Geometric) -> Geometric {
        let (p, q) = (&self.a, &first.a);
        let a = [
            [p[0][0] * q[0][0] + p[0][1] * q[1][0], p[0][0] * q[0][1] + p[0][1] * q[1][1]],
            [p[1][0] * q[0][0] + p[1][1] * q[1][0], p[1][0] * q[0][1] + p[1][1] * q[1][1]],
        ];
        let b = [
            p[0][0] * first.b[0] + p[0][1] * first.b[1] + self.b[0],
            p[1][0] * first.b[0] + p[1][1] * first.b[1] + self.b[1],
        ];
        Geometric { a, b }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a[0][0] * x + self.a[0][1] * y + self.b[0],
            self.a[1][0] * x + self.a[1][1] * y + self.b[1],
        )
    }

    fn inverse(&self) -> Geometric {
        let a = &self.a;
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        let b = [
            -(inv[0][0] * self.b[0] + inv[0][1] * self.b[1]),
            -(inv[1][0] * self.b[0] + inv[1][1] * self.b[1]),
        ];
        Geometric { a: inv, b }
    }

    /// Maps an integer landmark index through the transform and rounds.
    pub fn map_landmark(&self, x: i32, y: i32) -> (i32, i32) {
        let (u, v) = self.apply(f64::from(x) + 0.5, f64::from(y) + 0.5);
        ((u - 0.5).round() as i32, (v - 0.5).round() as i32)
    }

    pub fn map_lips(&self, lips: &LipTrack) -> LipTrack {
        LipTrack {
            num_landmarks: lips.num_landmarks,
            frames: lips
                .frames
                .iter()
                .map(|f| f.as_ref().map(|pts| pts.iter().map(|&(x, y)| self.map_landmark(x, y)).collect()))
                .collect(),
        }
    }

    /// Resamples every frame bilinearly, replicating border pixels.
    pub fn warp_frames(&self, track: &FaceTrack) -> FaceTrack {
        let (h, w) = (track.height, track.width);
        let inv = self.inverse();
        let mut frames = Vec::with_capacity(track.frames.len());
        for t in 0..track.num_frames {
            let src = track.frame(t);
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
                    frames.push(bilinear(src, h, w, u - 0.5, v - 0.5));
                }
            }
        }
        FaceTrack {
            frames,
            ..track.clone()
        }
    }
}

fn bilinear(src: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| f64::from(src[yy * w + xx]);
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0) as f32
}

fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Adds `donor`, tiled or truncated to length, at `snr_db` below `audio`.
pub fn mix_audio(audio: &Waveform, donor: &Waveform, snr_db: f64) -> Waveform {
    let reference = rms(&audio.samples).max(0.01);
    let donor_rms = rms(&donor.samples);
    if donor.samples.is_empty() || donor_rms == 0.0 {
        return audio.clone();
    }
    let gain = reference / donor_rms / 10f64.powf(snr_db / 20.0);
    let samples = audio
        .samples
        .iter()
        .enumerate()
        .map(|(i, &s)| (f64::from(s) + gain * f64::from(donor.samples[i % donor.samples.len()])) as f32)
        .collect();
    Waveform {
        samples,
        sample_rate: audio.sample_rate,
    }
}

/// Random geometric and audio augmentation of one track.
pub fn augment(
    track: &FaceTrack,
    lips: &LipTrack,
    audio: &Waveform,
    donor: Option<&Waveform>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (FaceTrack, LipTrack, Waveform) {
    let size = track.width;
    let mut geo = Geometric::identity();
    if cfg.flip && rng.random_bool(cfg.flip_probability) {
        geo = Geometric::flip(size);
    }
    if cfg.crop_resize {
        let side = rng.random_range(cfg.min_crop_scale..=1.0) * size as f64;
        let slack = size as f64 - side;
        let (x0, y0) = (rng.random_range(0.0..=slack), rng.random_range(0.0..=slack));
        geo = Geometric::crop_resize(x0, y0, side, size).after(&geo);
    }
    if cfg.rotation && cfg.max_rotation_deg > 0.0 {
        let deg = rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg);
        geo = Geometric::rotation(deg, size).after(&geo);
    }
    let (track, lips) = if geo == Geometric::identity() {
        (track.clone(), lips.clone())
    } else {
        (geo.warp_frames(track), geo.map_lips(lips))
    };
    let audio = match donor {
        Some(d) if cfg.audio_mix && rng.random_bool(cfg.mix_probability) => {
            let snr = rng.random_range(cfg.snr_db_min..=cfg.snr_db_max);
            mix_audio(audio, d, snr)
        }
        _ => audio.clone(),
    };
    (track, lips, audio)
}

/// One prepared training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub track_id: String,
    pub tensors: TrackTensors<f32>,
    pub lips: LipTrack,
    pub labels: Vec<bool>,
}

impl Sample {
    pub fn new(track: &FaceTrack, lips: &LipTrack, audio: &Waveform, n_mels: usize) -> Result<Self> {
        let mel = compute_mel(audio, track, n_mels)?;
        Ok(Self {
            track_id: track.track_id.clone(),
            tensors: TrackTensors::new(track, &mel)?,
            lips: lips.clone(),
            labels: track.labels.clone(),
        })
    }
}

/// Loss sums over a sample's frames and the gradient of their weighted
/// total, indexed by parameter.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub frames: usize,
    pub l_asd: f64,
    pub l_v: f64,
    pub l_a: f64,
    pub l_av: f64,
    pub l_consistency: f64,
    pub consistency_applied: bool,
    pub grads: Vec<Option<Tensor<f32>>>,
}

/// Builds both passes for one sample and backpropagates the summed loss.
pub fn sample_gradients(
    model: &AsdModel<f32>,
    sample: &Sample,
    loss: &LossConfig,
    train: &TrainConfig,
) -> Result<SampleOutput> {
    let mut g = Graph::new();
    let x = &sample.tensors;
    let frames = g.constant(x.frames.clone());
    let mel = g.constant(x.mel.clone());
    let stem = model.visual_stem(&mut g, frames);
    let fa = model.audio_graph(&mut g, mel)?;
    let maps = model.lip_channels(&mut g, &sample.lips)?;
    let fv_lip = model.visual_from_stem(&mut g, stem, maps, LipCondition::Track(&sample.lips))?;
    let heads_lip = model.context_graph(&mut g, fv_lip, fa)?;
    let asd = asd_loss_graph(&mut g, heads_lip, &sample.labels, loss);
    let mut total = asd.total;

    let distinct = model.uses_landmarks() && !sample.lips.all_absent();
    let consistency_applied = train.consistency && distinct;
    let wants_free = consistency_applied || (train.asd_loss_target == AsdLossTarget::Both && distinct);
    let mut cons_value = 0.0;
    if wants_free {
        let fv_free = model.visual_from_stem(&mut g, stem, None, LipCondition::Free)?;
        let heads_free = model.context_graph(&mut g, fv_free, fa)?;
        if train.asd_loss_target == AsdLossTarget::Both {
            let free = asd_loss_graph(&mut g, heads_free, &sample.labels, loss);
            total = g.add(total, free.total);
        }
        if consistency_applied {
            let cons = consistency_graph(&mut g, heads_free.av, heads_lip.av);
            cons_value = f64::from(g.value(cons).data()[0]);
            let weighted = g.scale(cons, loss.lambda_c as f32);
            total = g.add(total, weighted);
        }
    } else if train.asd_loss_target == AsdLossTarget::Both {
        // both passes coincide
        total = g.scale(total, 2.0);
    }
    let scalar = |v| f64::from(g.value(v).data()[0]);
    let out_total = scalar(total);
    if !out_total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss on track {}", sample.track_id)));
    }
    let grads_raw = g.backward(total);
    let mut grads = vec![None; model.params.len()];
    for (id, t) in grads_raw.params() {
        grads[id.0] = Some(t.clone());
    }
    Ok(SampleOutput {
        frames: sample.labels.len(),
        l_asd: scalar(asd.total),
        l_v: scalar(asd.l_v),
        l_a: scalar(asd.l_a),
        l_av: scalar(asd.l_av),
        l_consistency: cons_value,
        consistency_applied,
        grads,
    })
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub steps: u64,
}

impl Adam {
    pub fn new(model: &AsdModel<f32>) -> Self {
        let zeros: Vec<_> = model.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn update(&mut self, model: &mut AsdModel<f32>, grads: &[Option<Tensor<f32>>], lr: f64, cfg: &TrainConfig) {
        self.steps += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.0] else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = model.params.get_mut(id);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gd = f64::from(gv);
                let mn = b1 * f64::from(*mv) + (1.0 - b1) * gd;
                let vn = b2 * f64::from(*vv) + (1.0 - b2) * gd * gd;
                *mv = mn as f32;
                *vv = vn as f32;
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + cfg.adam_eps);
                *pv = (f64::from(*pv) - step) as f32;
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub l_asd: f64,
    pub l_v: f64,
    pub l_a: f64,
    pub l_av: f64,
    pub l_consistency: f64,
    pub lr: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: AsdModel<f32>,
    pub adam: Adam,
    pub step: u64,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub loss: LossConfig,
    pub config: TrainConfig,
}

impl TrainState {
    pub fn new(model_cfg: ModelConfig, loss: LossConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let model = AsdModel::new(model_cfg, config.seed)?;
        let adam = Adam::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            adam,
            step: 0,
            epoch: 0,
            rng,
            loss,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.model.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for ((_, n, _), t) in self.model.params.iter().zip(moments) {
                tensors.push((format!("adam.{kind}.{n}"), t.clone()));
            }
        }
        let header = CheckpointHeader {
            model: self.model.config.clone(),
            loss: self.loss,
            train: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            seed: self.config.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            adam_steps: self.adam.steps,
            tensors: Vec::new(),
        };
        save_checkpoint(path, header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let h = &ck.header;
        let model = ck.model::<f32>()?;
        let mut adam = Adam::new(&model);
        adam.steps = h.adam_steps;
        for (i, (_, n, t)) in model.params.iter().enumerate() {
            for (kind, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("adam.{kind}.{n}");
                let src = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Data(format!("{key} has the wrong shape")));
                }
                *dst = src.clone();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h.seed);
        rng.set_stream(1);
        let pos: u128 = h
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Data("bad random stream position in checkpoint".into()))?;
        rng.set_word_pos(pos);
        Ok(Self {
            model,
            adam,
            step: h.step,
            epoch: h.epoch,
            rng,
            loss: h.loss,
            config: h.train.clone(),
        })
    }
}

/// Where training writes checkpoints and the metrics log.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    /// First line of a fresh metrics log.
    pub header: serde_json::Value,
}

pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:03}.lsck"))
}

/// Truncates long tracks to a random window of `max_len` frames.
fn window(entry: &CorpusEntry, max_len: usize, rng: &mut impl Rng) -> (FaceTrack, LipTrack, Waveform) {
    let t = entry.track.num_frames;
    if t <= max_len {
        return (entry.track.clone(), entry.lips.clone(), entry.audio.clone());
    }
    let start = rng.random_range(0..=t - max_len);
    let track = entry.track.window(start, max_len);
    let per_frame = f64::from(entry.audio.sample_rate) / entry.track.fps;
    let a = ((start as f64 * per_frame).round() as usize).min(entry.audio.samples.len());
    let b = (((start + max_len) as f64 * per_frame).round() as usize).min(entry.audio.samples.len());
    let audio = Waveform {
        samples: entry.audio.samples[a..b].to_vec(),
        sample_rate: entry.audio.sample_rate,
    };
    (track, entry.lips.window(start, max_len), audio)
}

fn prepare_batch(state: &mut TrainState, corpus: &[CorpusEntry], indices: &[usize]) -> Result<Vec<Sample>> {
    let n_mels = state.model.config.audio.n_mels;
    let cfg = state.config.clone();
    indices
        .iter()
        .map(|&i| {
            let rng = &mut state.rng;
            let (track, lips, audio) = window(&corpus[i], cfg.max_track_len, rng);
            let donor = if corpus.len() > 1 {
                let mut j = rng.random_range(0..corpus.len() - 1);
                if j >= i {
                    j += 1;
                }
                Some(&corpus[j].audio)
            } else {
                None
            };
            let (track, lips, audio) = augment(&track, &lips, &audio, donor, &cfg.augment, rng);
            Sample::new(&track, &lips, &audio, n_mels)
        })
        .collect()
}

/// Forward, backward and one optimizer update over `samples`.
pub fn train_step(state: &mut TrainState, samples: &[Sample]) -> Result<StepRecord> {
    let lr = state.config.lr_at_epoch(state.epoch);
    let outputs: Vec<Result<SampleOutput>> = samples
        .par_iter()
        .map(|s| sample_gradients(&state.model, s, &state.loss, &state.config))
        .collect();
    let batch = || {
        let ids: Vec<_> = samples.iter().map(|s| s.track_id.as_str()).collect();
        format!("epoch {} step {} batch [{}]", state.epoch, state.step, ids.join(", "))
    };
    let outputs = outputs
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Numerical(format!("{}: {e}", batch())))?;
    let frames: usize = outputs.iter().map(|o| o.frames).sum();
    let norm = 1.0 / frames as f32;
    let mut grads: Vec<Option<Tensor<f32>>> = vec![None; state.model.params.len()];
    for o in &outputs {
        for (slot, g) in grads.iter_mut().zip(&o.grads) {
            if let Some(g) = g {
                match slot {
                    Some(acc) => acc.add_assign(g),
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }
    for g in grads.iter_mut().flatten() {
        g.scale_assign(norm);
        if !g.all_finite() {
            return Err(Error::Numerical(format!("{}: non-finite gradient", batch())));
        }
    }
    let cfg = state.config.clone();
    state.adam.update(&mut state.model, &grads, lr, &cfg);
    state.step += 1;
    let mean = |f: fn(&SampleOutput) -> f64| outputs.iter().map(f).sum::<f64>() / frames as f64;
    let cons_frames: usize = outputs.iter().filter(|o| o.consistency_applied).map(|o| o.frames).sum();
    let l_consistency = if cons_frames == 0 {
        0.0
    } else {
        outputs.iter().map(|o| o.l_consistency).sum::<f64>() / cons_frames as f64
    };
    Ok(StepRecord {
        epoch: state.epoch,
        step: state.step,
        l_asd: mean(|o| o.l_asd),
        l_v: mean(|o| o.l_v),
        l_a: mean(|o| o.l_a),
        l_av: mean(|o| o.l_av),
        l_consistency,
        lr,
    })
}

/// Runs one epoch, returning its step records.
pub fn train_epoch(state: &mut TrainState, corpus: &[CorpusEntry]) -> Result<Vec<StepRecord>> {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut state.rng);
    let batch = state.config.batch_tracks;
    let mut records = Vec::with_capacity(order.len().div_ceil(batch));
    for chunk in order.chunks(batch) {
        let samples = prepare_batch(state, corpus, chunk)?;
        records.push(train_step(state, &samples)?);
    }
    state.epoch += 1;
    Ok(records)
}

fn append_records(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Trains until `state.config.epochs` epochs are complete. With an output
/// directory, writes `checkpoint_epoch000.lsck` for a fresh state, one
/// checkpoint per finished epoch, and appends step records to the metrics
/// log.
pub fn train(state: &mut TrainState, corpus: &[CorpusEntry], output: Option<&TrainOutput>) -> Result<Vec<StepRecord>> {
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        if state.epoch == 0 && state.step == 0 {
            let mut line = serde_json::to_vec(&out.header)?;
            line.push(b'\n');
            let path = out.dir.join(METRICS_FILE);
            fs::write(&path, line).map_err(|e| Error::io(&path, e))?;
            state.save(&checkpoint_path(&out.dir, 0))?;
        }
    }
    let mut all = Vec::new();
    while state.epoch < state.config.epochs {
        let records = train_epoch(state, corpus)?;
        if let Some(out) = output {
            append_records(&out.dir.join(METRICS_FILE), &records)?;
            state.save(&checkpoint_path(&out.dir, state.epoch))?;
        }
        all.extend(records);
    }
    Ok(all)
}
