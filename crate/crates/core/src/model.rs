//! The audiovisual reference network.
//!
//! Visual path: a 3D convolution stem at full crop resolution, residual
//! stages that halve the resolution, average pooling onto a small grid
//! that keeps the coarse layout, a projection to `D`
//! and a dilated temporal convolution stack. Lip maps enter as `2S` extra
//! channels at the input of a chosen stage. Audio path: strided temporal
//! convolutions reducing `4T` mel rows to `T` embeddings. Both feed a small
//! attention context module with three classifier heads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv1dGeom, ConvGeom, Graph, Var};
use crate::data::{FaceTrack, FramePredictions, LipTrack, MelSpectrogram, DEFAULT_CROP_SIZE, DEFAULT_LANDMARKS};
use crate::error::{Error, Result};
use crate::lip::{
    encode_lip_landmarks, pooling_positions, AggregatedLipMaps, LandmarkPooling, LdiEncoder, LipAggregator,
    DEFAULT_AGGREGATED_CHANNELS,
};
use crate::nn::{Conv, Conv1d, Init, LayerNorm, Linear, ParamId, ParamStore, SelfAttention};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualEncoderConfig {
    pub conv3d_out_channels: usize,
    /// Temporal extent of the stem kernel.
    pub stem_temporal_kernel: usize,
    /// Spatial extent of the stem kernel.
    pub stem_kernel: usize,
    pub resnet_stage_widths: Vec<usize>,
    pub vtcn_blocks: usize,
    pub embed_dim: usize,
    /// Lip maps join the input of this residual stage (1-based).
    pub lip_injection_stage: usize,
    /// Side of the spatial grid the last stage is pooled to before the
    /// embedding; 1 is global average pooling.
    pub pool_grid: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        Self {
            conv3d_out_channels: 16,
            stem_temporal_kernel: 3,
            stem_kernel: 3,
            resnet_stage_widths: vec![16, 32],
            vtcn_blocks: 3,
            embed_dim: 64,
            lip_injection_stage: 1,
            pool_grid: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioEncoderConfig {
    pub embed_dim: usize,
    pub n_mels: usize,
    /// Multiplier applied to log-mel inputs.
    pub input_scale: f64,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_mels: crate::audio::DEFAULT_N_MELS,
            input_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextModuleConfig {
    pub heads: usize,
    pub hidden_dim: usize,
    pub positional_encoding: bool,
    /// Extent of the short-range temporal convolution over fused features.
    pub local_kernel: usize,
}

impl Default for ContextModuleConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            hidden_dim: 64,
            positional_encoding: true,
            local_kernel: 5,
        }
    }
}

/// How lip landmarks reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LipIntegration {
    /// Landmark-free network.
    None,
    /// Encoded lip maps concatenated into the visual backbone.
    Laser,
    /// Features gathered at landmark positions.
    Pooling,
    /// Convolutions over raw coordinates.
    Ldi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub crop_size: usize,
    pub landmarks: usize,
    pub aggregated_channels: usize,
    pub integration: LipIntegration,
    pub ldi_widths: Vec<usize>,
    pub visual: VisualEncoderConfig,
    pub audio: AudioEncoderConfig,
    pub context: ContextModuleConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            crop_size: DEFAULT_CROP_SIZE,
            landmarks: DEFAULT_LANDMARKS,
            aggregated_channels: DEFAULT_AGGREGATED_CHANNELS,
            integration: LipIntegration::Laser,
            ldi_widths: vec![16, 16],
            visual: VisualEncoderConfig::default(),
            audio: AudioEncoderConfig::default(),
            context: ContextModuleConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let v = &self.visual;
        let positive = [
            ("crop_size", self.crop_size),
            ("landmarks", self.landmarks),
            ("aggregated_channels", self.aggregated_channels),
            ("conv3d_out_channels", v.conv3d_out_channels),
            ("stem_kernel", v.stem_kernel),
            ("stem_temporal_kernel", v.stem_temporal_kernel),
            ("embed_dim", v.embed_dim),
            ("pool_grid", v.pool_grid),
            ("audio.embed_dim", self.audio.embed_dim),
            ("n_mels", self.audio.n_mels),
            ("heads", self.context.heads),
            ("hidden_dim", self.context.hidden_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if v.resnet_stage_widths.is_empty() || v.resnet_stage_widths.contains(&0) {
            return Err(Error::Config("resnet_stage_widths must be nonempty and positive".into()));
        }
        if v.stem_kernel % 2 == 0 || v.stem_temporal_kernel % 2 == 0 || self.context.local_kernel % 2 == 0 {
            return Err(Error::Config("stem and context kernels must be odd".into()));
        }
        if !(1..=v.resnet_stage_widths.len()).contains(&v.lip_injection_stage) {
            return Err(Error::Config(format!(
                "lip_injection_stage {} outside 1..={}",
                v.lip_injection_stage,
                v.resnet_stage_widths.len()
            )));
        }
        let fs = self.final_feature_size();
        if fs == 0 || fs % v.pool_grid != 0 {
            return Err(Error::Config(format!(
                "pool_grid {} must divide the final feature map side {fs}",
                v.pool_grid
            )));
        }
        if self.context.hidden_dim % self.context.heads != 0 {
            return Err(Error::Config("context hidden_dim must be divisible by heads".into()));
        }
        if self.integration == LipIntegration::Ldi && self.ldi_widths.is_empty() {
            return Err(Error::Config("ldi_widths must be nonempty".into()));
        }
        Ok(())
    }

    /// Side of the last residual stage's output.
    pub fn final_feature_size(&self) -> usize {
        self.visual
            .resnet_stage_widths
            .iter()
            .fold(self.crop_size, |s, _| s.div_ceil(2))
    }

    /// Channels entering each residual stage.
    pub fn stage_input_channels(&self) -> Vec<usize> {
        let v = &self.visual;
        let lip = if self.integration == LipIntegration::Laser {
            2 * self.aggregated_channels
        } else {
            0
        };
        let mut prev = v.conv3d_out_channels;
        v.resnet_stage_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = prev + if i + 1 == v.lip_injection_stage { lip } else { 0 };
                prev = w;
                c
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BasicBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl BasicBlock {
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, x: Var) -> Var {
        let h = self.conv1.forward(g, p, x);
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, p, x),
            None => x,
        };
        let y = g.add(h, skip);
        g.relu(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContextModule {
    in_v: Linear,
    in_a: Linear,
    norm_v: LayerNorm,
    attn_v: SelfAttention,
    norm_a: LayerNorm,
    attn_a: SelfAttention,
    fuse: Linear,
    norm_p: LayerNorm,
    pre_in: Linear,
    pre_out: Linear,
    norm_l: LayerNorm,
    local: Conv1d,
    norm_c: LayerNorm,
    attn_c: SelfAttention,
    norm_f: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    head_av: Linear,
    head_v: Linear,
    head_a: Linear,
}

/// Softmax outputs of the three heads, each `[T, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub av: Var,
    pub v: Var,
    pub a: Var,
}

/// Lip information for one visual pass.
#[derive(Debug, Clone, Copy)]
pub enum LipCondition<'a> {
    /// Landmark-free pass.
    Free,
    Track(&'a LipTrack),
}

/// The reference network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AsdModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    stem: Conv,
    stages: Vec<BasicBlock>,
    embed: Linear,
    vtcn: Vec<Conv1d>,
    visual_norm: LayerNorm,
    lte: Option<(ParamId, ParamId)>,
    pooling: Option<LandmarkPooling>,
    ldi: Option<LdiEncoder>,
    audio: Vec<Conv1d>,
    context: ContextModule,
}

/// Zero mean, unit variance in place; flat planes only lose their mean.
fn standardize(plane: &mut [f32]) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = plane.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    for v in plane.iter_mut() {
        *v = ((f64::from(*v) - mean) * scale) as f32;
    }
}

/// Inputs of one track as tensors. Each frame is standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTensors<S> {
    /// `[T, 1, H, W]`.
    pub frames: Tensor<S>,
    /// `[4T, N]`.
    pub mel: Tensor<S>,
}

impl<S: Scalar> TrackTensors<S> {
    pub fn new(track: &FaceTrack, mel: &MelSpectrogram) -> Result<Self> {
        if mel.rows != 4 * track.num_frames {
            return Err(Error::Shape(format!(
                "mel has {} rows, track needs {}",
                mel.rows,
                4 * track.num_frames
            )));
        }
        let plane = track.height * track.width;
        let mut frames = track.frames.clone();
        for f in frames.chunks_mut(plane.max(1)) {
            standardize(f);
        }
        let mut values = mel.values.clone();
        for b in 0..mel.n_mels {
            let mean = (0..mel.rows).map(|r| f64::from(values[r * mel.n_mels + b])).sum::<f64>() / mel.rows.max(1) as f64;
            for r in 0..mel.rows {
                values[r * mel.n_mels + b] -= mean as f32;
            }
        }
        Ok(Self {
            frames: Tensor::from_f32(&[track.num_frames, 1, track.height, track.width], &frames),
            mel: Tensor::from_f32(&[mel.rows, mel.n_mels], &values),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }
}

impl<S: Scalar> AsdModel<S> {
    /// Builds the network with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let v = &config.visual;
        let stem = Conv::new(
            &mut init,
            "visual.stem",
            1,
            v.conv3d_out_channels,
            ConvGeom {
                kt: v.stem_temporal_kernel,
                kh: v.stem_kernel,
                kw: v.stem_kernel,
                pad: v.stem_kernel / 2,
                stride: 1,
            },
            true,
        );
        let inputs = config.stage_input_channels();
        let stages = v
            .resnet_stage_widths
            .iter()
            .zip(&inputs)
            .enumerate()
            .map(|(i, (&w, &c_in))| {
                let name = format!("visual.stage{}", i + 1);
                BasicBlock {
                    conv1: Conv::new(&mut init, &format!("{name}.conv1"), c_in, w, ConvGeom::spatial(3, 1, 2), true),
                    conv2: Conv::new(&mut init, &format!("{name}.conv2"), w, w, ConvGeom::spatial(3, 1, 1), true),
                    shortcut: Some(Conv::new(
                        &mut init,
                        &format!("{name}.shortcut"),
                        c_in,
                        w,
                        ConvGeom::spatial(1, 0, 2),
                        false,
                    )),
                }
            })
            .collect();
        let last = *v.resnet_stage_widths.last().unwrap();
        let d = v.embed_dim;
        let grid = v.pool_grid;
        let embed = Linear::new(&mut init, "visual.embed", last * grid * grid, d, true);
        let vtcn = (0..v.vtcn_blocks)
            .map(|i| {
                let dilation = 1 << i;
                Conv1d::new(
                    &mut init,
                    &format!("visual.vtcn{i}"),
                    d,
                    d,
                    Conv1dGeom {
                        k: 3,
                        stride: 1,
                        pad: dilation,
                        dilation,
                    },
                    true,
                )
            })
            .collect();
        let visual_norm = LayerNorm::new(&mut init, "visual.norm", d);
        let (k, s) = (config.landmarks, config.aggregated_channels);
        let (mut lte, mut pooling, mut ldi) = (None, None, None);
        match config.integration {
            LipIntegration::None => {}
            LipIntegration::Laser => {
                lte = Some((
                    init.normal("lte.weight_x", &[s, k], 1.0),
                    init.normal("lte.weight_y", &[s, k], 1.0),
                ));
            }
            LipIntegration::Pooling => {
                pooling = Some(LandmarkPooling::new(&mut init, "pooling", k, v.conv3d_out_channels, d));
            }
            LipIntegration::Ldi => {
                ldi = Some(LdiEncoder::new(&mut init, "ldi", k, &config.ldi_widths, d));
            }
        }
        let (n_mels, c) = (config.audio.n_mels, config.audio.embed_dim);
        let down = |k, pad, stride| Conv1dGeom {
            k,
            stride,
            pad,
            dilation: 1,
        };
        let audio = vec![
            Conv1d::new(&mut init, "audio.conv1", n_mels, c, down(3, 1, 2), true),
            Conv1d::new(&mut init, "audio.conv2", c, c, down(3, 1, 2), true),
            Conv1d::new(&mut init, "audio.conv3", c, c, down(3, 1, 1), true),
        ];
        let (h, heads) = (config.context.hidden_dim, config.context.heads);
        let context = ContextModule {
            in_v: Linear::new(&mut init, "context.in_v", d, h, true),
            in_a: Linear::new(&mut init, "context.in_a", c, h, true),
            norm_v: LayerNorm::new(&mut init, "context.norm_v", h),
            attn_v: SelfAttention::new(&mut init, "context.attn_v", h, heads),
            norm_a: LayerNorm::new(&mut init, "context.norm_a", h),
            attn_a: SelfAttention::new(&mut init, "context.attn_a", h, heads),
            fuse: Linear::new(&mut init, "context.fuse", 2 * h, h, true),
            norm_p: LayerNorm::new(&mut init, "context.norm_p", h),
            pre_in: Linear::new(&mut init, "context.pre_in", h, 2 * h, true),
            pre_out: Linear::new(&mut init, "context.pre_out", 2 * h, h, true),
            norm_l: LayerNorm::new(&mut init, "context.norm_l", h),
            local: Conv1d::new(
                &mut init,
                "context.local",
                h,
                h,
                Conv1dGeom {
                    k: config.context.local_kernel,
                    stride: 1,
                    pad: config.context.local_kernel / 2,
                    dilation: 1,
                },
                true,
            ),
            norm_c: LayerNorm::new(&mut init, "context.norm_c", h),
            attn_c: SelfAttention::new(&mut init, "context.attn_c", h, heads),
            norm_f: LayerNorm::new(&mut init, "context.norm_f", h),
            ffn_in: Linear::new(&mut init, "context.ffn_in", h, 2 * h, true),
            ffn_out: Linear::new(&mut init, "context.ffn_out", 2 * h, h, true),
            head_av: Linear::new(&mut init, "head.av", h, 2, true),
            head_v: Linear::new(&mut init, "head.v", h, 2, true),
            head_a: Linear::new(&mut init, "head.a", h, 2, true),
        };
        Ok(Self {
            config,
            params,
            stem,
            stages,
            embed,
            vtcn,
            visual_norm,
            lte,
            pooling,
            ldi,
            audio,
            context,
        })
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<T: Scalar>(&self) -> AsdModel<T> {
        AsdModel {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem,
            stages: self.stages.clone(),
            embed: self.embed,
            vtcn: self.vtcn.clone(),
            visual_norm: self.visual_norm,
            lte: self.lte,
            pooling: self.pooling.clone(),
            ldi: self.ldi.clone(),
            audio: self.audio.clone(),
            context: self.context.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// The aggregator weights, when the network uses encoded lip maps.
    pub fn aggregator(&self) -> Option<LipAggregator<S>> {
        self.lte.map(|(x, y)| LipAggregator {
            weights_x: self.params.get(x).clone(),
            weights_y: self.params.get(y).clone(),
        })
    }

    pub fn aggregator_params(&self) -> Option<(ParamId, ParamId)> {
        self.lte
    }

    /// Whether a lip track changes the network's output at all.
    pub fn uses_landmarks(&self) -> bool {
        self.config.integration != LipIntegration::None
    }

    fn check_track(&self, t: &TrackTensors<S>) -> Result<()> {
        let s = t.frames.shape();
        if s[0] == 0 {
            return Err(Error::Shape("track has no frames".into()));
        }
        let c = self.config.crop_size;
        if s[2] != c || s[3] != c {
            return Err(Error::Shape(format!("crop is {}x{}, model expects {c}x{c}", s[2], s[3])));
        }
        if t.mel.dim(1) != self.config.audio.n_mels {
            return Err(Error::Shape(format!(
                "mel has {} bins, model expects {}",
                t.mel.dim(1),
                self.config.audio.n_mels
            )));
        }
        if t.mel.dim(0) != 4 * s[0] {
            return Err(Error::Shape("mel rows must be 4T".into()));
        }
        Ok(())
    }

    /// Stem output `[T, C0, H, W]`, shared by both passes of a track.
    pub fn visual_stem(&self, g: &mut Graph<S>, frames: Var) -> Var {
        let x = self.stem.forward(g, &self.params, frames);
        g.relu(x)
    }

    /// Aggregated lip channels `[T, 2S, H, W]` for `lips`, or `None` when the
    /// network has no encoded lip maps.
    pub fn lip_channels(&self, g: &mut Graph<S>, lips: &LipTrack) -> Result<Option<Var>> {
        let Some((wx, wy)) = self.lte else { return Ok(None) };
        self.check_lips(lips)?;
        let c = self.config.crop_size;
        let maps = encode_lip_landmarks(lips, c, c)?;
        let wx = g.param(&self.params, wx);
        let wy = g.param(&self.params, wy);
        Ok(Some(g.lip_scatter(wx, wy, maps.plan)))
    }

    fn check_lips(&self, lips: &LipTrack) -> Result<()> {
        if lips.num_landmarks != self.config.landmarks {
            return Err(Error::Shape(format!(
                "lip track has {} landmarks, model expects {}",
                lips.num_landmarks, self.config.landmarks
            )));
        }
        Ok(())
    }

    /// Visual embeddings `[T, D]` from the stem output. `lip_maps` is the
    /// `[T, 2S, H, W]` channel block for encoded lip maps (zeros when
    /// `None`); `lips` feeds the pooling and coordinate baselines.
    pub fn visual_from_stem(
        &self,
        g: &mut Graph<S>,
        stem: Var,
        lip_maps: Option<Var>,
        lips: LipCondition<'_>,
    ) -> Result<Var> {
        let p = &self.params;
        let shape = g.shape(stem).to_vec();
        let (t, h, w) = (shape[0], shape[2], shape[3]);
        let injection = self.config.visual.lip_injection_stage;
        let mut x = stem;
        for (i, block) in self.stages.iter().enumerate() {
            if i + 1 == injection && self.lte.is_some() {
                let maps = match lip_maps {
                    Some(m) => m,
                    None => g.constant(Tensor::zeros(&[t, 2 * self.config.aggregated_channels, h, w])),
                };
                let factor = 1 << i;
                let maps = if factor > 1 { g.avg_pool(maps, factor) } else { maps };
                x = g.concat(&[x, maps], 1);
            }
            x = block.forward(g, p, x);
        }
        let factor = g.shape(x)[2] / self.config.visual.pool_grid;
        if factor > 1 {
            x = g.avg_pool(x, factor);
        }
        let xs = g.shape(x).to_vec();
        let pooled = g.reshape(x, &[xs[0], xs[1] * xs[2] * xs[3]]);
        let mut f = self.embed.forward(g, p, pooled);
        let lips = match lips {
            LipCondition::Free => None,
            LipCondition::Track(l) => {
                self.check_lips(l)?;
                Some(l)
            }
        };
        let absent = LipTrack::absent(t, self.config.landmarks);
        let lips = lips.unwrap_or(&absent);
        let c = self.config.crop_size;
        if let Some(pool) = &self.pooling {
            let positions = pooling_positions(lips, c, c, h, w);
            f = pool.forward(g, p, stem, Arc::new(positions), f);
        }
        if let Some(ldi) = &self.ldi {
            let grid = g.constant(LdiEncoder::coordinate_grid(lips, c, c));
            let enc = ldi.encode(g, p, grid);
            f = ldi.fuse(g, p, enc, f);
        }
        for conv in &self.vtcn {
            let y = conv.forward(g, p, f);
            let y = g.relu(y);
            f = g.add(f, y);
        }
        Ok(self.visual_norm.forward(g, p, f))
    }

    /// Audio embeddings `[T, C]` from `[4T, N]` mel rows.
    pub fn audio_graph(&self, g: &mut Graph<S>, mel: Var) -> Result<Var> {
        let rows = g.shape(mel)[0];
        if rows % 4 != 0 {
            return Err(Error::Shape(format!("{rows} mel rows is not a multiple of 4")));
        }
        let p = &self.params;
        let x = g.scale(mel, S::from_f64_lossy(self.config.audio.input_scale));
        let x = self.audio[0].forward(g, p, x);
        let x = g.relu(x);
        let x = self.audio[1].forward(g, p, x);
        let x = g.relu(x);
        let y = self.audio[2].forward(g, p, x);
        let y = g.relu(y);
        Ok(g.add(x, y))
    }

    /// Context module and heads over `f_v: [T, D]`, `f_a: [T, C]`.
    pub fn context_graph(&self, g: &mut Graph<S>, fv: Var, fa: Var) -> Result<Heads> {
        let (tv, ta) = (g.shape(fv)[0], g.shape(fa)[0]);
        if tv != ta {
            return Err(Error::Shape(format!("visual has {tv} frames, audio has {ta}")));
        }
        if g.shape(fv)[1] != self.config.visual.embed_dim || g.shape(fa)[1] != self.config.audio.embed_dim {
            return Err(Error::Shape("embedding width mismatch".into()));
        }
        let p = &self.params;
        let m = &self.context;
        let hdim = self.config.context.hidden_dim;
        let pe = self
            .config
            .context
            .positional_encoding
            .then(|| g.constant(sinusoidal_encoding(tv, hdim)));
        let embed = |g: &mut Graph<S>, lin: &Linear, x: Var| {
            let y = lin.forward(g, p, x);
            match pe {
                Some(pe) => g.add(y, pe),
                None => y,
            }
        };
        let sv = embed(g, &m.in_v, fv);
        let sa = embed(g, &m.in_a, fa);
        let attend = |g: &mut Graph<S>, norm: &LayerNorm, attn: &SelfAttention, x: Var| {
            let n = norm.forward(g, p, x);
            let a = attn.forward(g, p, n);
            g.add(x, a)
        };
        let sv = attend(g, &m.norm_v, &m.attn_v, sv);
        let sa = attend(g, &m.norm_a, &m.attn_a, sa);
        let cat = g.concat(&[sv, sa], 1);
        let ffn = |g: &mut Graph<S>, norm: &LayerNorm, up: &Linear, down: &Linear, x: Var| {
            let n = norm.forward(g, p, x);
            let h = up.forward(g, p, n);
            let h = g.relu(h);
            let y = down.forward(g, p, h);
            g.add(x, y)
        };
        let z = m.fuse.forward(g, p, cat);
        // per-frame agreement features before temporal pooling
        let z = ffn(g, &m.norm_p, &m.pre_in, &m.pre_out, z);
        let n = m.norm_l.forward(g, p, z);
        let l = m.local.forward(g, p, n);
        let l = g.relu(l);
        let z = g.add(z, l);
        let z = attend(g, &m.norm_c, &m.attn_c, z);
        let z = ffn(g, &m.norm_f, &m.ffn_in, &m.ffn_out, z);
        let mut head = |lin: &Linear, x: Var| {
            let logits = lin.forward(g, p, x);
            g.softmax(logits)
        };
        Ok(Heads {
            av: head(&m.head_av, z),
            v: head(&m.head_v, sv),
            a: head(&m.head_a, sa),
        })
    }

    /// One full pass over a track.
    pub fn forward(&self, g: &mut Graph<S>, input: &TrackTensors<S>, lips: LipCondition<'_>) -> Result<Heads> {
        self.check_track(input)?;
        let frames = g.constant(input.frames.clone());
        let mel = g.constant(input.mel.clone());
        let stem = self.visual_stem(g, frames);
        let maps = match lips {
            LipCondition::Track(l) => self.lip_channels(g, l)?,
            LipCondition::Free => None,
        };
        let fv = self.visual_from_stem(g, stem, maps, lips)?;
        let fa = self.audio_graph(g, mel)?;
        self.context_graph(g, fv, fa)
    }

    /// Inference on one track; `lips = None` takes the landmark-free path.
    pub fn predict(&self, input: &TrackTensors<S>, lips: Option<&LipTrack>) -> Result<FramePredictions> {
        let mut g = Graph::inference();
        let cond = lips.map_or(LipCondition::Free, LipCondition::Track);
        let heads = self.forward(&mut g, input, cond)?;
        Ok(heads_to_predictions(&g, heads))
    }

    /// Visual embeddings `[T, D]` for a track; with encoded lip maps the
    /// aggregated block is `lip_maps`, zeros when absent.
    pub fn visual_forward(&self, track: &FaceTrack, lip_maps: Option<&AggregatedLipMaps<S>>) -> Result<Tensor<S>> {
        if track.num_frames == 0 {
            return Err(Error::Shape("track has no frames".into()));
        }
        let mut g = Graph::inference();
        let frames = g.constant(Tensor::from_f32(&[track.num_frames, 1, track.height, track.width], &track.frames));
        let stem = self.visual_stem(&mut g, frames);
        let maps = lip_maps.map(|m| g.constant(m.as_channels()));
        let fv = self.visual_from_stem(&mut g, stem, maps, LipCondition::Free)?;
        Ok(g.value(fv).clone())
    }

    /// Visual embeddings for several tracks, in order.
    pub fn visual_forward_batch(
        &self,
        tracks: &[(&FaceTrack, Option<&AggregatedLipMaps<S>>)],
    ) -> Result<Vec<Tensor<S>>> {
        tracks.iter().map(|(t, m)| self.visual_forward(t, *m)).collect()
    }

    /// Audio embeddings `[T, C]`.
    pub fn audio_forward(&self, mel: &MelSpectrogram) -> Result<Tensor<S>> {
        let mut g = Graph::inference();
        let m = g.constant(Tensor::from_f32(&[mel.rows, mel.n_mels], &mel.values));
        let fa = self.audio_graph(&mut g, m)?;
        Ok(g.value(fa).clone())
    }

    /// Predictions from precomputed embeddings.
    pub fn context_forward(&self, fv: &Tensor<S>, fa: &Tensor<S>) -> Result<FramePredictions> {
        let mut g = Graph::inference();
        let fv = g.constant(fv.clone());
        let fa = g.constant(fa.clone());
        let heads = self.context_graph(&mut g, fv, fa)?;
        Ok(heads_to_predictions(&g, heads))
    }
}

pub fn heads_to_predictions<S: Scalar>(g: &Graph<S>, heads: Heads) -> FramePredictions {
    let rows = |v: Var| -> Vec<[f64; 2]> {
        g.value(v)
            .data()
            .chunks(2)
            .map(|r| [r[0].as_f64(), r[1].as_f64()])
            .collect()
    };
    FramePredictions {
        probs_av: rows(heads.av),
        probs_v: rows(heads.v),
        probs_a: rows(heads.a),
    }
}

/// `[T, dim]` sine/cosine positional table.
pub fn sinusoidal_encoding<S: Scalar>(t: usize, dim: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(&[t, dim]);
    for pos in 0..t {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.data_mut()[pos * dim + i] = S::from_f64_lossy(v);
        }
    }
    out
}
