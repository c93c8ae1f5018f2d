//! Lip track encoding, its learned aggregation, and the two alternative
//! landmark integrations used as baselines.
//!
//! A present landmark `(x, y)` lands on pixel column `x`, row `y` of the
//! crop. Its x-plane carries `x / W` there and its y-plane `y / H`; every
//! other entry of both planes is zero. Landmarks outside the crop produce
//! empty planes.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, LipHit, LipScatterPlan, Var};
use crate::data::LipTrack;
use crate::error::{Error, Result};
use crate::nn::{Conv, Init, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_AGGREGATED_CHANNELS: usize = 4;

/// Sparse form of the `T x K x 2 x H x W` encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedLipMaps {
    pub plan: Arc<LipScatterPlan>,
    pub num_landmarks: usize,
    pub availability: Vec<bool>,
}

impl EncodedLipMaps {
    pub fn num_frames(&self) -> usize {
        self.availability.len()
    }

    pub fn height(&self) -> usize {
        self.plan.height
    }

    pub fn width(&self) -> usize {
        self.plan.width
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.num_frames(), self.num_landmarks, 2, self.height(), self.width()]
    }

    /// Entry `[t, k, c, y, x]` of the dense encoding.
    pub fn get(&self, t: usize, k: usize, c: usize, y: usize, x: usize) -> f64 {
        let pixel = y * self.width() + x;
        self.plan.frames[t]
            .iter()
            .find(|h| h.k == k && h.pixel == pixel)
            .map_or(0.0, |h| if c == 0 { h.vx } else { h.vy })
    }

    pub fn to_dense<S: Scalar>(&self) -> Tensor<S> {
        let [t, k, _, h, w] = self.shape();
        let hw = h * w;
        let mut out = Tensor::zeros(&[t, k, 2, h, w]);
        let data = out.data_mut();
        for (f, hits) in self.plan.frames.iter().enumerate() {
            for hit in hits {
                let base = (f * k + hit.k) * 2 * hw;
                data[base + hit.pixel] = S::from_f64_lossy(hit.vx);
                data[base + hw + hit.pixel] = S::from_f64_lossy(hit.vy);
            }
        }
        out
    }

    /// Number of nonzero entries across all planes.
    pub fn nonzero_count(&self) -> usize {
        self.plan
            .frames
            .iter()
            .flatten()
            .map(|h| usize::from(h.vx != 0.0) + usize::from(h.vy != 0.0))
            .sum()
    }
}

pub fn encode_lip_landmarks(lips: &LipTrack, width: usize, height: usize) -> Result<EncodedLipMaps> {
    if width == 0 || height == 0 {
        return Err(Error::Shape("lip maps need a nonempty crop".into()));
    }
    let k = lips.num_landmarks;
    let mut frames = Vec::with_capacity(lips.len());
    let mut availability = Vec::with_capacity(lips.len());
    for (t, frame) in lips.frames.iter().enumerate() {
        let Some(points) = frame else {
            frames.push(Vec::new());
            availability.push(false);
            continue;
        };
        if points.len() != k {
            return Err(Error::Shape(format!(
                "frame {t} has {} landmarks, expected {k}",
                points.len()
            )));
        }
        let hits = points
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height)
            .map(|(i, &(x, y))| LipHit {
                k: i,
                pixel: y as usize * width + x as usize,
                vx: x as f64 / width as f64,
                vy: y as f64 / height as f64,
            })
            .collect();
        frames.push(hits);
        availability.push(true);
    }
    Ok(EncodedLipMaps {
        plan: Arc::new(LipScatterPlan {
            frames,
            height,
            width,
        }),
        num_landmarks: k,
        availability,
    })
}

/// Two bias-free `K -> S` channel maps, one per coordinate plane.
#[derive(Debug, Clone, PartialEq)]
pub struct LipAggregator<S> {
    /// `S x K`.
    pub weights_x: Tensor<S>,
    /// `S x K`.
    pub weights_y: Tensor<S>,
}

impl<S: Scalar> LipAggregator<S> {
    pub fn uniform(channels: usize, landmarks: usize) -> Self {
        let w = Tensor::full(&[channels, landmarks], S::one() / S::from_usize(landmarks).unwrap());
        Self {
            weights_x: w.clone(),
            weights_y: w,
        }
    }

    pub fn channels(&self) -> usize {
        self.weights_x.dim(0)
    }

    pub fn landmarks(&self) -> usize {
        self.weights_x.dim(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights_x.shape() != self.weights_y.shape() || self.weights_x.rank() != 2 {
            return Err(Error::Shape("aggregator weight matrices must both be S x K".into()));
        }
        if !self.weights_x.all_finite() || !self.weights_y.all_finite() {
            return Err(Error::Numerical("aggregator weights are not finite".into()));
        }
        Ok(())
    }
}

/// Dense `T x S x 2 x H x W` aggregated maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedLipMaps<S> {
    pub values: Tensor<S>,
}

impl<S: Scalar> AggregatedLipMaps<S> {
    /// The same data laid out as `T x 2S x H x W`, channel `2s + c`.
    pub fn as_channels(&self) -> Tensor<S> {
        let [t, s, _, h, w]: [usize; 5] = self.values.shape().try_into().expect("rank 5");
        self.values.clone().reshape(&[t, 2 * s, h, w])
    }
}

pub fn aggregate<S: Scalar>(maps: &EncodedLipMaps, agg: &LipAggregator<S>) -> Result<AggregatedLipMaps<S>> {
    agg.validate()?;
    if agg.landmarks() != maps.num_landmarks {
        return Err(Error::Shape(format!(
            "aggregator expects {} landmarks, maps have {}",
            agg.landmarks(),
            maps.num_landmarks
        )));
    }
    let mut g = Graph::inference();
    let wx = g.constant(agg.weights_x.clone());
    let wy = g.constant(agg.weights_y.clone());
    let out = g.lip_scatter(wx, wy, maps.plan.clone());
    let [t, _, _, h, w] = maps.shape();
    let values = g.value(out).clone().reshape(&[t, agg.channels(), 2, h, w]);
    Ok(AggregatedLipMaps { values })
}

/// Flat spatial indices of each landmark on an `fh x fw` grid, rescaled from
/// the `height x width` crop and clamped into range.
pub fn pooling_positions(lips: &LipTrack, height: usize, width: usize, fh: usize, fw: usize) -> Vec<Option<Vec<usize>>> {
    let rescale = |v: i32, from: usize, to: usize| -> usize {
        let scaled = (i64::from(v) * to as i64).div_euclid(from as i64);
        scaled.clamp(0, to as i64 - 1) as usize
    };
    lips.frames
        .iter()
        .map(|f| {
            f.as_ref().map(|pts| {
                pts.iter()
                    .map(|&(x, y)| rescale(y, height, fh) * fw + rescale(x, width, fw))
                    .collect()
            })
        })
        .collect()
}

/// Gathered `T x (K * C)` landmark features of `features: [T, C, fh, fw]`.
pub fn gather_landmark_features<S: Scalar>(
    features: &Tensor<S>,
    lips: &LipTrack,
    height: usize,
    width: usize,
) -> Tensor<S> {
    let plan = pooling_positions(lips, height, width, features.dim(2), features.dim(3));
    let mut g = Graph::inference();
    let x = g.constant(features.clone());
    let out = g.gather(x, lips.num_landmarks, Arc::new(plan));
    g.value(out).clone()
}

/// Gathers features at landmark positions, projects them to `D`, and fuses
/// the result with the pooled visual feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkPooling {
    pub proj: Linear,
    pub fuse: Linear,
    pub landmarks: usize,
}

impl LandmarkPooling {
    pub fn new<S: Scalar, R: Rng>(init: &mut Init<'_, S, R>, name: &str, landmarks: usize, channels: usize, dim: usize) -> Self {
        Self {
            proj: Linear::new(init, &format!("{name}.proj"), landmarks * channels, dim, false),
            fuse: Linear::new(init, &format!("{name}.fuse"), 2 * dim, dim, false),
            landmarks,
        }
    }

    /// `features: [T, C, fh, fw]`, `pooled: [T, D]` -> `[T, D]`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &ParamStore<S>,
        features: Var,
        positions: Arc<Vec<Option<Vec<usize>>>>,
        pooled: Var,
    ) -> Var {
        let gathered = g.gather(features, self.landmarks, positions);
        let projected = self.proj.forward(g, p, gathered);
        let cat = g.concat(&[projected, pooled], 1);
        self.fuse.forward(g, p, cat)
    }
}

/// Convolution stack over the `(T, K)` grid of normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LdiEncoder {
    pub convs: Vec<Conv>,
    pub proj: Linear,
    pub fuse: Linear,
    pub landmarks: usize,
}

impl LdiEncoder {
    pub fn new<S: Scalar, R: Rng>(
        init: &mut Init<'_, S, R>,
        name: &str,
        landmarks: usize,
        widths: &[usize],
        dim: usize,
    ) -> Self {
        let mut c_in = 2;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let conv = Conv::new(init, &format!("{name}.conv{i}"), c_in, w, ConvGeom::spatial(3, 1, 1), true);
                c_in = w;
                conv
            })
            .collect();
        Self {
            convs,
            proj: Linear::new(init, &format!("{name}.proj"), c_in * landmarks, dim, true),
            fuse: Linear::new(init, &format!("{name}.fuse"), 2 * dim, dim, false),
            landmarks,
        }
    }

    /// `[1, 2, T, K]` grid of `x / W` and `y / H`; absent frames are zero.
    pub fn coordinate_grid<S: Scalar>(lips: &LipTrack, height: usize, width: usize) -> Tensor<S> {
        let (t, k) = (lips.len(), lips.num_landmarks);
        let mut out = Tensor::zeros(&[1, 2, t, k]);
        let data = out.data_mut();
        for (f, frame) in lips.frames.iter().enumerate() {
            if let Some(pts) = frame {
                for (i, &(x, y)) in pts.iter().enumerate() {
                    data[f * k + i] = S::from_f64_lossy(f64::from(x) / width as f64);
                    data[t * k + f * k + i] = S::from_f64_lossy(f64::from(y) / height as f64);
                }
            }
        }
        out
    }

    /// `grid: [1, 2, T, K]` -> `[T, D]`.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, grid: Var) -> Var {
        let t = g.shape(grid)[2];
        let mut x = grid;
        for conv in &self.convs {
            let y = conv.forward(g, p, x);
            x = g.relu(y);
        }
        let c = g.shape(x)[1];
        let flat = g.reshape(x, &[c, t * self.landmarks]);
        let per_pos = g.transpose(flat);
        let per_frame = g.reshape(per_pos, &[t, self.landmarks * c]);
        self.proj.forward(g, p, per_frame)
    }

    pub fn fuse<S: Scalar>(&self, g: &mut Graph<S>, p: &ParamStore<S>, encoded: Var, pooled: Var) -> Var {
        let cat = g.concat(&[encoded, pooled], 1);
        self.fuse.forward(g, p, cat)
    }
}

/// Runs the LDI encoder on `lips` with the weights in `store`.
pub fn ldi_encode<S: Scalar>(
    enc: &LdiEncoder,
    store: &ParamStore<S>,
    lips: &LipTrack,
    height: usize,
    width: usize,
) -> Tensor<S> {
    let mut g = Graph::inference();
    let grid = g.constant(LdiEncoder::coordinate_grid(lips, height, width));
    let out = enc.encode(&mut g, store, grid);
    g.value(out).clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationMethod {
    Laser,
    Pooling,
    Ldi,
}

/// Sizes that determine the extra parameters of each integration method.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegrationSizes {
    pub landmarks: usize,
    pub aggregated_channels: usize,
    /// Channels of the feature map landmark pooling gathers from.
    pub feature_channels: usize,
    pub embed_dim: usize,
    pub ldi_widths: Vec<usize>,
}

impl IntegrationSizes {
    /// Sizes of the comparison configuration.
    pub fn reference() -> Self {
        Self {
            landmarks: 82,
            aggregated_channels: DEFAULT_AGGREGATED_CHANNELS,
            feature_channels: 64,
            embed_dim: 128,
            ldi_widths: vec![16, 16],
        }
    }
}

/// Parameters a method adds on top of the landmark-free backbone.
pub fn extra_parameter_count(method: IntegrationMethod, sizes: &IntegrationSizes) -> usize {
    let (k, s, c, d) = (
        sizes.landmarks,
        sizes.aggregated_channels,
        sizes.feature_channels,
        sizes.embed_dim,
    );
    match method {
        IntegrationMethod::Laser => 2 * s * k,
        IntegrationMethod::Pooling => k * c * d + 2 * d * d,
        IntegrationMethod::Ldi => {
            let mut c_in = 2;
            let mut n = 0;
            for &w in &sizes.ldi_widths {
                n += c_in * w * 9 + w;
                c_in = w;
            }
            n + c_in * k * d + d + 2 * d * d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_frame(points: Vec<(i32, i32)>) -> LipTrack {
        LipTrack {
            num_landmarks: points.len(),
            frames: vec![Some(points)],
        }
    }

    #[test]
    fn landmark_at_origin_encodes_to_zero() {
        let m = encode_lip_landmarks(&one_frame(vec![(0, 0)]), 16, 16).unwrap();
        assert_eq!(m.nonzero_count(), 0);
        assert!(m.to_dense::<f32>().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_landmark_values() {
        let m = encode_lip_landmarks(&one_frame(vec![(8, 4)]), 16, 16).unwrap();
        assert_eq!(m.get(0, 0, 0, 4, 8), 0.5);
        assert_eq!(m.get(0, 0, 1, 4, 8), 0.25);
        assert_eq!(m.nonzero_count(), 2);
    }

    #[test]
    fn absent_frame_is_unavailable_and_empty() {
        let lips = LipTrack::absent(3, 82);
        let m = encode_lip_landmarks(&lips, 8, 8).unwrap();
        assert_eq!(m.availability, vec![false; 3]);
        assert_eq!(m.to_dense::<f64>().sum(), 0.0);
    }

    #[test]
    fn wrong_landmark_count_is_an_error() {
        let lips = LipTrack {
            num_landmarks: 3,
            frames: vec![Some(vec![(1, 1)])],
        };
        assert!(encode_lip_landmarks(&lips, 8, 8).is_err());
    }

    #[test]
    fn uniform_aggregation_spreads_value() {
        let k = 5;
        let mut pts = vec![(-1, -1); k];
        pts[2] = (3, 2);
        let maps = encode_lip_landmarks(&one_frame(pts), 8, 8).unwrap();
        let out = aggregate(&maps, &LipAggregator::<f64>::uniform(4, k)).unwrap();
        for s in 0..4 {
            let base = s * 2 * 64;
            assert!((out.values.data()[base + 2 * 8 + 3] - 3.0 / 8.0 / k as f64).abs() < 1e-15);
            assert!((out.values.data()[base + 64 + 2 * 8 + 3] - 2.0 / 8.0 / k as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_aggregator_rejected() {
        let mut agg = LipAggregator::<f64>::uniform(2, 3);
        agg.weights_y.data_mut()[0] = f64::NAN;
        let maps = encode_lip_landmarks(&LipTrack::absent(1, 3), 4, 4).unwrap();
        assert!(aggregate(&maps, &agg).is_err());
    }

    #[test]
    fn reference_parameter_counts() {
        let sizes = IntegrationSizes::reference();
        assert_eq!(extra_parameter_count(IntegrationMethod::Laser, &sizes), 656);
        assert_eq!(
            extra_parameter_count(IntegrationMethod::Pooling, &sizes),
            82 * 64 * 128 + 2 * 128 * 128
        );
    }

    #[test]
    fn pooling_positions_rescale_and_clamp() {
        let lips = one_frame(vec![(8, 4), (-3, 40)]);
        let pos = pooling_positions(&lips, 16, 16, 4, 4);
        assert_eq!(pos[0], Some(vec![4 + 2, 3 * 4]));
    }
}
