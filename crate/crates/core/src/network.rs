//! Network blocks: image feature extraction, volume aggregation, soft-argmax
//! depth regression, the masked depth loss and the evaluation metrics.
//!
//! The extractor and the aggregation stages are deliberately small stand-ins:
//! two stride-2 blocks for the quarter-resolution features, and plain
//! sequential conv3d blocks per refinement stage. What matters for the rest
//! of the system is preserved exactly: quarter-resolution shared-weight
//! towers, one aggregation head per stage for intermediate supervision, and
//! expectation-over-bins depth regression bounded by the volume range.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::BinSpacing;
use crate::math::Real;
use crate::ops::{
    bilinear_sample2d, bilinear_sample2d_backward, conv2d, conv2d_backward, conv3d,
    conv3d_backward, relu, relu_backward, softmax_axis, Border,
};
use crate::optim::ParamSet;
use crate::pointnet::{ClusterWindow, PointNetKind};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};
use crate::volume::VolumeKind;

/// Where the two modalities meet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionLevel {
    /// Projected sparse depth is concatenated to the input images; nothing
    /// is embedded in the volume.
    Early,
    /// Points (occupancy or features) are embedded inside the volume.
    Intermediate,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    BadField { field: &'static str, msg: String },
    IllegalCombo(String),
}

impl core::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ConfigError::BadField { field, msg } => write!(f, "invalid {field}: {msg}"),
            ConfigError::IllegalCombo(msg) => write!(f, "illegal mode combination: {msg}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature channels C of each image tower (and of point features).
    pub channels: usize,
    /// Depth bins D.
    pub depth_bins: usize,
    /// Maximum represented depth in meters.
    pub z_max: f64,
    /// Refinement stages S; evaluation uses only the last stage.
    pub stages: usize,
    /// Per-stage loss weights, length S.
    pub stage_weights: Vec<f64>,
    pub volume: VolumeKind,
    pub points: PointNetKind,
    pub fusion: FusionLevel,
    /// Disparity extent of the cost/depth-volume grids, full-res pixels.
    pub d_max: f64,
    /// Image-to-grid scale; the feature towers downsample by this much.
    pub downsample: usize,
}

/// The canonical three-stage weights; other stage counts ramp linearly up
/// to 1.0.
pub fn default_stage_weights(stages: usize) -> Vec<f64> {
    match stages {
        3 => vec![0.5, 0.7, 1.0],
        1 => vec![1.0],
        s => (0..s)
            .map(|i| 0.5 + 0.5 * i as f64 / (s - 1) as f64)
            .collect(),
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 8,
            depth_bins: 48,
            z_max: 100.0,
            stages: 3,
            stage_weights: default_stage_weights(3),
            volume: VolumeKind::Fusion,
            points: PointNetKind::FusedConv {
                window: ClusterWindow::default(),
            },
            fusion: FusionLevel::Intermediate,
            d_max: 47.0,
            downsample: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.channels == 0 {
            return Err(ConfigError::BadField {
                field: "channels",
                msg: String::from("must be >= 1"),
            });
        }
        if self.depth_bins < 2 {
            return Err(ConfigError::BadField {
                field: "depth_bins",
                msg: String::from("must be >= 2"),
            });
        }
        if !(self.z_max > 0.0) {
            return Err(ConfigError::BadField {
                field: "z_max",
                msg: format!("must be > 0, got {}", self.z_max),
            });
        }
        if !(self.d_max > 0.0) {
            return Err(ConfigError::BadField {
                field: "d_max",
                msg: format!("must be > 0, got {}", self.d_max),
            });
        }
        if self.stages == 0 {
            return Err(ConfigError::BadField {
                field: "stages",
                msg: String::from("must be >= 1"),
            });
        }
        if self.stage_weights.len() != self.stages {
            return Err(ConfigError::BadField {
                field: "stage_weights",
                msg: format!(
                    "{} weights for {} stages",
                    self.stage_weights.len(),
                    self.stages
                ),
            });
        }
        if self.fusion == FusionLevel::Early && self.points != PointNetKind::Raw {
            return Err(ConfigError::IllegalCombo(String::from(
                "early fusion requires raw points (the point network has nothing to feed)",
            )));
        }
        Ok(())
    }

    /// Image input channels: RGB plus a sparse-depth channel in early mode.
    pub fn image_channels(&self) -> usize {
        match self.fusion {
            FusionLevel::Early => 4,
            FusionLevel::Intermediate => 3,
        }
    }

    /// Channels of the built volume.
    pub fn volume_channels(&self) -> usize {
        match (self.fusion, self.points) {
            (FusionLevel::Early, _) => 2 * self.channels,
            (_, PointNetKind::Raw) => 2 * self.channels + 1,
            (_, PointNetKind::Mlp) | (_, PointNetKind::FusedConv { .. }) => 3 * self.channels,
        }
    }

    /// Bin spacing of the grid points are embedded into.
    pub fn embed_spacing(&self) -> BinSpacing {
        match self.volume {
            VolumeKind::Fusion => BinSpacing::DepthLinear,
            VolumeKind::Cost | VolumeKind::Depth => BinSpacing::DisparityLinear {
                d_max: self.d_max,
            },
        }
    }
}

/// A depth map in meters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn dense(width: usize, height: usize, data: Vec<f32>) -> Self {
        let valid = vec![true; data.len()];
        DepthMap {
            width,
            height,
            data,
            valid,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|b| **b).count()
    }
}

// ---------------------------------------------------------------------------
// image feature extraction
// ---------------------------------------------------------------------------

pub fn init_extractor_params<E: Real>(
    in_channels: usize,
    channels: usize,
    params: &mut ParamSet<E>,
    rng: &mut Rng,
) {
    let mut conv = |name: &str, ci: usize, co: usize| {
        let bound = libm::sqrt(6.0 / (ci * 9) as f64);
        params
            .insert(
                &format!("extract.{name}.w"),
                Tensor::from_fn(&[co, ci, 3, 3], |_| E::from_f64(rng.range(-bound, bound))),
            )
            .unwrap();
        params
            .insert(&format!("extract.{name}.b"), Tensor::zeros(&[co]))
            .unwrap();
    };
    conv("conv1", in_channels, channels);
    conv("conv2", channels, channels);
    conv("conv3", channels, channels);
}

#[derive(Debug, Clone)]
pub struct ExtractCache<E> {
    input: Tensor<E>,
    z1: Tensor<E>,
    a1: Tensor<E>,
    z2: Tensor<E>,
    a2: Tensor<E>,
}

/// Smallest |x| in a pre-activation tensor: the distance to the relu kink.
pub(crate) fn min_abs<E: Real>(t: &Tensor<E>) -> f64 {
    t.data()
        .iter()
        .map(|v| v.to_f64().abs())
        .fold(f64::INFINITY, f64::min)
}

impl<E: Real> ExtractCache<E> {
    /// How far this block's pre-activations are from the relu kink.
    /// Finite-difference probes need this to exceed their step.
    pub fn kink_margin(&self) -> f64 {
        min_abs(&self.z1).min(min_abs(&self.z2))
    }
}

/// Two stride-2 conv+relu blocks then a stride-1 conv: [ci,4h,4w] -> [C,h,w].
/// Both towers share these weights.
pub fn extract_features<E: Real>(
    params: &ParamSet<E>,
    image: &Tensor<E>,
) -> Result<(Tensor<E>, ExtractCache<E>), TensorError> {
    image.expect_rank(3, "extract")?;
    if image.shape()[1] % 4 != 0 || image.shape()[2] % 4 != 0 {
        return Err(TensorError::Invalid {
            op: "extract",
            msg: format!("extents {:?} not divisible by 4", &image.shape()[1..]),
        });
    }
    let z1 = conv2d(
        image,
        params.value("extract.conv1.w"),
        params.value("extract.conv1.b"),
        2,
        1,
    )?;
    let a1 = relu(&z1);
    let z2 = conv2d(
        &a1,
        params.value("extract.conv2.w"),
        params.value("extract.conv2.b"),
        2,
        1,
    )?;
    let a2 = relu(&z2);
    let out = conv2d(
        &a2,
        params.value("extract.conv3.w"),
        params.value("extract.conv3.b"),
        1,
        1,
    )?;
    Ok((
        out,
        ExtractCache {
            input: image.clone(),
            z1,
            a1,
            z2,
            a2,
        },
    ))
}

/// Accumulates parameter gradients; returns d(input image) for callers that
/// need it (nothing upstream of the images is learned, so it is usually
/// dropped).
pub fn extract_backward<E: Real>(
    params: &mut ParamSet<E>,
    cache: &ExtractCache<E>,
    upstream: &Tensor<E>,
) -> Tensor<E> {
    let (da2, dw3, db3) = conv2d_backward(
        &cache.a2,
        params.value("extract.conv3.w"),
        1,
        1,
        upstream,
    );
    params.accumulate("extract.conv3.w", &dw3);
    params.accumulate("extract.conv3.b", &db3);
    let dz2 = relu_backward(&cache.z2, &da2);
    let (da1, dw2, db2) = conv2d_backward(&cache.a1, params.value("extract.conv2.w"), 2, 1, &dz2);
    params.accumulate("extract.conv2.w", &dw2);
    params.accumulate("extract.conv2.b", &db2);
    let dz1 = relu_backward(&cache.z1, &da1);
    let (dx, dw1, db1) = conv2d_backward(&cache.input, params.value("extract.conv1.w"), 2, 1, &dz1);
    params.accumulate("extract.conv1.w", &dw1);
    params.accumulate("extract.conv1.b", &db1);
    dx
}

// ---------------------------------------------------------------------------
// volume aggregation
// ---------------------------------------------------------------------------

pub fn init_aggregation_params<E: Real>(
    volume_channels: usize,
    channels: usize,
    stages: usize,
    params: &mut ParamSet<E>,
    rng: &mut Rng,
) {
    let mut conv = |name: &str, ci: usize, co: usize, rng: &mut Rng| {
        let bound = libm::sqrt(6.0 / (ci * 27) as f64);
        params
            .insert(
                &format!("agg.{name}.w"),
                Tensor::from_fn(&[co, ci, 3, 3, 3], |_| E::from_f64(rng.range(-bound, bound))),
            )
            .unwrap();
        params
            .insert(&format!("agg.{name}.b"), Tensor::zeros(&[co]))
            .unwrap();
    };
    for s in 1..=stages {
        let ci = if s == 1 { volume_channels } else { channels };
        conv(&format!("s{s}.conv1"), ci, channels, rng);
        conv(&format!("s{s}.conv2"), channels, channels, rng);
        conv(&format!("s{s}.head"), channels, 1, rng);
    }
}

#[derive(Debug, Clone)]
struct StageCache<E> {
    input: Tensor<E>,
    z1: Tensor<E>,
    a1: Tensor<E>,
    z2: Tensor<E>,
    hidden: Tensor<E>,
}

#[derive(Debug, Clone)]
pub struct AggregateCache<E> {
    stages: Vec<StageCache<E>>,
}

impl<E: Real> AggregateCache<E> {
    pub fn kink_margin(&self) -> f64 {
        self.stages
            .iter()
            .map(|s| min_abs(&s.z1).min(min_abs(&s.z2)))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sequentially refines the volume: each stage runs two conv3d+relu blocks
/// on the running hidden state and emits one [d,h,w] aggregation through its
/// own channel-reduction head; stage s+1 consumes stage s's hidden state.
pub fn aggregate<E: Real>(
    params: &ParamSet<E>,
    volume: &Tensor<E>,
    stages: usize,
) -> Result<(Vec<Tensor<E>>, AggregateCache<E>), TensorError> {
    let mut caches = Vec::with_capacity(stages);
    let mut outputs = Vec::with_capacity(stages);
    let mut hidden = volume.clone();
    for s in 1..=stages {
        let z1 = conv3d(
            &hidden,
            params.value(&format!("agg.s{s}.conv1.w")),
            params.value(&format!("agg.s{s}.conv1.b")),
            1,
            1,
        )?;
        let a1 = relu(&z1);
        let z2 = conv3d(
            &a1,
            params.value(&format!("agg.s{s}.conv2.w")),
            params.value(&format!("agg.s{s}.conv2.b")),
            1,
            1,
        )?;
        let h = relu(&z2);
        let head = conv3d(
            &h,
            params.value(&format!("agg.s{s}.head.w")),
            params.value(&format!("agg.s{s}.head.b")),
            1,
            1,
        )?;
        let (d, hh, ww) = (head.shape()[1], head.shape()[2], head.shape()[3]);
        outputs.push(head.reshaped(&[d, hh, ww])?);
        caches.push(StageCache {
            input: hidden,
            z1,
            a1,
            z2,
            hidden: h.clone(),
        });
        hidden = h;
    }
    Ok((outputs, AggregateCache { stages: caches }))
}

/// Takes one upstream gradient per stage output, accumulates parameter
/// gradients, and returns d(volume payload).
pub fn aggregate_backward<E: Real>(
    params: &mut ParamSet<E>,
    cache: &AggregateCache<E>,
    upstreams: &[Tensor<E>],
) -> Tensor<E> {
    let stages = cache.stages.len();
    let mut d_hidden: Option<Tensor<E>> = None;
    for s in (1..=stages).rev() {
        let sc = &cache.stages[s - 1];
        let (d, hh, ww) = (
            sc.hidden.shape()[1],
            sc.hidden.shape()[2],
            sc.hidden.shape()[3],
        );
        let up_head = upstreams[s - 1]
            .clone()
            .reshaped(&[1, d, hh, ww])
            .expect("head shape");
        let (mut dh, dwh, dbh) = conv3d_backward(
            &sc.hidden,
            params.value(&format!("agg.s{s}.head.w")),
            1,
            1,
            &up_head,
        );
        params.accumulate(&format!("agg.s{s}.head.w"), &dwh);
        params.accumulate(&format!("agg.s{s}.head.b"), &dbh);
        if let Some(later) = d_hidden.take() {
            dh.add_assign(&later).expect("hidden shapes match");
        }
        let dz2 = relu_backward(&sc.z2, &dh);
        let (da1, dw2, db2) = conv3d_backward(
            &sc.a1,
            params.value(&format!("agg.s{s}.conv2.w")),
            1,
            1,
            &dz2,
        );
        params.accumulate(&format!("agg.s{s}.conv2.w"), &dw2);
        params.accumulate(&format!("agg.s{s}.conv2.b"), &db2);
        let dz1 = relu_backward(&sc.z1, &da1);
        let (dinput, dw1, db1) = conv3d_backward(
            &sc.input,
            params.value(&format!("agg.s{s}.conv1.w")),
            1,
            1,
            &dz1,
        );
        params.accumulate(&format!("agg.s{s}.conv1.w"), &dw1);
        params.accumulate(&format!("agg.s{s}.conv1.b"), &db1);
        d_hidden = Some(dinput);
    }
    d_hidden.expect("at least one stage")
}

// ---------------------------------------------------------------------------
// depth regression
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RegressCache<E> {
    probs: Tensor<E>,
    grid_depth: Tensor<E>,
    grid_h: usize,
    grid_w: usize,
    up_coords: Vec<(f64, f64)>,
}

fn upsample_coords(grid_h: usize, grid_w: usize, scale: usize) -> Vec<(f64, f64)> {
    let (h4, w4) = (grid_h * scale, grid_w * scale);
    let mut coords = Vec::with_capacity(h4 * w4);
    for v in 0..h4 {
        for u in 0..w4 {
            coords.push((u as f64 / scale as f64, v as f64 / scale as f64));
        }
    }
    coords
}

/// Soft-argmax over the depth axis followed by x4 bilinear upsampling:
/// softmax each (h,w) lane of [d,h,w], take the expectation of the bin
/// center depths (bounded by [0, z_max]), then lift the grid-resolution map
/// to full resolution. Returns the full-resolution depth as [4h*4w].
pub fn regress_depth<E: Real>(
    aggregation: &Tensor<E>,
    z_max: f64,
    scale: usize,
) -> Result<(Tensor<E>, RegressCache<E>), TensorError> {
    aggregation.expect_rank(3, "regress-depth")?;
    let (d, h, w) = (
        aggregation.shape()[0],
        aggregation.shape()[1],
        aggregation.shape()[2],
    );
    if d < 2 {
        return Err(TensorError::Invalid {
            op: "regress-depth",
            msg: String::from("need at least 2 depth bins"),
        });
    }
    let probs = softmax_axis(aggregation, 0)?;
    let plane = h * w;
    let mut grid = Tensor::zeros(&[h, w]);
    {
        let pv = probs.data();
        let gv = grid.data_mut();
        for id in 0..d {
            let center = E::from_f64(id as f64 / (d - 1) as f64 * z_max);
            for k in 0..plane {
                gv[k] += center * pv[id * plane + k];
            }
        }
    }
    let coords = upsample_coords(h, w, scale);
    let full = bilinear_sample2d(&grid.clone().reshaped(&[1, h, w])?, &coords, Border::Clamp)?;
    let n = coords.len();
    let full = full.reshaped(&[n])?;
    Ok((
        full,
        RegressCache {
            probs,
            grid_depth: grid,
            grid_h: h,
            grid_w: w,
            up_coords: coords,
        },
    ))
}

/// d(full-res depth) -> d(aggregation tensor). Closed form through the
/// expectation: dA[d,k] = p[d,k] * (center_d - z[k]) * dz[k].
pub fn regress_depth_backward<E: Real>(
    cache: &RegressCache<E>,
    z_max: f64,
    upstream: &Tensor<E>,
) -> Tensor<E> {
    let (h, w) = (cache.grid_h, cache.grid_w);
    let d = cache.probs.shape()[0];
    let plane = h * w;

    let mut d_grid = Tensor::zeros(&[1, h, w]);
    let n = cache.up_coords.len();
    let up = upstream.clone().reshaped(&[1, n]).expect("flat upstream");
    bilinear_sample2d_backward(&[1, h, w], &cache.up_coords, Border::Clamp, &up, &mut d_grid);

    let mut out = Tensor::zeros(&[d, h, w]);
    let pv = cache.probs.data();
    let zv = cache.grid_depth.data();
    let gv = d_grid.data();
    let ov = out.data_mut();
    for id in 0..d {
        let center = E::from_f64(id as f64 / (d - 1) as f64 * z_max);
        for k in 0..plane {
            ov[id * plane + k] = pv[id * plane + k] * (center - zv[k]) * gv[k];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    EmptyMask,
    ShapeMismatch { pred: usize, truth: usize },
}

impl core::fmt::Display for LossError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LossError::EmptyMask => write!(f, "depth loss over an empty validity mask"),
            LossError::ShapeMismatch { pred, truth } => {
                write!(f, "depth loss shapes differ: pred {pred} vs truth {truth}")
            }
        }
    }
}

/// Smooth-L1 over valid pixels, normalized by the valid count. Invalid
/// pixels contribute nothing to the value or the gradient.
pub fn depth_loss<E: Real>(pred: &Tensor<E>, truth: &DepthMap) -> Result<f64, LossError> {
    if pred.len() != truth.data.len() {
        return Err(LossError::ShapeMismatch {
            pred: pred.len(),
            truth: truth.data.len(),
        });
    }
    let m = truth.valid_count();
    if m == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut acc = 0.0_f64;
    for i in 0..pred.len() {
        if !truth.valid[i] {
            continue;
        }
        let x = truth.data[i] as f64 - pred.data()[i].to_f64();
        acc += if x.abs() < 1.0 {
            0.5 * x * x
        } else {
            x.abs() - 0.5
        };
    }
    Ok(acc / m as f64)
}

/// d(loss)/d(pred), scaled by `upstream`.
pub fn depth_loss_backward<E: Real>(
    pred: &Tensor<E>,
    truth: &DepthMap,
    upstream: f64,
) -> Tensor<E> {
    let m = truth.valid_count().max(1) as f64;
    Tensor::from_fn(pred.shape(), |i| {
        if !truth.valid[i] {
            return E::ZERO;
        }
        let x = truth.data[i] as f64 - pred.data()[i].to_f64();
        let d = if x.abs() < 1.0 {
            x
        } else if x > 0.0 {
            1.0
        } else {
            -1.0
        };
        // d/d(pred) of smooth_l1(truth - pred) carries a minus sign
        E::from_f64(-d / m * upstream)
    })
}

/// Exact weighted sum of the per-stage losses.
pub fn total_loss(stage_losses: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(stage_losses.len(), weights.len(), "stage/weight lengths");
    stage_losses
        .iter()
        .zip(weights.iter())
        .map(|(l, w)| l * w)
        .sum()
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    /// Inverse-depth RMSE in 1/km.
    pub irmse: f64,
    pub imae: f64,
    /// Pixels the depth metrics were computed over.
    pub valid_px: usize,
    /// Valid pixels excluded from the inverse metrics because the
    /// prediction was not positive.
    pub excluded_inverse_px: usize,
}

/// Accumulator so per-sample and whole-dataset metrics share one code path.
#[derive(Debug, Clone, Default)]
pub struct MetricAccum {
    sq_sum: f64,
    abs_sum: f64,
    inv_sq_sum: f64,
    inv_abs_sum: f64,
    n: usize,
    n_inv: usize,
    excluded: usize,
}

impl MetricAccum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &DepthMap, truth: &DepthMap) {
        assert_eq!(pred.data.len(), truth.data.len(), "metric extents");
        for i in 0..truth.data.len() {
            if !truth.valid[i] {
                continue;
            }
            let (p, t) = (pred.data[i] as f64, truth.data[i] as f64);
            let e = t - p;
            self.sq_sum += e * e;
            self.abs_sum += e.abs();
            self.n += 1;
            if p > 0.0 {
                // inverse depth in 1/km: 1000 / z[m]
                let ei = 1000.0 / t - 1000.0 / p;
                self.inv_sq_sum += ei * ei;
                self.inv_abs_sum += ei.abs();
                self.n_inv += 1;
            } else {
                self.excluded += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &MetricAccum) {
        self.sq_sum += other.sq_sum;
        self.abs_sum += other.abs_sum;
        self.inv_sq_sum += other.inv_sq_sum;
        self.inv_abs_sum += other.inv_abs_sum;
        self.n += other.n;
        self.n_inv += other.n_inv;
        self.excluded += other.excluded;
    }

    pub fn finish(&self) -> Metrics {
        let n = self.n.max(1) as f64;
        let ni = self.n_inv.max(1) as f64;
        Metrics {
            rmse_mm: libm::sqrt(self.sq_sum / n) * 1000.0,
            mae_mm: self.abs_sum / n * 1000.0,
            irmse: libm::sqrt(self.inv_sq_sum / ni),
            imae: self.inv_abs_sum / ni,
            valid_px: self.n,
            excluded_inverse_px: self.excluded,
        }
    }
}

/// RMSE/MAE in millimeters and inverse-depth metrics in 1/km over the
/// truth's validity mask.
pub fn evaluate_metrics(pred: &DepthMap, truth: &DepthMap) -> Metrics {
    let mut acc = MetricAccum::new();
    acc.add(pred, truth);
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ParamSet;

    #[test]
    fn extractor_shape_contract_and_weight_sharing() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let mut rng = Rng::new(2);
        init_extractor_params(3, 5, &mut params, &mut rng);
        let img = Tensor::<f64>::from_fn(&[3, 16, 24], |_| rng.range(0.0, 1.0));
        let (f1, _) = extract_features(&params, &img).unwrap();
        assert_eq!(f1.shape(), &[5, 4, 6]);
        // identical inputs through the same weights give identical outputs
        let (f2, _) = extract_features(&params, &img).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn extractor_rejects_indivisible_extents() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let mut rng = Rng::new(2);
        init_extractor_params(3, 4, &mut params, &mut rng);
        let img = Tensor::<f64>::zeros(&[3, 15, 24]);
        assert!(extract_features(&params, &img).is_err());
    }

    #[test]
    fn single_stage_aggregation_has_the_contract_shape() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let mut rng = Rng::new(3);
        init_aggregation_params(5, 4, 1, &mut params, &mut rng);
        let vol = Tensor::<f64>::from_fn(&[5, 6, 4, 4], |_| rng.range(-1.0, 1.0));
        let (outs, _) = aggregate(&params, &vol, 1).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].shape(), &[6, 4, 4]);
    }

    #[test]
    fn zeroed_head_regresses_the_mid_range_everywhere() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let mut rng = Rng::new(4);
        init_aggregation_params(3, 2, 1, &mut params, &mut rng);
        // zero the head so its output is uniform over depth
        params
            .set_value("agg.s1.head.w", Tensor::zeros(&[1, 2, 3, 3, 3]))
            .unwrap();
        params.set_value("agg.s1.head.b", Tensor::zeros(&[1])).unwrap();
        let vol = Tensor::<f64>::from_fn(&[3, 6, 4, 4], |_| rng.range(-1.0, 1.0));
        let (outs, _) = aggregate(&params, &vol, 1).unwrap();
        let (depth, _) = regress_depth(&outs[0], 100.0, 4).unwrap();
        for v in depth.data() {
            assert!((v - 50.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_logits_regress_the_exact_mid_range() {
        let a = Tensor::<f64>::zeros(&[48, 2, 2]);
        let (depth, _) = regress_depth(&a, 100.0, 1).unwrap();
        for v in depth.data() {
            assert!((v - 50.0).abs() < 1e-9, "got {v}");
        }
    }

    #[test]
    fn saturated_last_bin_regresses_z_max() {
        let d = 48;
        let a = Tensor::<f64>::from_fn(&[d, 1, 1], |i| if i == d - 1 { 1e4 } else { 0.0 });
        let (depth, _) = regress_depth(&a, 100.0, 1).unwrap();
        assert!((depth.data()[0] - 100.0).abs() < 1e-6);
    }

    #[test]
    fn two_bin_softmax_matches_hand_arithmetic() {
        // logits (0, ln 3) over bins {0, 100} -> probs (0.25, 0.75) -> 75
        let a = Tensor::from_vec(&[2, 1, 1], vec![0.0_f64, libm::log(3.0)]).unwrap();
        let (depth, _) = regress_depth(&a, 100.0, 1).unwrap();
        assert!((depth.data()[0] - 75.0).abs() < 1e-9);
    }

    #[test]
    fn deeper_logit_increase_never_reduces_depth() {
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let a = Tensor::<f64>::from_fn(&[8, 1, 1], |_| rng.range(-2.0, 2.0));
            let (z0, _) = regress_depth(&a, 100.0, 1).unwrap();
            let bump = 4 + rng.below(4); // a bin at or beyond the median
            let mut b = a.clone();
            b.data_mut()[bump] += 0.3;
            let (z1, _) = regress_depth(&b, 100.0, 1).unwrap();
            // bumping a bin deeper than the current estimate moves it deeper
            let center = bump as f64 / 7.0 * 100.0;
            if center >= z0.data()[0] {
                assert!(z1.data()[0] >= z0.data()[0] - 1e-12);
            }
        }
    }

    #[test]
    fn depth_loss_matches_the_piecewise_examples() {
        let truth = DepthMap {
            width: 1,
            height: 1,
            data: vec![10.0],
            valid: vec![true],
        };
        let pred = Tensor::from_vec(&[1], vec![10.0_f64]).unwrap();
        assert!(depth_loss(&pred, &truth).unwrap().abs() < 1e-12);
        let pred = Tensor::from_vec(&[1], vec![9.5_f64]).unwrap();
        assert!((depth_loss(&pred, &truth).unwrap() - 0.125).abs() < 1e-12);
        let pred = Tensor::from_vec(&[1], vec![7.0_f64]).unwrap();
        assert!((depth_loss(&pred, &truth).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_pixels_carry_no_loss_or_gradient() {
        let truth = DepthMap {
            width: 2,
            height: 1,
            data: vec![10.0, 55.5],
            valid: vec![true, false],
        };
        let pred = Tensor::from_vec(&[2], vec![10.0_f64, 3.0]).unwrap();
        assert!(depth_loss(&pred, &truth).unwrap().abs() < 1e-12);
        let g = depth_loss_backward(&pred, &truth, 1.0);
        assert_eq!(g.data()[1], 0.0);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let truth = DepthMap {
            width: 1,
            height: 1,
            data: vec![1.0],
            valid: vec![false],
        };
        let pred = Tensor::from_vec(&[1], vec![1.0_f64]).unwrap();
        assert_eq!(depth_loss(&pred, &truth), Err(LossError::EmptyMask));
    }

    #[test]
    fn total_loss_is_the_stated_weighted_sum() {
        assert!((total_loss(&[1.0, 1.0, 1.0], &[0.5, 0.7, 1.0]) - 2.2).abs() < 1e-12);
        assert_eq!(total_loss(&[0.0, 0.0], &[0.5, 1.0]), 0.0);
        let l = [0.3, 1.7, 0.2];
        let w = [0.5, 0.7, 1.0];
        let w2: Vec<f64> = w.iter().map(|x| x * 2.0).collect();
        assert!((total_loss(&l, &w2) - 2.0 * total_loss(&l, &w)).abs() < 1e-12);
    }

    #[test]
    fn metric_units_match_the_hand_example() {
        let truth = DepthMap::dense(2, 1, vec![1.0, 1.0]);
        let pred = DepthMap::dense(2, 1, vec![1.0, 3.0]);
        let m = evaluate_metrics(&pred, &truth);
        assert!((m.rmse_mm - 1414.2135).abs() < 0.1);
        assert!((m.mae_mm - 1000.0).abs() < 1e-9);
        assert!((m.imae - 333.3333).abs() < 0.01);
        assert!(m.rmse_mm >= m.mae_mm);
        assert_eq!(m.excluded_inverse_px, 0);
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let truth = DepthMap::dense(3, 1, vec![5.0, 10.0, 80.0]);
        let m = evaluate_metrics(&truth.clone(), &truth);
        assert_eq!(m.rmse_mm, 0.0);
        assert_eq!(m.mae_mm, 0.0);
        assert_eq!(m.irmse, 0.0);
        assert_eq!(m.imae, 0.0);
    }

    #[test]
    fn nonpositive_predictions_are_excluded_from_inverse_metrics() {
        let truth = DepthMap::dense(2, 1, vec![2.0, 2.0]);
        let pred = DepthMap::dense(2, 1, vec![0.0, 2.0]);
        let m = evaluate_metrics(&pred, &truth);
        assert_eq!(m.excluded_inverse_px, 1);
        assert_eq!(m.imae, 0.0); // the surviving pixel is exact
        assert!(m.rmse_mm > 0.0); // depth metrics still see the bad pixel
    }

    #[test]
    fn stage_weight_defaults() {
        assert_eq!(default_stage_weights(3), vec![0.5, 0.7, 1.0]);
        assert_eq!(default_stage_weights(1), vec![1.0]);
        assert_eq!(default_stage_weights(2), vec![0.5, 1.0]);
    }

    #[test]
    fn config_validation_catches_illegal_combos() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.fusion = FusionLevel::Early;
        assert!(matches!(cfg.validate(), Err(ConfigError::IllegalCombo(_))));
        cfg.points = PointNetKind::Raw;
        assert!(cfg.validate().is_ok());
        cfg.stage_weights = vec![1.0];
        assert!(matches!(cfg.validate(), Err(ConfigError::BadField { .. })));
    }

    #[test]
    fn volume_channel_counts_per_mode() {
        let mut cfg = ModelConfig {
            channels: 8,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.volume_channels(), 24); // fused-conv: 3C
        cfg.points = PointNetKind::Raw;
        assert_eq!(cfg.volume_channels(), 17); // raw: 2C+1
        cfg.points = PointNetKind::Mlp;
        assert_eq!(cfg.volume_channels(), 24); // mlp: 3C
        cfg.points = PointNetKind::Raw;
        cfg.fusion = FusionLevel::Early;
        assert_eq!(cfg.volume_channels(), 16); // early: 2C
    }
}
