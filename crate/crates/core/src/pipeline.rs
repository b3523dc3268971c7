//! End-to-end model assembly.
//!
//! One forward pass: shared-weight feature towers over both views, the
//! configured point network, volume construction, sequential 3D aggregation,
//! and per-stage soft-argmax depth regression at full resolution. The
//! backward pass mirrors it exactly, accumulating into the parameter set.
//! Early fusion instead splats the points into a sparse depth channel
//! concatenated to both images and embeds nothing in the volume.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::geometry::{CameraRig, GeometryError, PointCloud, VoxelGridSpec};
use crate::math::Real;
use crate::network::{
    aggregate, aggregate_backward, depth_loss, depth_loss_backward, extract_backward,
    extract_features, init_aggregation_params, init_extractor_params, regress_depth,
    regress_depth_backward, AggregateCache, ConfigError, DepthMap, ExtractCache, FusionLevel,
    LossError, ModelConfig, RegressCache,
};
use crate::optim::ParamSet;
use crate::pointnet::{
    init_point_params, point_backward, point_forward, voxelize, PointCache, PointNetKind,
    VoxelizedCloud,
};
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};
use crate::volume::{build_volume, TailChannels, VolumeBuild, VolumeKind};

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineError {
    Tensor(TensorError),
    Config(ConfigError),
    Loss(LossError),
    Geometry(GeometryError),
    Input(String),
}

impl core::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PipelineError::Tensor(e) => write!(f, "{e}"),
            PipelineError::Config(e) => write!(f, "{e}"),
            PipelineError::Loss(e) => write!(f, "{e}"),
            PipelineError::Geometry(e) => write!(f, "{e}"),
            PipelineError::Input(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        PipelineError::Tensor(e)
    }
}
impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e)
    }
}
impl From<LossError> for PipelineError {
    fn from(e: LossError) -> Self {
        PipelineError::Loss(e)
    }
}
impl From<GeometryError> for PipelineError {
    fn from(e: GeometryError) -> Self {
        PipelineError::Geometry(e)
    }
}

/// Builds the full parameter set for a configuration, deterministically
/// seeded.
pub fn init_params<E: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<E>, PipelineError> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut rng = Rng::derive(seed, 0x11);
    init_extractor_params(cfg.image_channels(), cfg.channels, &mut params, &mut rng);
    if cfg.fusion == FusionLevel::Intermediate {
        init_point_params(cfg.points, cfg.channels, &mut params, &mut rng);
    }
    init_aggregation_params(
        cfg.volume_channels(),
        cfg.channels,
        cfg.stages,
        &mut params,
        &mut rng,
    );
    Ok(params)
}

/// Grid the points are embedded into (metric or disparity bins per volume
/// kind).
pub fn embed_spec_of(cfg: &ModelConfig, rig: &CameraRig) -> VoxelGridSpec {
    VoxelGridSpec::for_rig(
        rig,
        cfg.depth_bins,
        cfg.z_max,
        cfg.embed_spacing(),
        cfg.downsample,
    )
}

/// Grid the aggregation network sees (metric bins unless running the pure
/// cost volume).
pub fn out_spec_of(cfg: &ModelConfig, rig: &CameraRig) -> VoxelGridSpec {
    match cfg.volume {
        VolumeKind::Fusion | VolumeKind::Depth => VoxelGridSpec::for_rig(
            rig,
            cfg.depth_bins,
            cfg.z_max,
            crate::geometry::BinSpacing::DepthLinear,
            cfg.downsample,
        ),
        VolumeKind::Cost => embed_spec_of(cfg, rig),
    }
}

/// Nearest-pixel splat of point depths into a full-resolution channel;
/// zeros where no point lands, nearest point wins a collision.
fn sparse_depth_splat<E: Real>(
    cloud: &PointCloud,
    rig: &CameraRig,
    right_view: bool,
) -> Tensor<E> {
    let (h, w) = (rig.height, rig.width);
    let mut best = alloc::vec![f64::INFINITY; h * w];
    for i in 0..cloud.len() {
        let p = cloud.point_f64(i);
        let proj = if right_view {
            rig.project_right(p)
        } else {
            rig.project(p)
        };
        let Ok((u, v)) = proj else { continue };
        let (ui, vi) = (libm::round(u), libm::round(v));
        if ui < 0.0 || ui >= w as f64 || vi < 0.0 || vi >= h as f64 {
            continue;
        }
        let idx = vi as usize * w + ui as usize;
        if p[2] < best[idx] {
            best[idx] = p[2];
        }
    }
    Tensor::from_fn(&[1, h, w], |i| {
        if best[i].is_finite() {
            E::from_f64(best[i])
        } else {
            E::ZERO
        }
    })
}

fn concat_channel<E: Real>(image: &Tensor<E>, extra: &Tensor<E>) -> Tensor<E> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut data = Vec::with_capacity((c + 1) * h * w);
    data.extend_from_slice(image.data());
    data.extend_from_slice(extra.data());
    Tensor::from_vec(&[c + 1, h, w], data).expect("sizes agree")
}

/// Everything one forward pass computed, ready for `backward`.
pub struct ForwardPass<E: Real> {
    /// Full-resolution depth per stage, flat [height * width], meters.
    pub stage_preds: Vec<Tensor<E>>,
    /// Points dropped by the grid quantization.
    pub dropped_points: usize,
    /// Occupied voxel count of the embedding grid.
    pub occupied_voxels: usize,
    rig: CameraRig,
    extract_l: ExtractCache<E>,
    extract_r: ExtractCache<E>,
    map_shape: (usize, usize, usize),
    vox: VoxelizedCloud,
    point_cache: PointCache<E>,
    volume: VolumeBuild<E>,
    agg_cache: AggregateCache<E>,
    regress: Vec<RegressCache<E>>,
}

pub fn forward<E: Real>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    left: &Tensor<E>,
    right: &Tensor<E>,
    cloud: &PointCloud,
    rig: &CameraRig,
) -> Result<ForwardPass<E>, PipelineError> {
    cfg.validate()?;
    left.expect_shape(&[3, rig.height, rig.width], "forward(left)")?;
    right.expect_shape(&[3, rig.height, rig.width], "forward(right)")?;
    if rig.height % (cfg.downsample) != 0 || rig.width % cfg.downsample != 0 {
        return Err(PipelineError::Input(format!(
            "image extents {}x{} not divisible by {}",
            rig.width, rig.height, cfg.downsample
        )));
    }

    let (left_in, right_in) = match cfg.fusion {
        FusionLevel::Intermediate => (left.clone(), right.clone()),
        FusionLevel::Early => {
            let sl = sparse_depth_splat::<E>(cloud, rig, false);
            let sr = sparse_depth_splat::<E>(cloud, rig, true);
            (concat_channel(left, &sl), concat_channel(right, &sr))
        }
    };

    let (f_l, extract_l) = extract_features(params, &left_in)?;
    let (f_r, extract_r) = extract_features(params, &right_in)?;
    let map_shape = (f_l.shape()[0], f_l.shape()[1], f_l.shape()[2]);

    let embed_spec = embed_spec_of(cfg, rig);
    let out_spec = out_spec_of(cfg, rig);
    let vox = voxelize(cloud, rig, &embed_spec);

    let (tail, f_p, point_cache) = match cfg.fusion {
        FusionLevel::Early => {
            let (_, cache) = point_forward(
                PointNetKind::Raw,
                cfg.channels,
                params,
                &vox,
                None,
                cfg.z_max,
            );
            (TailChannels::None, None, cache)
        }
        FusionLevel::Intermediate => {
            let (f_p, cache) =
                point_forward(cfg.points, cfg.channels, params, &vox, Some(&f_l), cfg.z_max);
            let tail = match cfg.points {
                PointNetKind::Raw => TailChannels::Occupancy,
                _ => TailChannels::PointFeatures,
            };
            (tail, f_p, cache)
        }
    };

    let volume = build_volume(
        cfg.volume,
        &f_l,
        &f_r,
        rig,
        &embed_spec,
        &out_spec,
        if tail == TailChannels::None { None } else { Some(&vox) },
        f_p.as_ref(),
        tail,
    );

    let (agg_outs, agg_cache) = aggregate(params, &volume.payload, cfg.stages)?;

    let mut stage_preds = Vec::with_capacity(cfg.stages);
    let mut regress = Vec::with_capacity(cfg.stages);
    for a in &agg_outs {
        let (pred, cache) = regress_depth(a, cfg.z_max, cfg.downsample)?;
        stage_preds.push(pred);
        regress.push(cache);
    }

    Ok(ForwardPass {
        stage_preds,
        dropped_points: vox.dropped,
        occupied_voxels: volume.occupied_count(),
        rig: rig.clone(),
        extract_l,
        extract_r,
        map_shape,
        vox,
        point_cache,
        volume,
        agg_cache,
        regress,
    })
}

impl<E: Real> ForwardPass<E> {
    /// Smallest distance of any pre-relu activation in the pass to the kink
    /// at zero. Finite-difference probes should only trust configurations
    /// where this comfortably exceeds their step.
    pub fn kink_margin(&self) -> f64 {
        self.extract_l
            .kink_margin()
            .min(self.extract_r.kink_margin())
            .min(self.point_cache.kink_margin())
            .min(self.agg_cache.kink_margin())
    }
}

/// Distributes one upstream gradient per stage prediction back to every
/// parameter. Returns the gradients on the (possibly splat-extended) input
/// images; images are inputs, not parameters, so callers usually drop them.
pub fn backward<E: Real>(
    cfg: &ModelConfig,
    params: &mut ParamSet<E>,
    pass: &ForwardPass<E>,
    d_preds: &[Tensor<E>],
) -> (Tensor<E>, Tensor<E>) {
    assert_eq!(d_preds.len(), cfg.stages, "one upstream per stage");
    let d_aggs: Vec<Tensor<E>> = pass
        .regress
        .iter()
        .zip(d_preds.iter())
        .map(|(cache, up)| regress_depth_backward(cache, cfg.z_max, up))
        .collect();
    let d_volume = aggregate_backward(params, &pass.agg_cache, &d_aggs);
    let (mut d_f_l, d_f_r, d_f_p) =
        pass.volume
            .backward(&pass.rig, &d_volume, pass.map_shape, pass.vox.len());
    if let Some(d_f_p) = d_f_p {
        point_backward(&pass.point_cache, params, &pass.vox, &d_f_p, Some(&mut d_f_l));
    } else if cfg.fusion == FusionLevel::Intermediate && cfg.points != PointNetKind::Raw {
        unreachable!("feature tail always yields a point gradient");
    }
    let d_left = extract_backward(params, &pass.extract_l, &d_f_l);
    let d_right = extract_backward(params, &pass.extract_r, &d_f_r);
    (d_left, d_right)
}

/// Forward + losses + backward for one sample. Returns the per-stage
/// (unweighted) losses; gradients are weighted by the configured stage
/// weights. The caller owns the optimizer step.
pub fn train_step<E: Real>(
    cfg: &ModelConfig,
    params: &mut ParamSet<E>,
    left: &Tensor<E>,
    right: &Tensor<E>,
    cloud: &PointCloud,
    rig: &CameraRig,
    truth: &DepthMap,
) -> Result<Vec<f64>, PipelineError> {
    let pass = forward(cfg, params, left, right, cloud, rig)?;
    let mut losses = Vec::with_capacity(cfg.stages);
    let mut d_preds = Vec::with_capacity(cfg.stages);
    for (s, pred) in pass.stage_preds.iter().enumerate() {
        losses.push(depth_loss(pred, truth)?);
        d_preds.push(depth_loss_backward(pred, truth, cfg.stage_weights[s]));
    }
    backward(cfg, params, &pass, &d_preds);
    Ok(losses)
}

/// Runs the final stage only and packages the result as a dense depth map.
pub fn predict<E: Real>(
    cfg: &ModelConfig,
    params: &ParamSet<E>,
    left: &Tensor<E>,
    right: &Tensor<E>,
    cloud: &PointCloud,
    rig: &CameraRig,
) -> Result<DepthMap, PipelineError> {
    let pass = forward(cfg, params, left, right, cloud, rig)?;
    let last = pass.stage_preds.last().expect("stages >= 1");
    Ok(DepthMap::dense(
        rig.width,
        rig.height,
        last.data().iter().map(|v| v.to_f64() as f32).collect(),
    ))
}
