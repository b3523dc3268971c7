//! The unified 3D volume stereo features and LiDAR points are fused into.
//!
//! Channel layout is positional and fixed: left features C | right features C
//! | tail, where the tail is one occupancy channel (raw points), C point
//! feature channels (mlp / fused-conv), or empty (early fusion). Voxel (u,v)
//! cells align with the left feature map; the right features for a voxel are
//! sampled at the disparity of its bin center, so the same code builds both
//! the metric-depth volume and the classic disparity-spaced cost volume. A
//! depth-volume baseline is produced by resampling a built cost volume onto
//! metric bins, point embedding included, so it inherits the cost volume's
//! quantization of points.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{CameraRig, PointCloud, VoxelGridSpec};
use crate::math::Real;
use crate::pointnet::VoxelizedCloud;
use crate::tensor::Tensor;

/// Which voxel representation the network aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    /// Bins uniform in metric depth, sensor data written directly.
    Fusion,
    /// Bins uniform in disparity.
    Cost,
    /// Cost volume resampled onto metric-depth bins after construction.
    Depth,
}

/// What occupies the channels after the two stereo blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailChannels {
    /// Binary occupancy only.
    Occupancy,
    /// C point-feature channels written at occupied voxels.
    PointFeatures,
    /// Nothing embedded (early fusion).
    None,
}

impl TailChannels {
    pub fn count(self, c: usize) -> usize {
        match self {
            TailChannels::Occupancy => 1,
            TailChannels::PointFeatures => c,
            TailChannels::None => 0,
        }
    }
}

/// A built volume plus everything its backward pass needs.
#[derive(Debug, Clone)]
pub struct VolumeBuild<E> {
    /// [channels, D, H, W] seen by the aggregation network.
    pub payload: Tensor<E>,
    /// Occupancy mask of the embedding grid, flat [D*H*W].
    pub occupancy: Vec<bool>,
    pub stereo_channels: usize,
    pub tail: TailChannels,
    /// Grid the points were embedded into.
    pub embed_spec: VoxelGridSpec,
    /// Grid the payload lives on (differs from embed_spec only for Depth).
    pub out_spec: VoxelGridSpec,
    /// Colliding points grouped per voxel, ascending flat index.
    embed_groups: Vec<(usize, Vec<u32>)>,
    kind: VolumeKind,
}

/// Per-bin horizontal shift of the right view, in feature-map cells.
/// `None` means the bin's disparity is unbounded (z=0 end of a metric grid).
fn bin_shift(spec: &VoxelGridSpec, rig: &CameraRig, id: usize) -> Option<f64> {
    spec.bin_center_disparity(rig, id)
        .map(|d| d / spec.downsample as f64)
}

/// Writes left/right stereo features into the first 2C channels: voxel
/// (iu,iv,id) holds the left feature at (iu,iv) and the right feature
/// linearly interpolated at (iu - shift(id), iv); out-of-range right samples
/// stay zero.
fn fill_stereo<E: Real>(
    payload: &mut Tensor<E>,
    f_l: &Tensor<E>,
    f_r: &Tensor<E>,
    rig: &CameraRig,
    spec: &VoxelGridSpec,
) {
    let (c, h, w) = (f_l.shape()[0], f_l.shape()[1], f_l.shape()[2]);
    let d = spec.depth_bins;
    let lv = f_l.data();
    let rv = f_r.data();
    let dst = payload.data_mut();
    let plane = h * w;
    for id in 0..d {
        let shift = bin_shift(spec, rig, id);
        for ch in 0..c {
            let lbase = ch * plane;
            let obase_l = (ch * d + id) * plane;
            let obase_r = ((c + ch) * d + id) * plane;
            for iv in 0..h {
                let row = iv * w;
                let lrow = &lv[lbase + row..lbase + row + w];
                let orow_l = &mut dst[obase_l + row..obase_l + row + w];
                orow_l.copy_from_slice(lrow);
                if let Some(s) = shift {
                    let rrow = &rv[(ch * h + iv) * w..(ch * h + iv + 1) * w];
                    let orow_r = &mut dst[obase_r + row..obase_r + row + w];
                    for iu in 0..w {
                        let u = iu as f64 - s;
                        let u0 = libm::floor(u);
                        let t = u - u0;
                        let u0 = u0 as isize;
                        let mut acc = E::ZERO;
                        if u0 >= 0 && (u0 as usize) < w {
                            acc += E::from_f64(1.0 - t) * rrow[u0 as usize];
                        }
                        if u0 + 1 >= 0 && ((u0 + 1) as usize) < w {
                            acc += E::from_f64(t) * rrow[(u0 + 1) as usize];
                        }
                        orow_r[iu] = acc;
                    }
                }
            }
        }
    }
}

fn fill_stereo_backward<E: Real>(
    upstream: &Tensor<E>,
    rig: &CameraRig,
    spec: &VoxelGridSpec,
    c: usize,
    h: usize,
    w: usize,
    d_f_l: &mut Tensor<E>,
    d_f_r: &mut Tensor<E>,
) {
    let d = spec.depth_bins;
    let g = upstream.data();
    let dl = d_f_l.data_mut();
    let dr = d_f_r.data_mut();
    let plane = h * w;
    for id in 0..d {
        let shift = bin_shift(spec, rig, id);
        for ch in 0..c {
            let lbase = ch * plane;
            let obase_l = (ch * d + id) * plane;
            let obase_r = ((c + ch) * d + id) * plane;
            for iv in 0..h {
                let row = iv * w;
                for iu in 0..w {
                    dl[lbase + row + iu] += g[obase_l + row + iu];
                }
                if let Some(s) = shift {
                    for iu in 0..w {
                        let gg = g[obase_r + row + iu];
                        let u = iu as f64 - s;
                        let u0 = libm::floor(u);
                        let t = u - u0;
                        let u0 = u0 as isize;
                        if u0 >= 0 && (u0 as usize) < w {
                            dr[(ch * h + iv) * w + u0 as usize] += E::from_f64(1.0 - t) * gg;
                        }
                        if u0 + 1 >= 0 && ((u0 + 1) as usize) < w {
                            dr[(ch * h + iv) * w + (u0 + 1) as usize] += E::from_f64(t) * gg;
                        }
                    }
                }
            }
        }
    }
}

/// Groups kept points by their flat voxel index, ascending, so collisions
/// resolve order-independently.
fn group_by_voxel(vox: &VoxelizedCloud, spec: &VoxelGridSpec) -> Vec<(usize, Vec<u32>)> {
    let (h, w) = (spec.grid_h, spec.grid_w);
    let mut map: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for (i, v) in vox.voxels.iter().enumerate() {
        let flat = (v[2] as usize * h + v[1] as usize) * w + v[0] as usize;
        map.entry(flat).or_default().push(i as u32);
    }
    map.into_iter().collect()
}

/// Marks occupancy and writes the tail channels: 1.0 for occupancy mode,
/// the collision-averaged point features otherwise.
fn embed_points<E: Real>(
    payload: &mut Tensor<E>,
    occupancy: &mut [bool],
    groups: &[(usize, Vec<u32>)],
    tail: TailChannels,
    stereo_channels: usize,
    f_p: Option<&Tensor<E>>,
    spec: &VoxelGridSpec,
) {
    let plane = spec.grid_h * spec.grid_w * spec.depth_bins;
    let dst = payload.data_mut();
    for (flat, pts) in groups {
        occupancy[*flat] = true;
        match tail {
            TailChannels::Occupancy => {
                dst[2 * stereo_channels * plane + flat] = E::ONE;
            }
            TailChannels::PointFeatures => {
                let f = f_p.expect("point features required in feature mode");
                let c = f.shape()[0];
                let n = f.shape()[1];
                let inv = E::from_f64(1.0 / pts.len() as f64);
                for ch in 0..c {
                    let mut acc = E::ZERO;
                    for &i in pts {
                        acc += f.data()[ch * n + i as usize];
                    }
                    dst[(2 * stereo_channels + ch) * plane + flat] = acc * inv;
                }
            }
            TailChannels::None => {}
        }
    }
}

fn embed_points_backward<E: Real>(
    upstream: &Tensor<E>,
    groups: &[(usize, Vec<u32>)],
    stereo_channels: usize,
    spec: &VoxelGridSpec,
    d_f_p: &mut Tensor<E>,
) {
    let plane = spec.grid_h * spec.grid_w * spec.depth_bins;
    let g = upstream.data();
    let c = d_f_p.shape()[0];
    let n = d_f_p.shape()[1];
    let dst = d_f_p.data_mut();
    for (flat, pts) in groups {
        let inv = E::from_f64(1.0 / pts.len() as f64);
        for ch in 0..c {
            let gg = g[(2 * stereo_channels + ch) * plane + flat] * inv;
            for &i in pts {
                dst[ch * n + i as usize] += gg;
            }
        }
    }
}

/// Interpolation taps for resampling a disparity-spaced volume onto metric
/// bins: for each destination bin, the source position of its disparity.
fn depth_resample_taps(
    src: &VoxelGridSpec,
    dst: &VoxelGridSpec,
    rig: &CameraRig,
) -> Vec<Option<(usize, usize, f64)>> {
    let d_max = match src.spacing {
        crate::geometry::BinSpacing::DisparityLinear { d_max } => d_max,
        _ => panic!("depth volume resamples a disparity-spaced source"),
    };
    let last = (src.depth_bins - 1) as f64;
    (0..dst.depth_bins)
        .map(|id| {
            let z = dst.bin_center_depth(rig, id)?;
            if z <= 0.0 {
                return None;
            }
            let t = rig.fx * rig.baseline / z / d_max * last;
            if !(0.0..=last).contains(&t) {
                return None;
            }
            let lo = libm::floor(t).min(last - 1.0).max(0.0) as usize;
            Some((lo, lo + 1, t - lo as f64))
        })
        .collect()
}

fn resample_depth_axis<E: Real>(
    payload: &Tensor<E>,
    taps: &[Option<(usize, usize, f64)>],
    channels: usize,
) -> Tensor<E> {
    let (src_d, gh, gw) = (payload.shape()[1], payload.shape()[2], payload.shape()[3]);
    let plane = gh * gw;
    let dst_d = taps.len();
    let mut out = Tensor::zeros(&[channels, dst_d, gh, gw]);
    let sv = payload.data();
    let dv = out.data_mut();
    for ch in 0..channels {
        for (id, tap) in taps.iter().enumerate() {
            let Some((lo, hi, t)) = tap else { continue };
            let (wl, wh) = (E::from_f64(1.0 - t), E::from_f64(*t));
            let slo = (ch * src_d + lo) * plane;
            let shi = (ch * src_d + hi) * plane;
            let dst = (ch * dst_d + id) * plane;
            for k in 0..plane {
                dv[dst + k] = wl * sv[slo + k] + wh * sv[shi + k];
            }
        }
    }
    out
}

fn resample_depth_axis_backward<E: Real>(
    upstream: &Tensor<E>,
    taps: &[Option<(usize, usize, f64)>],
    channels: usize,
    src_d: usize,
) -> Tensor<E> {
    let (gh, gw) = (upstream.shape()[2], upstream.shape()[3]);
    let plane = gh * gw;
    let dst_d = taps.len();
    let mut out = Tensor::zeros(&[channels, src_d, gh, gw]);
    let g = upstream.data();
    let dv = out.data_mut();
    for ch in 0..channels {
        for (id, tap) in taps.iter().enumerate() {
            let Some((lo, hi, t)) = tap else { continue };
            let (wl, wh) = (E::from_f64(1.0 - t), E::from_f64(*t));
            let slo = (ch * src_d + lo) * plane;
            let shi = (ch * src_d + hi) * plane;
            let src = (ch * dst_d + id) * plane;
            for k in 0..plane {
                dv[slo + k] += wl * g[src + k];
                dv[shi + k] += wh * g[src + k];
            }
        }
    }
    out
}

/// Builds the volume the aggregation network consumes.
///
/// `embed_spec` is the grid points are quantized into (metric bins for the
/// fusion volume, disparity bins for the cost and depth baselines);
/// `out_spec` is the grid of the returned payload and differs from
/// `embed_spec` only for [`VolumeKind::Depth`]. `vox` must have been built
/// on `embed_spec`.
pub fn build_volume<E: Real>(
    kind: VolumeKind,
    f_l: &Tensor<E>,
    f_r: &Tensor<E>,
    rig: &CameraRig,
    embed_spec: &VoxelGridSpec,
    out_spec: &VoxelGridSpec,
    vox: Option<&VoxelizedCloud>,
    f_p: Option<&Tensor<E>>,
    tail: TailChannels,
) -> VolumeBuild<E> {
    let c = f_l.shape()[0];
    let channels = 2 * c + tail.count(c);
    let mut payload = Tensor::zeros(&[
        channels,
        embed_spec.depth_bins,
        embed_spec.grid_h,
        embed_spec.grid_w,
    ]);
    fill_stereo(&mut payload, f_l, f_r, rig, embed_spec);

    let mut occupancy = vec![false; embed_spec.depth_bins * embed_spec.grid_h * embed_spec.grid_w];
    let groups = match vox {
        Some(v) if tail != TailChannels::None => {
            let groups = group_by_voxel(v, embed_spec);
            embed_points(&mut payload, &mut occupancy, &groups, tail, c, f_p, embed_spec);
            groups
        }
        _ => Vec::new(),
    };

    let payload = match kind {
        VolumeKind::Fusion | VolumeKind::Cost => payload,
        VolumeKind::Depth => {
            let taps = depth_resample_taps(embed_spec, out_spec, rig);
            resample_depth_axis(&payload, &taps, channels)
        }
    };

    VolumeBuild {
        payload,
        occupancy,
        stereo_channels: c,
        tail,
        embed_spec: embed_spec.clone(),
        out_spec: out_spec.clone(),
        embed_groups: groups,
        kind,
    }
}

impl<E: Real> VolumeBuild<E> {
    pub fn channels(&self) -> usize {
        self.payload.shape()[0]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|b| **b).count()
    }

    /// Distributes d(payload) to the stereo feature maps and point features.
    /// Returns (d_f_l, d_f_r, d_f_p); the last is zero-shaped when no point
    /// features were embedded.
    pub fn backward(
        &self,
        rig: &CameraRig,
        upstream: &Tensor<E>,
        map_shape: (usize, usize, usize),
        n_points: usize,
    ) -> (Tensor<E>, Tensor<E>, Option<Tensor<E>>) {
        let (c, h, w) = map_shape;
        let g_embed = match self.kind {
            VolumeKind::Fusion | VolumeKind::Cost => upstream.clone(),
            VolumeKind::Depth => {
                let taps = depth_resample_taps(&self.embed_spec, &self.out_spec, rig);
                resample_depth_axis_backward(upstream, &taps, self.channels(), self.embed_spec.depth_bins)
            }
        };
        let mut d_f_l = Tensor::zeros(&[c, h, w]);
        let mut d_f_r = Tensor::zeros(&[c, h, w]);
        fill_stereo_backward(&g_embed, rig, &self.embed_spec, c, h, w, &mut d_f_l, &mut d_f_r);
        let d_f_p = match self.tail {
            TailChannels::PointFeatures => {
                let mut d = Tensor::zeros(&[c, n_points]);
                embed_points_backward(&g_embed, &self.embed_groups, c, &self.embed_spec, &mut d);
                Some(d)
            }
            _ => None,
        };
        (d_f_l, d_f_r, d_f_p)
    }
}

/// One row of the quantization analysis: absolute metric depth error of
/// embedded points within a depth band.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBand {
    pub lo: f64,
    pub hi: f64,
    /// Points contributing to the statistics. Points whose voxel decodes to
    /// unbounded depth (the d=0 disparity bin) are excluded.
    pub count: usize,
    pub mean_abs_err: f64,
    pub max_abs_err: f64,
}

pub const QUANT_BANDS: [(f64, f64); 3] = [(0.0, 20.0), (20.0, 40.0), (40.0, 80.0)];

/// Embeds each point, decodes its voxel center back to a metric point, and
/// accumulates |z - decoded z| per depth band.
pub fn quantization_bands(
    points: &PointCloud,
    rig: &CameraRig,
    spec: &VoxelGridSpec,
    bands: &[(f64, f64)],
) -> Vec<QuantBand> {
    let mut acc: Vec<(usize, f64, f64)> = vec![(0, 0.0, 0.0); bands.len()];
    for i in 0..points.len() {
        let p = points.point_f64(i);
        let Some((iu, iv, id)) = spec.voxel_index_of(rig, p) else {
            continue;
        };
        let Some(center) = spec.voxel_center(rig, iu, iv, id) else {
            continue; // unbounded-depth bin: no finite decode
        };
        let err = (p[2] - center[2]).abs();
        for (b, (lo, hi)) in bands.iter().enumerate() {
            if p[2] >= *lo && p[2] < *hi {
                let (count, sum, max) = &mut acc[b];
                *count += 1;
                *sum += err;
                if err > *max {
                    *max = err;
                }
            }
        }
    }
    bands
        .iter()
        .zip(acc)
        .map(|((lo, hi), (count, sum, max))| QuantBand {
            lo: *lo,
            hi: *hi,
            count,
            mean_abs_err: if count > 0 { sum / count as f64 } else { 0.0 },
            max_abs_err: max,
        })
        .collect()
}
