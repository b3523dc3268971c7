//! Point-feature extraction guided by image features.
//!
//! Points are quantized into the voxel grid once; neighborhoods are frustum
//! windows in (u, v, depth-bin) units so point receptive fields line up with
//! the image feature maps instead of metric cubes. The fused-convolution
//! layer interpolates left-image features onto each point, mixes them with
//! the running point features, and averages each cluster under a learned
//! weight that is linear in the metric offset between points.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{CameraRig, PointCloud, VoxelGridSpec};
use crate::math::Real;
use crate::ops::{
    self, bilinear_sample2d, bilinear_sample2d_backward, linear, linear_backward, matmul,
    matmul_backward, Border,
};
use crate::optim::ParamSet;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Frustum window half-extents in voxel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterWindow {
    pub du: i32,
    pub dv: i32,
    pub dd: i32,
}

impl Default for ClusterWindow {
    fn default() -> Self {
        // smallest non-trivial frustum neighborhood: 3x3x3 voxels
        ClusterWindow { du: 1, dv: 1, dd: 1 }
    }
}

/// A point cloud after grid quantization: only points that landed inside the
/// grid are kept, with their metric coordinates, continuous feature-map
/// projections and integer voxel indices.
#[derive(Debug, Clone)]
pub struct VoxelizedCloud {
    /// Indices into the original cloud, ascending.
    pub kept: Vec<usize>,
    /// Metric coordinates of the kept points.
    pub coords: Vec<[f64; 3]>,
    /// Continuous (u, v) at feature-map scale for image sampling.
    pub map_uv: Vec<(f64, f64)>,
    /// Integer voxel indices (iu, iv, id).
    pub voxels: Vec<[i32; 3]>,
    /// Points rejected by the grid (out of frustum or depth range).
    pub dropped: usize,
}

impl VoxelizedCloud {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Quantizes a cloud into the grid, dropping (and counting) points whose
/// projection or depth falls outside it.
pub fn voxelize(cloud: &PointCloud, rig: &CameraRig, spec: &VoxelGridSpec) -> VoxelizedCloud {
    let mut out = VoxelizedCloud {
        kept: Vec::new(),
        coords: Vec::new(),
        map_uv: Vec::new(),
        voxels: Vec::new(),
        dropped: 0,
    };
    for i in 0..cloud.len() {
        let p = cloud.point_f64(i);
        match spec.voxel_index_of(rig, p) {
            Some((iu, iv, id)) => {
                let (u, v) = rig.project(p).expect("z > 0 by PointCloud invariant");
                out.kept.push(i);
                out.coords.push(p);
                out.map_uv
                    .push((u / spec.downsample as f64, v / spec.downsample as f64));
                out.voxels.push([iu as i32, iv as i32, id as i32]);
            }
            None => out.dropped += 1,
        }
    }
    out
}

/// Per-center neighbor lists; every list contains the center itself and is
/// sorted ascending so reductions run in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterIndex {
    pub neighbors: Vec<Vec<u32>>,
}

fn in_window(a: [i32; 3], b: [i32; 3], w: ClusterWindow) -> bool {
    (a[0] - b[0]).abs() <= w.du && (a[1] - b[1]).abs() <= w.dv && (a[2] - b[2]).abs() <= w.dd
}

/// Grid-bucket neighbor search, O(N * k).
pub fn cluster(vox: &VoxelizedCloud, window: ClusterWindow) -> ClusterIndex {
    let mut buckets: BTreeMap<(i32, i32, i32), Vec<u32>> = BTreeMap::new();
    for (i, v) in vox.voxels.iter().enumerate() {
        buckets.entry((v[0], v[1], v[2])).or_default().push(i as u32);
    }
    let mut neighbors = Vec::with_capacity(vox.len());
    for (c, vc) in vox.voxels.iter().enumerate() {
        let mut list: Vec<u32> = Vec::new();
        for bu in -window.du..=window.du {
            for bv in -window.dv..=window.dv {
                for bd in -window.dd..=window.dd {
                    let key = (vc[0] + bu, vc[1] + bv, vc[2] + bd);
                    if let Some(ids) = buckets.get(&key) {
                        list.extend_from_slice(ids);
                    }
                }
            }
        }
        list.sort_unstable();
        debug_assert!(list.binary_search(&(c as u32)).is_ok());
        neighbors.push(list);
    }
    ClusterIndex { neighbors }
}

/// Reference O(N^2) scan with the same window predicate; kept as the oracle
/// the fast path is tested against.
pub fn cluster_naive(vox: &VoxelizedCloud, window: ClusterWindow) -> ClusterIndex {
    let n = vox.len();
    let mut neighbors = Vec::with_capacity(n);
    for c in 0..n {
        let mut list = Vec::new();
        for i in 0..n {
            if in_window(vox.voxels[c], vox.voxels[i], window) {
                list.push(i as u32);
            }
        }
        neighbors.push(list);
    }
    ClusterIndex { neighbors }
}

/// Samples the left feature map [c,h,w] at each point's projection,
/// returning [c,n]. First half of the fused feature block.
pub fn sample_image_features<E: Real>(map: &Tensor<E>, vox: &VoxelizedCloud) -> Tensor<E> {
    bilinear_sample2d(map, &vox.map_uv, Border::Clamp).expect("map rank checked by caller")
}

pub fn sample_image_features_backward<E: Real>(
    map_shape: &[usize],
    vox: &VoxelizedCloud,
    upstream: &Tensor<E>,
    dmap: &mut Tensor<E>,
) {
    bilinear_sample2d_backward(map_shape, &vox.map_uv, Border::Clamp, upstream, dmap);
}

/// Stacks image-sampled features over point features into [2c, n].
pub fn fuse_features<E: Real>(f_img: &Tensor<E>, f_pt: &Tensor<E>) -> Tensor<E> {
    let (c, n) = (f_img.shape()[0], f_img.shape()[1]);
    let mut data = Vec::with_capacity(2 * c * n);
    data.extend_from_slice(f_img.data());
    data.extend_from_slice(f_pt.data());
    Tensor::from_vec(&[2 * c, n], data).expect("sizes agree")
}

fn split_fused<E: Real>(d_fused: &Tensor<E>, c: usize, n: usize) -> (Tensor<E>, Tensor<E>) {
    let d_img = Tensor::from_vec(&[c, n], d_fused.data()[..c * n].to_vec()).expect("split");
    let d_pt = Tensor::from_vec(&[c, n], d_fused.data()[c * n..].to_vec()).expect("split");
    (d_img, d_pt)
}

/// Cluster-averaged, geometry-weighted aggregation: for center c and output
/// channel o,
///   out[o,c] = (1/|N_c|) sum_i mixed[o,i] * (a0 + a1 dx + a2 dy + a3 dz)
/// with (dx,dy,dz) = p_c - p_i in meters. The weight at zero offset is
/// exactly a0.
pub fn geo_aggregate<E: Real>(
    mixed: &Tensor<E>,
    coords: &[[f64; 3]],
    clusters: &ClusterIndex,
    geo: &Tensor<E>,
) -> Tensor<E> {
    let (c_out, n) = (mixed.shape()[0], mixed.shape()[1]);
    let g = geo.data();
    let m = mixed.data();
    let mut out = Tensor::zeros(&[c_out, n]);
    let dst = out.data_mut();
    for (c, list) in clusters.neighbors.iter().enumerate() {
        let inv = E::from_f64(1.0 / list.len() as f64);
        let pc = coords[c];
        for o in 0..c_out {
            let (a0, a1, a2, a3) = (g[o * 4], g[o * 4 + 1], g[o * 4 + 2], g[o * 4 + 3]);
            let mut acc = E::ZERO;
            for &i in list {
                let pi = coords[i as usize];
                let w = a0
                    + a1 * E::from_f64(pc[0] - pi[0])
                    + a2 * E::from_f64(pc[1] - pi[1])
                    + a3 * E::from_f64(pc[2] - pi[2]);
                acc += m[o * n + i as usize] * w;
            }
            dst[o * n + c] = acc * inv;
        }
    }
    out
}

/// Returns (d_mixed, d_geo).
pub fn geo_aggregate_backward<E: Real>(
    mixed: &Tensor<E>,
    coords: &[[f64; 3]],
    clusters: &ClusterIndex,
    geo: &Tensor<E>,
    upstream: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let (c_out, n) = (mixed.shape()[0], mixed.shape()[1]);
    let g = geo.data();
    let m = mixed.data();
    let up = upstream.data();
    let mut d_mixed = Tensor::zeros(&[c_out, n]);
    let mut d_geo = Tensor::zeros(geo.shape());
    let dm = d_mixed.data_mut();
    let dg = d_geo.data_mut();
    for (c, list) in clusters.neighbors.iter().enumerate() {
        let inv = E::from_f64(1.0 / list.len() as f64);
        let pc = coords[c];
        for o in 0..c_out {
            let (a0, a1, a2, a3) = (g[o * 4], g[o * 4 + 1], g[o * 4 + 2], g[o * 4 + 3]);
            let gc = up[o * n + c] * inv;
            for &i in list {
                let pi = coords[i as usize];
                let dx = E::from_f64(pc[0] - pi[0]);
                let dy = E::from_f64(pc[1] - pi[1]);
                let dz = E::from_f64(pc[2] - pi[2]);
                let w = a0 + a1 * dx + a2 * dy + a3 * dz;
                let mi = m[o * n + i as usize];
                dm[o * n + i as usize] += gc * w;
                dg[o * 4] += gc * mi;
                dg[o * 4 + 1] += gc * mi * dx;
                dg[o * 4 + 2] += gc * mi * dy;
                dg[o * 4 + 3] += gc * mi * dz;
            }
        }
    }
    (d_mixed, d_geo)
}

/// Straight transcription of the layer definition as a double loop, without
/// the matmul factoring of the fast path. Test oracle only.
pub fn fused_conv_naive<E: Real>(
    fused: &Tensor<E>,
    coords: &[[f64; 3]],
    clusters: &ClusterIndex,
    mix: &Tensor<E>,
    geo: &Tensor<E>,
) -> Tensor<E> {
    let (c_out, c_in) = (mix.shape()[0], mix.shape()[1]);
    let n = fused.shape()[1];
    let mut out = Tensor::zeros(&[c_out, n]);
    for c in 0..n {
        let list = &clusters.neighbors[c];
        for o in 0..c_out {
            let mut acc = 0.0_f64;
            for &i in list {
                let mut mixed = 0.0_f64;
                for k in 0..c_in {
                    mixed += mix.data()[o * c_in + k].to_f64()
                        * fused.data()[k * n + i as usize].to_f64();
                }
                let d = [
                    coords[c][0] - coords[i as usize][0],
                    coords[c][1] - coords[i as usize][1],
                    coords[c][2] - coords[i as usize][2],
                ];
                let w = geo.data()[o * 4].to_f64()
                    + geo.data()[o * 4 + 1].to_f64() * d[0]
                    + geo.data()[o * 4 + 2].to_f64() * d[1]
                    + geo.data()[o * 4 + 3].to_f64() * d[2];
                acc += mixed * w;
            }
            out.data_mut()[o * n + c] = E::from_f64(acc / list.len() as f64);
        }
    }
    out
}

/// One fused-convolution layer: channel mixing of [image ; point] features
/// followed by the geometry-weighted cluster average.
pub fn fused_conv_forward<E: Real>(
    fused: &Tensor<E>,
    coords: &[[f64; 3]],
    clusters: &ClusterIndex,
    mix: &Tensor<E>,
    geo: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let mixed = matmul(mix, fused).expect("mix shape");
    let out = geo_aggregate(&mixed, coords, clusters, geo);
    (out, mixed)
}

/// Returns (d_fused, d_mix, d_geo); `mixed` is the value saved by forward.
pub fn fused_conv_backward<E: Real>(
    fused: &Tensor<E>,
    mixed: &Tensor<E>,
    coords: &[[f64; 3]],
    clusters: &ClusterIndex,
    mix: &Tensor<E>,
    geo: &Tensor<E>,
    upstream: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (d_mixed, d_geo) = geo_aggregate_backward(mixed, coords, clusters, geo, upstream);
    let (d_mix, d_fused) = matmul_backward(mix, fused, &d_mixed);
    (d_fused, d_mix, d_geo)
}

/// Which point network feeds the volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointNetKind {
    /// No point features; only binary occupancy is embedded.
    Raw,
    /// Per-point fully-connected stack, no neighbors, no image guidance.
    Mlp,
    /// Three fused-convolution layers over frustum-window clusters.
    FusedConv { window: ClusterWindow },
}

pub const FUSED_CONV_LAYERS: usize = 3;

/// Registers this frontend's parameters (uniform init scaled by fan-in; the
/// geometric weight starts at the cluster mean, a0 = 1).
pub fn init_point_params<E: Real>(
    kind: PointNetKind,
    channels: usize,
    params: &mut ParamSet<E>,
    rng: &mut Rng,
) {
    let he = |rng: &mut Rng, fan_in: usize| {
        let b = libm::sqrt(6.0 / fan_in as f64);
        rng.range(-b, b)
    };
    match kind {
        PointNetKind::Raw => {}
        PointNetKind::Mlp => {
            params
                .insert("points.embed.w", Tensor::from_fn(&[channels, 3], |_| E::from_f64(he(rng, 3))))
                .unwrap();
            params.insert("points.embed.b", Tensor::zeros(&[channels])).unwrap();
            for l in 1..=2 {
                params
                    .insert(
                        &alloc::format!("points.fc{l}.w"),
                        Tensor::from_fn(&[channels, channels], |_| E::from_f64(he(rng, channels))),
                    )
                    .unwrap();
                params
                    .insert(&alloc::format!("points.fc{l}.b"), Tensor::zeros(&[channels]))
                    .unwrap();
            }
        }
        PointNetKind::FusedConv { .. } => {
            params
                .insert("points.embed.w", Tensor::from_fn(&[channels, 3], |_| E::from_f64(he(rng, 3))))
                .unwrap();
            params.insert("points.embed.b", Tensor::zeros(&[channels])).unwrap();
            for l in 1..=FUSED_CONV_LAYERS {
                params
                    .insert(
                        &alloc::format!("points.fconv{l}.mix"),
                        Tensor::from_fn(&[channels, 2 * channels], |_| {
                            E::from_f64(he(rng, 2 * channels))
                        }),
                    )
                    .unwrap();
                params
                    .insert(
                        &alloc::format!("points.fconv{l}.geo"),
                        Tensor::from_fn(&[channels, 4], |i| {
                            if i % 4 == 0 {
                                E::ONE
                            } else {
                                E::from_f64(rng.range(-0.05, 0.05))
                            }
                        }),
                    )
                    .unwrap();
            }
        }
    }
}

/// Coordinates normalized by the depth range so the embedding sees O(1)
/// inputs regardless of scene scale.
fn normalized_coords<E: Real>(vox: &VoxelizedCloud, z_max: f64) -> Tensor<E> {
    let n = vox.len();
    Tensor::from_fn(&[3, n], |idx| {
        let (axis, i) = (idx / n, idx % n);
        E::from_f64(vox.coords[i][axis] / z_max)
    })
}

#[derive(Debug, Clone)]
struct LayerCache<E> {
    fused: Tensor<E>,
    mixed: Tensor<E>,
    pre_relu: Option<Tensor<E>>,
}

/// Saved activations of one point-frontend pass.
#[derive(Debug, Clone)]
pub struct PointCache<E> {
    kind: PointNetKind,
    xyz: Tensor<E>,
    embed_pre: Tensor<E>,
    mlp_acts: Vec<Tensor<E>>,
    f_img: Option<Tensor<E>>,
    clusters: Option<ClusterIndex>,
    layers: Vec<LayerCache<E>>,
}

impl<E: Real> PointCache<E> {
    /// Distance of every pre-relu activation to the kink.
    pub fn kink_margin(&self) -> f64 {
        let min_abs = |t: &Tensor<E>| {
            t.data()
                .iter()
                .map(|v| v.to_f64().abs())
                .fold(f64::INFINITY, f64::min)
        };
        let mut m = match self.kind {
            PointNetKind::Raw => f64::INFINITY,
            _ => min_abs(&self.embed_pre),
        };
        if self.kind == PointNetKind::Mlp {
            m = m.min(min_abs(&self.mlp_acts[1]));
        }
        for l in &self.layers {
            if let Some(pre) = &l.pre_relu {
                m = m.min(min_abs(pre));
            }
        }
        m
    }
}

/// Runs the configured point network over a voxelized cloud. Returns the
/// point features [channels, n] (None in raw mode) plus the cache backward
/// needs. `map` is the left feature map, used only by the fused-conv mode.
pub fn point_forward<E: Real>(
    kind: PointNetKind,
    channels: usize,
    params: &ParamSet<E>,
    vox: &VoxelizedCloud,
    map: Option<&Tensor<E>>,
    z_max: f64,
) -> (Option<Tensor<E>>, PointCache<E>) {
    let empty = PointCache {
        kind,
        xyz: Tensor::zeros(&[3, 0]),
        embed_pre: Tensor::zeros(&[0]),
        mlp_acts: Vec::new(),
        f_img: None,
        clusters: None,
        layers: Vec::new(),
    };
    match kind {
        PointNetKind::Raw => (None, empty),
        PointNetKind::Mlp => {
            let xyz = normalized_coords::<E>(vox, z_max);
            let z1 = linear(params.value("points.embed.w"), &xyz, params.value("points.embed.b"))
                .expect("embed shapes");
            let a1 = ops::relu(&z1);
            let z2 = linear(params.value("points.fc1.w"), &a1, params.value("points.fc1.b"))
                .expect("fc1 shapes");
            let a2 = ops::relu(&z2);
            let z3 = linear(params.value("points.fc2.w"), &a2, params.value("points.fc2.b"))
                .expect("fc2 shapes");
            let cache = PointCache {
                kind,
                xyz,
                embed_pre: z1,
                mlp_acts: vec![a1, z2, a2],
                f_img: None,
                clusters: None,
                layers: Vec::new(),
            };
            debug_assert_eq!(z3.shape()[0], channels, "point feature channel count");
            (Some(z3), cache)
        }
        PointNetKind::FusedConv { window } => {
            let map = map.expect("fused-conv mode requires the left feature map");
            let f_img = sample_image_features(map, vox);
            let clusters = cluster(vox, window);
            let xyz = normalized_coords::<E>(vox, z_max);
            let z0 = linear(params.value("points.embed.w"), &xyz, params.value("points.embed.b"))
                .expect("embed shapes");
            let mut f_pt = ops::relu(&z0);
            let mut layers = Vec::with_capacity(FUSED_CONV_LAYERS);
            for l in 1..=FUSED_CONV_LAYERS {
                let fused = fuse_features(&f_img, &f_pt);
                let mix = params.value(&alloc::format!("points.fconv{l}.mix"));
                let geo = params.value(&alloc::format!("points.fconv{l}.geo"));
                let (out, mixed) = fused_conv_forward(&fused, &vox.coords, &clusters, mix, geo);
                if l < FUSED_CONV_LAYERS {
                    layers.push(LayerCache {
                        fused,
                        mixed,
                        pre_relu: Some(out.clone()),
                    });
                    f_pt = ops::relu(&out);
                } else {
                    layers.push(LayerCache {
                        fused,
                        mixed,
                        pre_relu: None,
                    });
                    f_pt = out;
                }
            }
            let cache = PointCache {
                kind,
                xyz,
                embed_pre: z0,
                mlp_acts: Vec::new(),
                f_img: Some(f_img),
                clusters: Some(clusters),
                layers,
            };
            debug_assert_eq!(f_pt.shape()[0], channels, "point feature channel count");
            (Some(f_pt), cache)
        }
    }
}

/// Distributes d(point features) to the frontend parameters and, in
/// fused-conv mode, to the left feature map. Point coordinates are inputs,
/// not parameters; nothing flows to them.
pub fn point_backward<E: Real>(
    cache: &PointCache<E>,
    params: &mut ParamSet<E>,
    vox: &VoxelizedCloud,
    upstream: &Tensor<E>,
    dmap: Option<&mut Tensor<E>>,
) {
    match cache.kind {
        PointNetKind::Raw => {}
        PointNetKind::Mlp => {
            let a1 = &cache.mlp_acts[0];
            let z2 = &cache.mlp_acts[1];
            let a2 = &cache.mlp_acts[2];
            let (dw2, da2, db2) = linear_backward(params.value("points.fc2.w"), a2, upstream);
            params.accumulate("points.fc2.w", &dw2);
            params.accumulate("points.fc2.b", &db2);
            let dz2 = ops::relu_backward(z2, &da2);
            let (dw1, da1, db1) = linear_backward(params.value("points.fc1.w"), a1, &dz2);
            params.accumulate("points.fc1.w", &dw1);
            params.accumulate("points.fc1.b", &db1);
            let dz1 = ops::relu_backward(&cache.embed_pre, &da1);
            let (dwe, _dxyz, dbe) = linear_backward(params.value("points.embed.w"), &cache.xyz, &dz1);
            params.accumulate("points.embed.w", &dwe);
            params.accumulate("points.embed.b", &dbe);
        }
        PointNetKind::FusedConv { .. } => {
            let clusters = cache.clusters.as_ref().expect("cached clusters");
            let f_img = cache.f_img.as_ref().expect("cached image samples");
            let c = f_img.shape()[0];
            let n = f_img.shape()[1];
            let mut d_out = upstream.clone();
            let mut d_img_total = Tensor::<E>::zeros(&[c, n]);
            for l in (1..=FUSED_CONV_LAYERS).rev() {
                let lc = &cache.layers[l - 1];
                if let Some(pre) = &lc.pre_relu {
                    d_out = ops::relu_backward(pre, &d_out);
                }
                let mix_name = alloc::format!("points.fconv{l}.mix");
                let geo_name = alloc::format!("points.fconv{l}.geo");
                let (d_fused, d_mix, d_geo) = fused_conv_backward(
                    &lc.fused,
                    &lc.mixed,
                    &vox.coords,
                    clusters,
                    params.value(&mix_name),
                    params.value(&geo_name),
                    &d_out,
                );
                params.accumulate(&mix_name, &d_mix);
                params.accumulate(&geo_name, &d_geo);
                let (d_img, d_pt) = split_fused(&d_fused, c, n);
                d_img_total.add_assign(&d_img).expect("shape");
                d_out = d_pt;
            }
            let dz0 = ops::relu_backward(&cache.embed_pre, &d_out);
            let (dwe, _dxyz, dbe) = linear_backward(params.value("points.embed.w"), &cache.xyz, &dz0);
            params.accumulate("points.embed.w", &dwe);
            params.accumulate("points.embed.b", &dbe);
            if let Some(dmap) = dmap {
                sample_image_features_backward(
                    &[dmap.shape()[0], dmap.shape()[1], dmap.shape()[2]],
                    vox,
                    &d_img_total,
                    dmap,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BinSpacing, CameraRig};

    fn rig() -> CameraRig {
        CameraRig::new(100.0, 100.0, 50.0, 50.0, 0.5, 104, 104).unwrap()
    }

    fn spec(rig: &CameraRig) -> VoxelGridSpec {
        VoxelGridSpec::for_rig(rig, 48, 100.0, BinSpacing::DepthLinear, 4)
    }

    fn vox_of(points: &[[f32; 3]]) -> VoxelizedCloud {
        let rig = rig();
        let spec = spec(&rig);
        let cloud = PointCloud::from_points(points.to_vec()).unwrap();
        voxelize(&cloud, &rig, &spec)
    }

    #[test]
    fn lone_point_clusters_with_itself() {
        let vox = vox_of(&[[0.0, 0.0, 10.0]]);
        let idx = cluster(&vox, ClusterWindow::default());
        assert_eq!(idx.neighbors, vec![vec![0]]);
    }

    #[test]
    fn depth_window_separates_same_ray_points() {
        // two points on the principal ray, three depth bins apart
        let rig = rig();
        let sp = spec(&rig);
        let z0 = sp.bin_center_depth(&rig, 10).unwrap();
        let z1 = sp.bin_center_depth(&rig, 13).unwrap();
        let vox = vox_of(&[[0.0, 0.0, z0 as f32], [0.0, 0.0, z1 as f32]]);
        assert_eq!(vox.voxels[0][2], 10);
        assert_eq!(vox.voxels[1][2], 13);

        let tight = cluster(&vox, ClusterWindow { du: 1, dv: 1, dd: 1 });
        assert_eq!(tight.neighbors[0], vec![0]);
        let wide = cluster(&vox, ClusterWindow { du: 1, dv: 1, dd: 3 });
        assert_eq!(wide.neighbors[0], vec![0, 1]);
        assert_eq!(wide.neighbors[1], vec![0, 1]);
    }

    #[test]
    fn bucket_clustering_matches_the_naive_scan() {
        let rig = rig();
        let sp = spec(&rig);
        let mut rng = Rng::new(17);
        let mut pts = Vec::new();
        while pts.len() < 200 {
            let p = crate::geometry::random_frustum_point(&mut rng, &rig, 2.0, 95.0);
            if sp.voxel_index_of(&rig, p).is_some() {
                pts.push([p[0] as f32, p[1] as f32, p[2] as f32]);
            }
        }
        let vox = vox_of(&pts);
        assert_eq!(vox.len(), 200);
        let fast = cluster(&vox, ClusterWindow::default());
        let slow = cluster_naive(&vox, ClusterWindow::default());
        assert_eq!(fast, slow);
    }

    #[test]
    fn constant_feature_map_samples_constant_everywhere() {
        let vox = vox_of(&[[0.0, 0.0, 10.0], [1.5, -0.8, 42.0], [-2.0, 1.1, 77.0]]);
        let map = Tensor::<f64>::filled(&[3, 26, 26], 5.0);
        let sampled = sample_image_features(&map, &vox);
        assert_eq!(sampled.shape(), &[3, 3]);
        for v in sampled.data() {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_on_a_feature_cell_samples_that_cell_exactly() {
        // exactly representable coordinates projecting to pixel (48,48),
        // i.e. feature cell (12,12)
        let vox = vox_of(&[[-0.25, -0.25, 12.5]]);
        assert_eq!(vox.map_uv[0], (12.0, 12.0));
        let map = Tensor::<f64>::from_fn(&[2, 26, 26], |i| i as f64);
        let sampled = sample_image_features(&map, &vox);
        for c in 0..2 {
            let want = map.data()[(c * 26 + 12) * 26 + 12];
            assert_eq!(sampled.data()[c], want);
        }
    }

    #[test]
    fn per_point_fc_with_identity_weights_passes_features_through() {
        let w = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let b = Tensor::<f64>::zeros(&[3]);
        let x = Tensor::from_vec(&[3, 1], alloc::vec![7.0, 7.0, 7.0]).unwrap();
        let y = crate::ops::linear(&w, &x, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn lone_point_passthrough_matches_hand_formula() {
        // a0 = 1, pass-through mixing of a scalar fused feature 3.0
        let vox = vox_of(&[[0.0, 0.0, 10.0]]);
        let clusters = cluster(&vox, ClusterWindow::default());
        let fused = Tensor::from_vec(&[1, 1], alloc::vec![3.0_f64]).unwrap();
        let mix = Tensor::from_vec(&[1, 1], alloc::vec![1.0]).unwrap();
        let geo = Tensor::from_vec(&[1, 4], alloc::vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (out, _) = fused_conv_forward(&fused, &vox.coords, &clusters, &mix, &geo);
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn neighbor_with_cancelling_weight_matches_hand_formula() {
        // center at origin-ray, neighbor offset +1 m in x at the same depth;
        // a = (1,1,0,0) makes the neighbor weight 1 + (0-1) = 0
        let z = 10.0_f32;
        let vox = vox_of(&[[0.0, 0.0, z], [1.0, 0.0, z]]);
        // force both into one cluster regardless of (u,v) separation
        let clusters = ClusterIndex {
            neighbors: vec![vec![0, 1], vec![0, 1]],
        };
        let fused = Tensor::from_vec(&[1, 2], alloc::vec![2.0_f64, 4.0]).unwrap();
        let mix = Tensor::from_vec(&[1, 1], alloc::vec![1.0]).unwrap();
        let geo = Tensor::from_vec(&[1, 4], alloc::vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let (out, _) = fused_conv_forward(&fused, &vox.coords, &clusters, &mix, &geo);
        assert!((out.data()[0] - 1.0).abs() < 1e-9, "got {}", out.data()[0]);
    }

    #[test]
    fn optimized_layer_matches_naive_oracle() {
        let rig = rig();
        let sp = spec(&rig);
        let mut rng = Rng::new(23);
        for case in 0..20 {
            let n = 3 + rng.below(40);
            let mut pts = Vec::new();
            while pts.len() < n {
                let p = crate::geometry::random_frustum_point(&mut rng, &rig, 2.0, 95.0);
                if sp.voxel_index_of(&rig, p).is_some() {
                    pts.push([p[0] as f32, p[1] as f32, p[2] as f32]);
                }
            }
            let vox = vox_of(&pts);
            let clusters = cluster(&vox, ClusterWindow::default());
            let c = 3;
            let fused = Tensor::<f64>::from_fn(&[2 * c, n], |_| rng.range(-1.0, 1.0));
            let mix = Tensor::<f64>::from_fn(&[c, 2 * c], |_| rng.range(-1.0, 1.0));
            let geo = Tensor::<f64>::from_fn(&[c, 4], |_| rng.range(-1.0, 1.0));
            let (fast, _) = fused_conv_forward(&fused, &vox.coords, &clusters, &mix, &geo);
            let slow = fused_conv_naive(&fused, &vox.coords, &clusters, &mix, &geo);
            for (a, b) in fast.data().iter().zip(slow.data().iter()) {
                assert!((a - b).abs() < 1e-5, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rigid_translation_of_all_points_changes_nothing() {
        let vox = vox_of(&[[0.0, 0.0, 10.0], [0.4, 0.2, 10.5], [-0.3, 0.1, 9.5]]);
        let clusters = ClusterIndex {
            neighbors: vec![vec![0, 1, 2]; 3],
        };
        let mut rng = Rng::new(5);
        let fused = Tensor::<f64>::from_fn(&[2, 3], |_| rng.range(-1.0, 1.0));
        let mix = Tensor::<f64>::from_fn(&[1, 2], |_| rng.range(-1.0, 1.0));
        let geo = Tensor::from_vec(&[1, 4], alloc::vec![0.7, 0.3, -0.2, 0.5]).unwrap();
        let (base, _) = fused_conv_forward(&fused, &vox.coords, &clusters, &mix, &geo);
        let shifted: Vec<[f64; 3]> = vox
            .coords
            .iter()
            .map(|p| [p[0] + 3.0, p[1] - 2.0, p[2] + 7.0])
            .collect();
        let (moved, _) = fused_conv_forward(&fused, &shifted, &clusters, &mix, &geo);
        for (a, b) in base.data().iter().zip(moved.data().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn translating_only_the_center_shifts_weights_linearly() {
        // single center with one neighbor; moving the center by t changes
        // the neighbor weight by a1 tx + a2 ty + a3 tz
        let coords = [[0.0, 0.0, 10.0], [1.0, 0.5, 10.5]];
        let clusters = ClusterIndex {
            neighbors: vec![vec![0, 1], vec![0, 1]],
        };
        let fused = Tensor::from_vec(&[1, 2], alloc::vec![0.0_f64, 1.0]).unwrap();
        let mix = Tensor::from_vec(&[1, 1], alloc::vec![1.0]).unwrap();
        let (a1, a2, a3) = (0.3, -0.4, 0.2);
        let geo = Tensor::from_vec(&[1, 4], alloc::vec![1.0, a1, a2, a3]).unwrap();
        let (base, _) = fused_conv_forward(&fused, &coords, &clusters, &mix, &geo);
        let t = [0.5, -1.0, 0.25];
        let moved_coords = [[t[0], t[1], 10.0 + t[2]], coords[1]];
        let (moved, _) = fused_conv_forward(&fused, &moved_coords, &clusters, &mix, &geo);
        // only the neighbor term contributes (center feature is 0), so the
        // output of center 0 moves by (a.t)/|N|
        let expected = (a1 * t[0] + a2 * t[1] + a3 * t[2]) / 2.0;
        assert!(((moved.data()[0] - base.data()[0]) - expected).abs() < 1e-9);
    }

    #[test]
    fn unit_geo_weight_reduces_to_cluster_mean() {
        let vox = vox_of(&[[0.0, 0.0, 10.0], [0.2, 0.0, 10.1], [-0.2, 0.1, 9.9]]);
        let clusters = ClusterIndex {
            neighbors: vec![vec![0, 1, 2]; 3],
        };
        let mut rng = Rng::new(9);
        let c = 2;
        let fused = Tensor::<f64>::from_fn(&[2 * c, 3], |_| rng.range(-1.0, 1.0));
        // identity-like mixing: pick out the first c fused channels
        let mix = Tensor::from_fn(&[c, 2 * c], |idx| {
            let (o, k) = (idx / (2 * c), idx % (2 * c));
            if o == k {
                1.0
            } else {
                0.0
            }
        });
        let geo = Tensor::from_fn(&[c, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let (out, _) = fused_conv_forward(&fused, &vox.coords, &clusters, &mix, &geo);
        for o in 0..c {
            let mean: f64 = (0..3).map(|i| fused.data()[o * 3 + i]).sum::<f64>() / 3.0;
            for i in 0..3 {
                assert!((out.data()[o * 3 + i] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance_of_the_point_stack() {
        // reindexing points reindexes outputs identically (mlp mode)
        let pts = [[0.3_f32, 0.1, 12.0], [-0.5, 0.2, 30.0], [1.0, -0.4, 55.0]];
        let perm = [2usize, 0, 1];
        let vox_a = vox_of(&pts);
        let permuted: Vec<[f32; 3]> = perm.iter().map(|&i| pts[i]).collect();
        let vox_b = vox_of(&permuted);

        let mut params: ParamSet<f64> = ParamSet::new();
        let mut rng = Rng::new(3);
        init_point_params(PointNetKind::Mlp, 4, &mut params, &mut rng);
        let (fa, _) = point_forward(PointNetKind::Mlp, 4, &params, &vox_a, None, 100.0);
        let (fb, _) = point_forward(PointNetKind::Mlp, 4, &params, &vox_b, None, 100.0);
        let (fa, fb) = (fa.unwrap(), fb.unwrap());
        for o in 0..4 {
            for (bi, &ai) in perm.iter().enumerate() {
                assert!((fa.data()[o * 3 + ai] - fb.data()[o * 3 + bi]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_gradients() {
        let vox = vox_of(&[[0.0, 0.0, 10.0], [0.2, 0.0, 10.1]]);
        let mut params: ParamSet<f64> = ParamSet::new();
        let mut rng = Rng::new(4);
        let kind = PointNetKind::FusedConv {
            window: ClusterWindow::default(),
        };
        init_point_params(kind, 2, &mut params, &mut rng);
        let map = Tensor::<f64>::from_fn(&[2, 26, 26], |_| rng.range(-1.0, 1.0));
        let (out, cache) = point_forward(kind, 2, &params, &vox, Some(&map), 100.0);
        let up = Tensor::zeros(out.unwrap().shape());
        let mut dmap = Tensor::zeros(&[2, 26, 26]);
        point_backward(&cache, &mut params, &vox, &up, Some(&mut dmap));
        for p in params.iter() {
            assert!(p.grad.data().iter().all(|v| *v == 0.0), "{}", p.name());
        }
        assert!(dmap.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_point_geo_gradient_is_the_mixed_feature() {
        let vox = vox_of(&[[0.0, 0.0, 10.0]]);
        let clusters = cluster(&vox, ClusterWindow::default());
        let fused = Tensor::from_vec(&[1, 1], alloc::vec![3.0_f64]).unwrap();
        let mix = Tensor::from_vec(&[1, 1], alloc::vec![2.0]).unwrap();
        let geo = Tensor::from_vec(&[1, 4], alloc::vec![1.5, 0.0, 0.0, 0.0]).unwrap();
        let (_, mixed) = fused_conv_forward(&fused, &vox.coords, &clusters, &mix, &geo);
        let up = Tensor::from_vec(&[1, 1], alloc::vec![1.0]).unwrap();
        let (_, _, d_geo) = fused_conv_backward(
            &fused, &mixed, &vox.coords, &clusters, &mix, &geo, &up,
        );
        // d out / d a0 = mixed value = 6.0
        assert!((d_geo.data()[0] - 6.0).abs() < 1e-12);
    }
}
