//! Pinhole stereo camera model, voxel-grid bin geometry and point clouds.
//!
//! This is the single home for every 2D<->3D mapping: projection into the
//! rectified left/right views, back-projection of voxel centers, and the
//! quantization of metric points into grid indices. All math runs in `f64`;
//! point clouds store `f32` coordinates matching their wire format.

use alloc::vec::Vec;

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    /// A calibration value violated its invariant.
    BadValue { key: &'static str, value: f64 },
    /// A point with z <= 0 reached an operation that needs depth.
    NonPositiveDepth { z: f64 },
}

impl core::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GeometryError::BadValue { key, value } => {
                write!(f, "invalid calibration value {key}={value}")
            }
            GeometryError::NonPositiveDepth { z } => {
                write!(f, "point has non-positive depth z={z}")
            }
        }
    }
}

/// Intrinsics plus stereo baseline for a rectified pair. The left camera is
/// the referential view; the right camera sits at +baseline along x.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
    /// Full-resolution image extents in pixels.
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        baseline: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0) || !fx.is_finite() {
            return Err(GeometryError::BadValue { key: "fx", value: fx });
        }
        if !(fy > 0.0) || !fy.is_finite() {
            return Err(GeometryError::BadValue { key: "fy", value: fy });
        }
        if !(baseline > 0.0) || !baseline.is_finite() {
            return Err(GeometryError::BadValue {
                key: "baseline",
                value: baseline,
            });
        }
        if !(0.0..width as f64).contains(&cx) {
            return Err(GeometryError::BadValue { key: "cx", value: cx });
        }
        if !(0.0..height as f64).contains(&cy) {
            return Err(GeometryError::BadValue { key: "cy", value: cy });
        }
        Ok(CameraRig {
            fx,
            fy,
            cx,
            cy,
            baseline,
            width,
            height,
        })
    }

    /// Continuous projection of a metric point into the left view.
    pub fn project(&self, p: [f64; 3]) -> Result<(f64, f64), GeometryError> {
        let [x, y, z] = p;
        if !(z > 0.0) {
            return Err(GeometryError::NonPositiveDepth { z });
        }
        Ok((self.fx * x / z + self.cx, self.fy * y / z + self.cy))
    }

    /// Projection into the rectified right view: the column shifts left by
    /// the disparity, the row is unchanged.
    pub fn project_right(&self, p: [f64; 3]) -> Result<(f64, f64), GeometryError> {
        let (u, v) = self.project(p)?;
        Ok((u - self.disparity(p[2]), v))
    }

    /// Exact right-inverse of `project` at the given depth.
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Result<[f64; 3], GeometryError> {
        if !(z > 0.0) {
            return Err(GeometryError::NonPositiveDepth { z });
        }
        Ok([(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z])
    }

    /// Stereo disparity in full-resolution pixels; strictly decreasing in z.
    pub fn disparity(&self, z: f64) -> f64 {
        self.fx * self.baseline / z
    }
}

/// How depth bins are spaced along the camera ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BinSpacing {
    /// Bin centers uniform in metric depth over [0, z_max]: the fusion
    /// volume layout.
    DepthLinear,
    /// Bin centers uniform in disparity over [0, d_max] pixels: the classic
    /// cost-volume layout. The d=0 bin decodes to unbounded depth.
    DisparityLinear { d_max: f64 },
}

/// Geometry of the voxel grid the network operates on: (u,v) cells at
/// quarter resolution of the images, depth bins per `spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridSpec {
    /// Grid extents; width * downsample <= image width (same for height).
    pub grid_w: usize,
    pub grid_h: usize,
    pub depth_bins: usize,
    pub z_max: f64,
    pub spacing: BinSpacing,
    /// Image-to-grid scale; voxel (u,v) centers sit at integer grid
    /// coordinates, i.e. full-resolution pixel u = iu * downsample.
    pub downsample: usize,
}

impl VoxelGridSpec {
    /// Grid covering the rig's full field of view at 1/downsample scale.
    pub fn for_rig(
        rig: &CameraRig,
        depth_bins: usize,
        z_max: f64,
        spacing: BinSpacing,
        downsample: usize,
    ) -> Self {
        VoxelGridSpec {
            grid_w: rig.width / downsample,
            grid_h: rig.height / downsample,
            depth_bins,
            z_max,
            spacing,
            downsample,
        }
    }

    /// Metric depth of a bin center. `None` for bins that decode to
    /// unbounded depth (the d=0 disparity bin).
    pub fn bin_center_depth(&self, rig: &CameraRig, id: usize) -> Option<f64> {
        let last = (self.depth_bins - 1) as f64;
        match self.spacing {
            BinSpacing::DepthLinear => Some(id as f64 / last * self.z_max),
            BinSpacing::DisparityLinear { d_max } => {
                let disp = id as f64 / last * d_max;
                if disp <= 0.0 {
                    None
                } else {
                    Some(rig.fx * rig.baseline / disp)
                }
            }
        }
    }

    /// Disparity (full-resolution pixels) of a bin center, where defined.
    /// The depth-linear bin at z=0 has unbounded disparity.
    pub fn bin_center_disparity(&self, rig: &CameraRig, id: usize) -> Option<f64> {
        let last = (self.depth_bins - 1) as f64;
        match self.spacing {
            BinSpacing::DepthLinear => {
                let z = id as f64 / last * self.z_max;
                if z <= 0.0 {
                    None
                } else {
                    Some(rig.fx * rig.baseline / z)
                }
            }
            BinSpacing::DisparityLinear { d_max } => Some(id as f64 / last * d_max),
        }
    }

    /// Nearest depth bin for a metric depth, or `None` when it falls outside
    /// the covered range (beyond half a bin past either end).
    pub fn depth_bin_of(&self, rig: &CameraRig, z: f64) -> Option<usize> {
        if z <= 0.0 {
            return None;
        }
        let last = (self.depth_bins - 1) as f64;
        // points beyond z_max by more than half a bin are not representable
        if z >= self.z_max * (1.0 + 0.5 / last) {
            return None;
        }
        let t = match self.spacing {
            BinSpacing::DepthLinear => z / self.z_max * last,
            BinSpacing::DisparityLinear { d_max } => rig.fx * rig.baseline / z / d_max * last,
        };
        let id = libm::round(t);
        if id < 0.0 || id > last {
            return None;
        }
        Some(id as usize)
    }

    /// Quantizes a metric point into (iu, iv, id) voxel indices. Total: out
    /// of frustum or out of depth range returns `None`, never a clamp.
    pub fn voxel_index_of(&self, rig: &CameraRig, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        if !(p[2] > 0.0) {
            return None;
        }
        let (u, v) = rig.project(p).ok()?;
        let iu = libm::round(u / self.downsample as f64);
        let iv = libm::round(v / self.downsample as f64);
        if iu < 0.0 || iu >= self.grid_w as f64 || iv < 0.0 || iv >= self.grid_h as f64 {
            return None;
        }
        let id = self.depth_bin_of(rig, p[2])?;
        Some((iu as usize, iv as usize, id))
    }

    /// Metric point at the center of a voxel: the (u,v) cell center ray at
    /// the bin-center depth. `None` for unbounded bins.
    pub fn voxel_center(
        &self,
        rig: &CameraRig,
        iu: usize,
        iv: usize,
        id: usize,
    ) -> Option<[f64; 3]> {
        let z = self.bin_center_depth(rig, id)?;
        if z <= 0.0 {
            // z=0 bin center projects onto the camera itself
            return Some([0.0, 0.0, 0.0]);
        }
        rig.backproject(
            (iu * self.downsample) as f64,
            (iv * self.downsample) as f64,
            z,
        )
        .ok()
    }

    /// Half of the worst-case depth quantization error of the depth-linear
    /// layout.
    pub fn half_bin_depth(&self) -> f64 {
        self.z_max / (2.0 * (self.depth_bins - 1) as f64)
    }
}

/// N metric points in the referential (left) camera frame, x right, y down,
/// z forward. Construction rejects points behind the camera.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    coords: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new() -> Self {
        PointCloud { coords: Vec::new() }
    }

    pub fn from_points(points: Vec<[f32; 3]>) -> Result<Self, GeometryError> {
        for p in &points {
            if !(p[2] > 0.0) || !p.iter().all(|v| v.is_finite()) {
                return Err(GeometryError::NonPositiveDepth { z: p[2] as f64 });
            }
        }
        Ok(PointCloud { coords: points })
    }

    pub fn push(&mut self, p: [f32; 3]) -> Result<(), GeometryError> {
        if !(p[2] > 0.0) || !p.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonPositiveDepth { z: p[2] as f64 });
        }
        self.coords.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.coords
    }

    pub fn point_f64(&self, i: usize) -> [f64; 3] {
        let p = self.coords[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }
}

/// Uniform random metric point inside the rig's frustum with z in [z_lo, z_hi).
pub fn random_frustum_point(rng: &mut Rng, rig: &CameraRig, z_lo: f64, z_hi: f64) -> [f64; 3] {
    let z = rng.range(z_lo, z_hi);
    let u = rng.range(0.0, (rig.width - 1) as f64);
    let v = rng.range(0.0, (rig.height - 1) as f64);
    rig.backproject(u, v, z).expect("z > 0")
}
