//! Synthetic stereo scenes with exact ground truth.
//!
//! A scene is a textured ground plane plus fronto-parallel rectangles at
//! random depths. Both views are rendered analytically: each pixel's ray is
//! intersected with the nearest surface and the surface texture is evaluated
//! at the metric hit point, so the right image is photo-consistent with the
//! left under the ground-truth depth wherever nothing occludes. Textures are
//! sums of sinusoids anchored to world coordinates, with frequencies scaled
//! by depth so projected detail stays matchable along the epipolar lines.
//!
//! LiDAR is simulated per the evaluation protocol of the target benchmarks:
//! random ground-truth depth pixels are re-interpreted as points.

use alloc::vec::Vec;

use crate::geometry::{CameraRig, PointCloud};
use crate::network::DepthMap;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    CountExceedsValid { requested: usize, available: usize },
    BadExtents { width: usize, height: usize },
    NoObjects,
}

impl core::fmt::Display for SceneError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SceneError::CountExceedsValid {
                requested,
                available,
            } => write!(f, "requested {requested} points but only {available} valid pixels"),
            SceneError::BadExtents { width, height } => {
                write!(f, "image extents {width}x{height} not divisible by 4")
            }
            SceneError::NoObjects => write!(f, "object count must be >= 1"),
        }
    }
}

#[derive(Debug, Clone)]
struct SineTexture {
    comps: Vec<(f64, f64, f64, f64)>, // amplitude, freq_a, freq_b, phase
}

impl SineTexture {
    fn random(rng: &mut Rng, base_freq: f64) -> Self {
        let mut comps = Vec::with_capacity(4);
        let mut budget = 0.42;
        // first component has a guaranteed horizontal-gradient term
        let amp = rng.range(0.12, 0.22);
        comps.push((
            amp,
            base_freq * rng.range(0.8, 1.4),
            base_freq * rng.range(0.0, 0.3),
            rng.range(0.0, core::f64::consts::TAU),
        ));
        budget -= amp;
        for _ in 0..3 {
            let amp = rng.range(0.2, 1.0) * budget / 3.0;
            comps.push((
                amp,
                base_freq * rng.range(0.3, 2.5),
                base_freq * rng.range(0.3, 2.5),
                rng.range(0.0, core::f64::consts::TAU),
            ));
        }
        SineTexture { comps }
    }

    /// Luminance in roughly [0.13, 0.97].
    fn eval(&self, a: f64, b: f64) -> f64 {
        let mut v = 0.55;
        for (amp, fa, fb, ph) in &self.comps {
            v += amp * libm::sin(core::f64::consts::TAU * (fa * a + fb * b) + ph);
        }
        v
    }
}

#[derive(Debug, Clone)]
struct Panel {
    z: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    color: [f64; 3],
    tex: SineTexture,
}

/// The analytic scene description; rasterization happens in
/// [`generate_scene`], and tests can interrogate the continuous geometry
/// directly.
#[derive(Debug, Clone)]
pub struct Scene {
    pub rig: CameraRig,
    pub z_max: f64,
    ground_y: f64,
    ground_color: [f64; 3],
    ground_tex: SineTexture,
    sky: [f64; 3],
    panels: Vec<Panel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    Panel(usize, f64),
    Ground(f64),
    Sky,
}

impl Scene {
    pub fn build(seed: u64, rig: &CameraRig, z_max: f64, object_count: usize) -> Result<Scene, SceneError> {
        if rig.width % 4 != 0 || rig.height % 4 != 0 {
            return Err(SceneError::BadExtents {
                width: rig.width,
                height: rig.height,
            });
        }
        if object_count == 0 {
            return Err(SceneError::NoObjects);
        }
        let mut rng = Rng::derive(seed, 0x5ce);
        let ground_y = 1.5;
        let mut panels = Vec::with_capacity(object_count);
        for _ in 0..object_count {
            // depths uniform in z so far range bands stay populated
            let z = rng.range(5.0, 0.9 * z_max);
            // angular sizing keeps panels visible at any depth
            let half_w = rng.range(rig.width as f64 / 16.0, rig.width as f64 / 5.0) * z / rig.fx;
            let half_h = rng.range(rig.height as f64 / 16.0, rig.height as f64 / 5.0) * z / rig.fy;
            let uc = rng.range(0.2 * rig.width as f64, 0.8 * rig.width as f64);
            let vc = rng.range(0.15 * rig.height as f64, 0.65 * rig.height as f64);
            let xc = (uc - rig.cx) / rig.fx * z;
            let yc = (vc - rig.cy) / rig.fy * z;
            // projected texture period independent of depth
            let base_freq = rng.range(0.05, 0.15) * rig.fx / z;
            panels.push(Panel {
                z,
                x0: xc - half_w,
                x1: xc + half_w,
                y0: yc - half_h,
                y1: yc + half_h,
                color: [
                    rng.range(0.35, 1.0),
                    rng.range(0.35, 1.0),
                    rng.range(0.35, 1.0),
                ],
                tex: SineTexture::random(&mut rng, base_freq),
            });
        }
        Ok(Scene {
            rig: rig.clone(),
            z_max,
            ground_y,
            ground_color: [rng.range(0.4, 0.7), rng.range(0.35, 0.6), rng.range(0.3, 0.5)],
            ground_tex: SineTexture::random(&mut rng, 0.45),
            sky: [0.36, 0.5, 0.72],
            panels,
        })
    }

    /// Nearest surface along a view ray. `cam_x` is the camera center's x
    /// offset (0 for left, +baseline for right).
    fn trace(&self, u: f64, v: f64, cam_x: f64) -> Hit {
        let dir_x = (u - self.rig.cx) / self.rig.fx;
        let dir_y = (v - self.rig.cy) / self.rig.fy;
        let mut best = Hit::Sky;
        let mut best_z = f64::INFINITY;
        for (i, p) in self.panels.iter().enumerate() {
            let x = cam_x + dir_x * p.z;
            let y = dir_y * p.z;
            if x >= p.x0 && x <= p.x1 && y >= p.y0 && y <= p.y1 && p.z < best_z {
                best = Hit::Panel(i, p.z);
                best_z = p.z;
            }
        }
        if dir_y > 1e-9 {
            let z = self.ground_y / dir_y;
            if z > 0.0 && z < best_z {
                best = Hit::Ground(z);
            }
        }
        best
    }

    /// Ground-truth depth of the left view; `None` above the horizon or
    /// beyond the represented range.
    pub fn depth_left(&self, u: f64, v: f64) -> Option<f64> {
        match self.trace(u, v, 0.0) {
            Hit::Panel(_, z) | Hit::Ground(z) if z < self.z_max => Some(z),
            _ => None,
        }
    }

    fn shade(&self, u: f64, v: f64, cam_x: f64) -> [f64; 3] {
        let dir_x = (u - self.rig.cx) / self.rig.fx;
        let dir_y = (v - self.rig.cy) / self.rig.fy;
        match self.trace(u, v, cam_x) {
            Hit::Panel(i, z) => {
                let p = &self.panels[i];
                let lum = p.tex.eval(cam_x + dir_x * z, dir_y * z);
                [p.color[0] * lum, p.color[1] * lum, p.color[2] * lum]
            }
            Hit::Ground(z) => {
                let lum = self.ground_tex.eval(cam_x + dir_x * z, z);
                [
                    self.ground_color[0] * lum,
                    self.ground_color[1] * lum,
                    self.ground_color[2] * lum,
                ]
            }
            Hit::Sky => self.sky,
        }
    }

    pub fn shade_left(&self, u: f64, v: f64) -> [f64; 3] {
        self.shade(u, v, 0.0)
    }

    pub fn shade_right(&self, u: f64, v: f64) -> [f64; 3] {
        self.shade(u, v, self.rig.baseline)
    }

    /// True when the left pixel's surface point is also the nearest surface
    /// seen from the right camera (no occlusion, in right frame).
    pub fn visible_in_right(&self, u: f64, v: f64) -> bool {
        let Some(z) = self.depth_left(u, v) else {
            return false;
        };
        let ur = u - self.rig.disparity(z);
        if ur < 0.0 || ur > (self.rig.width - 1) as f64 {
            return false;
        }
        match self.trace(ur, v, self.rig.baseline) {
            Hit::Panel(_, zr) | Hit::Ground(zr) => (zr - z).abs() < 1e-6 * z,
            Hit::Sky => false,
        }
    }
}

/// One training/eval item. Images are stored already quantized to 8-bit
/// levels so the on-disk and in-memory pixels are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// [3, height, width] in [0,1].
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub depth: DepthMap,
    pub rig: CameraRig,
    pub seed: u64,
}

fn quantize8(v: f64) -> f32 {
    let c = (v.max(0.0).min(1.0) * 255.0 + 0.5) as u8;
    c as f32 / 255.0
}

/// Renders a deterministic sample: left/right images quantized to 8-bit
/// levels and a dense ground-truth depth map (invalid above the horizon or
/// beyond z_max).
pub fn generate_scene(
    seed: u64,
    rig: &CameraRig,
    z_max: f64,
    object_count: usize,
) -> Result<SceneSample, SceneError> {
    let scene = Scene::build(seed, rig, z_max, object_count)?;
    let (w, h) = (rig.width, rig.height);
    let mut left = Tensor::<f32>::zeros(&[3, h, w]);
    let mut right = Tensor::<f32>::zeros(&[3, h, w]);
    let mut depth = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            let l = scene.shade_left(u as f64, v as f64);
            let r = scene.shade_right(u as f64, v as f64);
            for c in 0..3 {
                left.data_mut()[(c * h + v) * w + u] = quantize8(l[c]);
                right.data_mut()[(c * h + v) * w + u] = quantize8(r[c]);
            }
            match scene.depth_left(u as f64, v as f64) {
                Some(z) => {
                    depth.push(z as f32);
                    valid.push(true);
                }
                None => {
                    depth.push(0.0);
                    valid.push(false);
                }
            }
        }
    }
    Ok(SceneSample {
        left,
        right,
        depth: DepthMap {
            width: w,
            height: h,
            data: depth,
            valid,
        },
        rig: rig.clone(),
        seed,
    })
}

/// Samples `count` valid ground-truth pixels uniformly without replacement,
/// back-projects them into points, then drops each survivor independently
/// with the given probability.
pub fn sample_lidar(
    depth: &DepthMap,
    rig: &CameraRig,
    count: usize,
    seed: u64,
    dropout: f64,
) -> Result<PointCloud, SceneError> {
    let valid_idx: Vec<usize> = (0..depth.data.len()).filter(|i| depth.valid[*i]).collect();
    if count > valid_idx.len() {
        return Err(SceneError::CountExceedsValid {
            requested: count,
            available: valid_idx.len(),
        });
    }
    let mut rng = Rng::derive(seed, 0x11da);
    let mut pool = valid_idx;
    let mut cloud = PointCloud::new();
    for k in 0..count {
        let j = k + rng.below(pool.len() - k);
        pool.swap(k, j);
        let idx = pool[k];
        if rng.uniform() < dropout {
            continue;
        }
        let (u, v) = (idx % depth.width, idx / depth.width);
        let z = depth.data[idx] as f64;
        let p = rig.backproject(u as f64, v as f64, z).expect("valid depth > 0");
        cloud
            .push([p[0] as f32, p[1] as f32, p[2] as f32])
            .expect("z > 0");
    }
    Ok(cloud)
}
