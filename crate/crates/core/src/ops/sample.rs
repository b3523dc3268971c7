//! Bilinear sampling of a [c,h,w] feature map at continuous coordinates.
//!
//! Coordinates are always plain `f64` values fixed by geometry (projected
//! points, disparity shifts, upsampling grids); gradients flow to the feature
//! map only, never to the coordinates.

use alloc::vec::Vec;

use crate::math::Real;
use crate::tensor::{Tensor, TensorError};

/// What happens to samples at or beyond the map border.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Border {
    /// Out-of-range corners contribute zero (and receive zero gradient).
    Zeros,
    /// Coordinates are clamped into the valid square first.
    Clamp,
}

struct Corner {
    idx: usize,
    weight: f64,
}

/// The up-to-4 corner taps for one sample, shared by forward and backward.
fn corners(h: usize, w: usize, u: f64, v: f64, border: Border, taps: &mut Vec<Corner>) {
    taps.clear();
    let (u, v) = match border {
        Border::Zeros => (u, v),
        Border::Clamp => (
            u.max(0.0).min((w - 1) as f64),
            v.max(0.0).min((h - 1) as f64),
        ),
    };
    let mut u0 = libm::floor(u) as isize;
    let mut v0 = libm::floor(v) as isize;
    if border == Border::Clamp {
        u0 = u0.min(w as isize - 2).max(0).min(w as isize - 1);
        v0 = v0.min(h as isize - 2).max(0).min(h as isize - 1);
    }
    let tu = u - u0 as f64;
    let tv = v - v0 as f64;
    let cand = [
        (u0, v0, (1.0 - tu) * (1.0 - tv)),
        (u0 + 1, v0, tu * (1.0 - tv)),
        (u0, v0 + 1, (1.0 - tu) * tv),
        (u0 + 1, v0 + 1, tu * tv),
    ];
    for (cu, cv, wgt) in cand {
        if wgt == 0.0 {
            continue;
        }
        if cu < 0 || cu >= w as isize || cv < 0 || cv >= h as isize {
            continue; // only reachable in Zeros mode
        }
        taps.push(Corner {
            idx: cv as usize * w + cu as usize,
            weight: wgt,
        });
    }
}

/// map [c,h,w] sampled at n (u,v) coordinates -> [c,n].
pub fn bilinear_sample2d<E: Real>(
    map: &Tensor<E>,
    coords: &[(f64, f64)],
    border: Border,
) -> Result<Tensor<E>, TensorError> {
    map.expect_rank(3, "bilinear-sample-2d")?;
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let n = coords.len();
    let mut out = Tensor::zeros(&[c, n]);
    let src = map.data();
    let dst = out.data_mut();
    let mut taps = Vec::with_capacity(4);
    for (i, &(u, v)) in coords.iter().enumerate() {
        corners(h, w, u, v, border, &mut taps);
        for ch in 0..c {
            let plane = ch * h * w;
            let mut acc = E::ZERO;
            for t in &taps {
                acc += E::from_f64(t.weight) * src[plane + t.idx];
            }
            dst[ch * n + i] = acc;
        }
    }
    Ok(out)
}

/// Scatter the upstream [c,n] gradient back onto the map, accumulating into
/// `dmap` (same shape as the sampled map).
pub fn bilinear_sample2d_backward<E: Real>(
    map_shape: &[usize],
    coords: &[(f64, f64)],
    border: Border,
    upstream: &Tensor<E>,
    dmap: &mut Tensor<E>,
) {
    let (c, h, w) = (map_shape[0], map_shape[1], map_shape[2]);
    let n = coords.len();
    let g = upstream.data();
    let dst = dmap.data_mut();
    let mut taps = Vec::with_capacity(4);
    for (i, &(u, v)) in coords.iter().enumerate() {
        corners(h, w, u, v, border, &mut taps);
        for ch in 0..c {
            let plane = ch * h * w;
            let gi = g[ch * n + i];
            for t in &taps {
                dst[plane + t.idx] += E::from_f64(t.weight) * gi;
            }
        }
    }
}
