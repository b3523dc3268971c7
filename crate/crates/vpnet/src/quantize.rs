//! Quantization analysis over a dataset: embed every stored point into each
//! requested grid, decode the voxel centers back to metric depths, and
//! tabulate the absolute error per range band.

use std::fs;
use std::path::Path;

use vpnet_core::geometry::{BinSpacing, CameraRig, VoxelGridSpec};
use vpnet_core::volume::{quantization_bands, QuantBand, QUANT_BANDS};

use crate::dataset::Frame;

/// Named grid layouts the analyzer understands. `depth` shares the cost
/// volume's disparity-spaced embedding (points are embedded before the
/// depth transform), so the two report identical numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecKind {
    Fusion,
    Cost,
    Depth,
}

impl SpecKind {
    pub fn parse(s: &str) -> Option<SpecKind> {
        match s {
            "fusion" => Some(SpecKind::Fusion),
            "cost" => Some(SpecKind::Cost),
            "depth" => Some(SpecKind::Depth),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpecKind::Fusion => "fusion",
            SpecKind::Cost => "cost",
            SpecKind::Depth => "depth",
        }
    }

    pub fn grid(self, rig: &CameraRig, bins: usize, z_max: f64, d_max: f64) -> VoxelGridSpec {
        let spacing = match self {
            SpecKind::Fusion => BinSpacing::DepthLinear,
            SpecKind::Cost | SpecKind::Depth => BinSpacing::DisparityLinear { d_max },
        };
        VoxelGridSpec::for_rig(rig, bins, z_max, spacing, 4)
    }
}

#[derive(Debug, Clone)]
pub struct QuantRow {
    pub spec: &'static str,
    pub band: QuantBand,
}

/// Pools the per-band statistics of every frame's cloud, per spec.
pub fn quantize_dataset(
    frames: &[Frame],
    specs: &[SpecKind],
    bins: usize,
    z_max: f64,
    d_max: f64,
) -> Vec<QuantRow> {
    let mut rows = Vec::new();
    for kind in specs {
        let mut merged: Vec<QuantBand> = QUANT_BANDS
            .iter()
            .map(|(lo, hi)| QuantBand {
                lo: *lo,
                hi: *hi,
                count: 0,
                mean_abs_err: 0.0,
                max_abs_err: 0.0,
            })
            .collect();
        for frame in frames {
            let rig = &frame.sample.rig;
            let grid = kind.grid(rig, bins, z_max, d_max);
            let bands = quantization_bands(&frame.cloud, rig, &grid, &QUANT_BANDS);
            for (m, b) in merged.iter_mut().zip(bands.iter()) {
                let sum = m.mean_abs_err * m.count as f64 + b.mean_abs_err * b.count as f64;
                m.count += b.count;
                m.mean_abs_err = if m.count > 0 { sum / m.count as f64 } else { 0.0 };
                m.max_abs_err = m.max_abs_err.max(b.max_abs_err);
            }
        }
        for band in merged {
            rows.push(QuantRow {
                spec: kind.name(),
                band,
            });
        }
    }
    rows
}

/// CSV: `spec,band_lo_m,band_hi_m,count,mean_abs_err_m,max_abs_err_m`.
pub fn write_quant_csv(path: &Path, rows: &[QuantRow]) -> Result<(), std::io::Error> {
    let mut text = String::from("spec,band_lo_m,band_hi_m,count,mean_abs_err_m,max_abs_err_m\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.1},{:.1},{},{:.6},{:.6}\n",
            r.spec, r.band.lo, r.band.hi, r.band.count, r.band.mean_abs_err, r.band.max_abs_err
        ));
    }
    fs::write(path, text)
}
