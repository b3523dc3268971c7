//! VPN1 checkpoints.
//!
//! Layout: magic `VPN1`, then per parameter a u16 little-endian name length,
//! the UTF-8 name, a u8 rank, rank u32 little-endian extents, and the
//! row-major f32 little-endian values. Optimizer accumulators are not
//! serialized. The model configuration rides along as a leading tensor named
//! `__meta.config` so a checkpoint is self-describing; readers that only
//! care about weights see it as one more named tensor.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use vpnet_core::network::{FusionLevel, ModelConfig};
use vpnet_core::optim::ParamSet;
use vpnet_core::pipeline;
use vpnet_core::pointnet::{ClusterWindow, PointNetKind};
use vpnet_core::tensor::Tensor;
use vpnet_core::volume::VolumeKind;

pub const META_NAME: &str = "__meta.config";
const META_VERSION: f32 = 1.0;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic,
    Corrupt(String),
    ConfigMismatch(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "{e}"),
            CheckpointError::BadMagic => write!(f, "bad magic, expected VPN1"),
            CheckpointError::Corrupt(msg) => write!(f, "corrupt checkpoint: {msg}"),
            CheckpointError::ConfigMismatch(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

fn encode_config(cfg: &ModelConfig) -> Vec<f32> {
    let (volume, d_max) = match cfg.volume {
        VolumeKind::Fusion => (0.0, cfg.d_max),
        VolumeKind::Cost => (1.0, cfg.d_max),
        VolumeKind::Depth => (2.0, cfg.d_max),
    };
    let (points, window) = match cfg.points {
        PointNetKind::Raw => (0.0, ClusterWindow::default()),
        PointNetKind::Mlp => (1.0, ClusterWindow::default()),
        PointNetKind::FusedConv { window } => (2.0, window),
    };
    let fusion = match cfg.fusion {
        FusionLevel::Early => 0.0,
        FusionLevel::Intermediate => 1.0,
    };
    let mut v = vec![
        META_VERSION,
        cfg.channels as f32,
        cfg.depth_bins as f32,
        cfg.stages as f32,
        cfg.z_max as f32,
        volume,
        d_max as f32,
        points,
        window.du as f32,
        window.dv as f32,
        window.dd as f32,
        fusion,
        cfg.downsample as f32,
    ];
    for w in &cfg.stage_weights {
        v.push(*w as f32);
    }
    v
}

fn decode_config(data: &[f32]) -> Result<ModelConfig, CheckpointError> {
    if data.len() < 13 || data[0] != META_VERSION {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported config block (len {}, version {:?})",
            data.len(),
            data.first()
        )));
    }
    let stages = data[3] as usize;
    if data.len() != 13 + stages {
        return Err(CheckpointError::Corrupt(format!(
            "config block carries {} weights for {} stages",
            data.len() - 13,
            stages
        )));
    }
    let volume = match data[5] as i32 {
        0 => VolumeKind::Fusion,
        1 => VolumeKind::Cost,
        2 => VolumeKind::Depth,
        other => return Err(CheckpointError::Corrupt(format!("volume kind {other}"))),
    };
    let window = ClusterWindow {
        du: data[8] as i32,
        dv: data[9] as i32,
        dd: data[10] as i32,
    };
    let points = match data[7] as i32 {
        0 => PointNetKind::Raw,
        1 => PointNetKind::Mlp,
        2 => PointNetKind::FusedConv { window },
        other => return Err(CheckpointError::Corrupt(format!("point network {other}"))),
    };
    let fusion = match data[11] as i32 {
        0 => FusionLevel::Early,
        1 => FusionLevel::Intermediate,
        other => return Err(CheckpointError::Corrupt(format!("fusion level {other}"))),
    };
    Ok(ModelConfig {
        channels: data[1] as usize,
        depth_bins: data[2] as usize,
        z_max: data[4] as f64,
        stages,
        stage_weights: data[13..].iter().map(|w| *w as f64).collect(),
        volume,
        points,
        fusion,
        d_max: data[6] as f64,
        downsample: data[12] as usize,
    })
}

fn write_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for e in shape {
        out.extend_from_slice(&(*e as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ParamSet<f32>) -> Result<(), CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(b"VPN1");
    let meta = encode_config(cfg);
    write_entry(&mut out, META_NAME, &[meta.len()], &meta);
    for p in params.iter() {
        write_entry(&mut out, p.name(), p.value.shape(), p.value.data());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads a checkpoint: decodes the embedded config, rebuilds the matching
/// parameter set and fills in the stored values. The stored names and shapes
/// must exactly match what the config prescribes.
pub fn load(path: &Path) -> Result<(ModelConfig, ParamSet<f32>), CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != b"VPN1" {
        return Err(CheckpointError::BadMagic);
    }
    let mut pos = 4;
    let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    while pos < bytes.len() {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *pos + n > bytes.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "truncated at byte {pos}",
                    pos = *pos
                )));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("non-UTF8 name".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = take(&mut pos, count * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }

    let Some(first) = entries.first() else {
        return Err(CheckpointError::Corrupt("no tensors".into()));
    };
    if first.0 != META_NAME {
        return Err(CheckpointError::Corrupt(format!(
            "expected leading {META_NAME} tensor, found {:?}",
            first.0
        )));
    }
    let cfg = decode_config(&first.2)?;
    cfg.validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let mut params: ParamSet<f32> =
        pipeline::init_params(&cfg, 0).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let expected: Vec<String> = params.iter().map(|p| p.name().to_string()).collect();
    let stored: Vec<String> = entries[1..].iter().map(|(n, _, _)| n.clone()).collect();
    if expected != stored {
        return Err(CheckpointError::ConfigMismatch(format!(
            "stored parameters {stored:?} do not match the embedded config (expects {expected:?})"
        )));
    }
    for (name, shape, data) in &entries[1..] {
        let t = Tensor::from_vec(shape, data.clone())
            .map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        if t.shape() != params.value(name).shape() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "{name}: stored shape {:?} vs expected {:?}",
                t.shape(),
                params.value(name).shape()
            )));
        }
        params
            .set_value(name, t)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    Ok((cfg, params))
}
