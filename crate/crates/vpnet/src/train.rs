//! Training loop: cycles the dataset frames, resamples the point cloud every
//! step as augmentation, follows a two-phase learning-rate schedule and logs
//! one loss row per step.

use std::fmt;
use std::fs;
use std::path::Path;

use vpnet_core::network::{total_loss, ModelConfig};
use vpnet_core::optim::ParamSet;
use vpnet_core::pipeline::{self, PipelineError};
use vpnet_core::rng::Rng;
use vpnet_core::scenes::{sample_lidar, SceneError};

use crate::dataset::Frame;

#[derive(Debug)]
pub enum TrainError {
    Pipeline(PipelineError),
    Scene(SceneError),
    Optim(vpnet_core::optim::OptimError),
    EmptyDataset,
    Io(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Pipeline(e) => write!(f, "{e}"),
            TrainError::Scene(e) => write!(f, "{e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
            TrainError::EmptyDataset => write!(f, "training needs at least one frame"),
            TrainError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<PipelineError> for TrainError {
    fn from(e: PipelineError) -> Self {
        TrainError::Pipeline(e)
    }
}
impl From<SceneError> for TrainError {
    fn from(e: SceneError) -> Self {
        TrainError::Scene(e)
    }
}
impl From<vpnet_core::optim::OptimError> for TrainError {
    fn from(e: vpnet_core::optim::OptimError) -> Self {
        TrainError::Optim(e)
    }
}
impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    /// Learning rate before the decay step.
    pub lr: f64,
    /// Learning rate from the decay step onward.
    pub lr2: f64,
    pub decay_step: usize,
    /// Points resampled from the ground truth every step; 0 trains
    /// stereo-only.
    pub points_train: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 300,
            lr: 1e-3,
            lr2: 1e-4,
            decay_step: 200,
            points_train: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub stage_losses: Vec<f64>,
    pub total: f64,
}

pub struct TrainOutput {
    pub params: ParamSet<f32>,
    pub log: Vec<StepRecord>,
}

pub fn train(
    cfg: &ModelConfig,
    frames: &[Frame],
    opts: &TrainOptions,
) -> Result<TrainOutput, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = pipeline::init_params::<f32>(cfg, opts.seed)?;
    let mut log = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let frame = &frames[step % frames.len()];
        let rig = &frame.sample.rig;
        // fresh point draw each step, the augmentation analogue of random
        // cropping at this scale
        let cloud = if opts.points_train == 0 {
            vpnet_core::geometry::PointCloud::new()
        } else {
            let valid = frame.sample.depth.valid_count();
            let count = opts.points_train.min(valid);
            let draw_seed = Rng::derive(opts.seed, 0x7421 + step as u64).next_u64();
            sample_lidar(&frame.sample.depth, rig, count, draw_seed, 0.0)?
        };
        let losses = pipeline::train_step(
            cfg,
            &mut params,
            &frame.sample.left,
            &frame.sample.right,
            &cloud,
            rig,
            &frame.sample.depth,
        )?;
        let lr = if step < opts.decay_step { opts.lr } else { opts.lr2 };
        params.adam_step(lr)?;
        let total = total_loss(&losses, &cfg.stage_weights);
        log.push(StepRecord {
            step,
            stage_losses: losses,
            total,
        });
    }
    Ok(TrainOutput { params, log })
}

/// loss.csv: `step,stage1..stageS,total`, one row per step.
pub fn write_loss_csv(path: &Path, stages: usize, log: &[StepRecord]) -> Result<(), TrainError> {
    let mut out = String::from("step");
    for s in 1..=stages {
        out.push_str(&format!(",stage{s}"));
    }
    out.push_str(",total\n");
    for rec in log {
        out.push_str(&format!("{}", rec.step));
        for l in &rec.stage_losses {
            out.push_str(&format!(",{l:.6}"));
        }
        out.push_str(&format!(",{:.6}\n", rec.total));
    }
    fs::write(path, out)?;
    Ok(())
}
