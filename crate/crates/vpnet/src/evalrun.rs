//! Evaluation over a dataset: per-sample metrics plus a pooled aggregate
//! row. Samples may be scored in parallel (the model is read-only);
//! `VPNET_THREADS` caps the worker count and results are collected in frame
//! order, so the output does not depend on the thread count.

use std::fmt;
use std::fs;
use std::path::Path;

use vpnet_core::geometry::PointCloud;
use vpnet_core::network::{MetricAccum, Metrics, ModelConfig};
use vpnet_core::optim::ParamSet;
use vpnet_core::pipeline::{self, PipelineError};
use vpnet_core::rng::Rng;
use vpnet_core::scenes::{sample_lidar, SceneError};

use crate::dataset::Frame;

#[derive(Debug)]
pub enum EvalError {
    Pipeline(PipelineError),
    Scene(SceneError),
    Io(std::io::Error),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Pipeline(e) => write!(f, "{e}"),
            EvalError::Scene(e) => write!(f, "{e}"),
            EvalError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<PipelineError> for EvalError {
    fn from(e: PipelineError) -> Self {
        EvalError::Pipeline(e)
    }
}
impl From<SceneError> for EvalError {
    fn from(e: SceneError) -> Self {
        EvalError::Scene(e)
    }
}
impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Resample this many points from the ground truth instead of using the
    /// stored cloud.
    pub points: Option<usize>,
    /// Independent per-point drop probability applied to whichever cloud is
    /// used.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            points: None,
            dropout: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleMetrics {
    pub id: String,
    pub metrics: Metrics,
    pub points_used: usize,
}

pub struct EvalOutput {
    pub rows: Vec<SampleMetrics>,
    /// Metrics pooled over every valid pixel of every sample.
    pub aggregate: Metrics,
    pub total_points: usize,
}

fn thin_cloud(cloud: &PointCloud, dropout: f64, seed: u64) -> PointCloud {
    if dropout <= 0.0 {
        return cloud.clone();
    }
    let mut rng = Rng::derive(seed, 0x7b1d);
    let mut out = PointCloud::new();
    for p in cloud.points() {
        if rng.uniform() >= dropout {
            out.push(*p).expect("existing point stays valid");
        }
    }
    out
}

fn eval_frame(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    frame: &Frame,
    opts: &EvalOptions,
    index: usize,
) -> Result<(SampleMetrics, MetricAccum), EvalError> {
    let rig = &frame.sample.rig;
    let draw_seed = Rng::derive(opts.seed, 0xe7a1 + index as u64).next_u64();
    let cloud = match opts.points {
        Some(n) => sample_lidar(&frame.sample.depth, rig, n, draw_seed, opts.dropout)?,
        None => thin_cloud(&frame.cloud, opts.dropout, draw_seed),
    };
    let points_used = cloud.len();
    let pred = pipeline::predict(
        cfg,
        params,
        &frame.sample.left,
        &frame.sample.right,
        &cloud,
        rig,
    )?;
    let mut acc = MetricAccum::new();
    acc.add(&pred, &frame.sample.depth);
    Ok((
        SampleMetrics {
            id: frame.id.clone(),
            metrics: acc.finish(),
            points_used,
        },
        acc,
    ))
}

fn thread_cap() -> usize {
    std::env::var("VPNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n >= 1)
        .unwrap_or(1)
}

pub fn evaluate(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    frames: &[Frame],
    opts: &EvalOptions,
) -> Result<EvalOutput, EvalError> {
    let threads = thread_cap().min(frames.len().max(1));
    let mut slots: Vec<Option<Result<(SampleMetrics, MetricAccum), EvalError>>> =
        (0..frames.len()).map(|_| None).collect();

    if threads <= 1 {
        for (i, frame) in frames.iter().enumerate() {
            slots[i] = Some(eval_frame(cfg, params, frame, opts, i));
        }
    } else {
        let chunk = frames.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (ci, (f_chunk, s_chunk)) in
                frames.chunks(chunk).zip(slots.chunks_mut(chunk)).enumerate()
            {
                scope.spawn(move || {
                    for (k, (frame, slot)) in f_chunk.iter().zip(s_chunk.iter_mut()).enumerate() {
                        *slot = Some(eval_frame(cfg, params, frame, opts, ci * chunk + k));
                    }
                });
            }
        });
    }

    let mut rows = Vec::with_capacity(frames.len());
    let mut pooled = MetricAccum::new();
    let mut total_points = 0;
    for slot in slots {
        let (row, acc) = slot.expect("every frame scored")?;
        total_points += row.points_used;
        pooled.merge(&acc);
        rows.push(row);
    }
    Ok(EvalOutput {
        rows,
        aggregate: pooled.finish(),
        total_points,
    })
}

/// metrics CSV: `sample,rmse_mm,mae_mm,irmse,imae,points` with a final
/// pooled `aggregate` row.
pub fn write_metrics_csv(path: &Path, out: &EvalOutput) -> Result<(), EvalError> {
    let mut text = String::from("sample,rmse_mm,mae_mm,irmse,imae,points\n");
    let fmt_row = |id: &str, m: &Metrics, points: usize| {
        format!(
            "{id},{:.3},{:.3},{:.4},{:.4},{points}\n",
            m.rmse_mm, m.mae_mm, m.irmse, m.imae
        )
    };
    for row in &out.rows {
        text.push_str(&fmt_row(&row.id, &row.metrics, row.points_used));
    }
    text.push_str(&fmt_row("aggregate", &out.aggregate, out.total_points));
    fs::write(path, text)?;
    Ok(())
}
