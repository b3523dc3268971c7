//! Command-line surface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 check
//! failure. Every subcommand is deterministic given `--seed`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use vpnet_core::geometry::{CameraRig, PointCloud};
use vpnet_core::gradsuite;
use vpnet_core::network::{default_stage_weights, FusionLevel, ModelConfig};
use vpnet_core::pipeline;
use vpnet_core::pointnet::{ClusterWindow, PointNetKind};
use vpnet_core::rng::Rng;
use vpnet_core::scenes::{generate_scene, sample_lidar};
use vpnet_core::volume::VolumeKind;

use crate::checkpoint;
use crate::dataset::{load_dataset, save_dataset, Frame};
use crate::evalrun::{evaluate, write_metrics_csv, EvalOptions};
use crate::formats;
use crate::quantize::{quantize_dataset, write_quant_csv, SpecKind};
use crate::train::{train, write_loss_csv, TrainOptions};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

fn data_err(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

pub const USAGE: &str = "\
vpnet <command> [flags]

commands:
  synth      --out DIR [--frames N] [--seed S] [--width W] [--height H]
             [--objects K] [--zmax Z] [--points N]
  train      --data DIR --out MODEL [--steps N] [--lr R] [--lr2 R]
             [--decay-step N] [--volume fusion|cost|depth]
             [--pointnet raw|mlp|fusionconv] [--fusion early|intermediate]
             [--stages S] [--weights w1,..,wS] [--points-train N]
             [--channels C] [--bins D] [--zmax Z] [--dmax D]
             [--window u,v,d] [--seed S] [--loss-csv PATH]
  eval       --data DIR --model MODEL [--points N] [--dropout P]
             [--report PATH] [--seed S]
  infer      --left PPM --right PPM --calib TXT --model MODEL --out PFM
             [--points PCB|XYZ]
  quantize   --data DIR [--spec fusion|cost|depth]... [--bins D] [--zmax Z]
             [--dmax D] [--report PATH]
  gradcheck
  ablate     --data DIR --out DIR [--steps N] [--seeds N] [--points-train N]
             [--channels C] [--bins D] [--stages S] [--report PATH]

environment: VPNET_THREADS caps eval parallelism (default 1).
";

struct Flags {
    values: BTreeMap<String, Vec<String>>,
}

impl Flags {
    fn parse(args: &[String], allowed: &[&str]) -> Result<Flags, CliError> {
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut it = args.iter().peekable();
        while let Some(tok) = it.next() {
            let Some(stripped) = tok.strip_prefix("--") else {
                return Err(CliError::Usage(format!("unexpected argument {tok:?}")));
            };
            let (key, inline) = match stripped.split_once('=') {
                Some((k, v)) => (k.to_string(), Some(v.to_string())),
                None => (stripped.to_string(), None),
            };
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("unknown flag --{key}")));
            }
            let value = match inline {
                Some(v) => v,
                None => it
                    .next()
                    .ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?
                    .clone(),
            };
            values.entry(key).or_default().push(value);
        }
        Ok(Flags { values })
    }

    fn str_opt(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|v| v[0].as_str())
    }

    fn str_req(&self, key: &str) -> Result<&str, CliError> {
        self.str_opt(key)
            .ok_or_else(|| CliError::Usage(format!("--{key} is required")))
    }

    fn list(&self, key: &str) -> &[String] {
        self.values.get(key).map(|v| v.as_slice()).unwrap_or(&[])
    }

    fn parse_num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Usage(format!("cannot parse --{key} {s:?}"))),
        }
    }
}

/// The rig `synth` writes: KITTI-like aspect with principal point at the
/// image center.
pub fn synth_rig(width: usize, height: usize) -> CameraRig {
    CameraRig::new(
        0.86 * width as f64,
        0.86 * width as f64,
        (width - 1) as f64 / 2.0,
        (height - 1) as f64 / 2.0,
        0.54,
        width,
        height,
    )
    .expect("synth rig is valid")
}

/// Renders `frames` scenes with per-frame derived seeds and samples a stored
/// point cloud for each; the building block behind `synth`.
pub fn synth_frames(
    rig: &CameraRig,
    frames: usize,
    seed: u64,
    z_max: f64,
    objects: usize,
    points: usize,
) -> Result<Vec<(vpnet_core::scenes::SceneSample, PointCloud)>, CliError> {
    let mut data = Vec::with_capacity(frames);
    for i in 0..frames {
        let scene_seed = Rng::derive(seed, 0x5c17 + i as u64).next_u64();
        let sample = generate_scene(scene_seed, rig, z_max, objects).map_err(data_err)?;
        let count = points.min(sample.depth.valid_count());
        let cloud_seed = Rng::derive(seed, 0x91d5 + i as u64).next_u64();
        let cloud = sample_lidar(&sample.depth, rig, count, cloud_seed, 0.0).map_err(data_err)?;
        data.push((sample, cloud));
    }
    Ok(data)
}

fn cmd_synth(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(
        args,
        &["out", "frames", "seed", "width", "height", "objects", "zmax", "points"],
    )?;
    let out = PathBuf::from(flags.str_req("out")?);
    let frames: usize = flags.parse_num("frames", 4)?;
    let seed: u64 = flags.parse_num("seed", 0)?;
    let width: usize = flags.parse_num("width", 128)?;
    let height: usize = flags.parse_num("height", 64)?;
    let objects: usize = flags.parse_num("objects", 5)?;
    let z_max: f64 = flags.parse_num("zmax", 100.0)?;
    let points: usize = flags.parse_num("points", 512)?;
    if width % 4 != 0 || height % 4 != 0 {
        return Err(CliError::Usage(format!(
            "--width/--height must be divisible by 4, got {width}x{height}"
        )));
    }
    if objects == 0 {
        return Err(CliError::Usage("--objects must be >= 1".into()));
    }

    let rig = synth_rig(width, height);
    let data = synth_frames(&rig, frames, seed, z_max, objects, points)?;
    save_dataset(&out, &rig, &data).map_err(data_err)?;
    println!("wrote {} frames to {}", frames, out.display());
    Ok(())
}

fn parse_volume(s: &str) -> Result<VolumeKind, CliError> {
    match s {
        "fusion" => Ok(VolumeKind::Fusion),
        "cost" => Ok(VolumeKind::Cost),
        "depth" => Ok(VolumeKind::Depth),
        _ => Err(CliError::Usage(format!(
            "--volume must be fusion|cost|depth, got {s:?}"
        ))),
    }
}

fn parse_pointnet(s: &str, window: ClusterWindow) -> Result<PointNetKind, CliError> {
    match s {
        "raw" => Ok(PointNetKind::Raw),
        "mlp" => Ok(PointNetKind::Mlp),
        "fusionconv" => Ok(PointNetKind::FusedConv { window }),
        _ => Err(CliError::Usage(format!(
            "--pointnet must be raw|mlp|fusionconv, got {s:?}"
        ))),
    }
}

fn parse_fusion(s: &str) -> Result<FusionLevel, CliError> {
    match s {
        "early" => Ok(FusionLevel::Early),
        "intermediate" => Ok(FusionLevel::Intermediate),
        _ => Err(CliError::Usage(format!(
            "--fusion must be early|intermediate, got {s:?}"
        ))),
    }
}

fn config_from_flags(flags: &Flags) -> Result<ModelConfig, CliError> {
    let channels: usize = flags.parse_num("channels", 8)?;
    let bins: usize = flags.parse_num("bins", 48)?;
    let z_max: f64 = flags.parse_num("zmax", 100.0)?;
    let stages: usize = flags.parse_num("stages", 3)?;
    let d_max: f64 = flags.parse_num("dmax", (bins.max(2) - 1) as f64)?;
    let window = match flags.str_opt("window") {
        None => ClusterWindow::default(),
        Some(s) => {
            let parts: Vec<i32> = s
                .split(',')
                .map(|t| t.parse())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::Usage(format!("cannot parse --window {s:?}")))?;
            if parts.len() != 3 || parts.iter().any(|v| *v < 0) {
                return Err(CliError::Usage(format!(
                    "--window needs three non-negative integers, got {s:?}"
                )));
            }
            ClusterWindow {
                du: parts[0],
                dv: parts[1],
                dd: parts[2],
            }
        }
    };
    let volume = parse_volume(flags.str_opt("volume").unwrap_or("fusion"))?;
    let points = parse_pointnet(flags.str_opt("pointnet").unwrap_or("fusionconv"), window)?;
    let fusion = parse_fusion(flags.str_opt("fusion").unwrap_or("intermediate"))?;
    let stage_weights = match flags.str_opt("weights") {
        None => default_stage_weights(stages),
        Some(s) => s
            .split(',')
            .map(|t| t.parse())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|_| CliError::Usage(format!("cannot parse --weights {s:?}")))?,
    };
    let cfg = ModelConfig {
        channels,
        depth_bins: bins,
        z_max,
        stages,
        stage_weights,
        volume,
        points,
        fusion,
        d_max,
        downsample: 4,
    };
    cfg.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn load_frames(dir: &str) -> Result<Vec<Frame>, CliError> {
    let (_, frames) = load_dataset(Path::new(dir)).map_err(data_err)?;
    Ok(frames)
}

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(
        args,
        &[
            "data", "out", "steps", "lr", "lr2", "decay-step", "volume", "pointnet", "fusion",
            "stages", "weights", "points-train", "channels", "bins", "zmax", "dmax", "window",
            "seed", "loss-csv",
        ],
    )?;
    let data = flags.str_req("data")?;
    let out = PathBuf::from(flags.str_req("out")?);
    let cfg = config_from_flags(&flags)?;
    let opts = TrainOptions {
        steps: flags.parse_num("steps", 300)?,
        lr: flags.parse_num("lr", 1e-3)?,
        lr2: flags.parse_num("lr2", 1e-4)?,
        decay_step: flags.parse_num("decay-step", 200)?,
        points_train: flags.parse_num("points-train", 512)?,
        seed: flags.parse_num("seed", 0)?,
    };
    if !(opts.lr > 0.0) || !(opts.lr2 > 0.0) {
        return Err(CliError::Usage("learning rates must be > 0".into()));
    }

    let frames = load_frames(data)?;
    let result = train(&cfg, &frames, &opts).map_err(data_err)?;
    checkpoint::save(&out, &cfg, &result.params).map_err(data_err)?;
    let loss_path = match flags.str_opt("loss-csv") {
        Some(p) => PathBuf::from(p),
        None => out.with_extension("loss.csv"),
    };
    write_loss_csv(&loss_path, cfg.stages, &result.log).map_err(data_err)?;
    let last = result.log.last().expect("steps >= 1");
    println!(
        "trained {} steps; final total loss {:.6}; model {} loss log {}",
        opts.steps,
        last.total,
        out.display(),
        loss_path.display()
    );
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(
        args,
        &["data", "model", "points", "dropout", "report", "seed", "volume", "pointnet", "fusion", "channels", "bins", "stages"],
    )?;
    let data = flags.str_req("data")?;
    let model = flags.str_req("model")?;
    let report = PathBuf::from(flags.str_opt("report").unwrap_or("metrics.csv"));
    let points = match flags.str_opt("points") {
        None => None,
        Some(s) => Some(s.parse::<usize>().map_err(|_| {
            CliError::Usage(format!("cannot parse --points {s:?}"))
        })?),
    };
    let dropout: f64 = flags.parse_num("dropout", 0.0)?;
    if !(0.0..=1.0).contains(&dropout) {
        return Err(CliError::Usage(format!(
            "--dropout must be in [0,1], got {dropout}"
        )));
    }
    let seed: u64 = flags.parse_num("seed", 0)?;

    let (cfg, params) = checkpoint::load(Path::new(model)).map_err(data_err)?;
    // when config flags are passed they must agree with the checkpoint
    for (key, got) in [
        ("channels", cfg.channels.to_string()),
        ("bins", cfg.depth_bins.to_string()),
        ("stages", cfg.stages.to_string()),
    ] {
        if let Some(want) = flags.str_opt(key) {
            if want != got {
                return Err(CliError::Usage(format!(
                    "--{key} {want} does not match the checkpoint ({got})"
                )));
            }
        }
    }
    for (key, got) in [
        ("volume", match cfg.volume {
            VolumeKind::Fusion => "fusion",
            VolumeKind::Cost => "cost",
            VolumeKind::Depth => "depth",
        }),
        ("pointnet", match cfg.points {
            PointNetKind::Raw => "raw",
            PointNetKind::Mlp => "mlp",
            PointNetKind::FusedConv { .. } => "fusionconv",
        }),
        ("fusion", match cfg.fusion {
            FusionLevel::Early => "early",
            FusionLevel::Intermediate => "intermediate",
        }),
    ] {
        if let Some(want) = flags.str_opt(key) {
            if want != got {
                return Err(CliError::Usage(format!(
                    "--{key} {want} does not match the checkpoint ({got})"
                )));
            }
        }
    }

    let frames = load_frames(data)?;
    let opts = EvalOptions {
        points,
        dropout,
        seed,
    };
    let out = evaluate(&cfg, &params, &frames, &opts).map_err(data_err)?;
    write_metrics_csv(&report, &out).map_err(data_err)?;
    let m = &out.aggregate;
    println!(
        "aggregate over {} frames: RMSE {:.3} mm, MAE {:.3} mm, iRMSE {:.4} 1/km, iMAE {:.4} 1/km",
        out.rows.len(),
        m.rmse_mm,
        m.mae_mm,
        m.irmse,
        m.imae
    );
    if m.excluded_inverse_px > 0 {
        println!(
            "excluded {} non-positive predictions from the inverse metrics",
            m.excluded_inverse_px
        );
    }
    Ok(())
}

fn cmd_infer(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(args, &["left", "right", "calib", "model", "out", "points"])?;
    let left = formats::load_ppm(Path::new(flags.str_req("left")?)).map_err(data_err)?;
    let right = formats::load_ppm(Path::new(flags.str_req("right")?)).map_err(data_err)?;
    let rig = formats::load_calib(Path::new(flags.str_req("calib")?)).map_err(data_err)?;
    let (cfg, params) = checkpoint::load(Path::new(flags.str_req("model")?)).map_err(data_err)?;
    let out = PathBuf::from(flags.str_req("out")?);

    if rig.width % 4 != 0 || rig.height % 4 != 0 {
        return Err(CliError::Data(format!(
            "calibrated extents {}x{} not divisible by 4",
            rig.width, rig.height
        )));
    }
    for (name, img) in [("left", &left), ("right", &right)] {
        if img.shape() != [3, rig.height, rig.width] {
            return Err(CliError::Data(format!(
                "{name} image shape {:?} does not match calibration {}x{}",
                img.shape(),
                rig.width,
                rig.height
            )));
        }
    }
    let cloud = match flags.str_opt("points") {
        Some(p) => formats::load_points(Path::new(p)).map_err(data_err)?,
        None => PointCloud::new(), // stereo-only inference
    };
    let pred = pipeline::predict(&cfg, &params, &left, &right, &cloud, &rig).map_err(data_err)?;
    formats::save_pfm(&out, &pred).map_err(data_err)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_quantize(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(args, &["data", "spec", "bins", "zmax", "dmax", "report"])?;
    let data = flags.str_req("data")?;
    let bins: usize = flags.parse_num("bins", 48)?;
    let z_max: f64 = flags.parse_num("zmax", 100.0)?;
    let d_max: f64 = flags.parse_num("dmax", (bins.max(2) - 1) as f64)?;
    let report = PathBuf::from(flags.str_opt("report").unwrap_or("quantization.csv"));
    let mut specs = Vec::new();
    for s in flags.list("spec") {
        specs.push(SpecKind::parse(s).ok_or_else(|| {
            CliError::Usage(format!("--spec must be fusion|cost|depth, got {s:?}"))
        })?);
    }
    if specs.is_empty() {
        specs = vec![SpecKind::Fusion, SpecKind::Cost];
    }
    let frames = load_frames(data)?;
    let rows = quantize_dataset(&frames, &specs, bins, z_max, d_max);
    write_quant_csv(&report, &rows).map_err(data_err)?;
    for r in &rows {
        println!(
            "{:>6} [{:>4.0},{:>4.0}) m: n={:7} mean {:.4} m max {:.4} m",
            r.spec, r.band.lo, r.band.hi, r.band.count, r.band.mean_abs_err, r.band.max_abs_err
        );
    }
    println!("wrote {}", report.display());
    Ok(())
}

fn cmd_gradcheck(args: &[String]) -> Result<(), CliError> {
    Flags::parse(args, &[])?;
    let rows = gradsuite::run_all();
    let mut failures = 0;
    for r in &rows {
        let status = if r.pass() { "PASS" } else { "FAIL" };
        println!("{status}  {:<24} max_rel {:>12.3e}  tol {:.0e}", r.name, r.max_rel_err, r.tol);
        if !r.pass() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Check(format!("{failures} gradient checks failed")));
    }
    println!("all {} gradient checks passed", rows.len());
    Ok(())
}

/// The ablation grid: volume spacing, point network, fusion level.
pub const ABLATION_MODES: [(&str, &str, &str); 5] = [
    ("fusion", "fusionconv", "intermediate"),
    ("cost", "fusionconv", "intermediate"),
    ("fusion", "mlp", "intermediate"),
    ("fusion", "raw", "intermediate"),
    ("fusion", "raw", "early"),
];

fn cmd_ablate(args: &[String]) -> Result<(), CliError> {
    let flags = Flags::parse(
        args,
        &["data", "out", "steps", "seeds", "points-train", "channels", "bins", "stages", "report", "points"],
    )?;
    let data = flags.str_req("data")?;
    let out_dir = PathBuf::from(flags.str_req("out")?);
    let steps: usize = flags.parse_num("steps", 150)?;
    let seeds: u64 = flags.parse_num("seeds", 3)?;
    let points_train: usize = flags.parse_num("points-train", 256)?;
    let channels: usize = flags.parse_num("channels", 4)?;
    let bins: usize = flags.parse_num("bins", 16)?;
    let stages: usize = flags.parse_num("stages", 2)?;
    let report = match flags.str_opt("report") {
        Some(p) => PathBuf::from(p),
        None => out_dir.join("ablation.csv"),
    };
    std::fs::create_dir_all(&out_dir).map_err(data_err)?;

    let frames = load_frames(data)?;
    let mut csv = String::from("volume,pointnet,fusion,seed,rmse_mm,mae_mm,irmse,imae\n");
    for (volume, pointnet, fusion) in ABLATION_MODES {
        let mut sum = [0.0_f64; 4];
        for seed in 0..seeds {
            let cfg = ModelConfig {
                channels,
                depth_bins: bins,
                stages,
                stage_weights: default_stage_weights(stages),
                volume: parse_volume(volume)?,
                points: parse_pointnet(pointnet, ClusterWindow::default())?,
                fusion: parse_fusion(fusion)?,
                d_max: (bins - 1) as f64,
                ..ModelConfig::default()
            };
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let opts = TrainOptions {
                steps,
                decay_step: steps * 2 / 3,
                points_train,
                seed,
                ..TrainOptions::default()
            };
            let trained = train(&cfg, &frames, &opts).map_err(data_err)?;
            let eval = evaluate(
                &cfg,
                &trained.params,
                &frames,
                &EvalOptions {
                    seed,
                    ..EvalOptions::default()
                },
            )
            .map_err(data_err)?;
            let m = &eval.aggregate;
            csv.push_str(&format!(
                "{volume},{pointnet},{fusion},{seed},{:.3},{:.3},{:.4},{:.4}\n",
                m.rmse_mm, m.mae_mm, m.irmse, m.imae
            ));
            sum[0] += m.rmse_mm;
            sum[1] += m.mae_mm;
            sum[2] += m.irmse;
            sum[3] += m.imae;
            let model_path = out_dir.join(format!("{volume}-{pointnet}-{fusion}-s{seed}.vpn"));
            checkpoint::save(&model_path, &cfg, &trained.params).map_err(data_err)?;
        }
        let n = seeds as f64;
        csv.push_str(&format!(
            "{volume},{pointnet},{fusion},mean,{:.3},{:.3},{:.4},{:.4}\n",
            sum[0] / n,
            sum[1] / n,
            sum[2] / n,
            sum[3] / n
        ));
        println!(
            "{volume}/{pointnet}/{fusion}: mean RMSE {:.3} mm over {seeds} seeds",
            sum[0] / n
        );
    }
    std::fs::write(&report, csv).map_err(data_err)?;
    println!("wrote {}", report.display());
    Ok(())
}

pub fn run(args: &[String]) -> Result<(), CliError> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage(format!("no command given\n\n{USAGE}")));
    };
    let rest = &args[1..];
    match command.as_str() {
        "synth" => cmd_synth(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "infer" => cmd_infer(rest),
        "quantize" => cmd_quantize(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "ablate" => cmd_ablate(rest),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::Usage(format!(
            "unknown command {other:?}\n\n{USAGE}"
        ))),
    }
}
