//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (visible under `--nocapture`). Run with
//! `cargo test -p vpnet --test acceptance --release -- --nocapture`.

use std::time::Instant;

use vpnet::cli::{synth_frames, synth_rig};
use vpnet::dataset::Frame;
use vpnet::evalrun::{evaluate, EvalOptions};
use vpnet::train::{train, TrainOptions};
use vpnet_core::geometry::{BinSpacing, CameraRig, PointCloud, VoxelGridSpec};
use vpnet_core::gradsuite;
use vpnet_core::network::{
    default_stage_weights, evaluate_metrics, regress_depth, DepthMap, FusionLevel, ModelConfig,
};
use vpnet_core::ops::softmax_axis;
use vpnet_core::pointnet::{
    cluster, cluster_naive, fused_conv_forward, fused_conv_naive, voxelize, ClusterWindow,
    PointNetKind,
};
use vpnet_core::rng::Rng;
use vpnet_core::scenes::generate_scene;
use vpnet_core::tensor::Tensor;
use vpnet_core::volume::{quantization_bands, VolumeKind};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPT {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion} failed: {detail}");
}

/// Criterion 1: the gradient suite passes at 1e-3 (micro pipeline at 2e-3)
/// in under two minutes.
#[test]
fn acc01_gradient_suite() {
    let t0 = Instant::now();
    let rows = gradsuite::run_all();
    let elapsed = t0.elapsed().as_secs_f64();
    let mut worst = ("", 0.0_f64);
    let mut all_pass = true;
    for r in &rows {
        if r.max_rel_err > worst.1 {
            worst = ("", r.max_rel_err);
        }
        if !r.pass() {
            all_pass = false;
            println!("  gradient check failed: {} at {}", r.name, r.max_rel_err);
        }
    }
    report(
        "01 gradient suite",
        all_pass && elapsed < 120.0,
        &format!(
            "{} rows, worst rel err {:.3e}, {:.1}s",
            rows.len(),
            worst.1,
            elapsed
        ),
    );
}

/// Criterion 2: regression contract on 10^4 random logit vectors (D=48,
/// z_max=100): outputs in [0,100], softmax lanes sum to 1 within 1e-6, and
/// equal logits regress the exact mid-range.
#[test]
fn acc02_regression_contract() {
    let d = 48;
    let z_max = 100.0;
    let mut rng = Rng::new(0xacc2);
    let mut in_range = true;
    let mut sums_ok = true;
    for _ in 0..10_000 {
        let logits = Tensor::<f64>::from_fn(&[d, 1, 1], |_| rng.range(-6.0, 6.0));
        let (depth, _) = regress_depth(&logits, z_max, 1).unwrap();
        let z = depth.data()[0];
        if !(0.0..=z_max).contains(&z) {
            in_range = false;
        }
        let probs = softmax_axis(&logits, 0).unwrap();
        let s: f64 = probs.data().iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            sums_ok = false;
        }
    }
    let uniform = Tensor::<f64>::filled(&[d, 1, 1], 0.37);
    let (depth, _) = regress_depth(&uniform, z_max, 1).unwrap();
    let deviation = (depth.data()[0] - 50.0).abs();
    let symmetric = deviation < 1e-9;
    report(
        "02 regression contract",
        in_range && sums_ok && symmetric,
        &format!(
            "10^4 vectors in range: {in_range}, sums: {sums_ok}, uniform-logit deviation {deviation:.2e}"
        ),
    );
}

/// Criterion 3: the optimized fused-convolution forward matches the naive
/// double-loop oracle to 1e-5 on 100 random instances (N <= 64), and the
/// bucket clustering matches the O(N^2) window scan exactly.
#[test]
fn acc03_fused_conv_oracle() {
    let t0 = Instant::now();
    let rig = CameraRig::new(100.0, 100.0, 63.5, 31.5, 0.5, 128, 64).unwrap();
    let spec = VoxelGridSpec::for_rig(&rig, 48, 100.0, BinSpacing::DepthLinear, 4);
    let window = ClusterWindow { du: 1, dv: 1, dd: 1 };
    let mut rng = Rng::new(0xacc3);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let n = 4 + rng.below(61); // up to 64 points
        let mut pts = Vec::new();
        while pts.len() < n {
            let p = vpnet_core::geometry::random_frustum_point(&mut rng, &rig, 1.0, 99.0);
            if spec.voxel_index_of(&rig, p).is_some() {
                pts.push([p[0] as f32, p[1] as f32, p[2] as f32]);
            }
        }
        let cloud = PointCloud::from_points(pts).unwrap();
        let vox = voxelize(&cloud, &rig, &spec);
        assert_eq!(vox.len(), n);

        let fast = cluster(&vox, window);
        let slow = cluster_naive(&vox, window);
        assert_eq!(fast, slow, "clustering diverged from the O(N^2) oracle");

        let c = 3;
        let fused = Tensor::<f64>::from_fn(&[2 * c, n], |_| rng.range(-1.0, 1.0));
        let mix = Tensor::<f64>::from_fn(&[c, 2 * c], |_| rng.range(-1.0, 1.0));
        let geo = Tensor::<f64>::from_fn(&[c, 4], |_| rng.range(-1.0, 1.0));
        let (opt, _) = fused_conv_forward(&fused, &vox.coords, &fast, &mix, &geo);
        let naive = fused_conv_naive(&fused, &vox.coords, &fast, &mix, &geo);
        for (a, b) in opt.data().iter().zip(naive.data().iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "03 fused-conv oracle",
        worst <= 1e-5 && elapsed < 60.0,
        &format!("100 instances, worst |diff| {worst:.2e}, {elapsed:.1}s"),
    );
}

/// Criterion 4: quantization on 10^5 uniform-in-z points (fx=100, b=0.5,
/// D=48, z_max=100): metric-bin max error stays under the 1.07 m half-bin
/// bound in every band; disparity-bin mean error in [40,80) is at least 4x
/// the mean in [10,20).
#[test]
fn acc04_quantization_reproduction() {
    let t0 = Instant::now();
    let rig = CameraRig::new(100.0, 100.0, 127.5, 63.5, 0.5, 256, 128).unwrap();
    let fusion = VoxelGridSpec::for_rig(&rig, 48, 100.0, BinSpacing::DepthLinear, 4);
    let cost = VoxelGridSpec::for_rig(
        &rig,
        48,
        100.0,
        BinSpacing::DisparityLinear { d_max: 47.0 },
        4,
    );
    let mut rng = Rng::new(0xacc4);
    let mut pts = Vec::with_capacity(100_000);
    for _ in 0..100_000 {
        let p = vpnet_core::geometry::random_frustum_point(&mut rng, &rig, 0.5, 99.9);
        pts.push([p[0] as f32, p[1] as f32, p[2] as f32]);
    }
    let cloud = PointCloud::from_points(pts).unwrap();

    let fusion_bands = quantization_bands(
        &cloud,
        &rig,
        &fusion,
        &[(0.0, 20.0), (20.0, 40.0), (40.0, 80.0)],
    );
    let bound_ok = fusion_bands
        .iter()
        .all(|b| b.count > 0 && b.max_abs_err <= 1.07);

    let cost_bands = quantization_bands(&cloud, &rig, &cost, &[(10.0, 20.0), (40.0, 80.0)]);
    let near = cost_bands[0].mean_abs_err;
    let far = cost_bands[1].mean_abs_err;
    let growth_ok = cost_bands.iter().all(|b| b.count > 0) && far >= 4.0 * near;

    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "04 quantization reproduction",
        bound_ok && growth_ok && elapsed < 60.0,
        &format!(
            "fusion max per band {:?} m <= 1.07; cost mean near {near:.3} m vs far {far:.3} m ({:.1}x); {elapsed:.1}s",
            fusion_bands
                .iter()
                .map(|b| (b.max_abs_err * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            far / near
        ),
    );
}

fn desk_cfg(points: PointNetKind) -> ModelConfig {
    ModelConfig {
        channels: 4,
        depth_bins: 16,
        z_max: 100.0,
        stages: 2,
        stage_weights: default_stage_weights(2),
        volume: VolumeKind::Fusion,
        points,
        fusion: FusionLevel::Intermediate,
        d_max: 15.0,
        downsample: 4,
    }
}

fn desk_frames(width: usize, height: usize, count: usize, seed: u64) -> Vec<Frame> {
    let rig = synth_rig(width, height);
    synth_frames(&rig, count, seed, 100.0, 5, 1024)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, (sample, cloud))| Frame {
            id: format!("{i:04}"),
            sample,
            cloud,
        })
        .collect()
}

/// Criterion 5: 200 training steps on a seeded 4-frame 64x128 set (C=4,
/// D=16, S=2) cut the total loss below half its initial value, and the
/// fused model beats the stereo-only (zero-point) model on training-frame
/// RMSE, averaged over 3 seeds.
#[test]
fn acc05_training_convergence() {
    let t0 = Instant::now();
    let frames = desk_frames(128, 64, 4, 42);
    let cfg = desk_cfg(PointNetKind::FusedConv {
        window: ClusterWindow::default(),
    });

    let mut halved = true;
    let mut fused_rmse = 0.0_f64;
    let mut stereo_rmse = 0.0_f64;
    for seed in 0..3 {
        let opts = TrainOptions {
            steps: 200,
            decay_step: 133,
            points_train: 512,
            seed,
            ..TrainOptions::default()
        };
        let fused = train(&cfg, &frames, &opts).unwrap();
        let first = fused.log.first().unwrap().total;
        let last = fused.log.last().unwrap().total;
        if last >= 0.5 * first {
            halved = false;
            println!("  seed {seed}: loss {first:.3} -> {last:.3} not halved");
        }
        let eval = evaluate(&cfg, &fused.params, &frames, &EvalOptions::default()).unwrap();
        fused_rmse += eval.aggregate.rmse_mm / 3.0;

        let stereo = train(
            &cfg,
            &frames,
            &TrainOptions {
                points_train: 0,
                ..opts
            },
        )
        .unwrap();
        let eval0 = evaluate(
            &cfg,
            &stereo.params,
            &frames,
            &EvalOptions {
                points: Some(0),
                ..EvalOptions::default()
            },
        )
        .unwrap();
        stereo_rmse += eval0.aggregate.rmse_mm / 3.0;
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "05 training convergence",
        halved && fused_rmse < stereo_rmse && elapsed < 600.0,
        &format!(
            "loss halved: {halved}; mean RMSE fused {fused_rmse:.0} mm vs stereo-only {stereo_rmse:.0} mm; {elapsed:.0}s"
        ),
    );
}

/// Criterion 6: with fixed trained models, aggregate RMSE is non-increasing
/// over the point ladder {10, 1000, 5000, 15000} (one adjacent violation of
/// at most 5% allowed, averaged across 3 seeds), and full dropout still
/// produces finite metrics.
#[test]
fn acc06_point_count_robustness() {
    let t0 = Instant::now();
    // 128x256 frames so 15000 points stay below the valid-pixel count
    let frames = desk_frames(256, 128, 3, 77);
    let cfg = desk_cfg(PointNetKind::FusedConv {
        window: ClusterWindow::default(),
    });
    let ladder = [10usize, 1000, 5000, 15000];
    let mut mean_rmse = [0.0_f64; 4];
    let mut dropout_finite = true;
    for seed in 0..3 {
        let trained = train(
            &cfg,
            &frames,
            &TrainOptions {
                steps: 150,
                decay_step: 100,
                points_train: 1024,
                seed,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        for (i, count) in ladder.iter().enumerate() {
            let eval = evaluate(
                &cfg,
                &trained.params,
                &frames,
                &EvalOptions {
                    points: Some(*count),
                    seed,
                    ..EvalOptions::default()
                },
            )
            .unwrap();
            mean_rmse[i] += eval.aggregate.rmse_mm / 3.0;
        }
        let drop = evaluate(
            &cfg,
            &trained.params,
            &frames,
            &EvalOptions {
                points: Some(1000),
                dropout: 1.0,
                seed,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        if !drop.aggregate.rmse_mm.is_finite() || !drop.aggregate.mae_mm.is_finite() {
            dropout_finite = false;
        }
    }
    let mut violations = 0;
    let mut excessive = false;
    for i in 0..3 {
        if mean_rmse[i + 1] > mean_rmse[i] {
            violations += 1;
            if mean_rmse[i + 1] > mean_rmse[i] * 1.05 {
                excessive = true;
            }
        }
    }
    let trend_ok = violations <= 1 && !excessive;
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "06 point-count robustness",
        trend_ok && dropout_finite && elapsed < 300.0,
        &format!(
            "mean RMSE over ladder {:?} mm, {violations} violation(s); dropout-1.0 finite: {dropout_finite}; {elapsed:.0}s",
            mean_rmse.map(|v| v.round())
        ),
    );
}

/// Criterion 7: ablation direction on the desk benchmark, 3 seeds at equal
/// budget: metric-bin volume <= disparity-bin volume, and in-volume fusion
/// <= early input fusion. The fused-conv vs raw-points gap is reported but
/// not gated.
#[test]
fn acc07_ablation_trend() {
    let t0 = Instant::now();
    let frames = desk_frames(128, 64, 4, 42);
    let mut mean_of = |volume: VolumeKind, points: PointNetKind, fusion: FusionLevel| -> f64 {
        let cfg = ModelConfig {
            volume,
            points,
            fusion,
            ..desk_cfg(points)
        };
        let mut acc = 0.0;
        for seed in 0..3 {
            let trained = train(
                &cfg,
                &frames,
                &TrainOptions {
                    steps: 150,
                    decay_step: 100,
                    points_train: 256,
                    seed,
                    ..TrainOptions::default()
                },
            )
            .unwrap();
            let eval = evaluate(
                &cfg,
                &trained.params,
                &frames,
                &EvalOptions {
                    seed,
                    ..EvalOptions::default()
                },
            )
            .unwrap();
            acc += eval.aggregate.rmse_mm / 3.0;
        }
        acc
    };

    let fc = PointNetKind::FusedConv {
        window: ClusterWindow::default(),
    };
    let fusion_v = mean_of(VolumeKind::Fusion, fc, FusionLevel::Intermediate);
    let cost_v = mean_of(VolumeKind::Cost, fc, FusionLevel::Intermediate);
    let raw_mid = mean_of(VolumeKind::Fusion, PointNetKind::Raw, FusionLevel::Intermediate);
    let raw_early = mean_of(VolumeKind::Fusion, PointNetKind::Raw, FusionLevel::Early);

    println!(
        "  volume:   metric bins {fusion_v:.0} mm vs disparity bins {cost_v:.0} mm"
    );
    println!("  level:    in-volume {raw_mid:.0} mm vs early input {raw_early:.0} mm");
    println!(
        "  pointnet: fused-conv {fusion_v:.0} mm vs raw occupancy {raw_mid:.0} mm (reported, not gated)"
    );
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "07 ablation trend",
        fusion_v <= cost_v && raw_mid <= raw_early && elapsed < 1800.0,
        &format!(
            "fusion {fusion_v:.0} <= cost {cost_v:.0}; intermediate {raw_mid:.0} <= early {raw_early:.0}; {elapsed:.0}s"
        ),
    );
}

/// Criterion 8: metric unit conventions on the two-pixel hand example,
/// within 0.1%.
#[test]
fn acc08_metric_units() {
    let truth = DepthMap::dense(2, 1, vec![1.0, 1.0]);
    let pred = DepthMap::dense(2, 1, vec![1.0, 3.0]);
    let m = evaluate_metrics(&pred, &truth);
    let rmse_ok = (m.rmse_mm - 1414.2).abs() / 1414.2 < 1e-3;
    let mae_ok = (m.mae_mm - 1000.0).abs() / 1000.0 < 1e-3;
    let imae_ok = (m.imae - 333.33).abs() / 333.33 < 1e-3;
    report(
        "08 metric units",
        rmse_ok && mae_ok && imae_ok,
        &format!(
            "RMSE {:.1} mm, MAE {:.1} mm, iMAE {:.2} 1/km",
            m.rmse_mm, m.mae_mm, m.imae
        ),
    );
}

/// Criterion 9: synth + train + eval twice with one seed produce
/// byte-identical datasets, loss logs and metric reports.
#[test]
fn acc09_determinism() {
    let bin = env!("CARGO_BIN_EXE_vpnet");
    let base = std::env::temp_dir().join(format!("vpnet-acc09-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();

    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let dir = base.join(tag);
        let ds = dir.join("data");
        let model = dir.join("model.vpn");
        let loss = dir.join("loss.csv");
        let metrics = dir.join("metrics.csv");
        std::fs::create_dir_all(&dir).unwrap();
        let ok = |status: std::process::ExitStatus| assert!(status.success());
        ok(std::process::Command::new(bin)
            .args(["synth", "--out"])
            .arg(&ds)
            .args(["--frames", "2", "--seed", "9", "--width", "64", "--height", "32"])
            .status()
            .unwrap());
        ok(std::process::Command::new(bin)
            .args(["train", "--data"])
            .arg(&ds)
            .arg("--out")
            .arg(&model)
            .args([
                "--steps", "40", "--channels", "2", "--bins", "8", "--stages", "1",
                "--points-train", "64", "--seed", "5", "--loss-csv",
            ])
            .arg(&loss)
            .status()
            .unwrap());
        ok(std::process::Command::new(bin)
            .args(["eval", "--data"])
            .arg(&ds)
            .arg("--model")
            .arg(&model)
            .arg("--report")
            .arg(&metrics)
            .status()
            .unwrap());
        (
            std::fs::read(&loss).unwrap(),
            std::fs::read(&metrics).unwrap(),
            std::fs::read(&model).unwrap(),
        )
    };

    let a = run("a");
    let b = run("b");
    report(
        "09 determinism",
        a == b,
        "loss.csv, metrics.csv and checkpoint byte-identical across reruns",
    );
}
