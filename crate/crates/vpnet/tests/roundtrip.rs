//! A fixed model must score a sample identically before and after the
//! sample travels through the dataset formats.

use vpnet::cli::synth_rig;
use vpnet::dataset::{load_dataset, save_dataset};
use vpnet_core::network::{default_stage_weights, evaluate_metrics, FusionLevel, ModelConfig};
use vpnet_core::pipeline;
use vpnet_core::pointnet::{ClusterWindow, PointNetKind};
use vpnet_core::scenes::{generate_scene, sample_lidar};
use vpnet_core::volume::VolumeKind;

#[test]
fn disk_round_trip_leaves_model_metrics_unchanged() {
    let rig = synth_rig(64, 32);
    let sample = generate_scene(17, &rig, 100.0, 4).unwrap();
    let cloud = sample_lidar(&sample.depth, &rig, 128, 3, 0.0).unwrap();

    let cfg = ModelConfig {
        channels: 2,
        depth_bins: 8,
        z_max: 100.0,
        stages: 1,
        stage_weights: default_stage_weights(1),
        volume: VolumeKind::Fusion,
        points: PointNetKind::FusedConv {
            window: ClusterWindow::default(),
        },
        fusion: FusionLevel::Intermediate,
        d_max: 7.0,
        downsample: 4,
    };
    let params = pipeline::init_params::<f32>(&cfg, 5).unwrap();

    let before = {
        let pred =
            pipeline::predict(&cfg, &params, &sample.left, &sample.right, &cloud, &rig).unwrap();
        evaluate_metrics(&pred, &sample.depth)
    };

    let dir = std::env::temp_dir().join(format!("vpnet-rt-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    save_dataset(&dir, &rig, &[(sample, cloud)]).unwrap();
    let (_, frames) = load_dataset(&dir).unwrap();
    let frame = &frames[0];

    let after = {
        let pred = pipeline::predict(
            &cfg,
            &params,
            &frame.sample.left,
            &frame.sample.right,
            &frame.cloud,
            &frame.sample.rig,
        )
        .unwrap();
        evaluate_metrics(&pred, &frame.sample.depth)
    };

    assert!((before.rmse_mm - after.rmse_mm).abs() < 1e-6);
    assert!((before.mae_mm - after.mae_mm).abs() < 1e-6);
    assert!((before.irmse - after.irmse).abs() < 1e-6);
    assert!((before.imae - after.imae).abs() < 1e-6);
    assert_eq!(before.valid_px, after.valid_px);
}
