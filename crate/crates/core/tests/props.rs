//! Property tests over the geometric and regression invariants.

use proptest::prelude::*;

use vpnet_core::geometry::{BinSpacing, CameraRig, VoxelGridSpec};
use vpnet_core::network::regress_depth;
use vpnet_core::ops::softmax_axis;
use vpnet_core::tensor::Tensor;

fn rig() -> CameraRig {
    CameraRig::new(110.0, 108.0, 63.5, 31.5, 0.54, 128, 64).unwrap()
}

fn fusion_spec() -> VoxelGridSpec {
    VoxelGridSpec::for_rig(&rig(), 48, 100.0, BinSpacing::DepthLinear, 4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Back-projection is an exact right inverse of projection.
    #[test]
    fn project_backproject_identity(
        u in 0.0..127.0f64,
        v in 0.0..63.0f64,
        z in 0.05..1000.0f64,
    ) {
        let rig = rig();
        let p = rig.backproject(u, v, z).unwrap();
        let (u2, v2) = rig.project(p).unwrap();
        prop_assert!((u - u2).abs() < 1e-9);
        prop_assert!((v - v2).abs() < 1e-9);
    }

    /// Every accepted point decodes to within half a depth bin.
    #[test]
    fn accepted_points_respect_the_half_bin_bound(
        u in 0.0..127.0f64,
        v in 0.0..63.0f64,
        z in 0.05..110.0f64,
    ) {
        let rig = rig();
        let spec = fusion_spec();
        let p = rig.backproject(u, v, z).unwrap();
        if let Some((iu, iv, id)) = spec.voxel_index_of(&rig, p) {
            let c = spec.voxel_center(&rig, iu, iv, id).unwrap();
            prop_assert!((z - c[2]).abs() <= spec.half_bin_depth() + 1e-6);
            // and the (u,v) cell is within half a downsampled pixel
            prop_assert!((u / 4.0 - iu as f64).abs() <= 0.5 + 1e-9);
            prop_assert!((v / 4.0 - iv as f64).abs() <= 0.5 + 1e-9);
        } else {
            // rejected iff outside the grid or past the covered depth range
            let iu = (u / 4.0).round();
            let iv = (v / 4.0).round();
            let inside = iu >= 0.0
                && iu < spec.grid_w as f64
                && iv >= 0.0
                && iv < spec.grid_h as f64
                && z < spec.z_max * (1.0 + 0.5 / 47.0);
            prop_assert!(!inside, "in-range point was dropped: ({u},{v},{z})");
        }
    }

    /// The depth-bin index never decreases with depth for metric bins.
    #[test]
    fn depth_bins_are_monotone(z1 in 0.1..99.0f64, dz in 0.0..10.0f64) {
        let rig = rig();
        let spec = fusion_spec();
        let a = spec.depth_bin_of(&rig, z1);
        let b = spec.depth_bin_of(&rig, z1 + dz);
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!(b >= a);
        }
    }

    /// Regressed depth stays inside [0, z_max] and its softmax lanes
    /// normalize, whatever the logits.
    #[test]
    fn regression_is_bounded_and_normalized(
        logits in proptest::collection::vec(-30.0..30.0f64, 24),
    ) {
        let a = Tensor::from_vec(&[24, 1, 1], logits).unwrap();
        let (depth, _) = regress_depth(&a, 100.0, 1).unwrap();
        prop_assert!((0.0..=100.0).contains(&depth.data()[0]));
        let probs = softmax_axis(&a, 0).unwrap();
        let s: f64 = probs.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    /// Raising any single logit moves the estimate toward that bin's depth,
    /// never past it.
    #[test]
    fn regression_moves_toward_a_raised_bin(
        logits in proptest::collection::vec(-3.0..3.0f64, 16),
        bump_at in 0usize..16,
        bump in 0.01..2.0f64,
    ) {
        let a = Tensor::from_vec(&[16, 1, 1], logits).unwrap();
        let (z0, _) = regress_depth(&a, 100.0, 1).unwrap();
        let mut b = a.clone();
        b.data_mut()[bump_at] += bump;
        let (z1, _) = regress_depth(&b, 100.0, 1).unwrap();
        let center = bump_at as f64 / 15.0 * 100.0;
        if center >= z0.data()[0] {
            prop_assert!(z1.data()[0] >= z0.data()[0] - 1e-9);
            prop_assert!(z1.data()[0] <= center + 1e-9);
        } else {
            prop_assert!(z1.data()[0] <= z0.data()[0] + 1e-9);
            prop_assert!(z1.data()[0] >= center - 1e-9);
        }
    }
}
