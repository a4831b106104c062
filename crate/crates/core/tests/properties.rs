mod support;

use std::collections::BTreeSet;

use gsdiff::baseline::{filter_by_delta, DeltaThresholds};
use gsdiff::eval::{connected_components, min_bounding_rect, pixel_metrics};
use gsdiff::maps::Grid;
use gsdiff::math::Quat;
use gsdiff::partition::{change_logits, change_map, loss_3d_given, ChangeHead};
use gsdiff::pose_interp::{densify, slerp, Pose, PoseSequence};
use gsdiff::rasterizer::{project, render_view, render_view_with, CompositeOptions, MIN_ALPHA};
use gsdiff::scene::{deform, read_cloud, write_cloud, DeformationDelta, GaussianCloud, PartitionLabel, TimeStamp, ENCODING_DIM};
use gsdiff::segmentation::{diff_ids, DiffOptions, InstanceFrame};
use proptest::prelude::*;
use rand::Rng;
use support::*;

const NO_EARLY: CompositeOptions = CompositeOptions {
    early_termination: false,
    record_weights: true,
};

fn cloud_with_deltas(seed: u64, n: usize) -> GaussianCloud {
    let mut r = rng(seed);
    let mut cloud = random_cloud(&mut r, n);
    for d in cloud.deltas.after.iter_mut() {
        if r.random_bool(0.5) {
            *d = DeformationDelta {
                d_position: std::array::from_fn(|_| r.random_range(-0.3..0.3)),
                d_rotation: random_unit_quat(&mut r),
                d_scale: std::array::from_fn(|_| r.random_range(-0.5..0.5)),
            };
        }
    }
    cloud
}

fn quat_dist(a: Quat, b: Quat) -> f64 {
    let d = a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let s = a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
    d.min(s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn deform_is_pure_and_keeps_unit_rotations(seed in any::<u64>(), n in 0usize..30) {
        let cloud = cloud_with_deltas(seed, n);
        let copy = cloud.clone();
        let a = deform(&cloud, TimeStamp::After).unwrap();
        let b = deform(&cloud, TimeStamp::After).unwrap();
        prop_assert_eq!(&cloud, &copy);
        prop_assert_eq!(&a, &b);
        for g in &a.gaussians {
            prop_assert!((g.rotation.norm() - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(deform(&cloud, TimeStamp::Before).unwrap().gaussians, cloud.gaussians);
    }

    #[test]
    fn slerp_unit_norm_and_reversal(seed in any::<u64>(), delta in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let (a, b) = (random_unit_quat(&mut r), random_unit_quat(&mut r));
        let fwd = slerp(a, b, delta).unwrap();
        let back = slerp(b, a, 1.0 - delta).unwrap();
        prop_assert!((fwd.norm() - 1.0).abs() < 1e-9);
        prop_assert!(quat_dist(fwd, back) < 1e-9);
    }

    #[test]
    fn slerp_near_parallel_matches_nlerp(seed in any::<u64>(), theta in 1e-12f64..1e-4, delta in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let a = random_unit_quat(&mut r);
        let b = a * Quat::from_axis_angle(gsdiff::math::normalize([0.3, -0.4, 0.5]), 2.0 * theta);
        let lin = Quat::new(
            (1.0 - delta) * a.w + delta * b.w,
            (1.0 - delta) * a.x + delta * b.x,
            (1.0 - delta) * a.y + delta * b.y,
            (1.0 - delta) * a.z + delta * b.z,
        )
        .normalized()
        .unwrap();
        prop_assert!(quat_dist(slerp(a, b, delta).unwrap(), lin) < 1e-6);
    }

    #[test]
    fn densify_length_and_captured_poses(seed in any::<u64>(), m in 1usize..8, n in 0usize..5) {
        let mut r = rng(seed);
        let poses: Vec<Pose> = (0..m)
            .map(|_| Pose::captured(random_unit_quat(&mut r), std::array::from_fn(|_| r.random_range(-2.0..2.0))))
            .collect();
        let seq = PoseSequence::captured(poses.clone(), TimeStamp::Before);
        let out = densify(&seq, n).unwrap().sequence;
        let expected = if m == 1 { 1 } else { m + n * (m - 1) };
        prop_assert_eq!(out.len(), expected);
        let idx = out.captured_indices();
        prop_assert_eq!(idx.len(), m);
        for (k, &i) in idx.iter().enumerate() {
            prop_assert_eq!(out.poses[i], poses[k]);
            if m > 1 {
                prop_assert_eq!(i, k * (n + 1));
            }
        }
    }

    #[test]
    fn compositing_weights_are_bounded_and_telescope(seed in any::<u64>(), n in 0usize..30) {
        let mut r = rng(seed);
        let cloud = random_cloud(&mut r, n);
        let cam = random_scene_camera(&mut r, 16, 12);
        let (bundle, weights) = render_view_with(&cloud, TimeStamp::Before, &cam, NO_EARLY).unwrap();
        let weights = weights.unwrap();
        let splats = project(&cloud, &cam);
        for y in 0..12 {
            for x in 0..16 {
                let p = y * 16 + x;
                let a = bundle.alpha.data[p];
                prop_assert!((0.0..=1.0).contains(&a));
                let ws: f64 = weights.pixel(p).iter().map(|e| e.1).sum();
                for &(_, w) in weights.pixel(p) {
                    prop_assert!((0.0..=1.0).contains(&w));
                }
                prop_assert!((ws - a).abs() < 1e-12);
                let trans: f64 = splats
                    .splats
                    .iter()
                    .map(|s| s.alpha_at(x as f64 + 0.5, y as f64 + 0.5))
                    .filter(|&al| al >= MIN_ALPHA)
                    .map(|al| 1.0 - al)
                    .product();
                prop_assert!((a - (1.0 - trans)).abs() < 1e-6, "pixel {} alpha {} vs {}", p, a, 1.0 - trans);
            }
        }
    }

    #[test]
    fn features_are_linear_in_encodings(seed in any::<u64>(), n in 1usize..20, ca in -3.0f64..3.0, cb in -3.0f64..3.0) {
        let mut r = rng(seed);
        let cam = random_scene_camera(&mut r, 12, 10);
        let c1 = random_cloud(&mut r, n);
        let mut c2 = c1.clone();
        let mut mix = c1.clone();
        for i in 0..n {
            c2.gaussians[i].class_encoding = random_encoding(&mut r, 1.0);
            let (e1, e2) = (c1.gaussians[i].class_encoding, c2.gaussians[i].class_encoding);
            mix.gaussians[i].class_encoding = std::array::from_fn(|k| ca * e1[k] + cb * e2[k]);
        }
        let f1 = render_view(&c1, TimeStamp::Before, &cam).unwrap().features;
        let f2 = render_view(&c2, TimeStamp::Before, &cam).unwrap().features;
        let fm = render_view(&mix, TimeStamp::Before, &cam).unwrap().features;
        for p in 0..fm.data.len() {
            for k in 0..ENCODING_DIM {
                prop_assert!((fm.data[p][k] - (ca * f1.data[p][k] + cb * f2.data[p][k])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn white_encodings_render_alpha(seed in any::<u64>(), n in 0usize..25) {
        let mut r = rng(seed);
        let cam = random_scene_camera(&mut r, 12, 10);
        let mut cloud = random_cloud(&mut r, n);
        for g in cloud.gaussians.iter_mut() {
            g.class_encoding = [1.0; ENCODING_DIM];
        }
        let b = render_view(&cloud, TimeStamp::Before, &cam).unwrap();
        for (f, a) in b.features.data.iter().zip(&b.alpha.data) {
            for v in f {
                prop_assert!((v - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn early_termination_is_close_and_rendering_deterministic(seed in any::<u64>(), n in 0usize..60) {
        let mut r = rng(seed);
        let cam = random_scene_camera(&mut r, 12, 10);
        let cloud = cloud_with_deltas(seed, n);
        let early = render_view(&cloud, TimeStamp::After, &cam).unwrap();
        let again = render_view(&cloud, TimeStamp::After, &cam).unwrap();
        prop_assert_eq!(&early, &again);
        let full = render_view_with(&cloud, TimeStamp::After, &cam, NO_EARLY).unwrap().0;
        for p in 0..early.alpha.data.len() {
            prop_assert!((early.alpha.data[p] - full.alpha.data[p]).abs() < 1e-3);
            for k in 0..ENCODING_DIM {
                prop_assert!((early.features.data[p][k] - full.features.data[p][k]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn diff_ids_symmetric_and_masks_cover_changed_only(seed in any::<u64>(), w in 1usize..12, h in 1usize..12) {
        let mut r = rng(seed);
        let mut frame = |epoch| InstanceFrame {
            id_map: Grid::from_vec(w, h, (0..w * h).map(|_| r.random_range(0..5u32)).collect()).unwrap(),
            pose_index: 0,
            epoch,
        };
        let a = frame(TimeStamp::Before);
        let b = frame(TimeStamp::After);
        let ab = diff_ids(&a, &b, DiffOptions::default()).unwrap();
        let ba = diff_ids(&b, &a, DiffOptions::default()).unwrap();
        prop_assert_eq!(&ab.changed, &ba.changed);
        prop_assert_eq!(&ab.before.mask, &ba.after.mask);
        for (frame, mask) in [(&a, &ab.before.mask), (&b, &ab.after.mask)] {
            for (id, m) in frame.id_map.data.iter().zip(&mask.data) {
                if *m {
                    prop_assert!(ab.changed.contains(id));
                }
            }
        }
    }

    #[test]
    fn metrics_swap_symmetry(seed in any::<u64>(), w in 1usize..20, h in 1usize..20, d in 0.0f64..1.0) {
        let mut r = rng(seed);
        let a = random_mask(&mut r, w, h, d);
        let b = random_mask(&mut r, w, h, 1.0 - d);
        let ab = pixel_metrics(&a, &b).unwrap();
        let ba = pixel_metrics(&b, &a).unwrap();
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
        prop_assert_eq!(ab.iou, ba.iou);
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-15);
        let same = pixel_metrics(&a, &a).unwrap();
        prop_assert_eq!((same.precision, same.recall, same.f1, same.iou), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn components_partition_mask_with_tight_boxes(seed in any::<u64>(), w in 1usize..24, h in 1usize..24, d in 0.0f64..0.8) {
        let mut r = rng(seed);
        let mask = random_mask(&mut r, w, h, d);
        let comps = connected_components(&mask);
        let mut seen = BTreeSet::new();
        for c in &comps {
            prop_assert!(!c.is_empty());
            for &px in c {
                prop_assert!(*mask.get(px.0, px.1));
                prop_assert!(seen.insert(px));
            }
            let b = min_bounding_rect(c).unwrap();
            prop_assert!(c.iter().all(|&(x, y)| b.contains(x, y)));
            prop_assert!(c.iter().any(|p| p.0 == b.x_min) && c.iter().any(|p| p.0 == b.x_max));
            prop_assert!(c.iter().any(|p| p.1 == b.y_min) && c.iter().any(|p| p.1 == b.y_max));
        }
        prop_assert_eq!(seen.len(), mask.count());
    }

    #[test]
    fn baseline_selection_shrinks_with_thresholds(seed in any::<u64>(), n in 0usize..40, t in 0.0f64..0.5, s in 1.0f64..3.0) {
        let cloud = cloud_with_deltas(seed, n);
        let lo = DeltaThresholds { pos_thresh: t, rot_thresh: t, scale_thresh: t };
        let hi = DeltaThresholds { pos_thresh: t * s, rot_thresh: t * s, scale_thresh: t * s };
        let a = filter_by_delta(&cloud, &lo).unwrap();
        let b = filter_by_delta(&cloud, &hi).unwrap();
        prop_assert!(b.is_subset(&a));
    }

    #[test]
    fn loss_3d_is_non_negative(seed in any::<u64>(), n in 2usize..30, k in 1usize..5) {
        let mut r = rng(seed);
        let enc: Vec<_> = (0..n).map(|_| random_encoding(&mut r, 3.0)).collect();
        let head = ChangeHead {
            weights: std::array::from_fn(|_| random_encoding(&mut r, 2.0)),
            bias: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
        };
        let neighbors: Vec<Vec<usize>> = (0..n).map(|_| (0..k).map(|_| r.random_range(0..n)).collect()).collect();
        let samples: Vec<usize> = (0..n).collect();
        prop_assert!(loss_3d_given(&enc, &head, &samples, &neighbors) >= 0.0);
    }

    #[test]
    fn change_map_invariant_under_common_logit_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let feats = Grid::from_vec(6, 5, (0..30).map(|_| random_encoding(&mut r, 1.0)).collect()).unwrap();
        let head = ChangeHead {
            weights: std::array::from_fn(|_| random_encoding(&mut r, 1.0)),
            bias: [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)],
        };
        let mut shifted = head.clone();
        shifted.bias = [head.bias[0] + shift, head.bias[1] + shift];
        let a = change_map(&change_logits(&feats, &head));
        let b = change_map(&change_logits(&feats, &shifted));
        for p in 0..30 {
            let l = change_logits(&feats, &head).data[p];
            if (l[0] - l[1]).abs() > 1e-9 {
                prop_assert_eq!(a.data[p], b.data[p]);
            }
        }
    }

    #[test]
    fn container_round_trip(seed in any::<u64>(), n in 0usize..20, with_head in any::<bool>()) {
        let mut r = rng(seed);
        let mut cloud = cloud_with_deltas(seed, n);
        if with_head {
            cloud.partition = (0..n).map(|_| if r.random_bool(0.5) { PartitionLabel::Changed } else { PartitionLabel::Unchanged }).collect();
            cloud.head = Some(ChangeHead {
                weights: std::array::from_fn(|_| random_encoding(&mut r, 1.0)),
                bias: [0.25, -0.5],
            });
        }
        let bytes = write_cloud(&cloud).unwrap();
        prop_assert_eq!(read_cloud(&bytes).unwrap(), cloud);
    }
}
