mod common;

use keratome_core::eye::{TissueLabel, VoxelGrid};
use keratome_core::tool::{detect_contacts, tool_eye_distance, ActionBounds, ActionDelta, ToolGeometry, ToolPose};
use nalgebra::{Point3, UnitQuaternion, Vector3};

#[test]
fn composition_matches_sequential_application() {
    let (homo, ortho) = common::kinematics_errors(20_000, 7);
    assert!(homo <= 1e-9, "composition error {homo}");
    assert!(ortho <= 1e-9, "orthonormality error {ortho}");
}

#[test]
fn swept_samples_never_tunnel() {
    let c = common::sweep_check(600, 11);
    assert!(c.dense_hits > 1000, "too few contacts to be informative: {}", c.dense_hits);
    assert_eq!(c.missed, 0);
    assert_eq!(c.spurious, 0);
}

#[test]
fn step_bounds_keep_samples_within_half_a_high_poly_voxel() {
    // worst case: full translation on every axis plus full rotation about the tip
    let b = ActionBounds::default();
    let geom = ToolGeometry::keratome(0.2);
    let reach = geom.samples.iter().map(|s| s.coords.norm()).fold(0.0, f64::max);
    assert!(b.rotation * reach <= 0.1 + 1e-12, "rotation sweep {}", b.rotation * reach);
    assert!(geom.max_spacing() <= 0.1 + 1e-12);
}

#[test]
fn tip_sweep_reports_crossed_cornea_voxel() {
    let grid = VoxelGrid::from_fn([8, 8, 8], 0.5, Point3::origin(), |c| {
        if (c - Point3::new(2.25, 2.25, 2.25)).norm() < 0.1 {
            TissueLabel::Cornea
        } else {
            TissueLabel::Empty
        }
    })
    .unwrap();
    let geom = ToolGeometry::keratome(0.5);
    let q = UnitQuaternion::identity();
    let prev = ToolPose::new(Point3::new(2.3, 2.3, 1.9), q);
    let next = ToolPose::new(Point3::new(2.3, 2.3, 2.1), q);
    let r = detect_contacts(&grid, &geom, &prev, &next);
    let target = grid.locate(&Point3::new(2.25, 2.25, 2.25)).unwrap();
    assert!(r.contacts.iter().any(|c| c.index == target && c.label == TissueLabel::Cornea));
    assert_eq!(r.first_cornea_voxel(), Some(target));
}

#[test]
fn distance_is_zero_only_inside_tissue() {
    let grid = VoxelGrid::from_fn([8, 8, 8], 0.5, Point3::origin(), |c| {
        if c.z < 1.0 {
            TissueLabel::Sclera
        } else {
            TissueLabel::Empty
        }
    })
    .unwrap();
    let geom = ToolGeometry::keratome(0.5);
    // blade pointing down: the tip is the lowest edge point
    let q = UnitQuaternion::rotation_between(&Vector3::x(), &-Vector3::z()).unwrap();
    let above = ToolPose::new(Point3::new(2.0, 2.0, 1.75), q);
    assert!((tool_eye_distance(&grid, &geom, &above).unwrap() - 0.75).abs() < 1e-9);
    let inside = ToolPose::new(Point3::new(2.0, 2.0, 0.75), q);
    assert_eq!(tool_eye_distance(&grid, &geom, &inside).unwrap(), 0.0);
}

#[test]
fn out_of_bounds_and_non_finite_components_are_clamped() {
    let b = ActionBounds::default();
    let (d, clamped) = b.clamp(ActionDelta { dx: 5.0, dyaw: f64::NAN, ..ActionDelta::zero() });
    assert!(clamped);
    assert_eq!(d.dx, b.translation);
    assert_eq!(d.dyaw, 0.0);
    let (_, clamped) = b.clamp(ActionDelta { dx: 0.05, ..ActionDelta::zero() });
    assert!(!clamped);
}
