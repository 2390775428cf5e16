mod common;

use common::*;

#[test]
fn lateral_blur_extent_follows_focal_times_travel_over_depth() {
    for (measured, predicted) in lateral_cases() {
        assert!((measured - predicted).abs() <= 1.0, "measured {measured}, predicted {predicted}");
    }
}

#[test]
fn depth_motion_blur_ratio_follows_offset_over_offset_plus_baseline() {
    for (measured, predicted) in depth_cases() {
        assert!(rel_err(measured, predicted, 0.0) <= 0.1, "measured {measured}, predicted {predicted}");
    }
}

#[test]
fn occlusion_band_width_matches_disparity_jump() {
    let s = band_sample();
    assert!(band_deviation(&s) <= 1.0, "deviation {}", band_deviation(&s));
}

#[test]
fn single_plane_disparity_survives_storage() {
    let dir = tempfile::tempdir().unwrap();
    assert!(single_plane_disparity_error(&dir.path().join("s")) < 1e-3);
}
