//! Rectified-stereo geometry: blur/depth relations, disparity-guided
//! warping, disparity rescaling and left-right consistency masks.
//!
//! Disparities are stored non-negative for both views. A left-view pixel at
//! column `x` corresponds to column `x - d_left` in the right view; a
//! right-view pixel at `x` corresponds to `x + d_right` in the left view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Default left-right consistency tolerance in pixels.
pub const DEFAULT_TAU: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Left,
    Right,
}

impl View {
    pub fn other(self) -> View {
        match self {
            View::Left => View::Right,
            View::Right => View::Left,
        }
    }

    /// Direction of the correspondence offset when sampling the other view.
    pub fn sample_sign(self) -> f64 {
        match self {
            View::Left => -1.0,
            View::Right => 1.0,
        }
    }
}

/// Resolution relative to the full-resolution input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    Full,
    Half,
    Quarter,
    Eighth,
}

impl Scale {
    pub const ALL: [Scale; 4] = [Scale::Full, Scale::Half, Scale::Quarter, Scale::Eighth];

    pub fn divisor(self) -> usize {
        match self {
            Scale::Full => 1,
            Scale::Half => 2,
            Scale::Quarter => 4,
            Scale::Eighth => 8,
        }
    }

    pub fn factor(self) -> f64 {
        1.0 / self.divisor() as f64
    }

    pub fn from_divisor(d: usize) -> Result<Scale> {
        match d {
            1 => Ok(Scale::Full),
            2 => Ok(Scale::Half),
            4 => Ok(Scale::Quarter),
            8 => Ok(Scale::Eighth),
            _ => Err(Error::contract(format!("unsupported scale 1/{d}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub focal_length_px: f64,
    pub baseline_m: f64,
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraRig {
    pub fn new(focal_length_px: f64, baseline_m: f64, image_width: usize, image_height: usize) -> Result<Self> {
        let rig = CameraRig {
            focal_length_px,
            baseline_m,
            image_width,
            image_height,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length_px > 0.0) || !(self.baseline_m > 0.0) {
            return Err(Error::domain("focal length and baseline must be positive"));
        }
        if self.image_width < 8 || self.image_height < 8 {
            return Err(Error::domain("image must be at least 8x8"));
        }
        Ok(())
    }

    /// Disparity in pixels of a point at depth `z`.
    pub fn disparity_at(&self, depth_m: f64) -> f64 {
        self.focal_length_px * self.baseline_m / depth_m
    }
}

/// Rigid motion over one exposure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    /// x parallel to the baseline, y vertical, z along the optical axis.
    pub translation_mps: [f64; 3],
    /// Angular rate about the vertical axis through `rotation_center_m`.
    pub rotation_radps: f64,
    pub rotation_center_m: [f64; 3],
    pub exposure_s: f64,
    pub subframes: usize,
}

impl MotionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subframes == 0 || self.subframes.is_multiple_of(2) {
            return Err(Error::domain(format!("subframes must be odd and positive, got {}", self.subframes)));
        }
        if !(self.exposure_s > 0.0) {
            return Err(Error::domain("exposure must be positive"));
        }
        Ok(())
    }

    pub fn is_static(&self) -> bool {
        self.translation_mps == [0.0; 3] && self.rotation_radps == 0.0
    }
}

/// Per-pixel disparity in pixels of its own grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub scale: Scale,
    pub view: View,
}

impl DisparityMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, scale: Scale, view: View) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::contract(format!(
                "disparity map {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(DisparityMap {
            width,
            height,
            values,
            scale,
            view,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64, scale: Scale, view: View) -> Self {
        DisparityMap {
            width,
            height,
            values: vec![value; width * height],
            scale,
            view,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Single-channel `[1, 1, H, W]` tensor view of the values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 1, self.height, self.width], self.values.clone()).expect("shape checked at construction")
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
    pub scale: Scale,
}

impl ValidityMask {
    pub fn ones(width: usize, height: usize, scale: Scale) -> Self {
        ValidityMask {
            width,
            height,
            values: vec![1; width * height],
            scale,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn count_valid(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("mask dimensions are consistent")
    }
}

/// A channel-major feature or image tensor tagged with its resolution scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub scale: Scale,
}

impl FeatureMap {
    pub fn new(data: Tensor, scale: Scale) -> Self {
        FeatureMap { data, scale }
    }
}

/// Image-plane blur for translation `motion_m` parallel to the image plane.
pub fn blur_extent(rig: &CameraRig, depth_m: f64, motion_m: f64) -> Result<f64> {
    if !(depth_m > 0.0) {
        return Err(Error::domain(format!("depth must be positive, got {depth_m}")));
    }
    Ok(rig.focal_length_px * motion_m / depth_m)
}

/// Left/right blur ratio for translation along the depth direction, where
/// `h_m` is the distance from the left camera to the line of motion.
pub fn translation_blur_ratio(h_m: f64, baseline_m: f64) -> Result<f64> {
    if h_m < 0.0 || baseline_m < 0.0 || !(h_m + baseline_m > 0.0) {
        return Err(Error::domain(format!("invalid geometry h={h_m}, b={baseline_m}")));
    }
    Ok(h_m / (h_m + baseline_m))
}

/// Ratio of camera speeds under rotation, equal to the ratio of their radii.
pub fn rotation_speed_ratio(radius_left_m: f64, radius_right_m: f64) -> Result<f64> {
    if !(radius_right_m > 0.0) || radius_left_m < 0.0 {
        return Err(Error::domain(format!(
            "invalid radii left={radius_left_m}, right={radius_right_m}"
        )));
    }
    Ok(radius_left_m / radius_right_m)
}

/// Backward-warp `source` into `target_view` using that view's disparity.
pub fn warp_with_disparity(source: &FeatureMap, disparity: &DisparityMap, target_view: View) -> Result<FeatureMap> {
    if disparity.view != target_view {
        return Err(Error::contract(format!(
            "warping into the {target_view:?} view needs a {target_view:?}-view disparity, got {:?}",
            disparity.view
        )));
    }
    if disparity.scale != source.scale {
        return Err(Error::contract(format!(
            "disparity scale {:?} does not match source scale {:?}",
            disparity.scale, source.scale
        )));
    }
    let [n, _, h, w] = source.data.shape();
    if (h, w) != (disparity.height, disparity.width) {
        return Err(Error::contract(format!(
            "source is {w}x{h}, disparity is {}x{}",
            disparity.width, disparity.height
        )));
    }
    let d = disparity.to_tensor();
    let d = if n == 1 {
        d
    } else {
        Tensor::stack(&vec![&d; n])?
    };
    Ok(FeatureMap::new(
        kernels::warp_forward(&source.data, &d, target_view.sample_sign()),
        source.scale,
    ))
}

/// Resample a disparity map to a coarser scale by block averaging, rescaling
/// values so they stay in pixels of the new grid.
pub fn scale_disparity(disparity: &DisparityMap, target: Scale) -> Result<DisparityMap> {
    let (from, to) = (disparity.scale.divisor(), target.divisor());
    if to < from || to % from != 0 {
        return Err(Error::contract(format!(
            "cannot rescale from {:?} to {target:?}",
            disparity.scale
        )));
    }
    let f = to / from;
    if !disparity.width.is_multiple_of(f) || !disparity.height.is_multiple_of(f) {
        return Err(Error::contract(format!(
            "{}x{} is not divisible by {f}",
            disparity.width, disparity.height
        )));
    }
    if f == 1 {
        return Ok(disparity.clone());
    }
    let pooled = kernels::avg_pool(&disparity.to_tensor(), f);
    let factor = 1.0 / f as f64;
    DisparityMap::new(
        disparity.width / f,
        disparity.height / f,
        pooled.data().iter().map(|v| v * factor).collect(),
        target,
        disparity.view,
    )
}

fn consistency_one(own: &DisparityMap, other: &DisparityMap, tau: f64) -> ValidityMask {
    let (w, h) = (own.width, own.height);
    let sign = own.view.sample_sign();
    let mut mask = ValidityMask::ones(w, h, own.scale);
    for y in 0..h {
        let other_row = &other.values[y * w..(y + 1) * w];
        for x in 0..w {
            let d = own.at(x, y);
            let p = x as f64 + sign * d;
            let valid = d.is_finite() && p >= 0.0 && p <= (w - 1) as f64 && {
                let (x0, x1, a, _) = kernels::row_sample(x, d, sign, w);
                let (d0, d1) = (other_row[x0], other_row[x1]);
                let looked_up = if a == 0.0 { d0 } else { (1.0 - a) * d0 + a * d1 };
                looked_up.is_finite() && (d - looked_up).abs() <= tau
            };
            mask.values[y * w + x] = valid as u8;
        }
    }
    mask
}

/// Bidirectional left-right consistency check.
pub fn consistency_mask(d_left: &DisparityMap, d_right: &DisparityMap, tau: f64) -> Result<(ValidityMask, ValidityMask)> {
    if (d_left.width, d_left.height) != (d_right.width, d_right.height) {
        return Err(Error::contract("left and right disparity maps differ in shape"));
    }
    if d_left.view != View::Left || d_right.view != View::Right {
        return Err(Error::contract("consistency check expects (left, right) disparity maps"));
    }
    if d_left.scale != Scale::Full || d_right.scale != Scale::Full {
        return Err(Error::contract("consistency check runs at full resolution"));
    }
    Ok((consistency_one(d_left, d_right, tau), consistency_one(d_right, d_left, tau)))
}
