use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{CameraRig, DisparityMap, MotionSpec, Scale, View};
use crate::tensor::Tensor;

use super::{Layer, SceneSpec, Texture};

/// Closest depth a moving layer may reach.
const NEAR_CLIP_M: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    /// Samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { supersample: 2 }
    }
}

/// Sub-frames of both views plus central-frame disparities (non-finite
/// where a ray hits nothing).
#[derive(Debug, Clone)]
pub struct SubframeSequence {
    pub left: Vec<Tensor>,
    pub right: Vec<Tensor>,
    pub disp_left: DisparityMap,
    pub disp_right: DisparityMap,
}

pub fn render_subframes(scene: &SceneSpec, rig: &CameraRig, motion: &MotionSpec) -> Result<SubframeSequence> {
    render_subframes_with(scene, rig, motion, &RenderOptions::default())
}

/// Time offset of sub-frame `i`; the first and last sub-frames sit at the
/// two ends of the exposure.
fn subframe_time(i: usize, motion: &MotionSpec) -> f64 {
    let n = motion.subframes;
    if n == 1 {
        return 0.0;
    }
    (i as f64 - (n - 1) as f64 / 2.0) / (n - 1) as f64 * motion.exposure_s
}

pub fn render_subframes_with(
    scene: &SceneSpec,
    rig: &CameraRig,
    motion: &MotionSpec,
    opts: &RenderOptions,
) -> Result<SubframeSequence> {
    scene.validate()?;
    rig.validate()?;
    motion.validate()?;
    if opts.supersample == 0 {
        return Err(Error::contract("supersample must be positive"));
    }
    let n = motion.subframes;
    for i in [0, n / 2, n - 1] {
        let pose = Pose::at(motion, subframe_time(i, motion));
        for layer in &scene.layers {
            let p = pose.to_world([layer.center_m[0], layer.center_m[1], layer.depth_m]);
            if p[2] <= NEAR_CLIP_M {
                return Err(Error::domain(format!(
                    "layer at depth {} moves behind the camera (z = {:.4})",
                    layer.depth_m, p[2]
                )));
            }
        }
    }
    let frames = exec::map_indices(2 * n, |k| {
        let view = if k < n { View::Left } else { View::Right };
        let pose = Pose::at(motion, subframe_time(k % n, motion));
        render_view(scene, rig, &pose, view, opts.supersample)
    });
    let centre = Pose::at(motion, 0.0);
    let disp = |view| {
        let depth = depth_view(scene, rig, &centre, view);
        DisparityMap::new(
            rig.image_width,
            rig.image_height,
            depth.into_iter().map(|z| rig.disparity_at(z)).collect(),
            Scale::Full,
            view,
        )
    };
    let mut frames = frames.into_iter();
    let left: Vec<Tensor> = frames.by_ref().take(n).collect();
    let right: Vec<Tensor> = frames.collect();
    Ok(SubframeSequence {
        left,
        right,
        disp_left: disp(View::Left)?,
        disp_right: disp(View::Right)?,
    })
}

/// Rigid scene pose: `world = R(angle) (local - c) + c + shift`.
struct Pose {
    cos: f64,
    sin: f64,
    centre: [f64; 3],
    shift: [f64; 3],
}

impl Pose {
    fn at(motion: &MotionSpec, t: f64) -> Pose {
        let a = motion.rotation_radps * t;
        Pose {
            cos: a.cos(),
            sin: a.sin(),
            centre: motion.rotation_center_m,
            shift: motion.translation_mps.map(|v| v * t),
        }
    }

    // Rotation about the vertical axis.
    fn rotate(&self, v: [f64; 3], inverse: bool) -> [f64; 3] {
        let s = if inverse { -self.sin } else { self.sin };
        [self.cos * v[0] + s * v[2], v[1], -s * v[0] + self.cos * v[2]]
    }

    fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.centre;
        let r = self.rotate([p[0] - c[0], p[1] - c[1], p[2] - c[2]], false);
        [r[0] + c[0] + self.shift[0], r[1] + c[1] + self.shift[1], r[2] + c[2] + self.shift[2]]
    }

    fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.centre;
        let q = [
            p[0] - c[0] - self.shift[0],
            p[1] - c[1] - self.shift[1],
            p[2] - c[2] - self.shift[2],
        ];
        let r = self.rotate(q, true);
        [r[0] + c[0], r[1] + c[1], r[2] + c[2]]
    }
}

/// Ray parameter (equal to camera-frame depth) and surface point of the
/// nearest hit, if any.
fn trace<'a>(scene: &'a SceneSpec, pose: &Pose, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, &'a Texture, [f64; 2])> {
    let o = pose.to_local(origin);
    let d = pose.rotate(dir, true);
    if d[2] <= 1e-12 {
        return None;
    }
    let hit = |depth: f64| {
        let s = (depth - o[2]) / d[2];
        (s > 0.0).then(|| (s, [o[0] + s * d[0], o[1] + s * d[1]]))
    };
    let mut best: Option<(f64, &Texture, [f64; 2])> = None;
    for Layer {
        depth_m,
        center_m,
        half_extent_m,
        texture,
    } in &scene.layers
    {
        if let Some((s, xy)) = hit(*depth_m) {
            let inside = (xy[0] - center_m[0]).abs() <= half_extent_m[0] && (xy[1] - center_m[1]).abs() <= half_extent_m[1];
            if inside && best.is_none_or(|b| s < b.0) {
                best = Some((s, texture, xy));
            }
        }
    }
    if let Some((s, xy)) = hit(scene.background.depth_m) {
        if best.is_none_or(|b| s < b.0) {
            best = Some((s, &scene.background.texture, xy));
        }
    }
    best
}

fn camera_origin(rig: &CameraRig, view: View) -> [f64; 3] {
    match view {
        View::Left => [0.0, 0.0, 0.0],
        View::Right => [rig.baseline_m, 0.0, 0.0],
    }
}

/// Viewing direction through continuous image coordinates `(u, v)`; pixel
/// `i` covers `[i, i + 1)`.
fn ray_dir(rig: &CameraRig, u: f64, v: f64) -> [f64; 3] {
    let f = rig.focal_length_px;
    [
        (u - rig.image_width as f64 / 2.0) / f,
        (v - rig.image_height as f64 / 2.0) / f,
        1.0,
    ]
}

fn render_view(scene: &SceneSpec, rig: &CameraRig, pose: &Pose, view: View, ss: usize) -> Tensor {
    let (w, h) = (rig.image_width, rig.image_height);
    let origin = camera_origin(rig, view);
    let norm = 1.0 / (ss * ss) as f64;
    let mut img = Tensor::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut rgb = [0.0; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = x as f64 + (sx as f64 + 0.5) / ss as f64;
                    let v = y as f64 + (sy as f64 + 0.5) / ss as f64;
                    if let Some((_, tex, xy)) = trace(scene, pose, origin, ray_dir(rig, u, v)) {
                        let c = shade(tex, xy);
                        for k in 0..3 {
                            rgb[k] += c[k];
                        }
                    }
                }
            }
            for (k, v) in rgb.iter().enumerate() {
                img.set(0, k, y, x, v * norm);
            }
        }
    }
    img
}

fn depth_view(scene: &SceneSpec, rig: &CameraRig, pose: &Pose, view: View) -> Vec<f64> {
    let (w, h) = (rig.image_width, rig.image_height);
    let origin = camera_origin(rig, view);
    let mut depth = vec![f64::NAN; w * h];
    for y in 0..h {
        for x in 0..w {
            if let Some((s, _, _)) = trace(scene, pose, origin, ray_dir(rig, x as f64 + 0.5, y as f64 + 0.5)) {
                depth[y * w + x] = s;
            }
        }
    }
    depth
}

fn hash(seed: u64, ix: i64, iy: i64, ch: u64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ ch.wrapping_mul(0x1656_67B1_9E37_79F9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64, ch: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let v00 = hash(seed, ix, iy, ch);
    let v10 = hash(seed, ix + 1, iy, ch);
    let v01 = hash(seed, ix, iy + 1, ch);
    let v11 = hash(seed, ix + 1, iy + 1, ch);
    let top = v00 + (v10 - v00) * tx;
    let bottom = v01 + (v11 - v01) * tx;
    top + (bottom - top) * ty
}

fn shade(tex: &Texture, xy: [f64; 2]) -> [f64; 3] {
    match *tex {
        Texture::Solid { rgb } => rgb,
        Texture::Noise { seed, cell_m, octaves } => {
            let octave = |ch: u64| {
                let (mut acc, mut amp, mut total, mut freq) = (0.0, 1.0, 0.0, 1.0 / cell_m);
                for _ in 0..octaves.max(1) {
                    acc += amp * value_noise(seed, xy[0] * freq, xy[1] * freq, ch);
                    total += amp;
                    amp *= 0.5;
                    freq *= 2.0;
                }
                acc / total
            };
            // Averaged octaves cluster around 0.5; stretch them back out.
            let stretch = |v: f64| (0.5 + 2.0 * (v - 0.5)).clamp(0.0, 1.0);
            let lum = octave(0);
            [1, 2, 3].map(|ch| 0.05 + 0.9 * stretch(0.6 * lum + 0.4 * octave(ch)))
        }
    }
}
