//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::Path;

use davanet::autograd::{Graph, Var};
use davanet::geometry::{CameraRig, MotionSpec};
use davanet::synth::{
    assemble_sample, render_subframes_with, Background, Layer, RenderOptions, SampleMeta, SceneSpec, StereoSample,
    Texture,
};
use davanet::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

pub fn white() -> Texture {
    Texture::Solid { rgb: [1.0; 3] }
}

pub fn noise(seed: u64, cell_m: f64) -> Texture {
    Texture::Noise {
        seed,
        cell_m,
        octaves: 2,
    }
}

/// A small white square at `center_m`, depth `depth_m`, in front of a far
/// black background.
pub fn square_scene(center_m: [f64; 2], half_m: f64, depth_m: f64) -> SceneSpec {
    SceneSpec {
        layers: vec![Layer {
            depth_m,
            center_m,
            half_extent_m: [half_m, half_m],
            texture: white(),
        }],
        background: Background {
            depth_m: depth_m * 50.0,
            texture: Texture::Solid { rgb: [0.0; 3] },
        },
    }
}

/// A textured vertical strip centred in front of a textured background.
pub fn two_plane_scene(near_m: f64, far_m: f64, strip_half_width_m: f64) -> SceneSpec {
    SceneSpec {
        layers: vec![Layer {
            depth_m: near_m,
            center_m: [0.0, 0.0],
            half_extent_m: [strip_half_width_m, 1e3],
            texture: noise(1, 0.05),
        }],
        background: Background {
            depth_m: far_m,
            texture: noise(2, 0.2),
        },
    }
}

pub fn motion(translation_mps: [f64; 3], exposure_s: f64, subframes: usize) -> MotionSpec {
    MotionSpec {
        translation_mps,
        rotation_radps: 0.0,
        rotation_center_m: [0.0, 0.0, 1.0],
        exposure_s,
        subframes,
    }
}

/// Intensity-weighted horizontal centroid in continuous image coordinates
/// (pixel `i` spans `[i, i + 1)`).
pub fn centroid_x(img: &Tensor) -> f64 {
    let (mut m, mut mx) = (0.0, 0.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let v = img.at(0, 0, y, x);
            m += v;
            mx += v * (x as f64 + 0.5);
        }
    }
    mx / m
}

/// Horizontal travel of a bright object between the first and last
/// sub-frame, in the left and right views.
pub fn measured_travel(scene: &SceneSpec, rig: &CameraRig, motion: &MotionSpec) -> (f64, f64) {
    let seq = render_subframes_with(scene, rig, motion, &RenderOptions { supersample: 8 }).unwrap();
    let n = seq.left.len() - 1;
    (
        (centroid_x(&seq.left[n]) - centroid_x(&seq.left[0])).abs(),
        (centroid_x(&seq.right[n]) - centroid_x(&seq.right[0])).abs(),
    )
}

pub fn render_sample(scene: &SceneSpec, rig: &CameraRig, motion: &MotionSpec) -> StereoSample {
    let seq = render_subframes_with(scene, rig, motion, &RenderOptions { supersample: 2 }).unwrap();
    let meta = SampleMeta {
        rig: *rig,
        motion: *motion,
        subframes: motion.subframes,
        seed: 0,
        scene_seed: 0,
    };
    assemble_sample("canned".into(), seq, meta, davanet::geometry::DEFAULT_TAU).unwrap()
}

/// Invalid pixels of row `y` of a mask, counting only columns in `cols`.
pub fn invalid_in_row(mask: &davanet::geometry::ValidityMask, y: usize, cols: std::ops::Range<usize>) -> usize {
    cols.filter(|&x| mask.at(x, y) == 0).count()
}

/// Relative error with the denominator floored at `floor`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error between the tape gradient of a scalar `f` with
/// respect to one input tensor and central differences with step `h`.
/// `build` receives the graph and the input variable and returns the
/// scalar output.
pub fn gradcheck(x: &Tensor, h: f64, floor: f64, build: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = build(&mut g, xv);
    let grads = g.backward(out);
    let analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let v = g.input(t);
        let o = build(&mut g, v);
        g.scalar_value(o)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let numeric = (eval(p) - eval(m)) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric, floor));
    }
    worst
}

/// Every regular file under `root`, relative path and contents, sorted.
pub fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// `(focal px, depth m, lateral travel m)` settings for the blur-extent law.
pub const LATERAL_SETTINGS: [(f64, f64, f64); 5] =
    [(60.0, 2.0, 0.1), (80.0, 3.0, 0.3), (100.0, 4.0, 0.2), (120.0, 2.5, 0.15), (50.0, 1.5, 0.12)];

/// `(h m, baseline m)` settings for the depth-direction blur ratio.
pub const DEPTH_SETTINGS: [(f64, f64); 3] = [(0.3, 0.12), (0.2, 0.2), (0.5, 0.1)];

/// Measured left-view travel and `f·ΔP/z` for every lateral setting.
pub fn lateral_cases() -> Vec<(f64, f64)> {
    LATERAL_SETTINGS
        .iter()
        .map(|&(f, z, dp)| {
            let rig = CameraRig::new(f, 0.12, 96, 48).unwrap();
            let scene = square_scene([0.0, 0.0], 2.5 * z / f, z);
            let exposure = 0.1;
            let (left, _) = measured_travel(&scene, &rig, &motion([dp / exposure, 0.0, 0.0], exposure, 3));
            (left, f * dp / z)
        })
        .collect()
}

/// Measured left/right travel ratio and `h/(h+b)` when a point at lateral
/// offset `h` from the left camera (away from the right camera) moves from
/// 3 m to 2 m depth.
pub fn depth_cases() -> Vec<(f64, f64)> {
    DEPTH_SETTINGS
        .iter()
        .map(|&(h, b)| {
            let rig = CameraRig::new(100.0, b, 160, 48).unwrap();
            let scene = square_scene([-h, 0.0], 0.04, 2.5);
            let (left, right) = measured_travel(&scene, &rig, &motion([0.0, 0.0, -1.0], 1.0, 3));
            (left / right, h / (h + b))
        })
        .collect()
}

/// Rig and depths of the canned two-plane scene; the occlusion band is
/// `f·b·(1/near − 1/far)` = 4.2 px wide.
pub const BAND_RIG: (f64, f64, usize, usize) = (60.0, 0.12, 64, 32);
pub const BAND_DEPTHS: (f64, f64) = (1.2, 4.0);

pub fn band_sample() -> StereoSample {
    let (f, b, w, h) = BAND_RIG;
    let rig = CameraRig::new(f, b, w, h).unwrap();
    render_sample(&two_plane_scene(BAND_DEPTHS.0, BAND_DEPTHS.1, 0.3), &rig, &motion([0.0; 3], 0.01, 1))
}

pub fn band_expected() -> f64 {
    let (f, b, _, _) = BAND_RIG;
    f * b * (1.0 / BAND_DEPTHS.0 - 1.0 / BAND_DEPTHS.1)
}

/// Largest deviation of the per-row occlusion band width from
/// [`band_expected`], over both views and all rows. Image borders, where
/// correspondences leave the frame, are excluded.
pub fn band_deviation(sample: &StereoSample) -> f64 {
    let (_, _, w, h) = BAND_RIG;
    let margin = 8;
    let expected = band_expected();
    let mut worst: f64 = 0.0;
    for y in 0..h {
        let l = invalid_in_row(&sample.mask_left, y, margin..w) as f64;
        let r = invalid_in_row(&sample.mask_right, y, 0..w - margin) as f64;
        worst = worst.max((l - expected).abs()).max((r - expected).abs());
    }
    worst
}

/// Mean absolute error between stored disparities of a static single-plane
/// scene (after a disk round trip) and `f·b/z`.
pub fn single_plane_disparity_error(dir: &Path) -> f64 {
    let rig = CameraRig::new(70.0, 0.1, 48, 32).unwrap();
    let z = 2.3;
    let sample = render_sample(&SceneSpec::single_plane(z, noise(3, 0.1)), &rig, &motion([0.0; 3], 0.01, 1));
    davanet::synth::write_sample(&sample, dir).unwrap();
    let back = davanet::synth::read_sample(dir).unwrap();
    let expected = 70.0 * 0.1 / z;
    let vals: Vec<f64> = back.disp_left.values.iter().chain(&back.disp_right.values).copied().collect();
    vals.iter().map(|d| (d - expected).abs()).sum::<f64>() / vals.len() as f64
}
