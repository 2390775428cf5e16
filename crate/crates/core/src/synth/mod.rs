//! Synthetic stereo-blur data.
//!
//! Scenes are stacks of textured rectangles (plus an unbounded background
//! plane) seen by a rectified stereo rig. A rigid motion is applied over
//! one exposure and each view is rendered at `subframes` evenly spaced
//! instants spanning the exposure; averaging those sub-frames produces the
//! blurry image and the temporally central one is the sharp ground truth.
//! Ground-truth disparities come straight from the ray-hit depths of the
//! central sub-frame.

pub mod io;
mod render;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{self, CameraRig, DisparityMap, MotionSpec, ValidityMask, View};
use crate::tensor::Tensor;

pub use io::{
    load_split, read_manifest, read_pfm, read_rgb, read_sample, write_gray, write_pfm, write_rgb, write_sample, Manifest,
};
pub use render::{render_subframes, render_subframes_with, RenderOptions, SubframeSequence};

/// Surface appearance of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    /// Smooth value noise with lattice spacing `cell_m` (meters on the plane).
    Noise { seed: u64, cell_m: f64, octaves: u32 },
    Solid { rgb: [f64; 3] },
}

/// A textured fronto-parallel rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub depth_m: f64,
    /// Center of the rectangle in camera x/y (meters) at its depth.
    pub center_m: [f64; 2],
    pub half_extent_m: [f64; 2],
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub depth_m: f64,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Ordered near to far.
    pub layers: Vec<Layer>,
    pub background: Background,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::domain("scene needs at least one layer"));
        }
        let mut prev = 0.0;
        for layer in &self.layers {
            if !(layer.depth_m > 0.0) {
                return Err(Error::domain(format!("layer depth must be positive, got {}", layer.depth_m)));
            }
            if layer.depth_m < prev {
                return Err(Error::domain("layers must be ordered near to far"));
            }
            prev = layer.depth_m;
        }
        if !(self.background.depth_m > 0.0) {
            return Err(Error::domain("background depth must be positive"));
        }
        Ok(())
    }

    /// One unbounded textured plane; the background sits far behind it.
    pub fn single_plane(depth_m: f64, texture: Texture) -> Self {
        SceneSpec {
            layers: vec![Layer {
                depth_m,
                center_m: [0.0, 0.0],
                half_extent_m: [1e6, 1e6],
                texture,
            }],
            background: Background {
                depth_m: depth_m * 10.0,
                texture: Texture::Solid { rgb: [0.0; 3] },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub rig: CameraRig,
    pub motion: MotionSpec,
    pub subframes: usize,
    pub seed: u64,
    pub scene_seed: u64,
}

/// Paired blurry/sharp stereo images with bidirectional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub id: String,
    pub blurry_left: Tensor,
    pub blurry_right: Tensor,
    pub sharp_left: Tensor,
    pub sharp_right: Tensor,
    pub disp_left: DisparityMap,
    pub disp_right: DisparityMap,
    pub mask_left: ValidityMask,
    pub mask_right: ValidityMask,
    pub meta: SampleMeta,
}

impl StereoSample {
    pub fn width(&self) -> usize {
        self.sharp_left.width()
    }

    pub fn height(&self) -> usize {
        self.sharp_left.height()
    }

    pub fn blurry(&self, view: View) -> &Tensor {
        match view {
            View::Left => &self.blurry_left,
            View::Right => &self.blurry_right,
        }
    }

    pub fn sharp(&self, view: View) -> &Tensor {
        match view {
            View::Left => &self.sharp_left,
            View::Right => &self.sharp_right,
        }
    }

    pub fn disparity(&self, view: View) -> &DisparityMap {
        match view {
            View::Left => &self.disp_left,
            View::Right => &self.disp_right,
        }
    }

    pub fn mask(&self, view: View) -> &ValidityMask {
        match view {
            View::Left => &self.mask_left,
            View::Right => &self.mask_right,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        for t in [&self.blurry_left, &self.blurry_right, &self.sharp_left, &self.sharp_right] {
            if t.shape() != [1, 3, h, w] {
                return Err(Error::data(format!("{}: image shape {:?} != [1, 3, {h}, {w}]", self.id, t.shape())));
            }
        }
        for d in [&self.disp_left, &self.disp_right] {
            if (d.width, d.height) != (w, h) || !d.values.iter().all(|v| v.is_finite()) {
                return Err(Error::data(format!("{}: bad disparity map", self.id)));
            }
        }
        for m in [&self.mask_left, &self.mask_right] {
            if (m.width, m.height) != (w, h) || m.values.iter().any(|&v| v > 1) {
                return Err(Error::data(format!("{}: bad validity mask", self.id)));
            }
        }
        Ok(())
    }
}

/// Pixelwise mean of equally shaped frames.
pub fn average_frames(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::contract("cannot average an empty frame sequence"))?;
    let mut acc = Tensor::zeros(first.shape());
    for f in frames {
        if f.shape() != first.shape() {
            return Err(Error::contract("frames differ in shape"));
        }
        acc.add_assign(f);
    }
    let n = frames.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Assemble a sample from a rendered sequence: average the sub-frames,
/// take the central one as ground truth and derive validity masks.
pub fn assemble_sample(id: String, seq: SubframeSequence, meta: SampleMeta, tau: f64) -> Result<StereoSample> {
    let centre = seq.left.len() / 2;
    let blurry_left = average_frames(&seq.left)?;
    let blurry_right = average_frames(&seq.right)?;
    let sharp_left = seq.left[centre].clone();
    let sharp_right = seq.right[centre].clone();
    let (mask_left, mask_right) = geometry::consistency_mask(&seq.disp_left, &seq.disp_right, tau)?;
    // Storage is 32-bit; keep the in-memory copy identical to what is written.
    let finish = |mut d: DisparityMap| {
        for v in &mut d.values {
            *v = if v.is_finite() { *v as f32 as f64 } else { 0.0 };
        }
        d
    };
    Ok(StereoSample {
        id,
        blurry_left,
        blurry_right,
        sharp_left,
        sharp_right,
        disp_left: finish(seq.disp_left),
        disp_right: finish(seq.disp_right),
        mask_left,
        mask_right,
        meta,
    })
}

/// Randomisation ranges and layout of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub focal_length_px: f64,
    pub baseline_m: f64,
    pub subframe_choices: Vec<usize>,
    /// Sub-frame rate; exposure is `subframes / subframe_rate_hz`.
    pub subframe_rate_hz: f64,
    pub layer_count: [usize; 2],
    pub depth_range_m: [f64; 2],
    pub background_depth_m: [f64; 2],
    /// Per-axis translation speed ranges (x, y, z).
    pub translation_mps: [[f64; 2]; 3],
    pub rotation_radps: [f64; 2],
    /// Texture lattice spacing in pixels at the layer's depth.
    pub texture_cell_px: [f64; 2],
    pub texture_octaves: u32,
    pub supersample: usize,
    pub tau: f64,
    pub test_fraction: f64,
    pub samples_per_scene: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 64,
            width: 128,
            height: 96,
            focal_length_px: 100.0,
            baseline_m: 0.12,
            subframe_choices: vec![17, 33, 49],
            subframe_rate_hz: 480.0,
            layer_count: [1, 3],
            depth_range_m: [1.5, 6.0],
            background_depth_m: [8.0, 12.0],
            translation_mps: [[-1.5, 1.5], [-0.5, 0.5], [-1.5, 1.5]],
            rotation_radps: [-0.4, 0.4],
            texture_cell_px: [4.0, 8.0],
            texture_octaves: 2,
            supersample: 2,
            tau: geometry::DEFAULT_TAU,
            test_fraction: 0.25,
            samples_per_scene: 1,
        }
    }
}

impl SynthConfig {
    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::new(self.focal_length_px, self.baseline_m, self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        self.rig().map_err(|e| Error::config(e.to_string()))?;
        if self.subframe_choices.is_empty() || self.subframe_choices.iter().any(|&s| s == 0 || s % 2 == 0) {
            return Err(Error::config("subframe choices must be odd and positive"));
        }
        if self.layer_count[0] == 0 || self.layer_count[0] > self.layer_count[1] {
            return Err(Error::config("layer_count must be a non-empty range starting at 1 or more"));
        }
        if !(self.depth_range_m[0] > 0.0) || self.depth_range_m[0] > self.depth_range_m[1] {
            return Err(Error::config("depth_range_m must be positive and ordered"));
        }
        if self.background_depth_m[0] <= self.depth_range_m[1] || self.background_depth_m[0] > self.background_depth_m[1] {
            return Err(Error::config("background must lie behind every layer"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction must lie in [0, 1)"));
        }
        if self.samples_per_scene == 0 || self.supersample == 0 {
            return Err(Error::config("samples_per_scene and supersample must be positive"));
        }
        Ok(())
    }

    pub fn scene_count(&self) -> usize {
        self.count.div_ceil(self.samples_per_scene)
    }

    /// Scenes with index at or above this value form the test split.
    pub fn first_test_scene(&self) -> usize {
        let scenes = self.scene_count();
        scenes - ((scenes as f64 * self.test_fraction).round() as usize).min(scenes)
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index / self.samples_per_scene >= self.first_test_scene() {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}`"))),
        }
    }
}

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Random scene for a scene seed.
pub fn random_scene(config: &SynthConfig, scene_seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let f = config.focal_length_px;
    let n = rng.random_range(config.layer_count[0]..=config.layer_count[1]);
    let noise = |rng: &mut ChaCha8Rng, depth: f64| Texture::Noise {
        seed: rng.random(),
        cell_m: uniform(rng, config.texture_cell_px) * depth / f,
        octaves: config.texture_octaves,
    };
    let mut depths: Vec<f64> = (0..n).map(|_| uniform(&mut rng, config.depth_range_m)).collect();
    depths.sort_by(f64::total_cmp);
    let layers = depths
        .into_iter()
        .map(|z| {
            let half_w = config.width as f64 / 2.0 * z / f;
            let half_h = config.height as f64 / 2.0 * z / f;
            Layer {
                depth_m: z,
                center_m: [rng.random_range(-0.6..0.6) * half_w, rng.random_range(-0.6..0.6) * half_h],
                half_extent_m: [rng.random_range(0.15..0.45) * half_w, rng.random_range(0.15..0.45) * half_h],
                texture: noise(&mut rng, z),
            }
        })
        .collect();
    let bg = uniform(&mut rng, config.background_depth_m);
    SceneSpec {
        layers,
        background: Background {
            depth_m: bg,
            texture: noise(&mut rng, bg),
        },
    }
}

/// Random motion for one sample of a scene.
pub fn random_motion(config: &SynthConfig, scene: &SceneSpec, sample_seed: u64) -> MotionSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let subframes = config.subframe_choices[rng.random_range(0..config.subframe_choices.len())];
    let t = config.translation_mps;
    let mid = scene.layers[scene.layers.len() / 2].depth_m;
    MotionSpec {
        translation_mps: [uniform(&mut rng, t[0]), uniform(&mut rng, t[1]), uniform(&mut rng, t[2])],
        rotation_radps: uniform(&mut rng, config.rotation_radps),
        rotation_center_m: [0.0, 0.0, mid],
        exposure_s: subframes as f64 / config.subframe_rate_hz,
        subframes,
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:05}")
}

/// Deterministically generate sample `index` of a dataset.
pub fn generate_sample(config: &SynthConfig, index: usize) -> Result<StereoSample> {
    let rig = config.rig()?;
    let scene_index = index / config.samples_per_scene;
    let scene_seed = mix(config.seed, 1, scene_index as u64);
    let sample_seed = mix(config.seed, 2, index as u64);
    let scene = random_scene(config, scene_seed);
    let motion = random_motion(config, &scene, sample_seed);
    let opts = RenderOptions {
        supersample: config.supersample,
    };
    let seq = render_subframes_with(&scene, &rig, &motion, &opts)?;
    let meta = SampleMeta {
        rig,
        motion,
        subframes: motion.subframes,
        seed: sample_seed,
        scene_seed,
    };
    assemble_sample(sample_id(index), seq, meta, config.tau)
}

/// Render `config.count` samples into `root` and write the manifest.
///
/// Each sample depends only on `(config.seed, index)`, so the output bytes do
/// not depend on the execution mode.
pub fn generate_dataset(config: &SynthConfig, root: &Path) -> Result<Manifest> {
    config.validate()?;
    let rig = config.rig()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let results = exec::map_indices(config.count, |i| -> Result<(Split, String)> {
        let split = config.split_of(i);
        let sample = generate_sample(config, i).map_err(|e| Error::data(format!("sample {}: {e}", sample_id(i))))?;
        let dir: PathBuf = root.join(split.name()).join(&sample.id);
        write_sample(&sample, &dir)?;
        Ok((split, sample.id))
    });
    let mut manifest = Manifest {
        rig,
        generator: config.clone(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for r in results {
        let (split, id) = r?;
        match split {
            Split::Train => manifest.train.push(id),
            Split::Test => manifest.test.push(id),
        }
    }
    io::write_manifest(&manifest, root)?;
    Ok(manifest)
}
