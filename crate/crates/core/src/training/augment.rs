//! Stereo-consistent data augmentation.
//!
//! Every geometric transform is shared by both views and keeps rows
//! aligned: an axis-aligned crop and an optional vertical flip. Colour
//! jitter is one per-pixel affine map (brightness, contrast around a shared
//! mean, saturation) applied to all four images of a sample. Noise is added
//! to the blurry inputs only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DisparityMap, ValidityMask, View};
use crate::kernels;
use crate::synth::StereoSample;
use crate::tensor::Tensor;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub crop: bool,
    pub crop_size: usize,
    pub vflip: bool,
    pub chromatic: bool,
    /// Range of the brightness, contrast and saturation factors.
    pub chromatic_range: [f64; 2],
    pub noise: bool,
    /// Standard deviation of the additive Gaussian noise, in [0, 1] units.
    pub noise_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: true,
            crop_size: 64,
            vflip: true,
            chromatic: true,
            chromatic_range: [0.8, 1.2],
            noise: true,
            noise_std: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        AugmentConfig {
            crop: false,
            vflip: false,
            chromatic: false,
            noise: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.chromatic_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("chromatic_range must satisfy 0 < lo <= hi"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        if self.crop && self.crop_size == 0 {
            return Err(Error::config("crop_size must be positive"));
        }
        Ok(())
    }
}

/// Colour jitter parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chroma {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Mean intensity the contrast is stretched around.
    pub mean: f64,
}

impl Chroma {
    /// Linear part of the affine colour map as a 3x3 matrix.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let k = self.brightness * self.contrast;
        let s = self.saturation;
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let id = if r == c { 1.0 } else { 0.0 };
                *v = k * (s * id + (1.0 - s) * LUMA[c]);
            }
        }
        m
    }

    /// Maximum absolute row sum of [`Chroma::matrix`]: bounds how much a
    /// per-pixel colour difference can grow.
    pub fn gain(&self) -> f64 {
        self.matrix()
            .iter()
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn apply(&self, img: &Tensor) -> Tensor {
        let [n, c, h, w] = img.shape();
        assert_eq!(c, 3, "colour jitter needs RGB images");
        let mut out = img.clone();
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let mut px = [0.0; 3];
                    for (ch, p) in px.iter_mut().enumerate() {
                        let v = img.at(b, ch, y, x) * self.brightness;
                        *p = (v - self.mean) * self.contrast + self.mean;
                    }
                    let gray: f64 = px.iter().zip(LUMA).map(|(p, l)| p * l).sum();
                    for (ch, p) in px.iter().enumerate() {
                        out.set(b, ch, y, x, gray + self.saturation * (p - gray));
                    }
                }
            }
        }
        out
    }
}

/// What [`augment`] did to a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub crop_x: usize,
    pub crop_y: usize,
    pub width: usize,
    pub height: usize,
    pub vflip: bool,
    pub chroma: Option<Chroma>,
    pub noise_std: f64,
}

impl AugmentRecord {
    /// Original-image coordinates of augmented pixel `(x, y)`.
    pub fn source_pixel(&self, x: usize, y: usize) -> (usize, usize) {
        let yy = if self.vflip { self.height - 1 - y } else { y };
        (self.crop_x + x, self.crop_y + yy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub sample: StereoSample,
    pub record: AugmentRecord,
}

fn crop_image(t: &Tensor, x0: usize, y0: usize, w: usize, h: usize, flip: bool) -> Tensor {
    Tensor::from_fn([t.batch(), t.channels(), h, w], |n, c, y, x| {
        let yy = if flip { h - 1 - y } else { y };
        t.at(n, c, y0 + yy, x0 + x)
    })
}

fn crop_grid<T: Copy>(values: &[T], width: usize, x0: usize, y0: usize, w: usize, h: usize, flip: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let yy = if flip { h - 1 - y } else { y };
        let row = (y0 + yy) * width;
        out.extend_from_slice(&values[row + x0..row + x0 + w]);
    }
    out
}

/// Zero mask pixels whose correspondence in the other view leaves the window.
fn restrict_mask(mask: &mut ValidityMask, disp: &DisparityMap) {
    let (w, sign) = (mask.width, disp.view.sample_sign());
    for y in 0..mask.height {
        for x in 0..w {
            let p = x as f64 + sign * disp.at(x, y);
            if !(p >= 0.0 && p <= (w - 1) as f64) {
                mask.values[y * w + x] = 0;
            }
        }
    }
}

/// Apply the configured random transforms to one sample.
pub fn augment(sample: &StereoSample, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<AugmentedSample> {
    let (w, h) = (sample.width(), sample.height());
    let (cw, ch) = if config.crop {
        (config.crop_size, config.crop_size)
    } else {
        (w, h)
    };
    if cw > w || ch > h {
        return Err(Error::contract(format!(
            "crop {cw}x{ch} is larger than the {w}x{h} sample"
        )));
    }
    let x0 = if config.crop { rng.random_range(0..=w - cw) } else { 0 };
    let y0 = if config.crop { rng.random_range(0..=h - ch) } else { 0 };
    let flip = config.vflip && rng.random_bool(0.5);

    let crop_t = |t: &Tensor| crop_image(t, x0, y0, cw, ch, flip);
    let mut out = sample.clone();
    out.blurry_left = crop_t(&sample.blurry_left);
    out.blurry_right = crop_t(&sample.blurry_right);
    out.sharp_left = crop_t(&sample.sharp_left);
    out.sharp_right = crop_t(&sample.sharp_right);
    for view in [View::Left, View::Right] {
        let d = sample.disparity(view);
        let m = sample.mask(view);
        let disp = DisparityMap::new(cw, ch, crop_grid(&d.values, w, x0, y0, cw, ch, flip), d.scale, view)?;
        let mut mask = ValidityMask {
            width: cw,
            height: ch,
            values: crop_grid(&m.values, w, x0, y0, cw, ch, flip),
            scale: m.scale,
        };
        restrict_mask(&mut mask, &disp);
        match view {
            View::Left => {
                out.disp_left = disp;
                out.mask_left = mask;
            }
            View::Right => {
                out.disp_right = disp;
                out.mask_right = mask;
            }
        }
    }

    let chroma = if config.chromatic {
        let [lo, hi] = config.chromatic_range;
        let brightness = rng.random_range(lo..=hi);
        let contrast = rng.random_range(lo..=hi);
        let saturation = rng.random_range(lo..=hi);
        let mean = out.sharp_left.mean() * brightness;
        let c = Chroma {
            brightness,
            contrast,
            saturation,
            mean,
        };
        out.blurry_left = c.apply(&out.blurry_left);
        out.blurry_right = c.apply(&out.blurry_right);
        out.sharp_left = c.apply(&out.sharp_left);
        out.sharp_right = c.apply(&out.sharp_right);
        Some(c)
    } else {
        None
    };

    let noise_std = if config.noise { config.noise_std } else { 0.0 };
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::config(e.to_string()))?;
        for t in [&mut out.blurry_left, &mut out.blurry_right] {
            t.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }

    Ok(AugmentedSample {
        sample: out,
        record: AugmentRecord {
            crop_x: x0,
            crop_y: y0,
            width: cw,
            height: ch,
            vflip: flip,
            chroma,
            noise_std,
        },
    })
}

/// Per-pixel maximum over channels of `|left − warp(right, d_left)|`.
pub fn warp_residual(sample: &StereoSample) -> Vec<f64> {
    let d = sample.disp_left.to_tensor();
    let warped = kernels::warp_forward(&sample.sharp_right, &d, View::Left.sample_sign());
    let (w, h) = (sample.width(), sample.height());
    let mut out = vec![0.0; w * h];
    for (i, o) in out.iter_mut().enumerate() {
        let (y, x) = (i / w, i % w);
        *o = (0..3)
            .map(|c| (sample.sharp_left.at(0, c, y, x) - warped.at(0, c, y, x)).abs())
            .fold(0.0, f64::max);
    }
    out
}

/// Largest amount by which an augmented sample's warp residual on
/// mask-valid pixels exceeds the colour-map gain times the original
/// residual at the same scene point. Non-positive means the epipolar
/// structure survived augmentation.
pub fn epipolar_excess(original: &StereoSample, augmented: &AugmentedSample) -> f64 {
    let before = warp_residual(original);
    let after = warp_residual(&augmented.sample);
    let gain = augmented.record.chroma.map_or(1.0, |c| c.gain());
    let s = &augmented.sample;
    let ow = original.width();
    let mut worst = f64::NEG_INFINITY;
    for y in 0..s.height() {
        for x in 0..s.width() {
            if s.mask_left.at(x, y) == 0 {
                continue;
            }
            let (sx, sy) = augmented.record.source_pixel(x, y);
            let excess = after[y * s.width() + x] - gain * before[sy * ow + sx];
            worst = worst.max(excess);
        }
    }
    worst
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Scale;
    use crate::synth::{generate_sample, SynthConfig};

    fn sample() -> StereoSample {
        let cfg = SynthConfig {
            width: 48,
            height: 40,
            focal_length_px: 40.0,
            subframe_choices: vec![3],
            ..SynthConfig::default()
        };
        generate_sample(&cfg, 1).unwrap()
    }

    #[test]
    fn everything_off_is_identity() {
        let s = sample();
        let a = augment(&s, &AugmentConfig::off(), &mut rng_for(0, 0)).unwrap();
        assert_eq!(a.sample, s);
    }

    #[test]
    fn vertical_flip_reverses_rows() {
        let s = sample();
        let cfg = AugmentConfig {
            vflip: true,
            ..AugmentConfig::off()
        };
        let mut flipped = None;
        for stream in 0..16 {
            let a = augment(&s, &cfg, &mut rng_for(1, stream)).unwrap();
            if a.record.vflip {
                flipped = Some(a);
                break;
            }
        }
        let a = flipped.expect("some stream flips");
        let h = s.height();
        for y in 0..h {
            for x in 0..s.width() {
                assert_eq!(a.sample.sharp_left.at(0, 1, y, x), s.sharp_left.at(0, 1, h - 1 - y, x));
                assert_eq!(a.sample.sharp_right.at(0, 2, y, x), s.sharp_right.at(0, 2, h - 1 - y, x));
                assert_eq!(a.sample.disp_left.at(x, y), s.disp_left.at(x, h - 1 - y));
                assert_eq!(a.sample.disp_right.at(x, y), s.disp_right.at(x, h - 1 - y));
            }
        }
    }

    #[test]
    fn crop_invalidates_left_band_for_constant_disparity() {
        let mut s = sample();
        let (w, h) = (s.width(), s.height());
        s.disp_left = DisparityMap::constant(w, h, 8.0, Scale::Full, View::Left);
        s.disp_right = DisparityMap::constant(w, h, 8.0, Scale::Full, View::Right);
        s.mask_left = ValidityMask::ones(w, h, Scale::Full);
        s.mask_right = ValidityMask::ones(w, h, Scale::Full);
        let cfg = AugmentConfig {
            crop: true,
            crop_size: 32,
            ..AugmentConfig::off()
        };
        let a = augment(&s, &cfg, &mut rng_for(2, 0)).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(a.sample.mask_left.at(x, y), (x >= 8) as u8, "left ({x},{y})");
                assert_eq!(a.sample.mask_right.at(x, y), (x < 24) as u8, "right ({x},{y})");
            }
        }
        let too_big = AugmentConfig {
            crop_size: 64,
            ..cfg
        };
        assert!(matches!(augment(&s, &too_big, &mut rng_for(2, 0)), Err(Error::Contract(_))));
    }

    #[test]
    fn chroma_is_shared_and_bounded() {
        let c = Chroma {
            brightness: 1.1,
            contrast: 0.9,
            saturation: 1.2,
            mean: 0.4,
        };
        let img = Tensor::from_fn([1, 3, 2, 2], |_, ch, y, x| 0.1 * (ch + y + 2 * x) as f64);
        let other = img.map(|v| v + 0.05);
        let a = c.apply(&img);
        let b = c.apply(&other);
        let m = c.matrix();
        for y in 0..2 {
            for x in 0..2 {
                for r in 0..3 {
                    let lin: f64 = (0..3).map(|j| m[r][j] * (img.at(0, j, y, x) - other.at(0, j, y, x))).sum();
                    assert!((a.at(0, r, y, x) - b.at(0, r, y, x) - lin).abs() < 1e-14);
                }
            }
        }
        assert!(c.gain() >= 1.1 * 0.9);
    }

    #[test]
    fn random_augmentations_keep_epipolar_structure() {
        let s = sample();
        let cfg = AugmentConfig {
            crop_size: 32,
            ..AugmentConfig::default()
        };
        for stream in 0..20 {
            let a = augment(&s, &cfg, &mut rng_for(3, stream)).unwrap();
            assert!(epipolar_excess(&s, &a) <= 1e-6);
            assert_ne!(a.sample.blurry_left, a.sample.blurry_right);
        }
    }
}
