//! On-disk dataset format.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/<sample_id>/{blurry_L,blurry_R,sharp_L,sharp_R}.png   8-bit RGB
//! <root>/<split>/<sample_id>/{disp_L,disp_R}.pfm                       32-bit LE grayscale
//! <root>/<split>/<sample_id>/{mask_L,mask_R}.png                       8-bit gray {0,255}
//! <root>/<split>/<sample_id>/meta.json
//! ```

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{SampleMeta, Split, StereoSample, SynthConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, DisparityMap, Scale, ValidityMask, View};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub rig: CameraRig,
    pub generator: SynthConfig,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

pub(super) fn write_manifest(manifest: &Manifest, root: &Path) -> Result<()> {
    let path = root.join("manifest.json");
    let bytes = serde_json::to_vec_pretty(manifest).expect("manifest serialises");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(&path, "manifest", e.to_string()))
}

/// Load every sample of a split, in manifest order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<StereoSample>> {
    let manifest = read_manifest(root)?;
    manifest
        .ids(split)
        .iter()
        .map(|id| read_sample(&root.join(split.name()).join(id)))
        .collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb(t: &Tensor, path: &Path) -> Result<()> {
    let (w, h) = (t.width(), t.height());
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([quantize(t.at(0, 0, y, x)), quantize(t.at(0, 1, y, x)), quantize(t.at(0, 2, y, x))])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_gray(values: &[f64], w: usize, h: usize, path: &Path) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([quantize(values[y as usize * w + x as usize])]));
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path, "image", e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0))
}

fn write_mask(m: &ValidityMask, path: &Path) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_fn(m.width as u32, m.height as u32, |x, y| {
        Luma([if m.at(x as usize, y as usize) == 1 { 255 } else { 0 }])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn read_mask(path: &Path) -> Result<ValidityMask> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path, "mask", e.to_string()))?
        .to_luma8();
    let values = img
        .pixels()
        .map(|p| match p[0] {
            0 => Ok(0),
            255 => Ok(1),
            v => Err(Error::parse(path, "mask", format!("value {v} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(ValidityMask {
        width: img.width() as usize,
        height: img.height() as usize,
        values,
        scale: Scale::Full,
    })
}

/// Write a grayscale little-endian PFM; scanlines are stored bottom-up.
pub fn write_pfm(d: &DisparityMap, path: &Path) -> Result<()> {
    let mut bytes = format!("Pf\n{} {}\n-1.0\n", d.width, d.height).into_bytes();
    bytes.reserve(d.width * d.height * 4);
    for y in (0..d.height).rev() {
        for x in 0..d.width {
            bytes.extend_from_slice(&(d.at(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path, view: View) -> Result<DisparityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Three whitespace-terminated header tokens follow the magic.
    let mut pos = 0;
    let mut token = |field: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(Error::parse(path, field, "unexpected end of header"));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1;
        Ok(t)
    };
    let magic = token("magic")?;
    if magic != "Pf" {
        return Err(Error::parse(path, "magic", format!("expected `Pf`, found `{magic}`")));
    }
    let width: usize = token("width")?
        .parse()
        .map_err(|e| Error::parse(path, "width", format!("{e}")))?;
    let height: usize = token("height")?
        .parse()
        .map_err(|e| Error::parse(path, "height", format!("{e}")))?;
    let scale: f64 = token("scale")?
        .parse()
        .map_err(|e| Error::parse(path, "scale", format!("{e}")))?;
    let little_endian = scale < 0.0;
    let data = &bytes[pos..];
    if data.len() != width * height * 4 {
        return Err(Error::parse(
            path,
            "data",
            format!("expected {} bytes of samples, found {}", width * height * 4, data.len()),
        ));
    }
    let mut values = vec![0.0; width * height];
    for (i, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, x) = (i / width, i % width);
        values[(height - 1 - row) * width + x] = v as f64;
    }
    DisparityMap::new(width, height, values, Scale::Full, view)
}

pub fn write_sample(sample: &StereoSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rgb(&sample.blurry_left, &dir.join("blurry_L.png"))?;
    write_rgb(&sample.blurry_right, &dir.join("blurry_R.png"))?;
    write_rgb(&sample.sharp_left, &dir.join("sharp_L.png"))?;
    write_rgb(&sample.sharp_right, &dir.join("sharp_R.png"))?;
    write_pfm(&sample.disp_left, &dir.join("disp_L.pfm"))?;
    write_pfm(&sample.disp_right, &dir.join("disp_R.pfm"))?;
    write_mask(&sample.mask_left, &dir.join("mask_L.png"))?;
    write_mask(&sample.mask_right, &dir.join("mask_R.png"))?;
    let meta = dir.join("meta.json");
    let bytes = serde_json::to_vec_pretty(&sample.meta).expect("meta serialises");
    fs::write(&meta, bytes).map_err(|e| Error::io(&meta, e))
}

pub fn read_sample(dir: &Path) -> Result<StereoSample> {
    let meta_path = dir.join("meta.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::parse(&meta_path, "meta", e.to_string()))?;
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sample = StereoSample {
        id,
        blurry_left: read_rgb(&dir.join("blurry_L.png"))?,
        blurry_right: read_rgb(&dir.join("blurry_R.png"))?,
        sharp_left: read_rgb(&dir.join("sharp_L.png"))?,
        sharp_right: read_rgb(&dir.join("sharp_R.png"))?,
        disp_left: read_pfm(&dir.join("disp_L.pfm"), View::Left)?,
        disp_right: read_pfm(&dir.join("disp_R.pfm"), View::Right)?,
        mask_left: read_mask(&dir.join("mask_L.png"))?,
        mask_right: read_mask(&dir.join("mask_R.png"))?,
        meta,
    };
    sample.validate()?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_sample;

    #[test]
    fn sample_round_trip() {
        let config = SynthConfig {
            width: 24,
            height: 16,
            focal_length_px: 20.0,
            subframe_choices: vec![3],
            ..SynthConfig::default()
        };
        let mut s = generate_sample(&config, 0).unwrap();
        s.disp_left.values[5] = 3.25;
        let dir = tempfile::tempdir().unwrap();
        write_sample(&s, dir.path()).unwrap();
        let back = read_sample(dir.path()).unwrap();
        for (a, b) in [
            (&s.blurry_left, &back.blurry_left),
            (&s.blurry_right, &back.blurry_right),
            (&s.sharp_left, &back.sharp_left),
            (&s.sharp_right, &back.sharp_right),
        ] {
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(back.disp_left, s.disp_left);
        assert_eq!(back.disp_right, s.disp_right);
        assert_eq!(back.disp_left.values[5], 3.25);
        assert_eq!(back.mask_left, s.mask_left);
        assert_eq!(back.mask_right, s.mask_right);
        assert_eq!(back.meta, s.meta);
    }

    #[test]
    fn truncated_pfm_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let d = DisparityMap::constant(5, 4, 1.5, Scale::Full, View::Left);
        write_pfm(&d, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match read_pfm(&path, View::Left) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "data"),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&path, b"P5\n1 1\n").unwrap();
        assert!(matches!(read_pfm(&path, View::Left), Err(Error::Parse { .. })));
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pfm");
        let d = DisparityMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0], Scale::Full, View::Left).unwrap();
        write_pfm(&d, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 3.0);
        assert_eq!(read_pfm(&path, View::Left).unwrap(), d);
    }
}
