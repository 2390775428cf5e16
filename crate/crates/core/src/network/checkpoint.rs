//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `DAVNCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! parameter as raw little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Davanet, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Stage;

const MAGIC: &[u8; 8] = b"DAVNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    /// Stage that produced this checkpoint, `None` for a fresh model.
    pub stage: Option<Stage>,
    /// Every stage completed so far, in order.
    pub completed: Vec<Stage>,
    /// Iterations run within `stage`.
    pub iteration: usize,
    pub seed: u64,
    pub params: Vec<ParamInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Davanet,
}

impl Checkpoint {
    pub fn fresh(model: Davanet, seed: u64) -> Self {
        let header = CheckpointHeader {
            config: model.config.clone(),
            stage: None,
            completed: Vec::new(),
            iteration: 0,
            seed,
            params: Vec::new(),
        };
        Checkpoint { header, model }
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.header.completed.contains(&stage)
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut header = ckpt.header.clone();
    header.config = ckpt.model.config.clone();
    header.params = ckpt
        .model
        .params
        .iter()
        .map(|(name, t)| ParamInfo {
            name: name.to_string(),
            shape: t.shape(),
        })
        .collect();
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut bytes = Vec::with_capacity(20 + json.len() + 8 * ckpt.model.params.total());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in ckpt.model.params.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointHeader, &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::parse(path, "magic", "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::parse(path, "version", format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(Error::parse(path, "header", "truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::parse(path, "header", e.to_string()))?;
    Ok((header, &body[len..]))
}

/// Read only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes, path)?.0)
}

/// Load a checkpoint. With `expected` set, a checkpoint whose model
/// configuration differs is refused with a configuration error.
pub fn read_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut data) = split_header(&bytes, path)?;
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(Error::config(format!(
                "{} was written for a different model configuration",
                path.display()
            )));
        }
    }
    let layout = Davanet::new(header.config.clone()).map_err(|e| Error::parse(path, "config", e.to_string()))?;
    let expected_layout: Vec<ParamInfo> = layout
        .params
        .iter()
        .map(|(name, t)| ParamInfo {
            name: name.to_string(),
            shape: t.shape(),
        })
        .collect();
    if expected_layout != header.params {
        return Err(Error::parse(path, "params", "parameter layout does not match the configuration"));
    }
    let mut params = ParamStore::new();
    for info in &header.params {
        let n: usize = info.shape.iter().product();
        if data.len() < 8 * n {
            return Err(Error::parse(path, "data", format!("truncated values for `{}`", info.name)));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        params.insert(&info.name, Tensor::from_vec(info.shape, values)?);
    }
    if !data.is_empty() {
        return Err(Error::parse(path, "data", format!("{} trailing bytes", data.len())));
    }
    let model = Davanet {
        config: header.config.clone(),
        params,
    };
    Ok(Checkpoint { header, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ContextKind;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = Davanet::new(ModelConfig::with_width(4)).unwrap();
        model.params.get_mut("deblur.out.w").unwrap().data_mut()[0] = 0.1 + 0.2;
        model.params.get_mut("deblur.out.w").unwrap().data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let mut ckpt = Checkpoint::fresh(model, 42);
        ckpt.header.stage = Some(Stage::Deblur);
        ckpt.header.completed = vec![Stage::Deblur];
        ckpt.header.iteration = 17;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/a.ckpt");
        write_checkpoint(&ckpt, &path).unwrap();
        let back = read_checkpoint(&path, Some(&ckpt.model.config)).unwrap();
        assert_eq!(back.model, ckpt.model);
        for ((_, a), (_, b)) in back.model.params.iter().zip(ckpt.model.params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.header.iteration, 17);
        assert_eq!(back.header.completed, vec![Stage::Deblur]);
        let path2 = dir.path().join("b.ckpt");
        write_checkpoint(&back, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn refuses_mismatch_and_corruption() {
        let model = Davanet::new(ModelConfig::with_width(4)).unwrap();
        let ckpt = Checkpoint::fresh(model, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        write_checkpoint(&ckpt, &path).unwrap();
        let other = ModelConfig {
            context: ContextKind::SingleRate,
            ..ModelConfig::with_width(4)
        };
        assert!(matches!(read_checkpoint(&path, Some(&other)), Err(Error::Config(_))));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_checkpoint(&path, None), Err(Error::Parse { .. })));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(read_checkpoint(&path, None), Err(Error::Parse { .. })));
    }
}
