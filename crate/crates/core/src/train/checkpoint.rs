//! Checkpoint files: `M3DC` magic, `u16` version, `u64` metadata length,
//! JSON metadata, then little-endian `f32` tensor data in manifest order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::RunningStats;
use crate::blocks::NamedStats;
use crate::data::{FrameSpec, TabularStats};
use crate::error::{Error, Result};
use crate::models::{ArchId, ArchSpec, ModelParams};
use crate::tensor::Tensor;
use crate::train::config::Seeds;

pub const MAGIC: &[u8; 4] = b"M3DC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8;

/// Everything a checkpoint records besides the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub arch: ArchId,
    pub seeds: Seeds,
    /// 1-based epoch the weights come from.
    pub epoch: usize,
    pub tabular_stats: Option<TabularStats>,
    pub class_weights: Vec<f64>,
    pub split_sizes: [usize; 3],
    pub frames: FrameSpec,
    pub best_val_loss: f64,
    pub best_val_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the tensor data.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    #[serde(flatten)]
    info: CheckpointInfo,
    tensors: Vec<TensorEntry>,
}

fn entries(model: &ModelParams<f32>) -> (Vec<TensorEntry>, Vec<&[f32]>) {
    let mut items: Vec<(&str, TensorKind, Vec<usize>, &[f32])> = Vec::new();
    for p in model.params() {
        items.push((&p.name, TensorKind::Param, p.value.shape().to_vec(), p.value.data()));
    }
    for s in model.stats() {
        let c = s.stats.channels();
        items.push((&s.name, TensorKind::RunningMean, vec![c], &s.stats.mean));
        items.push((&s.name, TensorKind::RunningVar, vec![c], &s.stats.var));
    }
    let mut offset = 0u64;
    let mut out = Vec::with_capacity(items.len());
    let mut data = Vec::with_capacity(items.len());
    for (name, kind, shape, values) in items {
        out.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape,
            offset,
        });
        offset += 4 * values.len() as u64;
        data.push(values);
    }
    (out, data)
}

/// Serialize to bytes.
pub fn encode(model: &ModelParams<f32>, info: &CheckpointInfo) -> Result<Vec<u8>> {
    if info.arch != model.spec().arch {
        return Err(Error::InvalidArgument(format!(
            "checkpoint info names {} but the model is {}",
            info.arch,
            model.spec().arch
        )));
    }
    let (tensors, data) = entries(model);
    let meta = serde_json::to_vec(&Metadata {
        info: info.clone(),
        tensors,
    })
    .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    let payload: usize = data.iter().map(|d| d.len() * 4).sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + meta.len() + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    for d in data {
        for v in d {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Write atomically: a temporary file in the target directory, then rename.
pub fn save_checkpoint(path: &Path, model: &ModelParams<f32>, info: &CheckpointInfo) -> Result<()> {
    let bytes = encode(model, info)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointInfo)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams<f32>, CheckpointInfo)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::CheckpointFormat(
            "bad magic bytes, expected \"M3DC\"".into(),
        ));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::CheckpointIntegrity("file ends inside the header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let meta_end = (HEADER_LEN as u64)
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::CheckpointIntegrity("file ends inside the metadata".into()))?
        as usize;
    let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
        .map_err(|e| Error::CheckpointFormat(format!("metadata: {e}")))?;
    let payload = &bytes[meta_end..];

    let mut expected = 0u64;
    for t in &meta.tensors {
        if t.offset != expected {
            return Err(Error::CheckpointIntegrity(format!(
                "tensor '{}' starts at byte {}, expected {expected}",
                t.name, t.offset
            )));
        }
        let numel = t
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CheckpointIntegrity(format!("tensor '{}' is too large", t.name)))?;
        expected = expected
            .checked_add(numel)
            .ok_or_else(|| Error::CheckpointIntegrity("tensor offsets overflow".into()))?;
    }
    if expected != payload.len() as u64 {
        return Err(Error::CheckpointIntegrity(format!(
            "tensor data is {} bytes, manifest describes {expected}",
            payload.len()
        )));
    }

    let read = |t: &TensorEntry| -> Vec<f32> {
        let start = t.offset as usize;
        let len: usize = t.shape.iter().product();
        payload[start..start + 4 * len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };
    let mut params = Vec::new();
    let mut stats: Vec<NamedStats<f32>> = Vec::new();
    for t in &meta.tensors {
        match t.kind {
            TensorKind::Param => params.push((t.name.clone(), Tensor::new(t.shape.clone(), read(t))?)),
            TensorKind::RunningMean => stats.push(NamedStats {
                name: t.name.clone(),
                stats: RunningStats {
                    mean: read(t),
                    var: Vec::new(),
                },
            }),
            TensorKind::RunningVar => {
                let last = stats
                    .last_mut()
                    .filter(|s| s.name == t.name && s.stats.var.is_empty())
                    .ok_or_else(|| {
                        Error::CheckpointIntegrity(format!(
                            "running variance of '{}' does not follow its mean",
                            t.name
                        ))
                    })?;
                last.stats.var = read(t);
                if last.stats.var.len() != last.stats.mean.len() {
                    return Err(Error::CheckpointIntegrity(format!(
                        "running statistics of '{}' differ in length",
                        t.name
                    )));
                }
            }
        }
    }
    let model = ModelParams::from_tensors(ArchSpec::new(meta.info.arch), params, stats)?;
    Ok((model, meta.info))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(arch: ArchId) -> CheckpointInfo {
        CheckpointInfo {
            arch,
            seeds: Seeds {
                init: 1,
                split: 2,
                shuffle: 3,
            },
            epoch: 4,
            tabular_stats: Some(TabularStats {
                mean: vec![0.1; 19],
                std: vec![1.0 / 3.0; 19],
            }),
            class_weights: vec![0.5448717948717948, 3.1481481481481484, 1.1805555555555556],
            split_sizes: [63, 8, 9],
            frames: FrameSpec::default(),
            best_val_loss: 0.123456789,
            best_val_acc: 0.875,
        }
    }

    fn model() -> ModelParams<f32> {
        let mut m = ModelParams::build(ArchSpec::new(ArchId::Resnet18Tab), 5).unwrap();
        let s = &mut m.store_mut().stats_mut()[0].stats;
        s.mean[0] = 0.25;
        s.var[1] = 3.5;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/best.m3dc");
        let m = model();
        save_checkpoint(&path, &m, &info(ArchId::Resnet18Tab)).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, info(ArchId::Resnet18Tab));
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(m.stats(), back.stats());
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&model(), &info(ArchId::Resnet18Tab)).unwrap();
        let mut cut = bytes.clone();
        cut.pop();
        assert!(matches!(decode(&cut), Err(Error::CheckpointIntegrity(_))));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(Error::CheckpointIntegrity(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::CheckpointIntegrity(_))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        match decode(&magic) {
            Err(Error::CheckpointFormat(msg)) => assert!(msg.contains("M3DC")),
            other => panic!("{other:?}"),
        }
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            decode(&version),
            Err(Error::CheckpointVersion { found: 9, supported: 1 })
        ));
    }

    #[test]
    fn manifest_offsets_are_checked() {
        let bytes = encode(&model(), &info(ArchId::Resnet18Tab)).unwrap();
        let meta_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let meta = std::str::from_utf8(&bytes[14..14 + meta_len]).unwrap();
        let shifted = meta.replacen("\"offset\":0", "\"offset\":4", 1);
        assert_eq!(shifted.len(), meta.len());
        let mut bad = bytes[..14].to_vec();
        bad.extend_from_slice(shifted.as_bytes());
        bad.extend_from_slice(&bytes[14 + meta_len..]);
        assert!(matches!(decode(&bad), Err(Error::CheckpointIntegrity(_))));
    }

    #[test]
    fn arch_must_match() {
        assert!(encode(&model(), &info(ArchId::Resnet18)).is_err());
    }
}
