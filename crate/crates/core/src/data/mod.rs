//! Input pipeline: frame directories, tabular features, manifests, splits
//! and batches.

pub mod fixture;
pub mod frames;
pub mod manifest;
pub mod split;
pub mod tabular;

use std::collections::HashMap;
use std::path::PathBuf;

pub use frames::{load_clip, FramePolicy, FrameSpec, Grayscale, FRAME_COUNT, FRAME_SIZE};
pub use manifest::{class_histogram, derive_label, read_manifest, ManifestRow};
pub use split::{batches, split_dataset, DatasetSplit, Part, SPLIT_SIZES};
pub use tabular::{read_tabular, standardize, TabularRecord, TabularStats, TabularTable, FEATURES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A sample before its frames are decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRef {
    pub id: String,
    pub frames_dir: PathBuf,
    pub label: usize,
    pub tabular: Option<Vec<f32>>,
}

impl SampleRef {
    pub fn load(&self, frames: &FrameSpec) -> Result<Sample> {
        let clip = load_clip(&self.frames_dir, frames).map_err(|e| e.in_sample(&self.id))?;
        Ok(Sample {
            id: self.id.clone(),
            clip,
            tabular: self.tabular.clone(),
            label: self.label,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, T, H, W)`
    pub clip: Tensor<f32>,
    pub tabular: Option<Vec<f32>>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `(N, 1, T, H, W)`
    pub clips: Tensor<f32>,
    /// `(N, features)`
    pub tabular: Option<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn collate(samples: &[&Sample]) -> Result<Batch> {
        let Some(first) = samples.first() else {
            return Err(Error::EmptySplit("batch"));
        };
        let clips: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.clip).collect();
        let clips = Tensor::stack(&clips)?;
        let tabular = match &first.tabular {
            None => None,
            Some(t) => {
                let mut data = Vec::with_capacity(samples.len() * t.len());
                for s in samples {
                    let row = s.tabular.as_ref().ok_or_else(|| {
                        Error::InvalidArgument(format!("sample '{}' has no tabular row", s.id))
                    })?;
                    data.extend_from_slice(row);
                }
                Some(Tensor::new(vec![samples.len(), t.len()], data)?)
            }
        };
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            clips,
            tabular,
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Resolve `ids` against the manifest, attaching standardized tabular rows
/// when `tabular` is given.
pub fn sample_refs(
    rows: &[ManifestRow],
    ids: &[String],
    tabular: Option<&HashMap<String, Vec<f32>>>,
) -> Result<Vec<SampleRef>> {
    let by_id: HashMap<&str, &ManifestRow> =
        rows.iter().map(|r| (r.participant_id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            let row = by_id.get(id.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("participant '{id}' is not in the manifest"))
                    .in_sample(id)
            })?;
            let tab = match tabular {
                None => None,
                Some(t) => Some(t.get(id).cloned().ok_or_else(|| {
                    Error::InvalidArgument("no row in the tabular file".into()).in_sample(id)
                })?),
            };
            Ok(SampleRef {
                id: id.clone(),
                frames_dir: row.frames_dir.clone(),
                label: row.label(),
                tabular: tab,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: usize, tab: Option<Vec<f32>>) -> Sample {
        Sample {
            id: id.into(),
            clip: Tensor::full(vec![1, 2, 2, 2], label as f32),
            tabular: tab,
            label,
        }
    }

    #[test]
    fn collate_stacks_in_order() {
        let a = sample("a", 0, Some(vec![1.0, 2.0]));
        let b = sample("b", 2, Some(vec![3.0, 4.0]));
        let batch = Batch::collate(&[&b, &a]).unwrap();
        assert_eq!(batch.clips.shape(), [2, 1, 2, 2, 2]);
        assert_eq!(batch.clips.data()[0], 2.0);
        assert_eq!(batch.tabular.unwrap().data(), [3.0, 4.0, 1.0, 2.0]);
        assert_eq!(batch.labels, [2, 0]);
        assert_eq!(batch.ids, ["b", "a"]);
        assert!(Batch::collate(&[]).is_err());
    }

    #[test]
    fn refs_require_manifest_and_tabular_rows() {
        let rows = vec![ManifestRow {
            participant_id: "p".into(),
            frames_dir: "d".into(),
            motility: [10.0, 20.0, 70.0],
        }];
        let ids = vec!["p".to_string()];
        let refs = sample_refs(&rows, &ids, None).unwrap();
        assert_eq!(refs[0].label, 2);
        assert!(sample_refs(&rows, &["q".to_string()], None).is_err());
        let tab = HashMap::new();
        let err = sample_refs(&rows, &ids, Some(&tab)).unwrap_err();
        assert!(matches!(err, Error::Sample { .. }));
    }
}
