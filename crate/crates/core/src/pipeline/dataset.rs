//! Labeled stream collections and their JSON manifest.
//!
//! A manifest is a JSON list; each item names its frames either by feature
//! file or by an inline synthetic spec:
//!
//! ```json
//! [
//!   {"path": "clips/a.mafb", "label": 0},
//!   {"synthetic": {"seed": 1, "frames": 4, "tokens": 1, "channels": 4,
//!                  "segments": [{"length": 4, "basis": 1}], "label": 1},
//!    "split": "eval"}
//! ]
//! ```
//!
//! Synthetic items default to their generator's own label. Relative paths resolve
//! against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::load_features;
use super::synthetic::{generate_synthetic, SyntheticSpec};
use super::FeatureStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    #[serde(flatten)]
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default)]
    pub split: Split,
}

impl DatasetItem {
    pub fn synthetic(spec: SyntheticSpec, split: Split) -> Self {
        DatasetItem {
            label: Some(spec.label),
            source: Source::Synthetic(spec),
            split,
        }
    }

    pub fn label(&self) -> Result<usize> {
        match (&self.source, self.label) {
            (_, Some(l)) => Ok(l),
            (Source::Synthetic(s), None) => Ok(s.label),
            (Source::Path(p), None) => Err(Error::Config(format!("item {} has no label", p.display()))),
        }
    }

    pub fn open(&self, base: &Path) -> Result<FeatureStream> {
        match &self.source {
            Source::Synthetic(spec) => generate_synthetic(spec),
            Source::Path(p) if p.is_relative() => load_features(&base.join(p)),
            Source::Path(p) => load_features(p),
        }
    }
}

/// A materialized labeled stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub frames: Vec<Tensor>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<DatasetItem>,
    pub num_classes: usize,
    /// Directory relative item paths resolve against.
    pub base: PathBuf,
}

impl LabeledDataset {
    /// Class count is one more than the largest label seen.
    pub fn new(items: Vec<DatasetItem>, base: PathBuf) -> Result<Self> {
        let mut max = 0;
        for item in &items {
            max = max.max(item.label()?);
        }
        let ds = LabeledDataset {
            items,
            num_classes: max + 1,
            base,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("dataset needs >= 2 classes, has {}", self.num_classes)));
        }
        if self.items.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        for item in &self.items {
            let label = item.label()?;
            if label >= self.num_classes {
                return Err(Error::LabelRange {
                    label,
                    classes: self.num_classes,
                });
            }
            if let (Source::Synthetic(s), Some(l)) = (&item.source, item.label) {
                s.validate()?;
                if s.label != l {
                    return Err(Error::Config(format!("item label {l} disagrees with synthetic label {}", s.label)));
                }
            }
        }
        Ok(())
    }

    pub fn from_manifest_str(json: &str, base: PathBuf) -> Result<Self> {
        let items: Vec<DatasetItem> = serde_json::from_str(json)?;
        LabeledDataset::new(items, base)
    }

    pub fn load_manifest(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        LabeledDataset::from_manifest_str(&json, base)
    }

    pub fn to_manifest(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.items)?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn examples(&self, split: Split) -> Result<Vec<Example>> {
        self.split(split)
            .map(|item| {
                Ok(Example {
                    frames: item.open(&self.base)?.collect_frames()?,
                    label: item.label()?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::features::write_features;

    #[test]
    fn manifest_with_file_and_synthetic_items() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![Tensor::full(&[1, 4], 0.5), Tensor::full(&[1, 4], -0.25)];
        write_features(&dir.path().join("a.mafb"), &frames).unwrap();
        let json = r#"[
            {"path": "a.mafb", "label": 0},
            {"synthetic": {"seed": 1, "frames": 3, "tokens": 1, "channels": 4,
                           "segments": [{"length": 3, "basis": 1}], "label": 1},
             "split": "eval"}
        ]"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, json).unwrap();
        let ds = LabeledDataset::load_manifest(&path).unwrap();
        assert_eq!(ds.num_classes, 2);
        let train = ds.examples(Split::Train).unwrap();
        assert_eq!(train, vec![Example { frames, label: 0 }]);
        let eval = ds.examples(Split::Eval).unwrap();
        assert_eq!((eval[0].frames.len(), eval[0].label), (3, 1));
        let again = LabeledDataset::from_manifest_str(&ds.to_manifest().unwrap(), ds.base.clone()).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn single_class_rejected() {
        let json = r#"[{"path": "x.mafb", "label": 0}]"#;
        assert!(LabeledDataset::from_manifest_str(json, PathBuf::new()).is_err());
    }

    #[test]
    fn unlabeled_path_rejected() {
        let json = r#"[{"path": "x.mafb"}, {"path": "y.mafb", "label": 1}]"#;
        assert!(LabeledDataset::from_manifest_str(json, PathBuf::new()).is_err());
    }
}
