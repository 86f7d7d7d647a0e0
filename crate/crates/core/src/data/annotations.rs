//! ActivityNet-style annotation and prediction JSON, the class manifest and
//! per-video classification score files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Action, ActionAnnotation};

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSegment {
    pub segment: [f64; 2],
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub duration: f64,
    pub subset: String,
    pub annotations: Vec<LabeledSegment>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub database: BTreeMap<String, VideoEntry>,
}

impl AnnotationFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Video ids in `subset` (all videos when `None`), sorted.
    pub fn video_ids(&self, subset: Option<&str>) -> Vec<String> {
        self.database
            .iter()
            .filter(|(_, v)| subset.is_none_or(|s| v.subset == s))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Resolves labels and validates one video's actions.
    pub fn action_annotation(&self, video_id: &str, manifest: &ClassManifest) -> Result<ActionAnnotation> {
        let entry = self
            .database
            .get(video_id)
            .ok_or_else(|| Error::arg("annotations", format!("no video {video_id}")))?;
        let ann = ActionAnnotation {
            video_id: video_id.to_string(),
            duration: entry.duration,
            actions: entry
                .annotations
                .iter()
                .map(|a| {
                    Ok(Action {
                        start: a.segment[0],
                        end: a.segment[1],
                        class_id: manifest.resolve(&a.label)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.database
            .values()
            .flat_map(|v| v.annotations.iter().map(|a| a.label.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: usize,
    pub label: String,
}

/// Class names with ids `1..=D`, sorted by name. Id 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassManifest {
    pub classes: Vec<ClassEntry>,
}

impl ClassManifest {
    pub fn from_labels<I: IntoIterator<Item = String>>(labels: I) -> Self {
        let sorted: BTreeSet<String> = labels.into_iter().collect();
        Self {
            classes: sorted
                .into_iter()
                .enumerate()
                .map(|(i, label)| ClassEntry { id: i + 1, label })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i + 1 {
                return Err(Error::Config(format!(
                    "class manifest: entry {i} ({}) has id {}, expected {}",
                    c.label,
                    c.id,
                    i + 1
                )));
            }
        }
        if self.classes.windows(2).any(|w| w[0].label >= w[1].label) {
            return Err(Error::Config("class manifest: labels must be sorted and unique".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.classes
            .binary_search_by(|c| c.label.as_str().cmp(label))
            .ok()
            .map(|i| self.classes[i].id)
    }

    pub fn resolve(&self, label: &str) -> Result<usize> {
        self.id(label)
            .ok_or_else(|| Error::UnknownLabels(vec![label.to_string()]))
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        id.checked_sub(1)
            .and_then(|i| self.classes.get(i))
            .map(|c| c.label.as_str())
    }

    /// Every label in `labels` missing from the manifest, sorted.
    pub fn unknown<'a>(&self, labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let missing: BTreeSet<&str> = labels.into_iter().filter(|l| self.id(l).is_none()).collect();
        missing.into_iter().map(str::to_string).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub segment: [f64; 2],
    pub score: f64,
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub results: BTreeMap<String, Vec<ScoredLabel>>,
}

impl PredictionFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Ground truth rewritten as predictions with score 1.
    pub fn from_annotations(ann: &AnnotationFile) -> Self {
        Self {
            results: ann
                .database
                .iter()
                .map(|(id, v)| {
                    let dets = v
                        .annotations
                        .iter()
                        .map(|a| ScoredLabel {
                            segment: a.segment,
                            score: 1.0,
                            label: a.label.clone(),
                        })
                        .collect();
                    (id.clone(), dets)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub score: f64,
}

/// Video-level classification scores from an external classifier.
pub type ClassScores = BTreeMap<String, Vec<ClassScore>>;

pub fn load_class_scores(path: &Path) -> Result<ClassScores> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "database": {
            "v1": {"duration": 10.0, "subset": "training",
                   "annotations": [{"segment": [1.0, 3.0], "label": "jump"},
                                   {"segment": [5.0, 6.5], "label": "run"}]},
            "v2": {"duration": 4.0, "subset": "validation", "annotations": []}
        }
    }"#;

    #[test]
    fn parses_annotation_schema() {
        let a: AnnotationFile = serde_json::from_str(SAMPLE).unwrap();
        assert_eq!(a.video_ids(None), vec!["v1", "v2"]);
        assert_eq!(a.video_ids(Some("training")), vec!["v1"]);
        let m = ClassManifest::from_labels(a.labels());
        assert_eq!(m.id("jump"), Some(1));
        assert_eq!(m.id("run"), Some(2));
        assert_eq!(m.label(2), Some("run"));
        assert_eq!(m.label(0), None);
        let ann = a.action_annotation("v1", &m).unwrap();
        assert_eq!(ann.actions[1].class_id, 2);
        assert_eq!(ann.duration, 10.0);
    }

    #[test]
    fn unknown_labels_are_listed() {
        let a: AnnotationFile = serde_json::from_str(SAMPLE).unwrap();
        let m = ClassManifest::from_labels(["jump".to_string()]);
        assert!(matches!(a.action_annotation("v1", &m), Err(Error::UnknownLabels(l)) if l == ["run"]));
        assert_eq!(m.unknown(["zz", "run", "jump", "run"]), vec!["run", "zz"]);
    }

    #[test]
    fn manifest_validation() {
        let good = ClassManifest::from_labels(["b".into(), "a".into(), "b".into()]);
        assert_eq!(good.len(), 2);
        good.validate().unwrap();
        let mut bad = good.clone();
        bad.classes.swap(0, 1);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn prediction_schema() {
        let p: PredictionFile = serde_json::from_str(
            r#"{"version": "x", "results": {"v1": [{"segment": [0.5, 2.0], "score": 0.7, "label": "jump"}]}}"#,
        )
        .unwrap();
        assert_eq!(p.results["v1"][0].score, 0.7);
        let a: AnnotationFile = serde_json::from_str(SAMPLE).unwrap();
        let gt = PredictionFile::from_annotations(&a);
        assert_eq!(gt.results["v1"].len(), 2);
        assert!(gt.results["v2"].is_empty());
    }
}
