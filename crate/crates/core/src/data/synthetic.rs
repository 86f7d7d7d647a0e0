//! Synthetic feature sequences with known action instances.
//!
//! Class `d` owns the basis direction `e_{d-1}` of feature space. Action
//! snippets read `e_{d-1} + N(0, σ)`, background snippets read `N(0, σ)`.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::{AnnotationFile, ClassManifest, LabeledSegment, VideoEntry};
use super::features::write_features;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub snippets: usize,
    pub actions_min: usize,
    pub actions_max: usize,
    /// Action length bounds in snippets.
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    pub seed: u64,
    /// Starts and lengths are multiples of this many snippets.
    pub grid: usize,
    pub snippet_seconds: f64,
    /// All actions of a video share one class.
    pub single_class_videos: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 20,
            num_classes: 3,
            channels: 16,
            snippets: 256,
            actions_min: 1,
            actions_max: 3,
            min_len: 16,
            max_len: 64,
            noise: 0.3,
            seed: 0,
            grid: 8,
            snippet_seconds: 1.0,
            single_class_videos: true,
        }
    }
}

/// One generated video: its features and actions in snippet units.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub features: Tensor,
    /// `(start, end, class_id)` with `end` exclusive.
    pub actions: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub manifest: ClassManifest,
    pub annotations: AnnotationFile,
    pub videos: Vec<SyntheticVideo>,
}

pub fn class_label(id: usize, num_classes: usize) -> String {
    let width = num_classes.to_string().len();
    format!("action_{id:0width$}")
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Synthetic(m));
        if self.n_videos == 0 || self.num_classes == 0 || self.snippets == 0 {
            return bad("n_videos, num_classes and snippets must be >= 1".into());
        }
        if self.channels < self.num_classes {
            return bad(format!(
                "{} channels cannot hold {} orthogonal class signatures",
                self.channels, self.num_classes
            ));
        }
        if self.grid == 0 || self.snippets % self.grid != 0 {
            return bad(format!("grid {} must divide snippets {}", self.grid, self.snippets));
        }
        if self.actions_min > self.actions_max || self.min_len > self.max_len {
            return bad("min bounds exceed max bounds".into());
        }
        let (lo, hi) = self.len_units();
        if lo == 0 || lo > hi {
            return bad(format!(
                "no multiple of grid {} in length range [{}, {}]",
                self.grid, self.min_len, self.max_len
            ));
        }
        let need = self.actions_max * hi + self.actions_max.saturating_sub(1);
        if need > self.snippets / self.grid {
            return bad(format!(
                "infeasible packing: {} actions of up to {} snippets with gaps need {} snippets, have {}",
                self.actions_max,
                hi * self.grid,
                need * self.grid,
                self.snippets
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.snippet_seconds > 0.0) {
            return bad("noise must be finite and >= 0, snippet_seconds > 0".into());
        }
        Ok(())
    }

    /// Admissible lengths in grid units.
    fn len_units(&self) -> (usize, usize) {
        (self.min_len.div_ceil(self.grid), self.max_len / self.grid)
    }
}

/// Places `lens` (grid units) in `total` units with at least one unit
/// between neighbors; the leftover slack is spread uniformly at random.
fn place<R: Rng>(lens: &[usize], total: usize, rng: &mut R) -> Vec<usize> {
    let k = lens.len();
    let slack = total - lens.iter().sum::<usize>() - k.saturating_sub(1);
    // k cut points in 0..=slack (with repetition) via stars and bars
    let mut cuts: Vec<usize> = index::sample(rng, slack + k, k)
        .into_iter()
        .collect();
    cuts.sort_unstable();
    let mut starts = Vec::with_capacity(k);
    let mut pos = 0;
    for (i, (&cut, &len)) in cuts.iter().zip(lens).enumerate() {
        let lead = cut - i;
        let start = lead + pos;
        starts.push(start);
        pos = start + len + 1 - lead;
    }
    starts
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Synthetic(e.to_string()))?;
    let (lo, hi) = spec.len_units();
    let units = spec.snippets / spec.grid;
    let manifest = ClassManifest::from_labels((1..=spec.num_classes).map(|d| class_label(d, spec.num_classes)));
    let mut annotations = AnnotationFile::default();
    let mut videos = Vec::with_capacity(spec.n_videos);
    let width = spec.n_videos.to_string().len().max(4);
    for v in 0..spec.n_videos {
        let video_id = format!("video_{v:0width$}");
        let k = rng.random_range(spec.actions_min..=spec.actions_max);
        let video_class = rng.random_range(1..=spec.num_classes);
        let lens: Vec<usize> = (0..k).map(|_| rng.random_range(lo..=hi)).collect();
        let starts = place(&lens, units, &mut rng);
        let actions: Vec<(usize, usize, usize)> = starts
            .iter()
            .zip(&lens)
            .map(|(&s, &l)| {
                let class = if spec.single_class_videos {
                    video_class
                } else {
                    rng.random_range(1..=spec.num_classes)
                };
                (s * spec.grid, (s + l) * spec.grid, class)
            })
            .collect();
        let t = spec.snippets;
        let mut data = vec![0.0; spec.channels * t];
        for &(s, e, class) in &actions {
            for f in s..e {
                data[(class - 1) * t + f] = 1.0;
            }
        }
        if spec.noise > 0.0 {
            for x in &mut data {
                *x += noise.sample(&mut rng);
            }
        }
        // stored as f32 on disk, so keep the in-memory copy identical
        for x in &mut data {
            *x = f64::from(*x as f32);
        }
        let features = Tensor::new(vec![spec.channels, t], data)?;
        let sec = spec.snippet_seconds;
        annotations.database.insert(
            video_id.clone(),
            VideoEntry {
                duration: t as f64 * sec,
                subset: "training".into(),
                annotations: actions
                    .iter()
                    .map(|&(s, e, class)| LabeledSegment {
                        segment: [s as f64 * sec, e as f64 * sec],
                        label: class_label(class, spec.num_classes),
                    })
                    .collect(),
            },
        );
        videos.push(SyntheticVideo {
            video_id,
            features,
            actions,
        });
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        manifest,
        annotations,
        videos,
    })
}

impl SyntheticDataset {
    /// Writes `features/*.sgft`, `annotations.json` and `classes.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let feat_dir = dir.join("features");
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        for v in &self.videos {
            write_features(&feat_dir.join(format!("{}.sgft", v.video_id)), &v.features)?;
        }
        self.annotations.save(&dir.join("annotations.json"))?;
        self.manifest.save(&dir.join("classes.json"))
    }
}
