//! Detection metric: per-class interpolated average precision and mAP over
//! tIoU thresholds 0.50, 0.55, …, 0.95.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationFile, ClassManifest, PredictionFile};
use crate::error::{Error, Result};
use crate::labels::{tiou_unchecked, Segment};

pub fn thresholds() -> Vec<f64> {
    // integer numerators keep each threshold the correctly rounded decimal
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub segment: Segment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub video_id: String,
    pub segment: Segment,
    pub score: f64,
}

/// Marks each prediction (in the given rank order) as a true or false
/// positive at `threshold`.
///
/// A prediction is a true positive when it can be matched to a ground truth
/// of its video with tIoU ≥ `threshold` without unmatching an earlier true
/// positive. The search takes the unmatched ground truth with the best tIoU
/// first, so when every prediction clears the threshold for at most one
/// unmatched ground truth this is plain greedy matching. Otherwise an
/// augmenting path may hand an earlier prediction a different, equally
/// admissible ground truth.
pub fn match_predictions(ranked: &[&Prediction], gt: &[&GroundTruth], threshold: f64) -> Vec<bool> {
    // admissible ground truths per prediction, best tIoU first
    let adj: Vec<Vec<usize>> = ranked
        .iter()
        .map(|p| {
            let mut c: Vec<(f64, usize)> = gt
                .iter()
                .enumerate()
                .filter(|(_, g)| g.video_id == p.video_id)
                .map(|(j, g)| (tiou_unchecked(p.segment, g.segment), j))
                .filter(|&(t, _)| t >= threshold)
                .collect();
            c.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            c.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gt.len()];
    let mut tp = vec![false; ranked.len()];
    for i in 0..ranked.len() {
        if adj[i].is_empty() {
            continue;
        }
        // fast path: best unmatched admissible ground truth
        if let Some(&j) = adj[i].iter().find(|&&j| owner[j].is_none()) {
            owner[j] = Some(i);
            tp[i] = true;
            continue;
        }
        let mut seen = vec![false; gt.len()];
        tp[i] = augment(i, &adj, &mut owner, &mut seen);
    }
    tp
}

fn augment(i: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &adj[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        let free = match owner[j] {
            None => true,
            Some(k) => augment(k, adj, owner, seen),
        };
        if free {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

/// Interpolated AP from a ranked TP/FP sequence: the sum over recall steps
/// of the running maximum of precision taken from the right.
pub fn ap_from_matches(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        prec.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    tp.iter()
        .zip(&prec)
        .filter(|(t, _)| **t)
        .map(|(_, p)| p / n_gt as f64)
        .sum()
}

/// AP of one class. Predictions are ranked by descending score, ties by
/// input order. No ground truth gives 0.
pub fn average_precision(predictions: &[Prediction], ground_truth: &[GroundTruth], threshold: f64) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<&Prediction> = predictions.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let gt: Vec<&GroundTruth> = ground_truth.iter().collect();
    ap_from_matches(&match_predictions(&ranked, &gt, threshold), gt.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub label: String,
    /// One AP per threshold.
    pub ap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average_map: f64,
    /// Classes present in the ground truth.
    pub per_class: Vec<ClassAp>,
}

impl EvalReport {
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|t| (t - threshold).abs() < 1e-9)
            .map(|i| self.map[i])
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tIoU    mAP");
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            let _ = writeln!(s, "{t:.2}    {m:.4}");
        }
        let _ = writeln!(s, "average mAP {:.4}", self.average_map);
        s
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::data::write_json(path, self)
    }
}

/// Scores `predictions` against every video in `annotations` (restricted to
/// `subset` when given). Predictions for other videos are ignored.
pub fn evaluate(
    predictions: &PredictionFile,
    annotations: &AnnotationFile,
    manifest: &ClassManifest,
    subset: Option<&str>,
) -> Result<EvalReport> {
    let videos = annotations.video_ids(subset);
    let unknown = manifest.unknown(
        videos
            .iter()
            .flat_map(|v| annotations.database[v].annotations.iter().map(|a| a.label.as_str()))
            .chain(predictions.results.values().flatten().map(|p| p.label.as_str())),
    );
    if !unknown.is_empty() {
        return Err(Error::UnknownLabels(unknown));
    }
    let mut gt: BTreeMap<usize, Vec<GroundTruth>> = BTreeMap::new();
    let mut preds: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
    for v in &videos {
        for a in &annotations.database[v].annotations {
            gt.entry(manifest.id(&a.label).expect("checked")).or_default().push(GroundTruth {
                video_id: v.clone(),
                segment: Segment {
                    start: a.segment[0],
                    end: a.segment[1],
                },
            });
        }
        for p in predictions.results.get(v).into_iter().flatten() {
            if !p.score.is_finite() {
                return Err(Error::arg("evaluate", format!("video {v}: non-finite score")));
            }
            preds.entry(manifest.id(&p.label).expect("checked")).or_default().push(Prediction {
                video_id: v.clone(),
                segment: Segment {
                    start: p.segment[0],
                    end: p.segment[1],
                },
                score: p.score,
            });
        }
    }
    let ths = thresholds();
    let per_class: Vec<ClassAp> = gt
        .iter()
        .map(|(&c, g)| {
            let p = preds.get(&c).map_or(&[][..], Vec::as_slice);
            ClassAp {
                label: manifest.label(c).expect("resolved").to_string(),
                ap: ths.iter().map(|&t| average_precision(p, g, t)).collect(),
            }
        })
        .collect();
    let map: Vec<f64> = (0..ths.len())
        .map(|i| {
            if per_class.is_empty() {
                0.0
            } else {
                per_class.iter().map(|c| c.ap[i]).sum::<f64>() / per_class.len() as f64
            }
        })
        .collect();
    let average_map = map.iter().sum::<f64>() / map.len() as f64;
    Ok(EvalReport {
        thresholds: ths,
        map,
        average_map,
        per_class,
    })
}
