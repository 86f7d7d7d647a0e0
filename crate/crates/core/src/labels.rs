//! Annotation algebra: temporal IoU, the segment ↔ frame label transform and
//! proposal label compilation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A half-open temporal interval `[start, end)`, in seconds or snippets
/// depending on context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start < end) {
            return Err(Error::DegenerateSegment { start, end });
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// Temporal IoU of two non-degenerate segments.
pub fn tiou(a: Segment, b: Segment) -> Result<f64> {
    for s in [a, b] {
        if !(s.start < s.end) {
            return Err(Error::DegenerateSegment {
                start: s.start,
                end: s.end,
            });
        }
    }
    Ok(tiou_unchecked(a, b))
}

/// Temporal IoU without validation; degenerate inputs yield 0.
pub fn tiou_unchecked(a: Segment, b: Segment) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.len() + b.len() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub start: f64,
    pub end: f64,
    /// 1-based class id; 0 is reserved for background.
    pub class_id: usize,
}

impl Action {
    pub fn segment(&self) -> Segment {
        Segment {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionAnnotation {
    pub video_id: String,
    pub duration: f64,
    pub actions: Vec<Action>,
}

impl ActionAnnotation {
    /// Checks `0 ≤ start < end ≤ duration` and non-zero class ids, and
    /// rejects temporally overlapping actions.
    pub fn validate(&self) -> Result<()> {
        for a in &self.actions {
            if !(0.0 <= a.start && a.start < a.end && a.end <= self.duration) {
                return Err(Error::arg(
                    "annotation",
                    format!(
                        "video {}: action [{}, {}) outside [0, {}] or empty",
                        self.video_id, a.start, a.end, self.duration
                    ),
                ));
            }
            if a.class_id == 0 {
                return Err(Error::arg(
                    "annotation",
                    format!("video {}: class id 0 is background", self.video_id),
                ));
            }
        }
        let mut order: Vec<usize> = (0..self.actions.len()).collect();
        order.sort_by(|&i, &j| self.actions[i].start.total_cmp(&self.actions[j].start));
        for w in order.windows(2) {
            let (a, b) = (&self.actions[w[0]], &self.actions[w[1]]);
            if b.start < a.end {
                let (first, second) = (w[0].min(w[1]), w[0].max(w[1]));
                let (f, s) = (&self.actions[first], &self.actions[second]);
                return Err(Error::OverlappingActions {
                    video_id: self.video_id.clone(),
                    first,
                    first_start: f.start,
                    first_end: f.end,
                    second,
                    second_start: s.start,
                    second_end: s.end,
                });
            }
        }
        Ok(())
    }
}

/// Per-frame class labels plus start/end indicators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    pub classes: Vec<usize>,
    pub starts: Vec<u8>,
    pub ends: Vec<u8>,
}

impl FrameLabels {
    pub fn background(t: usize) -> Self {
        Self {
            classes: vec![0; t],
            starts: vec![0; t],
            ends: vec![0; t],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn starts_f64(&self) -> Vec<f64> {
        self.starts.iter().map(|&v| v as f64).collect()
    }

    pub fn ends_f64(&self) -> Vec<f64> {
        self.ends.iter().map(|&v| v as f64).collect()
    }

    /// Collapses all action classes to 1 (action vs background).
    pub fn binarized(&self) -> Self {
        Self {
            classes: self.classes.iter().map(|&c| usize::from(c > 0)).collect(),
            ..self.clone()
        }
    }
}

/// Frame `t` covers `[t, t+1)·duration/T` and takes the class of the action
/// containing its center time; boundary flags mark each instance's first and
/// last labeled frame.
pub fn segments_to_frame_labels(ann: &ActionAnnotation, t: usize) -> Result<FrameLabels> {
    if t == 0 {
        return Err(Error::arg("segments_to_frame_labels", "T must be >= 1"));
    }
    ann.validate()?;
    let mut labels = FrameLabels::background(t);
    let step = ann.duration / t as f64;
    for a in &ann.actions {
        let mut first = None;
        let mut last = None;
        for f in 0..t {
            let center = (f as f64 + 0.5) * step;
            if center >= a.start && center < a.end {
                labels.classes[f] = a.class_id;
                first.get_or_insert(f);
                last = Some(f);
            }
        }
        if let (Some(s), Some(e)) = (first, last) {
            labels.starts[s] = 1;
            labels.ends[e] = 1;
        }
    }
    Ok(labels)
}

/// Inverse transform: each maximal run of one non-zero class becomes an
/// action over `[i, j+1)·duration/T`. Runs are also split at set start flags
/// and after set end flags, so touching instances of one class survive.
pub fn frame_labels_to_segments(labels: &FrameLabels, duration: f64) -> Vec<Action> {
    let t = labels.len();
    let step = duration / t.max(1) as f64;
    let mut out = Vec::new();
    let mut f = 0;
    while f < t {
        let c = labels.classes[f];
        if c == 0 {
            f += 1;
            continue;
        }
        let start = f;
        let mut end = f;
        while end + 1 < t
            && labels.classes[end + 1] == c
            && labels.starts[end + 1] == 0
            && labels.ends[end] == 0
        {
            end += 1;
        }
        out.push(Action {
            start: start as f64 * step,
            end: (end + 1) as f64 * step,
            class_id: c,
        });
        f = end + 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalLabels {
    /// Best tIoU with any ground-truth action.
    pub reg: Vec<f64>,
    /// `1` exactly when `reg > τ`.
    pub cls: Vec<f64>,
}

impl ProposalLabels {
    pub fn len(&self) -> usize {
        self.reg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reg.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            reg: idx.iter().map(|&i| self.reg[i]).collect(),
            cls: idx.iter().map(|&i| self.cls[i]).collect(),
        }
    }
}

pub fn compile_proposal_labels(
    proposals: &[Segment],
    actions: &[Action],
    tau: f64,
) -> ProposalLabels {
    let reg: Vec<f64> = proposals
        .iter()
        .map(|&p| {
            actions
                .iter()
                .map(|a| tiou_unchecked(p, a.segment()))
                .fold(0.0, f64::max)
        })
        .collect();
    let cls = reg.iter().map(|&r| if r > tau { 1.0 } else { 0.0 }).collect();
    ProposalLabels { reg, cls }
}
