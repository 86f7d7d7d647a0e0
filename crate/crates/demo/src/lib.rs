//! Browser playground for the label transform, soft-NMS and the sparse
//! proposal graph. Every export takes plain values and returns JSON.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use segtad::labels::{frame_labels_to_segments, segments_to_frame_labels, Action, ActionAnnotation, Segment};
use segtad::pdn::{build_proposal_graph, gen_sparse_pattern, EdgeMode, PdnConfig};
use segtad::pipeline::{soft_nms, Detection};
use segtad::tensor::Tensor;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Larger patterns report their size only; the graph is quadratic.
const MAX_LISTED: usize = 600;

/// Parses lines of whitespace-separated numbers, `n` per line. Blank lines
/// and `#` comments are skipped.
fn parse_rows(text: &str, n: usize) -> Result<Vec<Vec<f64>>, String> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let row: Vec<f64> = l
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| format!("line {}: {e}", i + 1))?;
            if row.len() != n {
                return Err(format!("line {}: expected {n} numbers, got {}", i + 1, row.len()));
            }
            Ok(row)
        })
        .collect()
}

pub fn frame_labels_json(actions: &str, duration: f64, t: usize) -> Result<String, String> {
    let actions = parse_rows(actions, 3)?
        .into_iter()
        .map(|r| {
            if r[2] < 1.0 || r[2].fract() != 0.0 {
                return Err(format!("class id {} must be a positive integer", r[2]));
            }
            Ok(Action {
                start: r[0],
                end: r[1],
                class_id: r[2] as usize,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ann = ActionAnnotation {
        video_id: "demo".into(),
        duration,
        actions,
    };
    let labels = segments_to_frame_labels(&ann, t).map_err(|e| e.to_string())?;
    let back = frame_labels_to_segments(&labels, duration);
    let mut sorted = ann.actions.clone();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    Ok(json!({
        "classes": labels.classes,
        "starts": labels.starts,
        "ends": labels.ends,
        "recovered": back.iter().map(|a| json!([a.start, a.end, a.class_id])).collect::<Vec<_>>(),
        "exact": back == sorted,
    })
    .to_string())
}

pub fn soft_nms_json(detections: &str, sigma: f64, keep: usize) -> Result<String, String> {
    if !(sigma > 0.0) {
        return Err("sigma must be > 0".into());
    }
    // class_id carries the input row; soft_nms itself ignores it
    let dets = parse_rows(detections, 3)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            Segment::new(r[0], r[1]).map_err(|e| e.to_string())?;
            Ok(Detection {
                start: r[0],
                end: r[1],
                score: r[2],
                class_id: i,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let kept = soft_nms(&dets, sigma, keep);
    let rows: Vec<Value> = kept
        .iter()
        .map(|k| json!({"start": k.start, "end": k.end, "before": dets[k.class_id].score, "after": k.score}))
        .collect();
    Ok(json!({ "kept": rows, "dropped": dets.len() - kept.len() }).to_string())
}

/// Attention here is computed on `(center, length)` of each proposal, since
/// the page has no learned features.
pub fn proposal_graph_json(seq_len: usize, eta: usize, theta: f64, center_distance: bool) -> Result<String, String> {
    let pattern = gen_sparse_pattern(seq_len, eta).map_err(|e| e.to_string())?;
    let segments = pattern.segments();
    let m = segments.len();
    if m > MAX_LISTED {
        return Ok(json!({ "count": m, "listed": false }).to_string());
    }
    let config = PdnConfig {
        eta,
        theta_p: theta,
        center_threshold: theta,
        edge_mode: if center_distance {
            EdgeMode::CenterDistance
        } else {
            EdgeMode::Tiou
        },
        ..Default::default()
    };
    let l = seq_len as f64;
    let features = Tensor::from_fn2(2, m, |r, c| {
        if r == 0 {
            segments[c].center() / l
        } else {
            segments[c].len() / l
        }
    });
    let graph = build_proposal_graph(&features, &segments, &config).map_err(|e| e.to_string())?;
    let edges: Vec<Value> = graph
        .edges
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().filter(move |(j, _)| i < *j).map(move |(j, a)| json!([i, j, a])))
        .collect();
    Ok(json!({
        "count": m,
        "edges": graph.num_edges(),
        "listed": true,
        "proposals": pattern.proposals,
        "edge_list": edges,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn frame_labels(actions: &str, duration: f64, t: usize) -> Result<String, JsValue> {
    frame_labels_json(actions, duration, t).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn soft_nms_explore(detections: &str, sigma: f64, keep: usize) -> Result<String, JsValue> {
    soft_nms_json(detections, sigma, keep).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn proposal_graph(seq_len: usize, eta: usize, theta: f64, center_distance: bool) -> Result<String, JsValue> {
    proposal_graph_json(seq_len, eta, theta, center_distance).map_err(|e| JsValue::from_str(&e))
}
