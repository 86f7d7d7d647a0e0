//! Proposal detection network.
//!
//! Proposals come from a sparse `(start, length)` pattern on the snippet
//! grid. Each proposal's feature is pooled from the decoder output, refined by
//! three edge convolutions over a tIoU graph whose edges carry cosine
//! attention, then scored by a two-output sigmoid head.
//!
//! Proposal features are laid out as `C' × M` (one column per proposal) so
//! the same column-wise ops serve snippets and proposals.

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{tiou_unchecked, ProposalLabels, Segment};
use crate::tensor::{Bound, ColumnMix, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    Tiou,
    CenterDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    Graph,
    Conv1x1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdnConfig {
    pub eta: usize,
    pub m0: usize,
    pub k: usize,
    pub theta_p: f64,
    /// Edge threshold in snippets for [`EdgeMode::CenterDistance`].
    pub center_threshold: f64,
    pub align_bins: usize,
    pub edge_mode: EdgeMode,
    pub layer_mode: LayerMode,
    pub layers: usize,
    /// tIoU above which a proposal counts as positive.
    pub tau: f64,
}

impl Default for PdnConfig {
    fn default() -> Self {
        Self {
            eta: 8,
            m0: 50,
            k: 4,
            theta_p: 0.1,
            center_threshold: 8.0,
            align_bins: 32,
            edge_mode: EdgeMode::Tiou,
            layer_mode: LayerMode::Graph,
            layers: 3,
            tau: 0.5,
        }
    }
}

impl PdnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pdn: {m}")));
        if self.eta < 1 {
            return bad("eta must be >= 1");
        }
        if self.m0 < 1 || self.align_bins < 1 || self.layers < 1 {
            return bad("m0, align_bins and layers must be >= 1");
        }
        if !(0.0..1.0).contains(&self.theta_p) || !(0.0..1.0).contains(&self.tau) {
            return bad("theta_p and tau must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Sparse proposal pattern: every `(start, length)` with both multiples of
/// `eta`, `length ≥ eta` and `start + length ≤ L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposalPattern {
    pub seq_len: usize,
    pub eta: usize,
    pub proposals: Vec<(usize, usize)>,
}

impl ProposalPattern {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    /// Proposals as `[start, start + length)` in snippet units.
    pub fn segments(&self) -> Vec<Segment> {
        self.proposals
            .iter()
            .map(|&(i, j)| Segment {
                start: i as f64,
                end: (i + j) as f64,
            })
            .collect()
    }
}

pub fn gen_sparse_pattern(seq_len: usize, eta: usize) -> Result<ProposalPattern> {
    if eta < 1 || eta > seq_len {
        return Err(Error::arg(
            "gen_sparse_pattern",
            format!("need 1 <= eta <= L, got eta={eta}, L={seq_len}"),
        ));
    }
    let proposals = (0..seq_len)
        .step_by(eta)
        .flat_map(|i| (eta..=seq_len - i).step_by(eta).map(move |j| (i, j)))
        .collect();
    Ok(ProposalPattern {
        seq_len,
        eta,
        proposals,
    })
}

/// Sampling matrix for proposal pooling: `bins` equally spaced positions
/// over `[start, end]` in column coordinates, each read by linear
/// interpolation, averaged.
pub fn alignment_mix(t: usize, segments: &[Segment], bins: usize) -> Result<ColumnMix> {
    if t == 0 || bins == 0 {
        return Err(Error::arg("align_features", "T and bins must be >= 1"));
    }
    let cols = segments
        .iter()
        .map(|s| {
            if s.start < 0.0 || s.end > t as f64 {
                return Err(Error::arg(
                    "align_features",
                    format!("proposal [{}, {}) outside [0, {t}]", s.start, s.end),
                ));
            }
            let w = 1.0 / bins as f64;
            let mut col: Vec<(usize, f64)> = Vec::new();
            for b in 0..bins {
                let pos = if bins == 1 {
                    s.center()
                } else {
                    s.start + b as f64 * s.len() / (bins - 1) as f64
                };
                for (src, iw) in ColumnMix::interp_weights(t, pos) {
                    match col.iter_mut().find(|(c, _)| *c == src) {
                        Some(e) => e.1 += w * iw,
                        None => col.push((src, w * iw)),
                    }
                }
            }
            Ok(col)
        })
        .collect::<Result<Vec<_>>>()?;
    ColumnMix::new(t, cols)
}

/// Proposal graph with attention-weighted adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalGraph {
    /// `edges[i]` lists `(j, a_ij)`.
    pub edges: Vec<Vec<(usize, f64)>>,
}

impl ProposalGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges[i].iter().any(|&(k, _)| k == j)
    }

    pub fn attention(&self, i: usize, j: usize) -> f64 {
        self.edges[i]
            .iter()
            .find(|&&(k, _)| k == j)
            .map_or(0.0, |&(_, a)| a)
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    /// Neighbor lists without the attention values.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        self.edges.iter().map(|e| e.iter().map(|&(j, _)| j).collect()).collect()
    }
}

fn cosine(features: &Tensor, i: usize, j: usize) -> f64 {
    let (c, m) = (features.shape()[0], features.shape()[1]);
    let d = features.data();
    let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
    for ch in 0..c {
        let (a, b) = (d[ch * m + i], d[ch * m + j]);
        dot += a * b;
        ni += a * a;
        nj += b * b;
    }
    if ni == 0.0 || nj == 0.0 {
        0.0
    } else {
        (dot / (ni.sqrt() * nj.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Edges between distinct proposals that overlap by more than `theta_p` tIoU
/// (or whose centers lie within `center_threshold`), weighted by the cosine
/// similarity of their features (`C' × M`).
pub fn build_proposal_graph(
    features: &Tensor,
    segments: &[Segment],
    config: &PdnConfig,
) -> Result<ProposalGraph> {
    let (_, m) = features.dims2()?;
    if m != segments.len() {
        return Err(Error::shape(
            "build_proposal_graph",
            format!("{m} feature columns for {} segments", segments.len()),
        ));
    }
    let mut edges = vec![Vec::new(); m];
    for i in 0..m {
        for j in (i + 1)..m {
            let linked = match config.edge_mode {
                EdgeMode::Tiou => tiou_unchecked(segments[i], segments[j]) > config.theta_p,
                EdgeMode::CenterDistance => {
                    (segments[i].center() - segments[j].center()).abs() <= config.center_threshold
                }
            };
            if linked {
                let a = cosine(features, i, j);
                edges[i].push((j, a));
                edges[j].push((i, a));
            }
        }
    }
    for e in &mut edges {
        e.sort_by_key(|&(j, _)| j);
    }
    Ok(ProposalGraph { edges })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledNode {
    pub index: usize,
    /// Node that pulled this one in; `None` for seeds.
    pub parent: Option<usize>,
    pub hop: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SageSample {
    pub nodes: Vec<SampledNode>,
}

impl SageSample {
    pub fn indices(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.index).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

pub fn sample_bound(m0: usize, k: usize) -> usize {
    m0 * (1 + k + k * k)
}

/// The `k` overlapping proposals with highest tIoU to `i` among those
/// accepted by `allow`; ties go to the smaller index.
fn top_k_by_tiou(segments: &[Segment], i: usize, k: usize, allow: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = (0..segments.len())
        .filter(|&j| j != i && allow(j))
        .map(|j| (tiou_unchecked(segments[i], segments[j]), j))
        .filter(|&(t, _)| t > 0.0)
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cand.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Seed-and-expand sampling: `m0/2` positive and `m0/2` negative seeds, each
/// seed's top-`k` tIoU neighbors, then each newly listed neighbor's top-`k`
/// among proposals not yet listed. Every node appears once, so there are at
/// most `m0 (1 + k + k²)`.
pub fn sage_sample<R: Rng>(
    segments: &[Segment],
    labels: &ProposalLabels,
    m0: usize,
    k: usize,
    rng: &mut R,
) -> SageSample {
    let m = segments.len();
    if m <= sample_bound(m0, k) && m0 >= m {
        return SageSample {
            nodes: (0..m)
                .map(|index| SampledNode {
                    index,
                    parent: None,
                    hop: 0,
                })
                .collect(),
        };
    }
    let pos: Vec<usize> = (0..m).filter(|&i| labels.cls[i] > 0.5).collect();
    let neg: Vec<usize> = (0..m).filter(|&i| labels.cls[i] <= 0.5).collect();
    let mut seeds = Vec::new();
    for pool in [&pos, &neg] {
        let take = (m0 / 2).min(pool.len());
        let mut picked: Vec<usize> = index::sample(rng, pool.len(), take)
            .into_iter()
            .map(|p| pool[p])
            .collect();
        picked.sort_unstable();
        seeds.extend(picked);
    }
    let mut listed: HashSet<usize> = seeds.iter().copied().collect();
    let mut nodes: Vec<SampledNode> = seeds
        .iter()
        .map(|&index| SampledNode {
            index,
            parent: None,
            hop: 0,
        })
        .collect();
    for &s in &seeds {
        let first: Vec<usize> = top_k_by_tiou(segments, s, k, |_| true)
            .into_iter()
            .filter(|&nb| listed.insert(nb))
            .collect();
        for &nb in &first {
            nodes.push(SampledNode {
                index: nb,
                parent: Some(s),
                hop: 1,
            });
        }
        for &nb in &first {
            let second = top_k_by_tiou(segments, nb, k, |j| !listed.contains(&j));
            for nb2 in second {
                listed.insert(nb2);
                nodes.push(SampledNode {
                    index: nb2,
                    parent: Some(nb),
                    hop: 2,
                });
            }
        }
    }
    SageSample { nodes }
}

/// Scores `S = sigmoid(W_detᵀ D')` as a `2 × M` tensor: row 0 regresses tIoU,
/// row 1 is the action/background confidence.
#[derive(Debug, Clone)]
pub struct Pdn {
    pub config: PdnConfig,
    align_w: ParamId,
    align_b: ParamId,
    layer_w: Vec<ParamId>,
    det_w: ParamId,
    det_b: ParamId,
}

impl Pdn {
    /// Registers parameters under `pdn.*`.
    pub fn new<R: Rng>(config: PdnConfig, hidden: usize, ps: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = hidden;
        let align_w = ps.add_uniform("pdn.align.weight", &[h, h], h, rng)?;
        let align_b = ps.add_bias("pdn.align.bias", h, h, rng)?;
        let rows = match config.layer_mode {
            LayerMode::Graph => 2 * h,
            LayerMode::Conv1x1 => h,
        };
        let layer_w = (0..config.layers)
            .map(|l| ps.add_uniform(&format!("pdn.layer.{l}.weight"), &[rows, h], rows, rng))
            .collect::<Result<Vec<_>>>()?;
        let det_w = ps.add_uniform("pdn.det.weight", &[h, 2], h, rng)?;
        let det_b = ps.add_bias("pdn.det.bias", 2, h, rng)?;
        Ok(Self {
            config,
            align_w,
            align_b,
            layer_w,
            det_w,
            det_b,
        })
    }

    /// Pools `C' × T` features into `C' × M` proposal features, followed by
    /// a shared linear layer and ReLU.
    pub fn align_features(&self, tape: &mut Tape, p: &Bound, y: Var, segments: &[Segment]) -> Result<Var> {
        let (_, t) = tape.value(y).dims2()?;
        let mix = alignment_mix(t, segments, self.config.align_bins)?;
        let pooled = tape.mix_columns(y, Arc::new(mix))?;
        let lin = tape.linear(pooled, p.var(self.align_w), Some(p.var(self.align_b)))?;
        Ok(tape.relu(lin))
    }

    /// Stacked edge convolutions (or per-proposal 1×1 layers) with ReLU.
    /// Every layer aggregates neighbors with the cosine attention of the
    /// input features, normalized by its absolute row sum; the attention is
    /// part of the differentiated graph.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, features: Var, graph: &ProposalGraph) -> Result<Var> {
        let neighbors = Arc::new(graph.neighbors());
        let mut h = features;
        for &w in &self.layer_w {
            let z = match self.config.layer_mode {
                LayerMode::Graph => {
                    let agg = tape.attention_mix(h, features, neighbors.clone())?;
                    let diff = tape.sub(agg, h)?;
                    let cat = tape.concat_channels(&[h, diff])?;
                    tape.linear(cat, p.var(w), None)?
                }
                LayerMode::Conv1x1 => tape.linear(h, p.var(w), None)?,
            };
            h = tape.relu(z);
        }
        Ok(h)
    }

    pub fn det_head(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
        let logits = tape.linear(features, p.var(self.det_w), Some(p.var(self.det_b)))?;
        Ok(tape.sigmoid(logits))
    }
}

/// `MSE(s1, h_reg) + BCE(s2, h_cls)`, both averaged over proposals.
pub fn det_loss(tape: &mut Tape, scores: Var, labels: &ProposalLabels) -> Result<Var> {
    let m = tape.value(scores).shape()[1];
    if labels.len() != m {
        return Err(Error::shape(
            "det_loss",
            format!("{m} scored proposals, {} labels", labels.len()),
        ));
    }
    let s1 = tape.slice_channels(scores, 0, 1)?;
    let s2 = tape.slice_channels(scores, 1, 1)?;
    let reg = tape.mse(s1, &labels.reg)?;
    let cls = tape.bce(s2, &labels.cls)?;
    tape.add(reg, cls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::compile_proposal_labels;
    use crate::tensor::ATTENTION_EPS;
    use crate::labels::Action;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_pattern(l: usize, eta: usize) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for i in 0..=l {
            for j in 0..=l {
                if i % eta == 0 && j % eta == 0 && j >= eta && i + j <= l {
                    v.push((i, j));
                }
            }
        }
        v
    }

    #[test]
    fn pattern_examples() {
        assert_eq!(gen_sparse_pattern(8, 8).unwrap().proposals, vec![(0, 8)]);
        assert_eq!(
            gen_sparse_pattern(16, 8).unwrap().proposals,
            vec![(0, 8), (0, 16), (8, 8)]
        );
        assert_eq!(gen_sparse_pattern(4, 1).unwrap().len(), 10);
        assert!(gen_sparse_pattern(4, 5).is_err());
        assert!(gen_sparse_pattern(4, 0).is_err());
    }

    #[test]
    fn pattern_matches_exhaustive_filter() {
        for l in 1..=64 {
            for eta in 1..=l {
                assert_eq!(gen_sparse_pattern(l, eta).unwrap().proposals, brute_pattern(l, eta));
            }
        }
    }

    #[test]
    fn alignment_examples() {
        let seg = [Segment { start: 0.0, end: 2.0 }];
        let mix = alignment_mix(4, &seg, 3).unwrap();
        let out = mix.apply(1, &[0.0, 1.0, 2.0, 3.0]);
        assert!((out[0] - 1.0).abs() < 1e-15);

        let segs = gen_sparse_pattern(12, 4).unwrap().segments();
        let mix = alignment_mix(12, &segs, 5).unwrap();
        let out = mix.apply(2, &[[3.5; 12], [-1.0; 12]].concat());
        assert!(out[..segs.len()].iter().all(|&v| (v - 3.5).abs() < 1e-12));
        assert!(out[segs.len()..].iter().all(|&v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn aligned_feature_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        let pdn = Pdn::new(PdnConfig::default(), 5, &mut ps, &mut rng).unwrap();
        for (t, eta) in [(16, 4), (32, 8), (20, 5)] {
            let segs = gen_sparse_pattern(t, eta).unwrap().segments();
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape);
            let y = tape.leaf(Tensor::from_fn2(5, t, |r, c| (r * c) as f64 * 0.01));
            let f = pdn.align_features(&mut tape, &p, y, &segs).unwrap();
            assert_eq!(tape.value(f).shape(), &[5, segs.len()]);
        }
    }

    fn cfg(theta: f64) -> PdnConfig {
        PdnConfig {
            theta_p: theta,
            ..Default::default()
        }
    }

    #[test]
    fn proposal_graph_examples() {
        let segs = gen_sparse_pattern(16, 8).unwrap().segments();
        let f = Tensor::from_fn2(2, 3, |r, c| (r + c + 1) as f64);
        let g = build_proposal_graph(&f, &segs, &cfg(0.1)).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 2));
        assert!(!g.has_edge(0, 2) && !g.has_edge(2, 0));
        assert_eq!(g.num_edges(), 4);

        let disjoint = [Segment { start: 0.0, end: 1.0 }, Segment { start: 2.0, end: 3.0 }];
        let f = Tensor::full(&[2, 2], 1.0);
        assert_eq!(build_proposal_graph(&f, &disjoint, &cfg(0.1)).unwrap().num_edges(), 0);

        let same = [Segment { start: 0.0, end: 4.0 }; 2];
        let g = build_proposal_graph(&f, &same, &cfg(0.1)).unwrap();
        assert!((g.attention(0, 1) - 1.0).abs() < 1e-15);

        let f = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let g = build_proposal_graph(&f, &same, &cfg(0.1)).unwrap();
        assert!(g.has_edge(0, 1));
        assert_eq!(g.attention(0, 1), 0.0);
    }

    #[test]
    fn center_distance_edges() {
        let segs = [
            Segment { start: 0.0, end: 2.0 },
            Segment { start: 4.0, end: 6.0 },
            Segment { start: 40.0, end: 42.0 },
        ];
        let c = PdnConfig {
            edge_mode: EdgeMode::CenterDistance,
            center_threshold: 5.0,
            ..Default::default()
        };
        let g = build_proposal_graph(&Tensor::full(&[1, 3], 1.0), &segs, &c).unwrap();
        assert!(g.has_edge(0, 1));
        assert!(!g.has_edge(0, 2) && !g.has_edge(1, 2));
    }

    proptest! {
        #[test]
        fn proposal_graph_is_symmetric(vals in proptest::collection::vec(-2.0f64..2.0, 20), eta in 1usize..4) {
            let segs = gen_sparse_pattern(8, eta).unwrap().segments();
            let m = segs.len();
            let f = Tensor::from_fn2(2, m, |r, c| vals[(r * 7 + c) % 20]);
            let g = build_proposal_graph(&f, &segs, &cfg(0.1)).unwrap();
            for i in 0..m {
                for &(j, a) in &g.edges[i] {
                    prop_assert!(i != j);
                    prop_assert_eq!(g.attention(j, i), a);
                    prop_assert!(a.abs() <= 1.0);
                }
            }
        }
    }

    fn labels_for(segs: &[Segment], actions: &[(f64, f64)]) -> ProposalLabels {
        let acts: Vec<Action> = actions
            .iter()
            .map(|&(start, end)| Action { start, end, class_id: 1 })
            .collect();
        compile_proposal_labels(segs, &acts, 0.5)
    }

    #[test]
    fn sage_sample_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let segs = gen_sparse_pattern(64, 1).unwrap().segments();
        let labels = labels_for(&segs, &[(3.0, 20.0), (30.0, 50.0)]);
        let s = sage_sample(&segs, &labels, 2, 2, &mut rng);
        assert!(s.len() <= 14);
        assert_eq!(sample_bound(50, 4), 1050);
        let s = sage_sample(&segs, &labels, 50, 4, &mut rng);
        assert!(s.len() <= 1050);

        let small = gen_sparse_pattern(16, 4).unwrap().segments();
        let labels = labels_for(&small, &[(0.0, 8.0)]);
        let s = sage_sample(&small, &labels, 50, 4, &mut rng);
        assert_eq!(s.indices(), (0..small.len()).collect::<Vec<_>>());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sage_sample_structure(seed in any::<u64>(), m0 in 1usize..12, k in 1usize..5, eta in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let segs = gen_sparse_pattern(40, eta).unwrap().segments();
            let labels = labels_for(&segs, &[(4.0, 12.0), (20.0, 36.0)]);
            let s = sage_sample(&segs, &labels, m0, k, &mut rng);
            prop_assert!(s.len() <= sample_bound(m0, k).max(segs.len().min(m0)));
            let idx = s.indices();
            let uniq: HashSet<usize> = idx.iter().copied().collect();
            prop_assert_eq!(uniq.len(), idx.len());
            for n in &s.nodes {
                match n.parent {
                    None => prop_assert_eq!(n.hop, 0),
                    Some(p) => {
                        let parent = s.nodes.iter().find(|q| q.index == p).unwrap();
                        prop_assert!(n.hop <= 2);
                        prop_assert!(parent.hop < n.hop);
                        prop_assert!(tiou_unchecked(segs[p], segs[n.index]) > 0.0);
                    }
                }
            }
            let seeds = s.nodes.iter().filter(|n| n.hop == 0).count();
            prop_assert!(seeds <= m0 / 2 * 2 || s.len() == segs.len());
        }
    }

    /// Three stacked edge-conv layers written out densely.
    fn pdn_dense(x: &Tensor, graph: &ProposalGraph, ws: &[Tensor]) -> Tensor {
        let (c, m) = x.dims2().unwrap();
        let mut h: Vec<Vec<f64>> = (0..m).map(|i| (0..c).map(|ch| x.get2(ch, i)).collect()).collect();
        for w in ws {
            let cout = w.shape()[1];
            let mut next = vec![vec![0.0; cout]; m];
            for i in 0..m {
                let mass: f64 = graph.edges[i].iter().map(|(_, a)| a.abs()).sum();
                let agg: Vec<f64> = (0..c)
                    .map(|ch| {
                        if mass < ATTENTION_EPS {
                            h[i][ch]
                        } else {
                            graph.edges[i].iter().map(|&(j, a)| a * h[j][ch]).sum::<f64>() / mass
                        }
                    })
                    .collect();
                for o in 0..cout {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += w.get2(ch, o) * h[i][ch] + w.get2(c + ch, o) * (agg[ch] - h[i][ch]);
                    }
                    next[i][o] = acc.max(0.0);
                }
            }
            h = next;
        }
        Tensor::from_fn2(h[0].len(), m, |r, i| h[i][r])
    }

    #[test]
    fn pdn_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..30 {
            let m = 1 + trial % 6;
            let c = 3;
            let mut ps = ParamStore::new();
            let pdn = Pdn::new(PdnConfig::default(), c, &mut ps, &mut rng).unwrap();
            let segs: Vec<Segment> = (0..m)
                .map(|_| {
                    let s = rng.random_range(0.0..10.0);
                    Segment { start: s, end: s + rng.random_range(1.0..6.0) }
                })
                .collect();
            let x = Tensor::from_fn2(c, m, |_, _| rng.random_range(0.0..1.0));
            let g = build_proposal_graph(&x, &segs, &cfg(0.1)).unwrap();
            let ws: Vec<Tensor> = (0..3).map(|l| ps.get(ps.id(&format!("pdn.layer.{l}.weight")).unwrap()).clone()).collect();
            let expect = pdn_dense(&x, &g, &ws);
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape);
            let xv = tape.leaf(x);
            let y = pdn.forward(&mut tape, &p, xv, &g).unwrap();
            assert_eq!(tape.value(y).shape(), &[c, m]);
            assert!(tape.value(y).max_abs_diff(&expect) < 1e-10);
        }
    }

    #[test]
    fn edgeless_graph_uses_self_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamStore::new();
        let c = PdnConfig {
            layers: 1,
            ..Default::default()
        };
        let pdn = Pdn::new(c, 2, &mut ps, &mut rng).unwrap();
        let id = ps.id("pdn.layer.0.weight").unwrap();
        ps.get_mut(id)
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 5.0, -3.0, 2.0, 7.0]);
        let segs = [Segment { start: 0.0, end: 1.0 }, Segment { start: 5.0, end: 6.0 }];
        let x = Tensor::from_rows(&[vec![0.5, 2.0], vec![1.5, 3.0]]).unwrap();
        let g = build_proposal_graph(&x, &segs, &cfg(0.1)).unwrap();
        assert_eq!(g.num_edges(), 0);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = pdn.forward(&mut tape, &p, xv, &g).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv1x1_mode_is_per_proposal() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamStore::new();
        let c = PdnConfig {
            layer_mode: LayerMode::Conv1x1,
            ..Default::default()
        };
        let pdn = Pdn::new(c.clone(), 3, &mut ps, &mut rng).unwrap();
        let segs: Vec<Segment> = (0..5).map(|i| Segment { start: i as f64, end: i as f64 + 3.0 }).collect();
        let x = Tensor::from_fn2(3, 5, |_, _| rng.random_range(0.0..1.0));
        // permute every column except 0
        let perm = [0usize, 3, 4, 1, 2];
        let xp = Tensor::from_fn2(3, 5, |r, col| x.get2(r, perm[col]));
        let run = |x: Tensor| {
            let g = build_proposal_graph(&x, &segs, &c).unwrap();
            let mut tape = Tape::new();
            let p = ps.bind(&mut tape);
            let xv = tape.leaf(x);
            let y = pdn.forward(&mut tape, &p, xv, &g).unwrap();
            tape.value(y).clone()
        };
        let (a, b) = (run(x), run(xp));
        for r in 0..3 {
            assert_eq!(a.get2(r, 0), b.get2(r, 0));
        }
    }

    #[test]
    fn det_head_and_loss() {
        let mut tape = Tape::new();
        let labels = ProposalLabels {
            reg: vec![0.7],
            cls: vec![1.0],
        };
        let s = tape.leaf(Tensor::from_rows(&[vec![0.2], vec![0.5]]).unwrap());
        let l = det_loss(&mut tape, s, &labels).unwrap();
        assert!((tape.value(l).item() - (0.25 + 2f64.ln())).abs() < 1e-12);

        let mut tape = Tape::new();
        let labels = ProposalLabels {
            reg: vec![0.3, 0.9],
            cls: vec![0.0, 1.0],
        };
        let s = tape.leaf(Tensor::from_rows(&[vec![0.3, 0.9], vec![0.5, 0.5]]).unwrap());
        let l = det_loss(&mut tape, s, &labels).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut ps = ParamStore::new();
        let pdn = Pdn::new(PdnConfig::default(), 4, &mut ps, &mut rng).unwrap();
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape);
        let f = tape.leaf(Tensor::from_fn2(4, 6, |r, c| (r as f64 - c as f64) * 0.3));
        let s = pdn.det_head(&mut tape, &p, f).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 6]);
        assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
