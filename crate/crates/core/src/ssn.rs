//! The 1D semantic segmentation network: a strided-conv encoder, the
//! parallel atrous/graph module (PAG) at the bottleneck, a decoder with a
//! highway connection from the encoder, and the per-frame heads.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::FrameLabels;
use crate::tensor::{Bound, ColumnMix, ParamId, ParamStore, Tape, Tensor, Var};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsnConfig {
    /// Encoder depth L; the bottleneck runs at `T / 2^L`.
    pub layers: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub dilations: Vec<usize>,
    /// Neighbors per node in the snippet graph.
    pub snippet_k: usize,
    /// Number of action classes D (background excluded).
    pub num_classes: usize,
    pub use_graph_branch: bool,
    pub use_atrous_branches: bool,
    pub use_global_path: bool,
    /// Action-vs-background segmentation instead of D+1 classes.
    pub binary_segmentation: bool,
}

impl Default for SsnConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            in_channels: 400,
            hidden: 256,
            dilations: vec![1, 10, 20, 30],
            snippet_k: 8,
            num_classes: 200,
            use_graph_branch: true,
            use_atrous_branches: true,
            use_global_path: true,
            binary_segmentation: false,
        }
    }
}

impl SsnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ssn: {m}")));
        if self.layers < 1 {
            return bad("layers must be >= 1");
        }
        if self.use_atrous_branches && (self.dilations.is_empty() || self.dilations.contains(&0)) {
            return bad("dilations must be non-empty and strictly positive");
        }
        if self.snippet_k < 1 {
            return bad("snippet_k must be >= 1");
        }
        if self.in_channels < 1 || self.hidden < 1 || self.num_classes < 1 {
            return bad("channel and class counts must be >= 1");
        }
        if !(self.use_graph_branch || self.use_atrous_branches || self.use_global_path) {
            return bad("at least one PAG branch must be enabled");
        }
        Ok(())
    }

    /// Number of segmentation classes, background included.
    pub fn seg_classes(&self) -> usize {
        if self.binary_segmentation {
            2
        } else {
            self.num_classes + 1
        }
    }

    /// Number of PAG branches concatenated before the fuse convolution.
    pub fn pag_branches(&self) -> usize {
        usize::from(self.use_graph_branch)
            + if self.use_atrous_branches {
                self.dilations.len()
            } else {
                0
            }
            + usize::from(self.use_global_path)
    }

    pub fn downscale(&self) -> usize {
        1 << self.layers
    }
}

/// Directed k-nearest-neighbor graph over bottleneck snippets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnippetGraph {
    pub neighbors: Vec<Vec<usize>>,
}

impl SnippetGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Row-normalized aggregation: each node averages its neighbors. A node
    /// without neighbors reads itself, so its difference term vanishes.
    pub fn mean_aggregation(&self) -> ColumnMix {
        let n = self.neighbors.len();
        let cols = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                if nb.is_empty() {
                    vec![(i, 1.0)]
                } else {
                    let w = 1.0 / nb.len() as f64;
                    nb.iter().map(|&j| (j, w)).collect()
                }
            })
            .collect();
        ColumnMix::new(n, cols).expect("neighbor indices are in range")
    }
}

/// Similarity is minus the mean squared difference of two snippet features;
/// each node links to its `k` most similar other nodes, ties to the smaller
/// index.
pub fn build_snippet_graph(features: &Tensor, k: usize) -> Result<SnippetGraph> {
    let (c, n) = features.dims2()?;
    let d = features.data();
    let mut neighbors = Vec::with_capacity(n);
    let keep = k.min(n.saturating_sub(1));
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let mse = (0..c)
                    .map(|ch| {
                        let diff = d[ch * n + i] - d[ch * n + j];
                        diff * diff
                    })
                    .sum::<f64>()
                    / c as f64;
                (-mse, j)
            })
            .collect();
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        neighbors.push(cand.into_iter().take(keep).map(|(_, j)| j).collect());
    }
    Ok(SnippetGraph { neighbors })
}

/// One edge convolution: `Wᵀ [x_i ; ā_i − x_i]` per node, with `ā` given by
/// `aggregation`. `w` is `2C × C_out`; no activation.
pub fn edge_conv(tape: &mut Tape, x: Var, aggregation: Arc<ColumnMix>, w: Var) -> Result<Var> {
    let agg = tape.mix_columns(x, aggregation)?;
    let diff = tape.sub(agg, x)?;
    let z = tape.concat_channels(&[x, diff])?;
    tape.linear(z, w, None)
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: ps.add_uniform(&format!("{name}.weight"), &[cout, cin, k], cin * k, rng)?,
            b: ps.add_bias(&format!("{name}.bias"), cout, cin * k, rng)?,
        })
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var, stride: usize, dil: usize, pad: usize) -> Result<Var> {
        tape.conv1d(x, p.var(self.w), Some(p.var(self.b)), stride, dil, pad)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng>(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: ps.add_uniform(&format!("{name}.weight"), &[cin, cout], cin, rng)?,
            b: ps.add_bias(&format!("{name}.bias"), cout, cin, rng)?,
        })
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Batch statistics gathered in training mode, to be folded into the
/// running averages after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct BoundaryHead {
    conv: Conv,
    out: Linear,
}

/// Per-video outputs of the segmentation network.
#[derive(Debug, Clone, Copy)]
pub struct SsnOutput {
    /// Decoder features `C' × T`.
    pub features: Var,
    /// Per-frame class posterior `(D+1) × T` (or `2 × T` in binary mode).
    pub probs: Var,
    pub start: Var,
    pub end: Var,
}

#[derive(Debug, Clone)]
pub struct Ssn {
    pub config: SsnConfig,
    encoder: Vec<Conv>,
    graph_w: Option<ParamId>,
    atrous: Vec<Conv>,
    global: Option<Conv>,
    pag_fuse: Conv,
    highway: Conv,
    highway_bn: BatchNorm,
    dec_fuse: Conv,
    seg_head: Linear,
    start_head: BoundaryHead,
    end_head: BoundaryHead,
}

impl Ssn {
    /// Registers all parameters under `ssn.*`.
    pub fn new<R: Rng>(config: SsnConfig, ps: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let encoder = (0..config.layers)
            .map(|l| {
                let cin = if l == 0 { config.in_channels } else { h };
                Conv::new(ps, &format!("ssn.encoder.{l}"), h, cin, 3, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let graph_w = if config.use_graph_branch {
            Some(ps.add_uniform("ssn.pag.graph.weight", &[2 * h, h], 2 * h, rng)?)
        } else {
            None
        };
        let atrous = if config.use_atrous_branches {
            config
                .dilations
                .iter()
                .enumerate()
                .map(|(b, _)| Conv::new(ps, &format!("ssn.pag.atrous.{b}"), h, h, 3, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let global = if config.use_global_path {
            Some(Conv::new(ps, "ssn.pag.global", h, h, 1, rng)?)
        } else {
            None
        };
        let pag_fuse = Conv::new(ps, "ssn.pag.fuse", h, config.pag_branches() * h, 1, rng)?;
        let highway = Conv::new(ps, "ssn.decoder.highway", h, h, 1, rng)?;
        let highway_bn = BatchNorm {
            gamma: ps.add("ssn.decoder.highway_bn.weight", Tensor::full(&[h], 1.0))?,
            beta: ps.add_zeros("ssn.decoder.highway_bn.bias", &[h])?,
            running_mean: ps.add_buffer("ssn.decoder.highway_bn.running_mean", Tensor::zeros(&[h]))?,
            running_var: ps.add_buffer("ssn.decoder.highway_bn.running_var", Tensor::full(&[h], 1.0))?,
        };
        let dec_fuse = Conv::new(ps, "ssn.decoder.fuse", h, 2 * h, 3, rng)?;
        let seg_head = Linear::new(ps, "ssn.seg_head", h, config.seg_classes(), rng)?;
        let mut boundary = |name: &str| -> Result<BoundaryHead> {
            Ok(BoundaryHead {
                conv: Conv::new(ps, &format!("ssn.{name}_head.conv"), h, h, 3, rng)?,
                out: Linear::new(ps, &format!("ssn.{name}_head.out"), h, 1, rng)?,
            })
        };
        let start_head = boundary("start")?;
        let end_head = boundary("end")?;
        Ok(Self {
            config,
            encoder,
            graph_w,
            atrous,
            global,
            pag_fuse,
            highway,
            highway_bn,
            dec_fuse,
            seg_head,
            start_head,
            end_head,
        })
    }

    pub fn num_pag_branches(&self) -> usize {
        usize::from(self.graph_w.is_some()) + self.atrous.len() + usize::from(self.global.is_some())
    }

    /// L strided convolutions with ReLU. Returns the bottleneck features and
    /// the activation after the second layer (the first when L = 1).
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let (cin, t) = tape.value(x).dims2()?;
        if cin != self.config.in_channels {
            return Err(Error::shape(
                "encode",
                format!("input channels: expected {}, got {cin}", self.config.in_channels),
            ));
        }
        let f = self.config.downscale();
        if t == 0 || t % f != 0 {
            return Err(Error::shape(
                "encode",
                format!("time: T={t} is not divisible by 2^L={f}"),
            ));
        }
        let mut h = x;
        let mut skip = x;
        for (l, conv) in self.encoder.iter().enumerate() {
            let c = conv.apply(tape, p, h, 2, 1, 1)?;
            h = tape.relu(c);
            if l == 1.min(self.encoder.len() - 1) {
                skip = h;
            }
        }
        Ok((h, skip))
    }

    pub fn pag_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (_, n) = tape.value(x).dims2()?;
        let mut branches = Vec::with_capacity(self.num_pag_branches());
        if let Some(w) = self.graph_w {
            let graph = if n >= 2 {
                build_snippet_graph(tape.value(x), self.config.snippet_k)?
            } else {
                SnippetGraph {
                    neighbors: vec![Vec::new(); n],
                }
            };
            let gc = edge_conv(tape, x, Arc::new(graph.mean_aggregation()), p.var(w))?;
            branches.push(tape.relu(gc));
        }
        for (conv, &d) in self.atrous.iter().zip(&self.config.dilations) {
            let a = conv.apply(tape, p, x, 1, d, d)?;
            branches.push(tape.relu(a));
        }
        if let Some(conv) = &self.global {
            let pooled = tape.global_avg_pool(x)?;
            let g = conv.apply(tape, p, pooled, 1, 1, 0)?;
            branches.push(tape.linear_interp_resize(g, n)?);
        }
        let cat = tape.concat_channels(&branches)?;
        let fused = self.pag_fuse.apply(tape, p, cat, 1, 1, 0)?;
        Ok(tape.relu(fused))
    }

    /// Highway branch for a batch: 1×1 conv, batch norm over the whole batch
    /// (videos joined along time), ReLU. Returns one output per input.
    pub fn highway(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ps: &ParamStore,
        skips: &[Var],
        train: bool,
    ) -> Result<(Vec<Var>, Option<BnUpdate>)> {
        let convs = skips
            .iter()
            .map(|&s| self.highway.apply(tape, p, s, 1, 1, 0))
            .collect::<Result<Vec<_>>>()?;
        let lens: Vec<usize> = convs.iter().map(|&c| tape.value(c).shape()[1]).collect();
        let joined = if convs.len() == 1 {
            convs[0]
        } else {
            tape.concat_time(&convs)?
        };
        let bn = &self.highway_bn;
        let (normed, update) = if train {
            let (v, mean, var) = tape.batchnorm1d_train(joined, p.var(bn.gamma), p.var(bn.beta))?;
            (v, Some(BnUpdate { mean, var }))
        } else {
            let v = tape.batchnorm1d_eval(
                joined,
                p.var(bn.gamma),
                p.var(bn.beta),
                ps.get(bn.running_mean).data(),
                ps.get(bn.running_var).data(),
            )?;
            (v, None)
        };
        let act = tape.relu(normed);
        if convs.len() == 1 {
            return Ok((vec![act], update));
        }
        let mut out = Vec::with_capacity(lens.len());
        let mut off = 0;
        for len in lens {
            out.push(tape.slice_time(act, off, len)?);
            off += len;
        }
        Ok((out, update))
    }

    /// Upsamples the PAG output to `t`, fuses it with the highway features.
    pub fn decode(&self, tape: &mut Tape, p: &Bound, bottleneck: Var, highway: Var, t: usize) -> Result<Var> {
        let up = tape.linear_interp_resize(bottleneck, t)?;
        let hw = tape.linear_interp_resize(highway, t)?;
        let cat = tape.concat_channels(&[up, hw])?;
        let fused = self.dec_fuse.apply(tape, p, cat, 1, 1, 1)?;
        Ok(tape.relu(fused))
    }

    pub fn seg_head(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        let logits = self.seg_head.apply(tape, p, y)?;
        tape.softmax_channels(logits)
    }

    fn boundary(&self, tape: &mut Tape, p: &Bound, head: &BoundaryHead, y: Var) -> Result<Var> {
        let c = head.conv.apply(tape, p, y, 1, 1, 1)?;
        let r = tape.relu(c);
        let o = head.out.apply(tape, p, r)?;
        Ok(tape.sigmoid(o))
    }

    pub fn boundary_heads(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<(Var, Var)> {
        Ok((
            self.boundary(tape, p, &self.start_head, y)?,
            self.boundary(tape, p, &self.end_head, y)?,
        ))
    }

    /// Full forward pass over a batch of `C_in × T` inputs.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        p: &Bound,
        ps: &ParamStore,
        inputs: &[Var],
        train: bool,
    ) -> Result<(Vec<SsnOutput>, Option<BnUpdate>)> {
        if inputs.is_empty() {
            return Err(Error::arg("ssn", "empty batch"));
        }
        let mut bottlenecks = Vec::with_capacity(inputs.len());
        let mut skips = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let (enc, skip) = self.encode(tape, p, x)?;
            bottlenecks.push(self.pag_forward(tape, p, enc)?);
            skips.push(skip);
        }
        let (highways, update) = self.highway(tape, p, ps, &skips, train)?;
        let mut outs = Vec::with_capacity(inputs.len());
        for ((&x, &b), &hw) in inputs.iter().zip(&bottlenecks).zip(&highways) {
            let t = tape.value(x).shape()[1];
            let y = self.decode(tape, p, b, hw, t)?;
            let probs = self.seg_head(tape, p, y)?;
            let (start, end) = self.boundary_heads(tape, p, y)?;
            outs.push(SsnOutput {
                features: y,
                probs,
                start,
                end,
            });
        }
        Ok((outs, update))
    }

    pub fn apply_bn_update(&self, ps: &mut ParamStore, update: &BnUpdate) {
        let bn = &self.highway_bn;
        for (id, batch) in [(bn.running_mean, &update.mean), (bn.running_var, &update.var)] {
            for (r, b) in ps.get_mut(id).data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Segmentation cross-entropy against per-frame labels.
    pub fn seg_loss(&self, tape: &mut Tape, probs: Var, labels: &FrameLabels) -> Result<Var> {
        if self.config.binary_segmentation {
            tape.nll_clamped(probs, &labels.binarized().classes)
        } else {
            tape.nll_clamped(probs, &labels.classes)
        }
    }
}

/// Sum of the start and end binary cross-entropies, each averaged over T.
pub fn aux_loss(tape: &mut Tape, start: Var, end: Var, labels: &FrameLabels) -> Result<Var> {
    let ls = tape.bce(start, &labels.starts_f64())?;
    let le = tape.bce(end, &labels.ends_f64())?;
    tape.add(ls, le)
}
