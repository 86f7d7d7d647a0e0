//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value and enough saved state to
//! run its adjoint. Inputs always precede outputs, so walking the node list
//! backwards from the loss is a reverse topological order that visits each
//! node exactly once.

use std::sync::Arc;

use super::{ColumnMix, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Attention mass below which [`Tape::attention_mix`] passes a column through.
pub const ATTENTION_EPS: f64 = 1e-12;
const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanSquare(Var),
    ConcatChannels(Vec<Var>),
    ConcatTime(Vec<Var>),
    SliceChannels { x: Var, start: usize },
    SliceTime { x: Var, start: usize },
    Mix { x: Var, mix: Arc<ColumnMix> },
    AttnMix {
        x: Var,
        f: Var,
        neighbors: Arc<Vec<Vec<usize>>>,
        cos: Vec<Vec<f64>>,
        mass: Vec<f64>,
    },
    Nll { p: Var, targets: Vec<usize> },
    Bce { p: Var, targets: Vec<f64> },
    Mse { p: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected 2-D input, got {s:?}"))),
    }
}

fn nonempty(op: &'static str, t: &Tensor) -> Result<()> {
    if t.numel() == 0 {
        Err(Error::arg(op, "empty tensor"))
    } else {
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input. Gradients are still computed for it, which is what
    /// the finite-difference checks rely on.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).detached(), Op::Param);
        self.params.push((v, id));
        v
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.params.iter().copied()
    }

    /// First node whose value contains NaN or infinity, with a description.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| format!("node {i} ({}) shape {:?}", op_name(&n.op), n.value.shape()))
    }

    // ---- ops -----------------------------------------------------------

    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv1d";
        let xv = self.value(x);
        let (cin, t) = dims2(OP, xv)?;
        let (cout, wcin, k) = match self.value(w).shape() {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::shape(OP, format!("weight must be 3-D, got {s:?}"))),
        };
        if wcin != cin {
            return Err(Error::shape(
                OP,
                format!("input channels: input has {cin}, weight expects {wcin}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    OP,
                    format!("bias: expected [{cout}], got {:?}", self.value(b).shape()),
                ));
            }
        }
        if k == 0 || stride == 0 || dilation == 0 {
            return Err(Error::arg(OP, "kernel, stride and dilation must be >= 1"));
        }
        let extent = dilation * (k - 1) + 1;
        if extent > t + 2 * padding {
            return Err(Error::shape(
                OP,
                format!("time: kernel extent {extent} exceeds padded length {}", t + 2 * padding),
            ));
        }
        let tout = (t + 2 * padding - extent) / stride + 1;
        let xd = xv.data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; cout * tout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for o in 0..cout {
                out[o * tout..(o + 1) * tout].fill(bd[o]);
            }
        }
        for o in 0..cout {
            let orow = &mut out[o * tout..(o + 1) * tout];
            for i in 0..cin {
                let xrow = &xd[i * t..(i + 1) * t];
                for j in 0..k {
                    let wv = wd[(o * cin + i) * k + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let shift = (j * dilation) as isize - padding as isize;
                    for (to, ov) in orow.iter_mut().enumerate() {
                        let pos = (to * stride) as isize + shift;
                        if pos >= 0 && (pos as usize) < t {
                            *ov += wv * xrow[pos as usize];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, tout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                dilation,
                padding,
            },
        ))
    }

    /// `x: [Cin × n]`, `w: [Cin × Cout]`, optional `b: [Cout]` → `wᵀ x + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let (cin, n) = dims2(OP, self.value(x))?;
        let (wcin, cout) = dims2(OP, self.value(w))?;
        if wcin != cin {
            return Err(Error::shape(
                OP,
                format!("input channels: input has {cin}, weight expects {wcin}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(OP, format!("bias must be [{cout}]")));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; cout * n];
        for i in 0..cin {
            let xrow = &xd[i * n..(i + 1) * n];
            for o in 0..cout {
                let wv = wd[i * cout + o];
                if wv == 0.0 {
                    continue;
                }
                let orow = &mut out[o * n..(o + 1) * n];
                orow.iter_mut().zip(xrow).for_each(|(a, b)| *a += wv * b);
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for o in 0..cout {
                out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += bd[o]);
            }
        }
        let value = Tensor::new(vec![cout, n], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "matmul";
        let (m, k) = dims2(OP, self.value(a))?;
        let (k2, n) = dims2(OP, self.value(b))?;
        if k != k2 {
            return Err(Error::shape(OP, format!("inner dimension: {k} vs {k2}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(a))?;
        let out = transpose_raw(self.value(a).data(), r, c);
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the channel axis of a `C × T` tensor, per time step.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        nonempty("softmax_channels", xv)?;
        let (c, t) = dims2("softmax_channels", xv)?;
        let xd = xv.data();
        let mut out = vec![0.0; c * t];
        for col in 0..t {
            let max = (0..c).map(|r| xd[r * t + col]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in 0..c {
                let e = (xd[r * t + col] - max).exp();
                out[r * t + col] = e;
                z += e;
            }
            for r in 0..c {
                out[r * t + col] /= z;
            }
        }
        let value = Tensor::new(vec![c, t], out)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// Batch normalization of a `C × N` tensor, statistics per channel over
    /// the N columns (callers concatenate a batch along time). Returns the
    /// output together with the batch mean and unbiased variance, which the
    /// caller folds into its running statistics.
    pub fn batchnorm1d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        const OP: &str = "batchnorm1d";
        let xv = self.value(x);
        nonempty(OP, xv)?;
        let (c, n) = dims2(OP, xv)?;
        let xd = xv.data().to_vec();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let row = &xd[ch * n..(ch + 1) * n];
            let m = row.iter().sum::<f64>() / n as f64;
            mean[ch] = m;
            var[ch] = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let unbiased = var
            .iter()
            .map(|v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { *v })
            .collect();
        let v = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((v, mean, unbiased))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm1d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let inv_std = running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<Var> {
        const OP: &str = "batchnorm1d";
        let (c, n) = dims2(OP, self.value(x))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(OP, format!("{name} must be [{c}]")));
            }
        }
        if mean.len() != c || inv_std.len() != c {
            return Err(Error::shape(OP, format!("statistics must have {c} channels")));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; c * n];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for t in 0..n {
                let h = (xd[ch * n + t] - mean[ch]) * inv_std[ch];
                xhat[ch * n + t] = h;
                out[ch * n + t] = g[ch] * h + b[ch];
            }
        }
        let value = Tensor::new(vec![c, n], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean of squared entries, as a scalar.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let s = d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanSquare(a))
    }

    /// Sum of several scalars with weights; zero weights are skipped.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            if w == 0.0 {
                continue;
            }
            let term = if w == 1.0 { v } else { self.scale(v, w) };
            acc = Some(match acc {
                None => term,
                Some(a) => self.add(a, term)?,
            });
        }
        Ok(acc.unwrap_or_else(|| self.leaf(Tensor::scalar(0.0))))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        if parts.is_empty() {
            return Err(Error::arg(OP, "nothing to concatenate"));
        }
        let (_, t) = dims2(OP, self.value(parts[0]))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, tp) = dims2(OP, self.value(p))?;
            if tp != t {
                return Err(Error::shape(OP, format!("time: {t} vs {tp}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, t], data)?;
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec())))
    }

    pub fn concat_time(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_time";
        if parts.is_empty() {
            return Err(Error::arg(OP, "nothing to concatenate"));
        }
        let (c, _) = dims2(OP, self.value(parts[0]))?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let (cp, t) = dims2(OP, self.value(p))?;
            if cp != c {
                return Err(Error::shape(OP, format!("channels: {c} vs {cp}")));
            }
            lens.push(t);
        }
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(c * total);
        for ch in 0..c {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(ch));
            }
        }
        let value = Tensor::new(vec![c, total], data)?;
        Ok(self.push(value, Op::ConcatTime(parts.to_vec())))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, t) = dims2("slice_channels", self.value(x))?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("rows {start}..{} of {c}", start + len),
            ));
        }
        let data = self.value(x).data()[start * t..(start + len) * t].to_vec();
        let value = Tensor::new(vec![len, t], data)?;
        Ok(self.push(value, Op::SliceChannels { x, start }))
    }

    pub fn slice_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, t) = dims2("slice_time", self.value(x))?;
        if start + len > t || len == 0 {
            return Err(Error::shape(
                "slice_time",
                format!("columns {start}..{} of {t}", start + len),
            ));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(c * len);
        for ch in 0..c {
            data.extend_from_slice(&xv.row(ch)[start..start + len]);
        }
        let value = Tensor::new(vec![c, len], data)?;
        Ok(self.push(value, Op::SliceTime { x, start }))
    }

    pub fn mix_columns(&mut self, x: Var, mix: Arc<ColumnMix>) -> Result<Var> {
        let (c, n) = dims2("mix_columns", self.value(x))?;
        if n != mix.in_cols() {
            return Err(Error::shape(
                "mix_columns",
                format!("time: input has {n} columns, map expects {}", mix.in_cols()),
            ));
        }
        let out = mix.apply(c, self.value(x).data());
        let value = Tensor::new(vec![c, mix.out_cols()], out)?;
        Ok(self.push(value, Op::Mix { x, mix }))
    }

    /// Attention-weighted neighbor mean. Column `i` of the output is
    /// `Σ_j a_ij x_j / Σ_j |a_ij|` over `neighbors[i]`, where `a_ij` is the
    /// cosine similarity of columns `i` and `j` of `f` (0 when either is the
    /// zero vector). Columns whose attention mass is below
    /// [`ATTENTION_EPS`] pass `x_i` through. Differentiable in `x` and `f`.
    pub fn attention_mix(&mut self, x: Var, f: Var, neighbors: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        const OP: &str = "attention_mix";
        let (c, m) = dims2(OP, self.value(x))?;
        let (cf, mf) = dims2(OP, self.value(f))?;
        if mf != m || neighbors.len() != m {
            return Err(Error::shape(
                OP,
                format!("columns: x has {m}, f has {mf}, graph has {}", neighbors.len()),
            ));
        }
        if neighbors.iter().flatten().any(|&j| j >= m) {
            return Err(Error::arg(OP, "neighbor index out of range"));
        }
        let fd = self.value(f).data();
        let norms = column_norms(fd, cf, m);
        let cos: Vec<Vec<f64>> = neighbors
            .iter()
            .enumerate()
            .map(|(i, nb)| nb.iter().map(|&j| cosine_cols(fd, cf, m, &norms, i, j)).collect())
            .collect();
        let mass: Vec<f64> = cos.iter().map(|r| r.iter().map(|a| a.abs()).sum()).collect();
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * m];
        for i in 0..m {
            if mass[i] < ATTENTION_EPS {
                for ch in 0..c {
                    out[ch * m + i] = xd[ch * m + i];
                }
                continue;
            }
            for (&j, &a) in neighbors[i].iter().zip(&cos[i]) {
                let w = a / mass[i];
                for ch in 0..c {
                    out[ch * m + i] += w * xd[ch * m + j];
                }
            }
        }
        let value = Tensor::new(vec![c, m], out)?;
        Ok(self.push(
            value,
            Op::AttnMix {
                x,
                f,
                neighbors,
                cos,
                mass,
            },
        ))
    }

    /// Mean over time, `C × T → C × 1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (_, t) = dims2("global_avg_pool", self.value(x))?;
        let mix = ColumnMix::mean_pool(t)?;
        self.mix_columns(x, Arc::new(mix))
    }

    /// Endpoint-aligned linear interpolation along time to `target_t` steps.
    pub fn linear_interp_resize(&mut self, x: Var, target_t: usize) -> Result<Var> {
        let (_, t) = dims2("linear_interp_resize", self.value(x))?;
        if target_t < 1 {
            return Err(Error::arg("linear_interp_resize", "target_T must be >= 1"));
        }
        let mix = ColumnMix::linear_resize(t, target_t)?;
        self.mix_columns(x, Arc::new(mix))
    }

    /// `−(1/T) Σ_t log P[target_t, t]` with probabilities clamped away from 0.
    pub fn nll_clamped(&mut self, p: Var, targets: &[usize]) -> Result<Var> {
        const OP: &str = "nll";
        let (c, t) = dims2(OP, self.value(p))?;
        if targets.len() != t {
            return Err(Error::shape(OP, format!("time: {t} predictions, {} labels", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&b| b >= c) {
            return Err(Error::arg(OP, format!("label {bad} out of range for {c} classes")));
        }
        let pd = self.value(p).data();
        let loss = -targets
            .iter()
            .enumerate()
            .map(|(col, &b)| pd[b * t + col].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
            .sum::<f64>()
            / t as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                p,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy over all entries of `p`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pd = self.value(p).data();
        if pd.len() != targets.len() {
            return Err(Error::shape("bce", format!("{} predictions, {} targets", pd.len(), targets.len())));
        }
        nonempty("bce", self.value(p))?;
        let loss = -pd
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                y * p.ln() + (1.0 - y) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / pd.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean squared error against fixed targets.
    pub fn mse(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pd = self.value(p).data();
        if pd.len() != targets.len() {
            return Err(Error::shape("mse", format!("{} predictions, {} targets", pd.len(), targets.len())));
        }
        nonempty("mse", self.value(p))?;
        let loss = pd
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / pd.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                p,
                targets: targets.to_vec(),
            },
        ))
    }

    // ---- backward ------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::Conv1d {
                x,
                w,
                b,
                stride,
                dilation,
                padding,
            } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (cin, t) = (xv.shape()[0], xv.shape()[1]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let tout = out.shape()[1];
                let xd = xv.data();
                let wd = wv.data();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                for o in 0..cout {
                    let grow = &g[o * tout..(o + 1) * tout];
                    for ci in 0..cin {
                        let xrow = &xd[ci * t..(ci + 1) * t];
                        for j in 0..k {
                            let widx = (o * cin + ci) * k + j;
                            let wvj = wd[widx];
                            let shift = (j * dilation) as isize - padding as isize;
                            let mut acc = 0.0;
                            for (to, &gv) in grow.iter().enumerate() {
                                let pos = (to * stride) as isize + shift;
                                if pos >= 0 && (pos as usize) < t {
                                    let p = pos as usize;
                                    acc += gv * xrow[p];
                                    dx[ci * t + p] += gv * wvj;
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
                accumulate(grads, x, dx);
                accumulate(grads, w, dw);
                if let Some(b) = b {
                    let db = (0..cout).map(|o| g[o * tout..(o + 1) * tout].iter().sum()).collect();
                    accumulate(grads, b, db);
                }
            }
            &Op::Linear { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (cin, n) = (xv.shape()[0], xv.shape()[1]);
                let cout = wv.shape()[1];
                let xd = xv.data();
                let wd = wv.data();
                let mut dx = vec![0.0; cin * n];
                let mut dw = vec![0.0; cin * cout];
                for ci in 0..cin {
                    let xrow = &xd[ci * n..(ci + 1) * n];
                    let dxrow = &mut dx[ci * n..(ci + 1) * n];
                    for o in 0..cout {
                        let grow = &g[o * n..(o + 1) * n];
                        let wvv = wd[ci * cout + o];
                        let mut acc = 0.0;
                        for t in 0..n {
                            acc += grow[t] * xrow[t];
                            dxrow[t] += grow[t] * wvv;
                        }
                        dw[ci * cout + o] = acc;
                    }
                }
                accumulate(grads, x, dx);
                accumulate(grads, w, dw);
                if let Some(b) = b {
                    let db = (0..cout).map(|o| g[o * n..(o + 1) * n].iter().sum()).collect();
                    accumulate(grads, b, db);
                }
            }
            &Op::Matmul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                let bt = transpose_raw(self.value(b).data(), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(self.value(a).data(), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                accumulate(grads, a, da);
                accumulate(grads, b, db);
            }
            &Op::Transpose(a) => {
                let (r, c) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                accumulate(grads, a, transpose_raw(g, c, r));
            }
            &Op::Relu(x) => {
                let d = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = out.data().iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                accumulate(grads, x, d);
            }
            &Op::Softmax(x) => {
                let (c, t) = (out.shape()[0], out.shape()[1]);
                let s = out.data();
                let mut d = vec![0.0; c * t];
                for col in 0..t {
                    let dot: f64 = (0..c).map(|r| s[r * t + col] * g[r * t + col]).sum();
                    for r in 0..c {
                        d[r * t + col] = s[r * t + col] * (g[r * t + col] - dot);
                    }
                }
                accumulate(grads, x, d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (c, n) = (out.shape()[0], out.shape()[1]);
                let gd = self.value(*gamma).data();
                let mut dx = vec![0.0; c * n];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let gr = &g[ch * n..(ch + 1) * n];
                    let hr = &xhat[ch * n..(ch + 1) * n];
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gh: f64 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                    dgamma[ch] = sum_gh;
                    dbeta[ch] = sum_g;
                    let scale = gd[ch] * inv_std[ch];
                    for t in 0..n {
                        dx[ch * n + t] = if *batch_stats {
                            scale * (gr[t] - sum_g / n as f64 - hr[t] * sum_gh / n as f64)
                        } else {
                            scale * gr[t]
                        };
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            &Op::Add(a, b) => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            &Op::Scale(a, s) => accumulate(grads, a, g.iter().map(|v| v * s).collect()),
            &Op::Sum(a) => accumulate(grads, a, vec![g[0]; self.value(a).numel()]),
            &Op::MeanSquare(a) => {
                let d = self.value(a).data();
                let f = 2.0 * g[0] / d.len().max(1) as f64;
                accumulate(grads, a, d.iter().map(|v| f * v).collect());
            }
            Op::ConcatChannels(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    accumulate(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatTime(parts) => {
                let (c, total) = (out.shape()[0], out.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p).shape()[1];
                    let mut d = Vec::with_capacity(c * t);
                    for ch in 0..c {
                        d.extend_from_slice(&g[ch * total + off..ch * total + off + t]);
                    }
                    accumulate(grads, p, d);
                    off += t;
                }
            }
            &Op::SliceChannels { x, start } => {
                let t = out.shape()[1];
                let mut d = vec![0.0; self.value(x).numel()];
                d[start * t..start * t + g.len()].copy_from_slice(g);
                accumulate(grads, x, d);
            }
            &Op::SliceTime { x, start } => {
                let (c, len) = (out.shape()[0], out.shape()[1]);
                let t = self.value(x).shape()[1];
                let mut d = vec![0.0; c * t];
                for ch in 0..c {
                    d[ch * t + start..ch * t + start + len].copy_from_slice(&g[ch * len..(ch + 1) * len]);
                }
                accumulate(grads, x, d);
            }
            Op::Mix { x, mix } => {
                let c = out.shape()[0];
                accumulate(grads, *x, mix.apply_transpose(c, g));
            }
            Op::AttnMix {
                x,
                f,
                neighbors,
                cos,
                mass,
            } => {
                let (c, m) = (out.shape()[0], out.shape()[1]);
                let xd = self.value(*x).data();
                let fv = self.value(*f);
                let cf = fv.shape()[0];
                let fd = fv.data();
                let norms = column_norms(fd, cf, m);
                let od = out.data();
                let mut dx = vec![0.0; c * m];
                let mut df = vec![0.0; cf * m];
                for i in 0..m {
                    if mass[i] < ATTENTION_EPS {
                        for ch in 0..c {
                            dx[ch * m + i] += g[ch * m + i];
                        }
                        continue;
                    }
                    for (&j, &a) in neighbors[i].iter().zip(&cos[i]) {
                        let w = a / mass[i];
                        let sign = if a > 0.0 { 1.0 } else if a < 0.0 { -1.0 } else { 0.0 };
                        // d out_i / d a_ij = (x_j − sign(a_ij) out_i) / mass_i
                        let mut ga = 0.0;
                        for ch in 0..c {
                            let gi = g[ch * m + i];
                            dx[ch * m + j] += w * gi;
                            ga += gi * (xd[ch * m + j] - sign * od[ch * m + i]);
                        }
                        ga /= mass[i];
                        if ga == 0.0 || norms[i] == 0.0 || norms[j] == 0.0 {
                            continue;
                        }
                        // d cos(f_i, f_j) / d f_i = (u_j − cos·u_i) / |f_i|, symmetric in j
                        for ch in 0..cf {
                            let ui = fd[ch * m + i] / norms[i];
                            let uj = fd[ch * m + j] / norms[j];
                            df[ch * m + i] += ga * (uj - a * ui) / norms[i];
                            df[ch * m + j] += ga * (ui - a * uj) / norms[j];
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *f, df);
            }
            Op::Nll { p, targets } => {
                let pv = self.value(*p);
                let t = pv.shape()[1];
                let mut d = vec![0.0; pv.numel()];
                for (col, &b) in targets.iter().enumerate() {
                    let v = pv.data()[b * t + col];
                    if v > PROB_CLAMP && v < 1.0 - PROB_CLAMP {
                        d[b * t + col] = -g[0] / (v * t as f64);
                    }
                }
                accumulate(grads, *p, d);
            }
            Op::Bce { p, targets } => {
                let pd = self.value(*p).data();
                let n = pd.len() as f64;
                let d = pd
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                            g[0] * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(grads, *p, d);
            }
            Op::Mse { p, targets } => {
                let pd = self.value(*p).data();
                let n = pd.len() as f64;
                let d = pd
                    .iter()
                    .zip(targets)
                    .map(|(p, y)| g[0] * 2.0 * (p - y) / n)
                    .collect();
                accumulate(grads, *p, d);
            }
        }
    }
}

fn column_norms(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols)
        .map(|j| (0..rows).map(|r| d[r * cols + j] * d[r * cols + j]).sum::<f64>().sqrt())
        .collect()
}

fn cosine_cols(d: &[f64], rows: usize, cols: usize, norms: &[f64], i: usize, j: usize) -> f64 {
    if norms[i] == 0.0 || norms[j] == 0.0 {
        return 0.0;
    }
    let dot: f64 = (0..rows).map(|r| d[r * cols + i] * d[r * cols + j]).sum();
    dot / (norms[i] * norms[j])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param => "param",
        Op::Conv1d { .. } => "conv1d",
        Op::Linear { .. } => "linear",
        Op::Matmul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softmax(_) => "softmax_channels",
        Op::BatchNorm { .. } => "batchnorm1d",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::MeanSquare(_) => "mean_square",
        Op::ConcatChannels(_) => "concat_channels",
        Op::ConcatTime(_) => "concat_time",
        Op::SliceChannels { .. } => "slice_channels",
        Op::SliceTime { .. } => "slice_time",
        Op::Mix { .. } => "mix_columns",
        Op::AttnMix { .. } => "attention_mix",
        Op::Nll { .. } => "nll",
        Op::Bce { .. } => "bce",
        Op::Mse { .. } => "mse",
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Naive sliding-window reference, independent of the tape's loop order.
    fn conv_ref(x: &Tensor, w: &Tensor, b: &[f64], s: usize, d: usize, p: usize) -> Tensor {
        let (cin, t) = x.dims2().unwrap();
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let mut padded = vec![vec![0.0; t + 2 * p]; cin];
        for i in 0..cin {
            for j in 0..t {
                padded[i][j + p] = x.get2(i, j);
            }
        }
        let mut rows = Vec::new();
        for o in 0..cout {
            let mut row = Vec::new();
            let mut start = 0;
            while start + d * (k - 1) < t + 2 * p {
                let mut acc = b[o];
                for i in 0..cin {
                    for j in 0..k {
                        acc += w.data()[(o * cin + i) * k + j] * padded[i][start + j * d];
                    }
                }
                row.push(acc);
                start += s;
            }
            rows.push(row);
        }
        Tensor::from_rows(&rows).unwrap()
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, -2.0, 3.5]]));
        let w = tape.leaf(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = tape.conv1d(x, w, Some(b), 1, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn conv_output_lengths_match_reference() {
        for (t, k, s, d, p, expect) in [(1000, 3, 2, 1, 1, 500), (50, 3, 1, 30, 30, 50)] {
            let x = Tensor::zeros(&[1, t]);
            let w = Tensor::zeros(&[1, 1, k]);
            assert_eq!(conv_ref(&x, &w, &[0.0], s, d, p).shape()[1], expect);
            let mut tape = Tape::new();
            let (xv, wv) = (tape.leaf(x), tape.leaf(w));
            let y = tape.conv1d(xv, wv, None, s, d, p).unwrap();
            assert_eq!(tape.value(y).shape(), &[1, expect]);
        }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut seed = 7;
        for trial in 0..20 {
            let cin = 1 + trial % 3;
            let cout = 1 + trial % 4;
            let k = 1 + trial % 3;
            let (s, d, p) = (1 + trial % 2, 1 + trial % 3, trial % 4);
            let t = 9 + trial;
            let x = Tensor::new(vec![cin, t], (0..cin * t).map(|_| lcg(&mut seed)).collect()).unwrap();
            let w = Tensor::new(vec![cout, cin, k], (0..cout * cin * k).map(|_| lcg(&mut seed)).collect()).unwrap();
            let b: Vec<f64> = (0..cout).map(|_| lcg(&mut seed)).collect();
            let expect = conv_ref(&x, &w, &b, s, d, p);
            let mut tape = Tape::new();
            let (xv, wv) = (tape.leaf(x), tape.leaf(w));
            let bv = tape.leaf(Tensor::new(vec![cout], b).unwrap());
            let y = tape.conv1d(xv, wv, Some(bv), s, d, p).unwrap();
            assert_eq!(tape.value(y).shape(), expect.shape());
            assert!(tape.value(y).max_abs_diff(&expect) < 1e-10);
        }
    }

    #[test]
    fn conv_reports_offending_dimension() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5]));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3]));
        let err = tape.conv1d(x, w, None, 1, 1, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let w = tape.leaf(Tensor::zeros(&[1, 2, 3]));
        let err = tape.conv1d(x, w, None, 1, 10, 0).unwrap_err().to_string();
        assert!(err.contains("time"), "{err}");
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, -30.0, 2.0], &[0.5, 40.0, 2.0], &[-3.0, 0.0, 2.0]]));
        let p = tape.softmax_channels(x).unwrap();
        let pv = tape.value(p);
        for col in 0..3 {
            let s: f64 = (0..3).map(|r| pv.get2(r, col)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_resize_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[0.0, 1.0]]));
        let y = tape.linear_interp_resize(x, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 1.0]);
        let c = tape.leaf(t2(&[&[2.5; 7], &[-1.0; 7]]));
        let y = tape.linear_interp_resize(c, 19).unwrap();
        assert!(tape.value(y).row(0).iter().all(|&v| (v - 2.5).abs() < 1e-15));
        assert!(tape.value(y).row(1).iter().all(|&v| (v + 1.0).abs() < 1e-15));
        assert!(tape.linear_interp_resize(c, 0).is_err());
    }

    #[test]
    fn empty_inputs_rejected() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::zeros(&[0, 0]));
        assert!(tape.softmax_channels(e).is_err());
        assert!(tape.global_avg_pool(e).is_err());
    }

    #[test]
    fn backward_on_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![4.0, -1.0, 2.0]).unwrap());
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mean_square(x);
        let l = tape.scale(sq, 2.0);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = ps.add("b", Tensor::full(&[2], 1.0)).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(&ps, a);
        let _bv = tape.param(&ps, b);
        let l = tape.sum(av);
        let g = tape.backward(l).unwrap();
        ps.get_mut(b).set_grad(vec![9.0, 9.0]).unwrap();
        ps.collect_grads(&tape, &g).unwrap();
        assert_eq!(ps.get(a).grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(ps.get(b).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn losses_match_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[4, 5], 0.25));
        let l = tape.nll_clamped(p, &[0, 1, 2, 3, 0]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let onehot = Tensor::from_fn2(3, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        let p = tape.leaf(onehot);
        let l = tape.nll_clamped(p, &[0, 1]).unwrap();
        assert!(tape.value(l).item() < 1e-10);

        let p = tape.leaf(Tensor::full(&[2], 0.5));
        let l = tape.bce(p, &[1.0, 0.0]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let p = tape.leaf(Tensor::new(vec![1], vec![0.2]).unwrap());
        let l = tape.mse(p, &[0.7]).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_normalizes_channels() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[&[1.0, 2.0, 3.0, 4.0], &[10.0, 10.0, 12.0, 12.0]]));
        let g = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let (y, mean, var) = tape.batchnorm1d_train(x, g, b).unwrap();
        assert_eq!(mean, vec![2.5, 11.0]);
        assert!((var[1] - 4.0 / 3.0).abs() < 1e-12);
        for r in 0..2 {
            let row = tape.value(y).row(r);
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
