//! Finite-difference gradient checks.
//!
//! Every differentiable tape operation is checked on randomly drawn small
//! shapes, and the whole network (segmentation plus proposal detection) on a
//! tiny configuration. Errors are `|a − n| / max(|a|, |n|, floor)` with
//! central differences of step `h`.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{generate, SyntheticSpec};
use crate::error::Result;
use crate::labels::Segment;
use crate::pdn::{alignment_mix, gen_sparse_pattern};
use crate::pipeline::{Model, Sample};
use crate::ssn::{build_snippet_graph, edge_conv};
use crate::tensor::{ColumnMix, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    pub floor: f64,
    pub tolerance: f64,
    /// Random shapes drawn per operation.
    pub trials: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            tolerance: 1e-4,
            trials: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    /// Scalars compared.
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.max_rel_err < self.tolerance)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let mark = if r.max_rel_err < self.tolerance { "ok  " } else { "FAIL" };
            let _ = writeln!(
                s,
                "{mark} {:<24} trials {:>3}  scalars {:>6}  max rel err {:.3e}",
                r.name, r.trials, r.checked, r.max_rel_err
            );
        }
        let _ = writeln!(
            s,
            "worst {:.3e} (tolerance {:.0e}) in {:.1}s",
            self.worst(),
            self.tolerance,
            self.elapsed.as_secs_f64()
        );
        s
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Scalar probe of any output: the output itself when scalar, otherwise its
/// mean squared distance to a fixed pattern.
fn reduce(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).numel();
    if n == 1 && tape.value(v).rank() == 0 {
        return Ok(v);
    }
    let targets: Vec<f64> = (0..n).map(|i| 0.7 * (1.3 * i as f64 + 0.5).sin()).collect();
    tape.mse(v, &targets)
}

fn eval(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    Ok(tape.value(loss).item())
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares analytic and central-difference gradients of `build` with
/// respect to every element of every input. Returns the worst relative
/// error and the number of scalars compared.
pub fn check_gradients(inputs: &[Tensor], build: &Build, cfg: &GradcheckConfig) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for e in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[e];
            probe[k].data_mut()[e] = x0 + cfg.step;
            let up = eval(&probe, build)?;
            probe[k].data_mut()[e] = x0 - cfg.step;
            let down = eval(&probe, build)?;
            probe[k].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(rel_err(analytic[e], numeric, cfg.floor));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn2(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay out of reach of `h`.
fn off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn2(rows, cols, |_, _| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::new(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("length matches")
}

fn random_mix(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> ColumnMix {
    let cols = (0..n_out)
        .map(|_| {
            (0..rng.random_range(1..=n_in.min(3)))
                .map(|_| (rng.random_range(0..n_in), rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    ColumnMix::new(n_in, cols).expect("indices in range")
}

pub const OPS: &[&str] = &[
    "conv1d",
    "linear",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "softmax_channels",
    "batchnorm1d_train",
    "batchnorm1d_eval",
    "add_sub_scale",
    "sum",
    "mean_square",
    "weighted_sum",
    "concat_channels",
    "concat_time",
    "slice_channels",
    "slice_time",
    "mix_columns",
    "global_avg_pool",
    "linear_interp_resize",
    "attention_mix",
    "edge_conv",
    "proposal_align",
    "nll",
    "bce",
    "mse",
];

/// Draws inputs and the builder for one trial of `op`.
fn make_case(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Build) {
    let c = rng.random_range(1..=4);
    let t = rng.random_range(1..=7);
    match op {
        "conv1d" => {
            let (cout, k): (usize, usize) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (stride, dilation, padding): (usize, usize, usize) =
                (rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(0..=2));
            let extent = dilation * (k - 1) + 1;
            let t = (extent.saturating_sub(2 * padding)).max(1) + rng.random_range(0..5);
            let w = Tensor::new(
                vec![cout, c, k],
                (0..cout * c * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .expect("shape");
            (
                vec![rand_tensor(rng, c, t), w, vector(rng, cout)],
                Box::new(move |tp, v| tp.conv1d(v[0], v[1], Some(v[2]), stride, dilation, padding)),
            )
        }
        "linear" => {
            let cout = rng.random_range(1..=4);
            let bias = rng.random_bool(0.5);
            (
                vec![rand_tensor(rng, c, t), rand_tensor(rng, c, cout), vector(rng, cout)],
                Box::new(move |tp, v| tp.linear(v[0], v[1], bias.then_some(v[2]))),
            )
        }
        "matmul" => {
            let n = rng.random_range(1..=4);
            (
                vec![rand_tensor(rng, c, t), rand_tensor(rng, t, n)],
                Box::new(|tp, v| tp.matmul(v[0], v[1])),
            )
        }
        "transpose" => (vec![rand_tensor(rng, c, t)], Box::new(|tp, v| tp.transpose(v[0]))),
        "relu" => (vec![off_zero(rng, c, t)], Box::new(|tp, v| Ok(tp.relu(v[0])))),
        "sigmoid" => (
            vec![rand_tensor(rng, c, t).detached()],
            Box::new(|tp, v| {
                let s = tp.scale(v[0], 3.0);
                Ok(tp.sigmoid(s))
            }),
        ),
        "softmax_channels" => (
            vec![rand_tensor(rng, c + 1, t)],
            Box::new(|tp, v| {
                let s = tp.scale(v[0], 2.0);
                tp.softmax_channels(s)
            }),
        ),
        "batchnorm1d_train" => {
            let t = t + 1;
            (
                vec![rand_tensor(rng, c, t), vector(rng, c), vector(rng, c)],
                Box::new(|tp, v| Ok(tp.batchnorm1d_train(v[0], v[1], v[2])?.0)),
            )
        }
        "batchnorm1d_eval" => {
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
            (
                vec![rand_tensor(rng, c, t), vector(rng, c), vector(rng, c)],
                Box::new(move |tp, v| tp.batchnorm1d_eval(v[0], v[1], v[2], &mean, &var)),
            )
        }
        "add_sub_scale" => {
            let k = rng.random_range(-2.0..2.0);
            (
                vec![rand_tensor(rng, c, t), rand_tensor(rng, c, t)],
                Box::new(move |tp, v| {
                    let a = tp.add(v[0], v[1])?;
                    let s = tp.scale(v[1], k);
                    tp.sub(a, s)
                }),
            )
        }
        "sum" => (
            vec![rand_tensor(rng, c, t)],
            Box::new(|tp, v| {
                let s = tp.sum(v[0]);
                let s2 = tp.mean_square(s);
                tp.add(s, s2)
            }),
        ),
        "mean_square" => (vec![rand_tensor(rng, c, t)], Box::new(|tp, v| Ok(tp.mean_square(v[0])))),
        "weighted_sum" => {
            let w: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            (
                vec![rand_tensor(rng, c, t), rand_tensor(rng, c, t), rand_tensor(rng, c, t)],
                Box::new(move |tp, v| tp.weighted_sum(&[(w[0], v[0]), (w[1], v[1]), (w[2], v[2])])),
            )
        }
        "concat_channels" => {
            let c2 = rng.random_range(1..=3);
            (
                vec![rand_tensor(rng, c, t), rand_tensor(rng, c2, t)],
                Box::new(|tp, v| tp.concat_channels(&[v[0], v[1], v[0]])),
            )
        }
        "concat_time" => {
            let t2 = rng.random_range(1..=4);
            (
                vec![rand_tensor(rng, c, t), rand_tensor(rng, c, t2)],
                Box::new(|tp, v| tp.concat_time(&[v[1], v[0]])),
            )
        }
        "slice_channels" => {
            let c = c + 1;
            let start = rng.random_range(0..c - 1);
            let len = rng.random_range(1..=c - start);
            (
                vec![rand_tensor(rng, c, t)],
                Box::new(move |tp, v| tp.slice_channels(v[0], start, len)),
            )
        }
        "slice_time" => {
            let t = t + 1;
            let start = rng.random_range(0..t - 1);
            let len = rng.random_range(1..=t - start);
            (vec![rand_tensor(rng, c, t)], Box::new(move |tp, v| tp.slice_time(v[0], start, len)))
        }
        "mix_columns" => {
            let out = rng.random_range(1..=6);
            let mix = Arc::new(random_mix(rng, t, out));
            (vec![rand_tensor(rng, c, t)], Box::new(move |tp, v| tp.mix_columns(v[0], mix.clone())))
        }
        "global_avg_pool" => (vec![rand_tensor(rng, c, t)], Box::new(|tp, v| tp.global_avg_pool(v[0]))),
        "linear_interp_resize" => {
            let target = rng.random_range(1..=9);
            (
                vec![rand_tensor(rng, c, t)],
                Box::new(move |tp, v| tp.linear_interp_resize(v[0], target)),
            )
        }
        "attention_mix" => {
            let m = t + 1;
            let nb: Vec<Vec<usize>> = (0..m)
                .map(|i| (0..m).filter(|&j| j != i && rng.random_bool(0.6)).collect())
                .collect();
            let nb = Arc::new(nb);
            (
                vec![rand_tensor(rng, c, m), rand_tensor(rng, c + 1, m)],
                Box::new(move |tp, v| tp.attention_mix(v[0], v[1], nb.clone())),
            )
        }
        "edge_conv" => {
            let n = t + 1;
            let x = rand_tensor(rng, c, n);
            let k = rng.random_range(1..=3);
            let graph = build_snippet_graph(&x, k).expect("valid graph");
            let agg = Arc::new(graph.mean_aggregation());
            let cout = rng.random_range(1..=3);
            (
                vec![x, rand_tensor(rng, 2 * c, cout)],
                Box::new(move |tp, v| edge_conv(tp, v[0], agg.clone(), v[1])),
            )
        }
        "proposal_align" => {
            let t = t + 4;
            let eta = rng.random_range(1..=3);
            let segs: Vec<Segment> = gen_sparse_pattern(t, eta).expect("eta <= t").segments();
            let mix = Arc::new(alignment_mix(t, &segs, rng.random_range(1..=5)).expect("in range"));
            (vec![rand_tensor(rng, c, t)], Box::new(move |tp, v| tp.mix_columns(v[0], mix.clone())))
        }
        "nll" => {
            let classes = c + 1;
            let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..classes)).collect();
            (
                vec![rand_tensor(rng, classes, t)],
                Box::new(move |tp, v| {
                    let p = tp.softmax_channels(v[0])?;
                    tp.nll_clamped(p, &targets)
                }),
            )
        }
        "bce" => {
            let targets: Vec<f64> = (0..c * t).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
            (
                vec![rand_tensor(rng, c, t)],
                Box::new(move |tp, v| {
                    let p = tp.sigmoid(v[0]);
                    tp.bce(p, &targets)
                }),
            )
        }
        "mse" => {
            let targets: Vec<f64> = (0..c * t).map(|_| rng.random_range(-1.0..1.0)).collect();
            (vec![rand_tensor(rng, c, t)], Box::new(move |tp, v| tp.mse(v[0], &targets)))
        }
        other => unreachable!("unknown op {other}"),
    }
}

pub fn check_op(op: &str, cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(OPS.iter().position(|o| *o == op).unwrap_or(0) as u64 + 1);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for _ in 0..cfg.trials {
        let (inputs, build) = make_case(op, &mut rng);
        let (w, n) = check_gradients(&inputs, &build, cfg)?;
        worst = worst.max(w);
        checked += n;
    }
    Ok(CheckResult {
        name: op.to_string(),
        trials: cfg.trials,
        checked,
        max_rel_err: worst,
    })
}

/// The small configuration used for the end-to-end check:
/// `C_in = 4, T = 16, L = 2, D = 2, η = 4`.
pub fn tiny_config() -> Config {
    let mut c = Config::desk();
    c.snippets = 16;
    c.ssn.in_channels = 4;
    c.ssn.hidden = 4;
    c.ssn.layers = 2;
    c.ssn.num_classes = 2;
    c.ssn.dilations = vec![1, 2];
    c.ssn.snippet_k = 2;
    c.pdn.eta = 4;
    c.pdn.align_bins = 4;
    c.train.lambda_reg = 1e-2;
    c.synthetic = SyntheticSpec {
        n_videos: 2,
        num_classes: 2,
        channels: 4,
        snippets: 16,
        actions_min: 1,
        actions_max: 2,
        min_len: 4,
        max_len: 4,
        grid: 4,
        noise: 0.3,
        ..Default::default()
    };
    c
}

/// Analytic versus numeric gradients of the full training loss (all loss
/// terms, batch of two, batch-norm in training mode, every proposal) with
/// respect to every trainable parameter.
pub fn check_composite(config: &Config, cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut model = Model::new(config.clone())?;
    let ds = generate(&config.synthetic)?;
    let samples: Vec<Sample> = ds
        .videos
        .iter()
        .map(|v| {
            let ann = ds.annotations.action_annotation(&v.video_id, &ds.manifest)?;
            model.sample(&ann, &v.features)
        })
        .collect::<Result<_>>()?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let loss_of = |m: &Model| -> Result<f64> {
        let mut tape = Tape::new();
        let p = m.store.bind(&mut tape);
        let (l, _) = m.batch_loss(&mut tape, &p, &batch, None)?;
        Ok(tape.value(l.total).item())
    };
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let (l, _) = model.batch_loss(&mut tape, &p, &batch, None)?;
    let grads = tape.backward(l.total)?;
    model.store.collect_grads(&tape, &grads)?;
    let ids = model.store.trainable_ids();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| model.store.get(id).grad().expect("trainable").to_vec())
        .collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (k, &id) in ids.iter().enumerate() {
        for e in 0..model.store.get(id).numel() {
            let x0 = model.store.get(id).data()[e];
            model.store.get_mut(id).data_mut()[e] = x0 + cfg.step;
            let up = loss_of(&model)?;
            model.store.get_mut(id).data_mut()[e] = x0 - cfg.step;
            let down = loss_of(&model)?;
            model.store.get_mut(id).data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(rel_err(analytic[k][e], numeric, cfg.floor));
            checked += 1;
        }
    }
    Ok(CheckResult {
        name: "ssn+pdn composite".into(),
        trials: 1,
        checked,
        max_rel_err: worst,
    })
}

/// Per-op suite followed by the composite check.
pub fn run_all(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut results = OPS.iter().map(|op| check_op(op, cfg)).collect::<Result<Vec<_>>>()?;
    let mut tiny = tiny_config();
    tiny.set_seed(cfg.seed);
    results.push(check_composite(&tiny, cfg)?);
    Ok(GradcheckReport {
        results,
        tolerance: cfg.tolerance,
        elapsed: start.elapsed(),
    })
}
