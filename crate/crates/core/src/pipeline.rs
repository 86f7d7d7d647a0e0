//! End-to-end training and inference.
//!
//! A [`Model`] owns the parameter store and both networks. Training draws a
//! fresh SAGE sample of proposals per video and step; inference scores every
//! proposal of the sparse pattern, fuses `s1·s2`, assigns classes, and runs
//! per-class soft-NMS.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{read_features, AnnotationFile, ClassManifest, ClassScores, PredictionFile, ScoredLabel};
use crate::error::{Error, Result};
use crate::labels::{
    compile_proposal_labels, segments_to_frame_labels, tiou_unchecked, Action, ActionAnnotation, FrameLabels,
    ProposalLabels, Segment,
};
use crate::pdn::{build_proposal_graph, det_loss, gen_sparse_pattern, sage_sample, Pdn};
use crate::ssn::{aux_loss, BnUpdate, Ssn};
use crate::tensor::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Bound, ColumnMix, ParamStore, Tape, Tensor, Var};

/// One training or evaluation video, rescaled to the configured length.
#[derive(Debug, Clone)]
pub struct Sample {
    pub video_id: String,
    pub duration: f64,
    pub features: Tensor,
    pub actions: Vec<Action>,
    pub frame_labels: FrameLabels,
    /// Labels of every proposal in the model's pattern.
    pub proposal_labels: ProposalLabels,
}

/// Linear resampling of a `C × T` sequence to `C × t` (endpoints aligned).
pub fn rescale_features(x: &Tensor, t: usize) -> Result<Tensor> {
    let (c, n) = x.dims2()?;
    if n == t {
        return Ok(x.detached());
    }
    let mix = ColumnMix::linear_resize(n, t)?;
    Tensor::new(vec![c, t], mix.apply(c, x.data()))
}

/// Loss terms of one step, each averaged over the batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub seg: Var,
    pub det: Var,
    pub aux: Var,
    pub reg: Var,
}

/// `L_seg + λ1·L_det + λ2·L_aux + λ3·L_r`; `seg` is `None` when the
/// segmentation loss is switched off.
pub fn total_loss(
    tape: &mut Tape,
    seg: Option<Var>,
    det: Var,
    aux: Var,
    reg: Var,
    lambdas: [f64; 3],
) -> Result<Var> {
    let mut terms = vec![(lambdas[0], det), (lambdas[1], aux), (lambdas[2], reg)];
    if let Some(s) = seg {
        terms.insert(0, (1.0, s));
    }
    tape.weighted_sum(&terms)
}

/// `Σ_p mean(p²)` over the given parameters.
pub fn param_reg(tape: &mut Tape, params: &[Var]) -> Result<Var> {
    let terms: Vec<(f64, Var)> = params.iter().map(|&v| (1.0, tape.mean_square(v))).collect();
    if terms.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    tape.weighted_sum(&terms)
}

/// Per-video outputs needed for detection.
#[derive(Debug, Clone)]
pub struct VideoScores {
    /// Segmentation posterior averaged over time, one entry per class
    /// (background first).
    pub mean_posterior: Vec<f64>,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub store: ParamStore,
    pub ssn: Ssn,
    pub pdn: Pdn,
    segments: Vec<Segment>,
}

impl Model {
    /// Fresh parameters drawn from `config.train.seed`.
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let ssn = Ssn::new(config.ssn.clone(), &mut store, &mut rng)?;
        let pdn = Pdn::new(config.pdn.clone(), config.ssn.hidden, &mut store, &mut rng)?;
        let segments = gen_sparse_pattern(config.snippets, config.pdn.eta)?.segments();
        Ok(Self {
            config,
            store,
            ssn,
            pdn,
            segments,
        })
    }

    pub fn load(config: Config, checkpoint: &Path) -> Result<Self> {
        let mut m = Self::new(config)?;
        let file = fs::File::open(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
        let tensors = read_checkpoint(std::io::BufReader::new(file))?;
        m.store.load_from(&tensors)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.store.export())?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Proposal segments in snippet units.
    pub fn proposals(&self) -> &[Segment] {
        &self.segments
    }

    pub fn sample(&self, ann: &ActionAnnotation, features: &Tensor) -> Result<Sample> {
        ann.validate()?;
        let (c, _) = features.dims2()?;
        if c != self.config.ssn.in_channels {
            return Err(Error::shape(
                "sample",
                format!("video {}: {c} feature channels, model expects {}", ann.video_id, self.config.ssn.in_channels),
            ));
        }
        let t = self.config.snippets;
        let features = rescale_features(features, t)?;
        let frame_labels = segments_to_frame_labels(ann, t)?;
        let to_snippets = t as f64 / ann.duration;
        let in_snippets: Vec<Action> = ann
            .actions
            .iter()
            .map(|a| Action {
                start: a.start * to_snippets,
                end: a.end * to_snippets,
                class_id: a.class_id,
            })
            .collect();
        let proposal_labels = compile_proposal_labels(&self.segments, &in_snippets, self.config.pdn.tau);
        Ok(Sample {
            video_id: ann.video_id.clone(),
            duration: ann.duration,
            features,
            actions: ann.actions.clone(),
            frame_labels,
            proposal_labels,
        })
    }

    /// Builds the loss of one batch on `tape`. With `rng`, proposals are
    /// SAGE-sampled per video; without, every proposal is used.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &[&Sample],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossVars, Option<BnUpdate>)> {
        let inputs: Vec<Var> = batch.iter().map(|s| tape.leaf(s.features.detached())).collect();
        let (outs, bn) = self.ssn.forward_batch(tape, p, &self.store, &inputs, true)?;
        let w = 1.0 / batch.len() as f64;
        let (mut seg, mut det, mut aux) = (Vec::new(), Vec::new(), Vec::new());
        let pc = &self.config.pdn;
        for (s, out) in batch.iter().zip(&outs) {
            seg.push((w, self.ssn.seg_loss(tape, out.probs, &s.frame_labels)?));
            aux.push((w, aux_loss(tape, out.start, out.end, &s.frame_labels)?));
            let (segs, labels) = match rng.as_deref_mut() {
                Some(r) => {
                    let idx = sage_sample(&self.segments, &s.proposal_labels, pc.m0, pc.k, r).indices();
                    let segs: Vec<Segment> = idx.iter().map(|&i| self.segments[i]).collect();
                    (segs, s.proposal_labels.select(&idx))
                }
                None => (self.segments.clone(), s.proposal_labels.clone()),
            };
            let d = self.pdn.align_features(tape, p, out.features, &segs)?;
            let graph = build_proposal_graph(tape.value(d), &segs, pc)?;
            let h = self.pdn.forward(tape, p, d, &graph)?;
            let scores = self.pdn.det_head(tape, p, h)?;
            det.push((w, det_loss(tape, scores, &labels)?));
        }
        let seg = tape.weighted_sum(&seg)?;
        let det = tape.weighted_sum(&det)?;
        let aux = tape.weighted_sum(&aux)?;
        let trainable: Vec<Var> = self.store.trainable_ids().into_iter().map(|id| p.var(id)).collect();
        let reg = param_reg(tape, &trainable)?;
        let tc = &self.config.train;
        let total = total_loss(
            tape,
            tc.use_seg_loss.then_some(seg),
            det,
            aux,
            reg,
            [tc.lambda_det, tc.lambda_aux, tc.lambda_reg],
        )?;
        Ok((
            LossVars {
                total,
                seg,
                det,
                aux,
                reg,
            },
            bn,
        ))
    }

    /// Evaluation-mode forward pass over every proposal of one video.
    pub fn score_video(&self, features: &Tensor) -> Result<VideoScores> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let x = tape.leaf(rescale_features(features, self.config.snippets)?);
        let (outs, _) = self.ssn.forward_batch(&mut tape, &p, &self.store, &[x], false)?;
        let out = &outs[0];
        let probs = tape.value(out.probs);
        let (classes, t) = probs.dims2()?;
        let mean_posterior = (0..classes).map(|c| probs.row(c).iter().sum::<f64>() / t as f64).collect();
        let d = self.pdn.align_features(&mut tape, &p, out.features, &self.segments)?;
        let graph = build_proposal_graph(tape.value(d), &self.segments, &self.config.pdn)?;
        let h = self.pdn.forward(&mut tape, &p, d, &graph)?;
        let s = self.pdn.det_head(&mut tape, &p, h)?;
        let s = tape.value(s);
        Ok(VideoScores {
            mean_posterior,
            s1: s.row(0).to_vec(),
            s2: s.row(1).to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub seg: f64,
    pub det: f64,
    pub aux: f64,
    pub reg: f64,
}

pub const LOSS_LOG_HEADER: &str = "epoch,lr,total,seg,det,aux,reg";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.total, self.seg, self.det, self.aux, self.reg
        )
    }
}

pub fn loss_log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch:04}.stad"))
}

pub fn last_checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints").join("last.stad")
}

/// Runs one optimizer step on `batch` and returns the loss terms.
fn train_step(model: &mut Model, adam: &mut Adam, batch: &[&Sample], rng: &mut ChaCha8Rng) -> Result<[f64; 5]> {
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let (loss, bn) = model.batch_loss(&mut tape, &p, batch, Some(rng))?;
    if let Some(desc) = tape.first_non_finite() {
        return Err(Error::NonFinite(desc));
    }
    let grads = tape.backward(loss.total)?;
    model.store.collect_grads(&tape, &grads)?;
    if let Some((_, bad)) = model
        .store
        .iter()
        .find(|(_, p)| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
    {
        return Err(Error::NonFinite(format!("gradient of {}", bad.name)));
    }
    adam.step(&mut model.store);
    if let Some(u) = bn {
        model.ssn.apply_bn_update(&mut model.store, &u);
    }
    let v = |x: Var| tape.value(x).item();
    Ok([v(loss.total), v(loss.seg), v(loss.det), v(loss.aux), v(loss.reg)])
}

/// Trains in place. Deterministic given the config seed. With `run_dir`,
/// writes `checkpoints/epoch_NNNN.stad` and `checkpoints/last.stad` after
/// every epoch and keeps `loss_log.csv` current. `on_epoch` sees each row.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if samples.is_empty() {
        return Err(Error::arg("train", "no training videos"));
    }
    let tc = model.config.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(AdamConfig {
        lr: tc.lr,
        ..Default::default()
    })?;
    if let Some(dir) = run_dir {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 1..=tc.epochs {
        let lr = if epoch > tc.lr_drop_epoch { tc.lr / 10.0 } else { tc.lr };
        adam.set_lr(lr)?;
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut steps = 0;
        for chunk in order.chunks(tc.batch) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let terms = train_step(model, &mut adam, &batch, &mut rng).map_err(|e| match e {
                Error::NonFinite(d) => Error::NonFinite(format!("epoch {epoch}, step {}: {d}", steps + 1)),
                other => other,
            })?;
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t;
            }
            steps += 1;
        }
        let n = steps as f64;
        let row = EpochLog {
            epoch,
            lr,
            total: sums[0] / n,
            seg: sums[1] / n,
            det: sums[2] / n,
            aux: sums[3] / n,
            reg: sums[4] / n,
        };
        on_epoch(&row);
        log.push(row);
        if let Some(dir) = run_dir {
            model.save(&checkpoint_path(dir, epoch))?;
            model.save(&last_checkpoint_path(dir))?;
            let path = dir.join("loss_log.csv");
            fs::write(&path, loss_log_csv(&log)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(log)
}

/// A scored segment in seconds with its class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn segment(&self) -> Segment {
        Segment {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub video_id: String,
    /// At most `keep`, sorted by descending score.
    pub detections: Vec<Detection>,
}

/// Gaussian soft-NMS. Repeatedly takes the highest-scoring remaining
/// detection (earliest on ties) and multiplies every other remaining score
/// by `exp(−tIoU² / sigma)`. Returns the taken detections in order,
/// truncated to `keep`.
pub fn soft_nms(dets: &[Detection], sigma: f64, keep: usize) -> Vec<Detection> {
    let mut rest: Vec<Detection> = dets.to_vec();
    let mut out = Vec::with_capacity(keep.min(dets.len()));
    while !rest.is_empty() && out.len() < keep {
        let best = rest
            .iter()
            .enumerate()
            .fold(0, |b, (i, d)| if d.score > rest[b].score { i } else { b });
        let top = rest.remove(best);
        for d in &mut rest {
            let iou = tiou_unchecked(top.segment(), d.segment());
            d.score *= (-(iou * iou) / sigma).exp();
        }
        out.push(top);
    }
    out
}

/// Turns proposal scores into detections for one video.
///
/// With `class_scores` (`(class_id, score)` pairs), each proposal is
/// replicated for the `top_classes` best classes with score
/// `s1·s2·class_score`; otherwise the class is the arg-max of the averaged
/// segmentation posterior over action classes.
pub fn detect(
    model: &Model,
    video_id: &str,
    duration: f64,
    scores: &VideoScores,
    class_scores: Option<&[(usize, f64)]>,
) -> Result<DetectionResult> {
    let ic = &model.config.infer;
    let classes: Vec<(usize, f64)> = match class_scores {
        Some(cs) => {
            let mut cs = cs.to_vec();
            cs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cs.truncate(ic.top_classes);
            cs
        }
        None => {
            if model.config.ssn.binary_segmentation {
                return Err(Error::arg(
                    "infer",
                    "binary segmentation has no class posterior; supply a class-score file",
                ));
            }
            let best = (1..scores.mean_posterior.len())
                .max_by(|&a, &b| scores.mean_posterior[a].total_cmp(&scores.mean_posterior[b]).then(b.cmp(&a)))
                .ok_or_else(|| Error::arg("infer", "posterior has no action classes"))?;
            vec![(best, 1.0)]
        }
    };
    let scale = duration / model.config.snippets as f64;
    let mut all = Vec::new();
    for &(class_id, cs) in &classes {
        let dets: Vec<Detection> = model
            .proposals()
            .iter()
            .enumerate()
            .map(|(m, seg)| Detection {
                start: seg.start * scale,
                end: seg.end * scale,
                score: scores.s1[m] * scores.s2[m] * cs,
                class_id,
            })
            .filter(|d| d.score > 0.0)
            .collect();
        all.extend(soft_nms(&dets, ic.nms_sigma, ic.keep));
    }
    all.sort_by(|a, b| b.score.total_cmp(&a.score));
    all.truncate(ic.keep);
    Ok(DetectionResult {
        video_id: video_id.to_string(),
        detections: all,
    })
}

pub fn infer_video(
    model: &Model,
    video_id: &str,
    duration: f64,
    features: &Tensor,
    class_scores: Option<&[(usize, f64)]>,
) -> Result<DetectionResult> {
    let scores = model.score_video(features)?;
    detect(model, video_id, duration, &scores, class_scores)
}

/// Dataset directory contents: `features/`, `annotations.json`,
/// `classes.json`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub annotations: AnnotationFile,
    pub manifest: ClassManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let annotations = AnnotationFile::load(&dir.join("annotations.json"))?;
        let manifest = ClassManifest::load(&dir.join("classes.json"))?;
        let unknown = manifest.unknown(
            annotations
                .database
                .values()
                .flat_map(|v| v.annotations.iter().map(|a| a.label.as_str())),
        );
        if !unknown.is_empty() {
            return Err(Error::UnknownLabels(unknown));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            annotations,
            manifest,
        })
    }

    pub fn features(&self, video_id: &str) -> Result<Tensor> {
        read_features(&self.dir.join("features").join(format!("{video_id}.sgft")))
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        let c = &model.config.ssn;
        if !c.binary_segmentation && c.num_classes != self.manifest.len() {
            return Err(Error::Config(format!(
                "ssn.num_classes is {}, dataset has {} classes",
                c.num_classes,
                self.manifest.len()
            )));
        }
        Ok(())
    }

    pub fn samples(&self, model: &Model, subset: Option<&str>) -> Result<Vec<Sample>> {
        self.check_model(model)?;
        self.annotations
            .video_ids(subset)
            .iter()
            .map(|id| {
                let ann = self.annotations.action_annotation(id, &self.manifest)?;
                model.sample(&ann, &self.features(id)?)
            })
            .collect()
    }

    /// Runs inference on every video of `subset`.
    pub fn predict(
        &self,
        model: &Model,
        subset: Option<&str>,
        class_scores: Option<&ClassScores>,
    ) -> Result<PredictionFile> {
        self.check_model(model)?;
        let mut out = PredictionFile::default();
        for id in self.annotations.video_ids(subset) {
            let duration = self.annotations.database[&id].duration;
            let cs = match class_scores {
                Some(all) => {
                    let list = all
                        .get(&id)
                        .ok_or_else(|| Error::arg("infer", format!("no class scores for video {id}")))?;
                    let unknown = self.manifest.unknown(list.iter().map(|c| c.label.as_str()));
                    if !unknown.is_empty() {
                        return Err(Error::UnknownLabels(unknown));
                    }
                    Some(
                        list.iter()
                            .map(|c| (self.manifest.id(&c.label).expect("checked above"), c.score))
                            .collect::<Vec<_>>(),
                    )
                }
                None => None,
            };
            let res = infer_video(model, &id, duration, &self.features(&id)?, cs.as_deref())?;
            let dets = res
                .detections
                .iter()
                .map(|d| ScoredLabel {
                    segment: [d.start, d.end],
                    score: d.score,
                    label: self.manifest.label(d.class_id).unwrap_or("unknown").to_string(),
                })
                .collect();
            out.results.insert(id, dets);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::labels::tiou;
    use proptest::prelude::*;

    pub(crate) fn tiny_config() -> Config {
        let mut c = Config::desk();
        c.snippets = 32;
        c.ssn.in_channels = 4;
        c.ssn.hidden = 6;
        c.ssn.layers = 2;
        c.ssn.num_classes = 2;
        c.ssn.dilations = vec![1, 2];
        c.ssn.snippet_k = 2;
        c.pdn.eta = 4;
        c.pdn.m0 = 4;
        c.pdn.k = 2;
        c.pdn.align_bins = 4;
        c.train.epochs = 2;
        c.train.batch = 2;
        c.synthetic = SyntheticSpec {
            n_videos: 4,
            num_classes: 2,
            channels: 4,
            snippets: 32,
            actions_min: 1,
            actions_max: 2,
            min_len: 4,
            max_len: 8,
            grid: 4,
            ..Default::default()
        };
        c
    }

    fn tiny_samples(model: &Model) -> Vec<Sample> {
        let ds = generate(&model.config.synthetic).unwrap();
        ds.videos
            .iter()
            .map(|v| {
                let ann = ds.annotations.action_annotation(&v.video_id, &ds.manifest).unwrap();
                model.sample(&ann, &v.features).unwrap()
            })
            .collect()
    }

    fn det(start: f64, end: f64, score: f64) -> Detection {
        Detection {
            start,
            end,
            score,
            class_id: 1,
        }
    }

    #[test]
    fn soft_nms_examples() {
        let one = [det(0.0, 1.0, 0.4)];
        assert_eq!(soft_nms(&one, 0.5, 100), one);

        let dup = [det(0.0, 4.0, 0.8), det(0.0, 4.0, 0.9)];
        let out = soft_nms(&dup, 0.5, 100);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.8 * (-2f64).exp()).abs() < 1e-12);
        assert!((out[1].score - 0.10827).abs() < 1e-5);

        let disjoint = [det(0.0, 1.0, 0.3), det(2.0, 3.0, 0.7), det(5.0, 9.0, 0.5)];
        let out = soft_nms(&disjoint, 0.5, 100);
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.7, 0.5, 0.3]);

        assert_eq!(soft_nms(&disjoint, 0.5, 2).len(), 2);
    }

    proptest! {
        #[test]
        fn soft_nms_only_decays(raw in proptest::collection::vec((0.0f64..20.0, 0.1f64..8.0, 0.01f64..1.0), 1..30), sigma in 0.1f64..2.0) {
            let dets: Vec<Detection> = raw.iter().map(|&(s, l, sc)| det(s, s + l, sc)).collect();
            let out = soft_nms(&dets, sigma, 100);
            prop_assert_eq!(out.len(), dets.len());
            for w in out.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
            // every output maps to a distinct input with identical bounds and no larger score
            let mut used = vec![false; dets.len()];
            for o in &out {
                let i = dets.iter().enumerate().position(|(i, d)| !used[i] && d.start == o.start && d.end == o.end && o.score <= d.score);
                prop_assert!(i.is_some());
                used[i.unwrap()] = true;
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let leaf = |tape: &mut Tape, v: f64| tape.leaf(Tensor::scalar(v));
        let (s, d, a, r) = (leaf(&mut tape, 1.5), leaf(&mut tape, 0.25), leaf(&mut tape, 2.0), leaf(&mut tape, 8.0));
        let l = total_loss(&mut tape, Some(s), d, a, r, [0.0, 0.0, 0.0]).unwrap();
        assert_eq!(tape.value(l).item(), 1.5);
        let l = total_loss(&mut tape, Some(s), d, a, r, [0.5, 2.0, 1e-4]).unwrap();
        assert!((tape.value(l).item() - (1.5 + 0.125 + 4.0 + 8e-4)).abs() < 1e-12);
        let l = total_loss(&mut tape, None, d, a, r, [1.0, 1.0, 1.0]).unwrap();
        assert!((tape.value(l).item() - 10.25).abs() < 1e-12);
        let z = leaf(&mut tape, 0.0);
        let l = total_loss(&mut tape, Some(z), z, z, r, [1.0, 1.0, 0.3]).unwrap();
        assert!((tape.value(l).item() - 2.4).abs() < 1e-12);

        let w = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2], vec![3.0, 1.0]).unwrap());
        let reg = param_reg(&mut tape, &[w, b]).unwrap();
        assert!((tape.value(reg).item() - (7.5 + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn det_loss_reaches_ssn_parameters() {
        let mut c = tiny_config();
        c.train.use_seg_loss = false;
        c.train.lambda_aux = 0.0;
        c.train.lambda_reg = 0.0;
        c.train.epochs = 1;
        let mut model = Model::new(c).unwrap();
        let samples = tiny_samples(&model);
        let before = model.store.clone();
        train(&mut model, &samples[..1], None, |_| {}).unwrap();
        let changed: Vec<&str> = model
            .store
            .iter()
            .filter(|(id, p)| p.trainable() && p.tensor.data() != before.get(*id).data())
            .map(|(_, p)| p.name.as_str())
            .collect();
        assert!(changed.iter().any(|n| n.starts_with("ssn.encoder")));
        assert!(changed.iter().any(|n| n.starts_with("pdn.")));
    }

    #[test]
    fn seg_switch_changes_only_the_sum() {
        let a = Model::new(tiny_config()).unwrap();
        let mut c = tiny_config();
        c.train.use_seg_loss = false;
        let b = Model::new(c).unwrap();
        assert_eq!(a.store, b.store);
        let samples = tiny_samples(&a);
        let batch: Vec<&Sample> = samples.iter().take(2).collect();
        let eval = |m: &Model| {
            let mut tape = Tape::new();
            let p = m.store.bind(&mut tape);
            let (l, _) = m.batch_loss(&mut tape, &p, &batch, None).unwrap();
            let v = |x: Var| tape.value(x).item();
            (v(l.total), v(l.seg))
        };
        let ((ta, sa), (tb, sb)) = (eval(&a), eval(&b));
        assert_eq!(sa, sb);
        assert!((ta - tb - sa).abs() < 1e-12);
    }

    #[test]
    fn training_smoke_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(tiny_config()).unwrap();
        let samples = tiny_samples(&model);
        let log = train(&mut model, &samples, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|r| r.total.is_finite()));
        let text = fs::read_to_string(dir.path().join("loss_log.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(checkpoint_path(dir.path(), 2).exists());
        let loaded = Model::load(tiny_config(), &last_checkpoint_path(dir.path())).unwrap();
        assert_eq!(loaded.store.export(), model.store.export());

        let mut again = Model::new(tiny_config()).unwrap();
        let log2 = train(&mut again, &samples, None, |_| {}).unwrap();
        assert_eq!(loss_log_csv(&log), loss_log_csv(&log2));
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let mut c = tiny_config();
        c.train.lr = 1e-3;
        let mut model = Model::new(c).unwrap();
        let samples = tiny_samples(&model);
        let batch: Vec<&Sample> = samples.iter().take(2).collect();
        let mut adam = Adam::new(AdamConfig {
            lr: 1e-3,
            ..Default::default()
        })
        .unwrap();
        let mut losses = Vec::new();
        for _ in 0..6 {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let (l, _) = model.batch_loss(&mut tape, &p, &batch, None).unwrap();
            losses.push(tape.value(l.total).item());
            let g = tape.backward(l.total).unwrap();
            model.store.collect_grads(&tape, &g).unwrap();
            adam.step(&mut model.store);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn non_finite_input_aborts_with_node() {
        let mut model = Model::new(tiny_config()).unwrap();
        let mut samples = tiny_samples(&model);
        samples[0].features.data_mut()[3] = f64::NAN;
        let err = train(&mut model, &samples[..1], None, |_| {}).unwrap_err();
        match err {
            Error::NonFinite(d) => assert!(d.contains("epoch 1") && d.contains("node"), "{d}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn inference_caps_and_fuses() {
        let model = Model::new(tiny_config()).unwrap();
        let m = model.proposals().len();
        let scores = VideoScores {
            mean_posterior: vec![0.5, 0.2, 0.3],
            s1: (0..m).map(|i| 0.1 + 0.8 * i as f64 / m as f64).collect(),
            s2: vec![0.5; m],
        };
        let res = detect(&model, "v", 64.0, &scores, None).unwrap();
        assert!(res.detections.len() <= 100);
        assert!(res.detections.iter().all(|d| d.class_id == 2));
        for w in res.detections.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        let top = res.detections[0];
        assert!((top.score - scores.s1[m - 1] * 0.5).abs() < 1e-15);
        assert_eq!((top.start, top.end), (model.proposals()[m - 1].start * 2.0, model.proposals()[m - 1].end * 2.0));

        let res = detect(&model, "v", 64.0, &scores, Some(&[(1, 0.9), (2, 0.5), (1, 0.1)][..2])).unwrap();
        assert!(res.detections.iter().all(|d| d.class_id == 1));
        assert!((res.detections[0].score - top.score * 0.9).abs() < 1e-15);
    }

    #[test]
    fn single_proposal_passes_through() {
        let mut c = tiny_config();
        c.snippets = 4;
        c.ssn.layers = 1;
        c.pdn.eta = 4;
        let model = Model::new(c).unwrap();
        assert_eq!(model.proposals().len(), 1);
        let x = Tensor::from_fn2(4, 4, |r, t| (r + t) as f64 * 0.1);
        let s = model.score_video(&x).unwrap();
        let res = infer_video(&model, "v", 8.0, &x, None).unwrap();
        assert_eq!(res.detections.len(), 1);
        assert_eq!(res.detections[0].score, s.s1[0] * s.s2[0]);
        assert_eq!((res.detections[0].start, res.detections[0].end), (0.0, 8.0));
    }

    #[test]
    fn duplicate_proposals_collapse() {
        let model = Model::new(tiny_config()).unwrap();
        let seg = model.proposals()[0];
        let ds = [det(seg.start, seg.end, 0.9), det(seg.start, seg.end, 0.9), det(seg.start, seg.end, 0.9)];
        let out = soft_nms(&ds, 0.5, 100);
        assert_eq!(out[0].score, 0.9);
        assert!((out[1].score - 0.9 * (-2f64).exp()).abs() < 1e-12);
        assert!((out[2].score - 0.9 * (-4f64).exp()).abs() < 1e-12);
        assert_eq!(tiou(out[0].segment(), out[2].segment()).unwrap(), 1.0);
    }

    #[test]
    fn rescaling() {
        let x = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(rescale_features(&x, 3).unwrap().data(), &[0.0, 0.5, 1.0]);
        assert_eq!(rescale_features(&x, 2).unwrap(), x);
    }
}
