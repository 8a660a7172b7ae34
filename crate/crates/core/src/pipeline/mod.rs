//! Training phases, evaluation, checkpoints, config and metrics.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{kind_from_name, Checkpoint, FEATURES_MODEL};
pub use config::{
    EvalConfig, FinetuneConfig, InitKind, ModelConfig, OptimConfig, PhaseOptim, ReplicationName, RunConfig,
    TeacherConfig, TeacherTask,
};
pub use metrics::{fingerprint, read_metrics, MetricRecord, MetricsLog};

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{read_clips, ClipBatch, ClipFile, Corpus, NUM_APPEARANCE, NUM_MOTION, NUM_SCENE};
use crate::distill::{self, LossKind, SoftTarget};
use crate::error::{Error, Result};
use crate::inflation::inflate;
use crate::layers::Mode;
use crate::models::{StudentKind, StudentNet, TeacherNet2D};
use crate::optim::{sgd_step, SgdState};
use crate::tensor::ops::argmax;
use crate::tensor::{Graph, Tensor, Var};
use crate::ParamStore;

/// Head attached for the downstream motion task.
pub const ACTION_HEAD: &str = "action";
/// Rows are logged every this many optimizer steps (and at each epoch end).
pub const LOG_EVERY: usize = 25;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_PICK: u64 = 3;
const STREAM_HEAD: u64 = 4;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn file_hash(path: &Path) -> Result<[u8; 32]> {
    Ok(sha256(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Zeroes gradients, backpropagates, and takes one SGD step. Returns the loss.
fn train_step(g: &Graph, loss: Var, params: &mut ParamStore, sgd: &mut SgdState) -> Result<f64> {
    let v = g.value(loss).item() as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss became {v}")));
    }
    params.zero_grad();
    g.backward(loss, params)?;
    sgd_step(params, sgd)?;
    Ok(v)
}

fn missing_labels(file: &ClipFile, what: &str) -> Error {
    Error::Format { path: file.path().to_path_buf(), offset: 20, msg: format!("container has no {what} labels") }
}

/// Which label slot of a container supervises a classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSlot {
    Appearance,
    Motion,
}

fn labels_of(batch: &ClipBatch, slot: LabelSlot, file: &ClipFile) -> Result<Vec<usize>> {
    let l = match slot {
        LabelSlot::Appearance => batch.appearance.clone(),
        LabelSlot::Motion => batch.motion.clone(),
    };
    l.ok_or_else(|| missing_labels(file, if slot == LabelSlot::Motion { "motion" } else { "appearance" }))
}

/// Frames `picks[b]` of each clip as one `(Σ picks)×C×H×W` image batch.
pub fn gather_frames(clips: &Tensor, picks: &[Vec<usize>]) -> Result<Tensor> {
    let s = clips.shape();
    if s.len() != 5 || picks.len() != s[0] {
        return Err(Error::invalid("gather_frames", format!("{} pick lists for clips {s:?}", picks.len())));
    }
    let (c, t, hw) = (s[1], s[2], s[3] * s[4]);
    let mut out = Vec::new();
    let mut n = 0;
    for (b, frames) in picks.iter().enumerate() {
        for &f in frames {
            if f >= t {
                return Err(Error::invalid("gather_frames", format!("frame {f} of {t}")));
            }
            for ch in 0..c {
                let start = ((b * c + ch) * t + f) * hw;
                out.extend_from_slice(&clips.data()[start..start + hw]);
            }
            n += 1;
        }
    }
    Tensor::new([n, c, s[3], s[4]], out)
}

fn center_frames(batch: &ClipBatch) -> Result<Tensor> {
    let t = batch.clips.shape()[2];
    let picks = vec![vec![(t - 1) / 2]; batch.len()];
    gather_frames(&batch.clips, &picks)
}

/// Fraction of rows whose label is among the `k` largest logits (ties
/// count in the label's favor).
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(Error::invalid("topk", format!("{} labels for logits {s:?}", labels.len())));
    }
    if k == 0 || k > s[1] {
        return Err(Error::invalid("topk", format!("k={k} with {} classes", s[1])));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| {
            let row = logits.row(*i);
            row.iter().filter(|&&v| v > row[l]).count() < k
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Phase outputs: the trained network plus its held-out score.
pub struct ClassifierRun {
    pub net: TeacherNet2D,
    pub checkpoint: Checkpoint,
    pub test_accuracy: f64,
}

/// Trains a 2D classifier on center frames of `train`, labeled from `slot`,
/// and scores it on `test`.
#[allow(clippy::too_many_arguments)]
pub fn train_image_classifier(
    cfg: &RunConfig,
    seed: u64,
    train: &Path,
    test: &Path,
    slot: LabelSlot,
    classes: usize,
    phase: &str,
    log: &mut MetricsLog,
) -> Result<ClassifierRun> {
    let opt = &cfg.optim.teacher;
    let train_file = ClipFile::open(train)?;
    ClipFile::open(test)?;
    let mut net = TeacherNet2D::new(&cfg.model.trunk, classes, &mut rng_for(seed, STREAM_INIT))?;
    let mut sgd = SgdState::new(opt.lr, opt.momentum, opt.weight_decay)?;
    let mut shuffle = rng_for(seed, STREAM_SHUFFLE);
    let mut step = 0;
    for epoch in 0..opt.epochs {
        sgd.lr = opt.schedule().lr_at(epoch);
        net.mode = Mode::Train;
        let (mut total, mut seen, mut correct) = (0.0, 0usize, 0usize);
        for batch in read_clips(train, opt.batch_size, Some(shuffle.random()))? {
            let batch = batch?;
            let labels = labels_of(&batch, slot, &train_file)?;
            let x = center_frames(&batch)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let z = net.forward(&mut g, xv)?;
            correct += (0..labels.len()).filter(|&i| argmax(g.value(z).row(i)) == labels[i]).count();
            let loss = g.cross_entropy(z, &labels)?;
            let l = train_step(&g, loss, &mut net.params, &mut sgd)?;
            total += l * labels.len() as f64;
            seen += labels.len();
            step += 1;
        }
        let mut rec = MetricRecord::new(phase, epoch, step);
        rec.loss = Some(total / seen as f64);
        rec.lr = Some(sgd.lr);
        rec.extra.insert("train_acc".into(), correct as f64 / seen as f64);
        log.log(rec)?;
    }
    net.mode = Mode::Eval;
    let test_accuracy = image_accuracy(&net, test, slot, opt.batch_size)?;
    let mut rec = MetricRecord::new(phase, opt.epochs, step);
    rec.clip_acc = Some(test_accuracy);
    rec.top1 = Some(test_accuracy);
    log.log(rec)?;
    let checkpoint = Checkpoint::from_teacher(&net, opt.epochs as u32, cfg.hash(), seed);
    Ok(ClassifierRun { net, checkpoint, test_accuracy })
}

/// Center-frame accuracy of an image classifier on a container.
pub fn image_accuracy(net: &TeacherNet2D, path: &Path, slot: LabelSlot, batch_size: usize) -> Result<f64> {
    let file = ClipFile::open(path)?;
    let (mut hits, mut n) = (0.0, 0usize);
    for batch in read_clips(path, batch_size, None)? {
        let batch = batch?;
        let labels = labels_of(&batch, slot, &file)?;
        let z = net.logits(&center_frames(&batch)?)?;
        hits += topk_accuracy(&z, &labels, 1)? * labels.len() as f64;
        n += labels.len();
    }
    Ok(hits / n as f64)
}

/// Trains the image teacher selected by `cfg.teacher.task`.
pub fn train_teacher(cfg: &RunConfig, seed: u64, log: &mut MetricsLog) -> Result<ClassifierRun> {
    let (train, test, classes) = match cfg.teacher.task {
        TeacherTask::Appearance => (Corpus::TeacherImages, Corpus::TeacherImagesTest, NUM_APPEARANCE),
        TeacherTask::Scene => (Corpus::TeacherScenes, Corpus::TeacherScenesTest, NUM_SCENE),
    };
    let d = &cfg.data;
    train_image_classifier(cfg, seed, &d.path(train), &d.path(test), LabelSlot::Appearance, classes, "teacher", log)
}

/// A 2D classifier trained on center frames of the target clips against
/// their motion labels; it can only do as well as a single frame allows.
pub fn single_frame_probe(cfg: &RunConfig, seed: u64, log: &mut MetricsLog) -> Result<ClassifierRun> {
    let d = &cfg.data;
    train_image_classifier(
        cfg,
        seed,
        &d.path(Corpus::TargetTrain),
        &d.path(Corpus::TargetTest),
        LabelSlot::Motion,
        NUM_MOTION,
        "frame-probe",
        log,
    )
}

pub struct DistillRun {
    pub student: StudentNet,
    pub checkpoint: Checkpoint,
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of (clip, teacher) targets that passed the entropy filter.
    pub kept_fraction: f64,
    pub teacher_hashes: Vec<[u8; 32]>,
}

/// Soft targets of one teacher for every clip of a batch.
fn teacher_targets(
    teacher: &TeacherNet2D,
    id: &str,
    batch: &ClipBatch,
    picks: &[Vec<usize>],
    tau: f64,
) -> Result<Vec<SoftTarget>> {
    let frames = gather_frames(&batch.clips, picks)?;
    let logits = teacher.logits(&frames)?;
    let k = logits.shape()[1];
    let mut row = 0;
    picks
        .iter()
        .map(|p| {
            let rows = Tensor::new([p.len(), k], logits.data()[row * k..(row + p.len()) * k].to_vec())?;
            row += p.len();
            distill::make_target(&rows, tau, id)
        })
        .collect()
}

/// Distillation pretraining of `cfg.model.student` against the teachers
/// listed in `cfg.distill.teachers`.
pub fn distill_pretrain(cfg: &RunConfig, seed: u64, log: &mut MetricsLog) -> Result<DistillRun> {
    let dc = &cfg.distill;
    dc.validate()?;
    if dc.teachers.is_empty() {
        return Err(Error::Config("distill.teachers is empty".into()));
    }
    let mut teachers = Vec::new();
    let mut hashes = Vec::new();
    for spec in &dc.teachers {
        let bytes = std::fs::read(&spec.checkpoint).map_err(|e| Error::io(&spec.checkpoint, e))?;
        hashes.push(sha256(&bytes));
        teachers.push(Checkpoint::from_bytes(&spec.checkpoint, &bytes)?.to_teacher(&cfg.model.trunk)?);
    }
    let ids: Vec<String> = (0..teachers.len()).map(|i| format!("teacher{i}")).collect();
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let weights: Vec<f64> = dc.teachers.iter().map(|t| t.weight).collect();

    let kind = StudentKind::from_architecture(cfg.model.student)?;
    let mut init = rng_for(seed, STREAM_INIT);
    let mut student = StudentNet::new(kind, &cfg.model.trunk, &mut init)?;
    for (id, t) in ids.iter().zip(&teachers) {
        student.add_head(id, t.num_classes(), &mut init)?;
    }
    for (id, t) in ids.iter().zip(&teachers) {
        let head = student.head(id)?;
        if head.out_features != t.num_classes() || head.in_features != student.feature_dim() {
            return Err(Error::TopologyMismatch(vec![format!("heads.{id}")]));
        }
    }

    let path = cfg.data.path(Corpus::DistillVideos);
    let file = ClipFile::open(&path)?;
    let t_len = file.header().frames as usize;
    drop(file);
    let opt = &cfg.optim.distill;
    let mut sgd = SgdState::new(opt.lr, opt.momentum, opt.weight_decay)?;
    let mut shuffle = rng_for(seed, STREAM_SHUFFLE);
    let mut pick_rng = rng_for(seed, STREAM_PICK);
    let mut cache: Vec<HashMap<usize, SoftTarget>> = vec![HashMap::new(); teachers.len()];
    let (mut kept_total, mut target_total) = (0usize, 0usize);
    let mut epoch_losses = Vec::new();
    let mut step = 0;
    for epoch in 0..opt.epochs {
        sgd.lr = opt.schedule().lr_at(epoch);
        student.mode = Mode::Train;
        let (mut sum, mut batches) = (0.0, 0usize);
        let (mut win_total, mut win_parts, mut win_n) = (0.0, vec![0.0; teachers.len()], 0usize);
        let mut epoch_kept = 0usize;
        let mut epoch_targets = 0usize;
        for batch in read_clips(&path, opt.batch_size, Some(shuffle.random()))? {
            let batch = batch?;
            let b = batch.len();
            let picks: Vec<Vec<usize>> =
                (0..b).map(|_| distill::pick_frames(t_len, dc.pick_strategy, &mut pick_rng)).collect::<Result<_>>()?;
            let mut per_teacher = Vec::with_capacity(teachers.len());
            for (ti, teacher) in teachers.iter().enumerate() {
                let targets = if dc.pick_strategy.is_stochastic() {
                    teacher_targets(teacher, &ids[ti], &batch, &picks, dc.tau)?
                } else {
                    let missing: Vec<usize> = (0..b).filter(|&i| !cache[ti].contains_key(&batch.indices[i])).collect();
                    if !missing.is_empty() {
                        let sub = ClipBatch {
                            clips: batch.clips.select_rows(&missing)?,
                            appearance: None,
                            motion: None,
                            indices: missing.iter().map(|&i| batch.indices[i]).collect(),
                        };
                        let sub_picks: Vec<Vec<usize>> = missing.iter().map(|&i| picks[i].clone()).collect();
                        let fresh = teacher_targets(teacher, &ids[ti], &sub, &sub_picks, dc.tau)?;
                        for (idx, t) in sub.indices.iter().zip(fresh) {
                            cache[ti].insert(*idx, t);
                        }
                    }
                    batch.indices.iter().map(|i| cache[ti][i].clone()).collect()
                };
                per_teacher.push(targets);
            }

            let mut g = Graph::new();
            let x = g.constant(batch.clips.clone());
            let outs = student.forward_heads(&mut g, x, &id_refs)?;
            let mut losses = Vec::with_capacity(teachers.len());
            for (targets, &z) in per_teacher.iter().zip(&outs) {
                let mask = distill::keep_mask(targets, dc.entropy_threshold);
                let w: Vec<f64> = mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                let kept = mask.iter().filter(|&&k| k).count();
                epoch_kept += kept;
                epoch_targets += b;
                let k = targets[0].probs.len();
                let loss = match dc.loss {
                    LossKind::CrossEntropy => {
                        let y: Vec<f64> = targets.iter().flat_map(|t| t.probs.iter().copied()).collect();
                        distill::soft_target_loss(&mut g, z, &Tensor::from_f64([b, k], &y)?, Some(&w))?
                    }
                    LossKind::MseLogits => {
                        let y: Vec<f64> = targets.iter().flat_map(|t| t.logits.iter().copied()).collect();
                        distill::mse_logit_loss(&mut g, z, &Tensor::from_f64([b, k], &y)?, Some(&w))?
                    }
                };
                losses.push(loss);
            }
            let total = distill::multi_teacher_loss(&mut g, &losses, &weights)?;
            let parts: Vec<f64> = losses.iter().zip(&weights).map(|(&l, w)| w * g.value(l).item() as f64).collect();
            let l = train_step(&g, total, &mut student.params, &mut sgd)?;
            step += 1;
            sum += l;
            batches += 1;
            win_total += l;
            win_n += 1;
            for (acc, p) in win_parts.iter_mut().zip(&parts) {
                *acc += p;
            }
            if step % LOG_EVERY == 0 {
                let mut rec = MetricRecord::new("distill", epoch, step);
                rec.loss = Some(win_total / win_n as f64);
                rec.lr = Some(sgd.lr);
                for (id, p) in ids.iter().zip(&win_parts) {
                    rec.extra.insert(format!("loss/{id}"), p / win_n as f64);
                }
                log.log(rec)?;
                win_total = 0.0;
                win_parts.iter_mut().for_each(|p| *p = 0.0);
                win_n = 0;
            }
        }
        kept_total += epoch_kept;
        target_total += epoch_targets;
        let mean = sum / batches as f64;
        epoch_losses.push(mean);
        let mut rec = MetricRecord::new("distill-epoch", epoch, step);
        rec.loss = Some(mean);
        rec.lr = Some(sgd.lr);
        rec.extra.insert("kept".into(), epoch_kept as f64 / epoch_targets as f64);
        log.log(rec)?;
    }
    for (spec, before) in dc.teachers.iter().zip(&hashes) {
        if file_hash(&spec.checkpoint)? != *before {
            return Err(Error::invalid(
                "distill",
                format!("teacher checkpoint {} changed during the run", spec.checkpoint.display()),
            ));
        }
    }
    let checkpoint = Checkpoint::from_student(&student, opt.epochs as u32, cfg.hash(), seed);
    Ok(DistillRun {
        student,
        checkpoint,
        epoch_losses,
        kept_fraction: kept_total as f64 / target_total.max(1) as f64,
        teacher_hashes: hashes,
    })
}

/// Starting point of finetuning.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Scratch,
    /// A teacher checkpoint (inflated on the fly) or an inflated res3d checkpoint.
    Inflate(PathBuf),
    Distill(PathBuf),
}

impl Init {
    pub fn from_config(f: &FinetuneConfig) -> Result<Self> {
        let from =
            || f.from.clone().ok_or_else(|| Error::Config(format!("finetune.init = {:?} needs finetune.from", f.init)));
        Ok(match f.init {
            InitKind::Scratch => Init::Scratch,
            InitKind::Inflate => Init::Inflate(from()?),
            InitKind::Distill => Init::Distill(from()?),
        })
    }
}

/// Inflates a teacher checkpoint into a fresh res3d student (no heads).
pub fn inflate_checkpoint(cfg: &RunConfig, teacher: &Path, seed: u64) -> Result<StudentNet> {
    let t = Checkpoint::load(teacher)?.to_teacher(&cfg.model.trunk)?;
    let mut s = StudentNet::new(StudentKind::Res3d, &cfg.model.trunk, &mut rng_for(seed, STREAM_INIT))?;
    inflate(&t, &mut s, cfg.model.replication.into())?;
    Ok(s)
}

/// The student finetuning starts from: trunk per `init`, old heads
/// dropped, a fresh motion head attached.
pub fn finetune_student(cfg: &RunConfig, init: &Init, seed: u64) -> Result<StudentNet> {
    let kind = StudentKind::from_architecture(cfg.model.student)?;
    let mut net = match init {
        Init::Scratch => StudentNet::new(kind, &cfg.model.trunk, &mut rng_for(seed, STREAM_INIT))?,
        Init::Inflate(p) => {
            if kind != StudentKind::Res3d {
                return Err(Error::Config(format!(
                    "inflation init needs res3d-tiny; {} has no 2D counterpart",
                    cfg.model.student
                )));
            }
            let ckpt = Checkpoint::load(p)?;
            if ckpt.model == crate::models::Architecture::Teacher2dTiny.name() {
                inflate_checkpoint(cfg, p, seed)?
            } else {
                ckpt.to_student(&cfg.model.trunk)?
            }
        }
        Init::Distill(p) => Checkpoint::load(p)?.to_student(&cfg.model.trunk)?,
    };
    if net.kind != kind {
        return Err(Error::Config(format!(
            "checkpoint holds {}, config asks for {}",
            net.architecture(),
            cfg.model.student
        )));
    }
    let heads: Vec<String> = net.heads.keys().cloned().collect();
    for h in heads {
        net.remove_head(&h)?;
    }
    net.add_head(ACTION_HEAD, NUM_MOTION, &mut rng_for(seed, STREAM_HEAD))?;
    net.mode = Mode::Train;
    Ok(net)
}

pub struct FinetuneRun {
    pub student: StudentNet,
    pub checkpoint: Checkpoint,
    pub eval: EvalMetrics,
}

/// Supervised training of the motion head and trunk on the target train
/// split, then evaluation on the test split.
pub fn finetune(cfg: &RunConfig, init: &Init, seed: u64, log: &mut MetricsLog) -> Result<FinetuneRun> {
    let mut net = finetune_student(cfg, init, seed)?;
    let train = cfg.data.path(Corpus::TargetTrain);
    let test = cfg.data.path(Corpus::TargetTest);
    let file = ClipFile::open(&train)?;
    ClipFile::open(&test)?;
    let opt = &cfg.optim.finetune;
    let mut sgd = SgdState::new(opt.lr, opt.momentum, opt.weight_decay)?;
    let mut shuffle = rng_for(seed, STREAM_SHUFFLE);
    let mut step = 0;
    for epoch in 0..opt.epochs {
        sgd.lr = opt.schedule().lr_at(epoch);
        net.mode = Mode::Train;
        let (mut total, mut seen, mut correct) = (0.0, 0usize, 0usize);
        for batch in read_clips(&train, opt.batch_size, Some(shuffle.random()))? {
            let batch = batch?;
            let labels = labels_of(&batch, LabelSlot::Motion, &file)?;
            let mut g = Graph::new();
            let x = g.constant(batch.clips.clone());
            let z = net.forward(&mut g, x, ACTION_HEAD)?;
            correct += (0..labels.len()).filter(|&i| argmax(g.value(z).row(i)) == labels[i]).count();
            let loss = g.cross_entropy(z, &labels)?;
            total += train_step(&g, loss, &mut net.params, &mut sgd)? * labels.len() as f64;
            seen += labels.len();
            step += 1;
        }
        let mut rec = MetricRecord::new("finetune", epoch, step);
        rec.loss = Some(total / seen as f64);
        rec.lr = Some(sgd.lr);
        rec.extra.insert("train_acc".into(), correct as f64 / seen as f64);
        log.log(rec)?;
    }
    net.mode = Mode::Eval;
    let eval = evaluate(&net, ACTION_HEAD, &test, &cfg.eval, cfg.data.frames, opt.batch_size)?;
    log.log(eval.record("finetune-eval", opt.epochs, step))?;
    let checkpoint = Checkpoint::from_student(&net, opt.epochs as u32, cfg.hash(), seed);
    Ok(FinetuneRun { student: net, checkpoint, eval })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub clip_acc: f64,
    pub top1: f64,
    pub topk: f64,
    pub k: usize,
    pub videos: usize,
}

impl EvalMetrics {
    pub fn record(&self, phase: &str, epoch: usize, step: usize) -> MetricRecord {
        let mut rec = MetricRecord::new(phase, epoch, step);
        rec.clip_acc = Some(self.clip_acc);
        rec.top1 = Some(self.top1);
        rec.topk = Some(self.topk);
        rec.extra.insert("k".into(), self.k as f64);
        rec.extra.insert("videos".into(), self.videos as f64);
        rec
    }
}

/// Start frames of `n` windows of `window` frames spread uniformly over a
/// `len`-frame video.
pub fn window_starts(len: usize, window: usize, n: usize) -> Result<Vec<usize>> {
    if window == 0 || window > len || n == 0 {
        return Err(Error::invalid("evaluate", format!("{n} windows of {window} frames in a {len}-frame video")));
    }
    let span = len - window;
    Ok((0..n).map(|i| if n == 1 { span / 2 } else { (i * span + (n - 1) / 2) / (n - 1) }).collect())
}

/// Averages each consecutive group of `n` logit rows.
pub fn average_groups(logits: &Tensor, n: usize) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 || n == 0 || s[0] % n != 0 {
        return Err(Error::invalid("evaluate", format!("cannot group {s:?} by {n}")));
    }
    let k = s[1];
    let mut out = vec![0.0f64; s[0] / n * k];
    for (r, row) in logits.data().chunks(k).enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[(r / n) * k + j] += *v as f64 / n as f64;
        }
    }
    Tensor::from_f64([s[0] / n, k], &out)
}

/// Per-clip accuracy over every window, plus video-level top-1/top-k from
/// logits averaged over `clips_per_video` uniformly placed windows.
pub fn evaluate(
    net: &StudentNet,
    head: &str,
    corpus: &Path,
    eval: &EvalConfig,
    window: usize,
    batch_size: usize,
) -> Result<EvalMetrics> {
    let classes = net.head(head)?.out_features;
    if eval.top_k > classes {
        return Err(Error::invalid("evaluate", format!("top-{} requested with {classes} classes", eval.top_k)));
    }
    let file = ClipFile::open(corpus)?;
    let h = *file.header();
    let n = eval.clips_per_video;
    let starts = window_starts(h.frames as usize, window, n)?;
    let mut net = net.clone();
    net.mode = Mode::Eval;
    let (mut clip_hits, mut top1, mut topk, mut videos) = (0.0, 0.0, 0.0, 0usize);
    for batch in read_clips(corpus, batch_size, None)? {
        let batch = batch?;
        let labels = labels_of(&batch, LabelSlot::Motion, &file)?;
        let windows = crop_windows(&batch.clips, &starts, window)?;
        let z = net.logits(&windows, head)?;
        let per_clip: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, n)).collect();
        clip_hits += topk_accuracy(&z, &per_clip, 1)? * per_clip.len() as f64;
        let v = average_groups(&z, n)?;
        top1 += topk_accuracy(&v, &labels, 1)? * labels.len() as f64;
        topk += topk_accuracy(&v, &labels, eval.top_k)? * labels.len() as f64;
        videos += labels.len();
    }
    Ok(EvalMetrics {
        clip_acc: clip_hits / (videos * n) as f64,
        top1: top1 / videos as f64,
        topk: topk / videos as f64,
        k: eval.top_k,
        videos,
    })
}

/// `B×C×L×H×W` videos to `(B·n)×C×window×H×W` clips, video-major.
pub fn crop_windows(videos: &Tensor, starts: &[usize], window: usize) -> Result<Tensor> {
    let s = videos.shape();
    let (b, c, l, hw) = (s[0], s[1], s[2], s[3] * s[4]);
    if starts.iter().any(|&st| st + window > l) {
        return Err(Error::invalid("crop_windows", format!("window past {l} frames")));
    }
    let mut out = Vec::with_capacity(b * starts.len() * c * window * hw);
    for v in 0..b {
        for &st in starts {
            for ch in 0..c {
                let base = (v * c + ch) * l * hw;
                out.extend_from_slice(&videos.data()[base + st * hw..base + (st + window) * hw]);
            }
        }
    }
    Tensor::new([b * starts.len(), c, window, s[3], s[4]], out)
}

/// Pooled trunk features for every clip of a corpus, with its labels, in
/// checkpoint entry format: `features` (N×D), `appearance`, `motion` (N).
pub fn export_features(net: &StudentNet, corpus: &Path, batch_size: usize, seed: u64) -> Result<Checkpoint> {
    let mut net = net.clone();
    net.mode = Mode::Eval;
    let (mut feats, mut app, mut mot) = (Vec::new(), Vec::new(), Vec::new());
    let mut rows = 0;
    let mut dim = net.feature_dim();
    for batch in read_clips(corpus, batch_size, None)? {
        let batch = batch?;
        let mut g = Graph::inference();
        let x = g.constant(batch.clips.clone());
        let f = net.features(&mut g, x)?;
        dim = g.shape(f)[1];
        feats.extend_from_slice(g.value(f).data());
        rows += batch.len();
        app.extend(batch.appearance.iter().flatten().map(|&v| v as f32));
        mot.extend(batch.motion.iter().flatten().map(|&v| v as f32));
    }
    let mut entries = vec![("features".to_string(), Tensor::new([rows, dim], feats)?)];
    if !app.is_empty() {
        entries.push(("appearance".into(), Tensor::new([rows], app)?));
    }
    if !mot.is_empty() {
        entries.push(("motion".into(), Tensor::new([rows], mot)?));
    }
    Ok(Checkpoint { model: FEATURES_MODEL.into(), epoch: 0, config_hash: [0; 32], seed, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_examples() {
        let z = Tensor::new([2, 3], vec![3., 2., 1., 0., 5., 1.]).unwrap();
        assert_eq!(topk_accuracy(&z, &[0, 1], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&z, &[1, 2], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&z, &[1, 2], 2).unwrap(), 1.0);
        assert!(topk_accuracy(&z, &[0, 1], 4).is_err());
        assert!(topk_accuracy(&z, &[0, 1], 0).is_err());
    }

    #[test]
    fn uniform_random_logits_score_k_over_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1000;
        let z = Tensor::from_fn([n, NUM_MOTION], |_| rng.random::<f32>());
        let labels: Vec<usize> = (0..n).map(|i| i % NUM_MOTION).collect();
        for k in [1, 3, 5] {
            let acc = topk_accuracy(&z, &labels, k).unwrap();
            assert!((acc - k as f64 / NUM_MOTION as f64).abs() < 0.03 + 1e-12, "k={k}: {acc}");
        }
    }

    #[test]
    fn windows_are_uniform() {
        assert_eq!(window_starts(8, 8, 1).unwrap(), vec![0]);
        assert_eq!(window_starts(8, 8, 3).unwrap(), vec![0, 0, 0]);
        assert_eq!(window_starts(24, 8, 3).unwrap(), vec![0, 8, 16]);
        assert_eq!(window_starts(20, 8, 1).unwrap(), vec![6]);
        assert!(window_starts(4, 8, 1).is_err());
    }

    #[test]
    fn grouped_average() {
        let z = Tensor::new([4, 2], vec![1., 3., 3., 1., 0., 0., 2., 2.]).unwrap();
        assert_eq!(average_groups(&z, 2).unwrap().data(), &[2., 2., 1., 1.]);
        assert!(average_groups(&z, 3).is_err());
    }

    #[test]
    fn gather_and_crop() {
        // B=2, C=1, T=3, 1×1 frames with value 10·b + t
        let clips = Tensor::new([2, 1, 3, 1, 1], vec![0., 1., 2., 10., 11., 12.]).unwrap();
        let f = gather_frames(&clips, &[vec![1], vec![2, 0]]).unwrap();
        assert_eq!(f.shape(), &[3, 1, 1, 1]);
        assert_eq!(f.data(), &[1., 12., 10.]);
        let w = crop_windows(&clips, &[0, 1], 2).unwrap();
        assert_eq!(w.shape(), &[4, 1, 2, 1, 1]);
        assert_eq!(w.data(), &[0., 1., 1., 2., 10., 11., 11., 12.]);
    }
}
