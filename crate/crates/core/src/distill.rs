//! Teacher and student training loops, checkpoints and resumption.
//!
//! All randomness inside an epoch is derived from `(seed, epoch, batch,
//! sample)`, so a checkpoint only needs the epoch counter and optimiser
//! state to continue bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corruption::{apply_mrm, sample_pattern, MissingMode, MissingnessSpec};
use crate::datasets::{batch_iter, Dataset, DatasetConfig, ModalitySample};
use crate::error::{Error, Result};
use crate::eval::classification_metrics;
use crate::losses::{
    distillation_objective, task_loss, task_loss_with_grad, LossBreakdown, LossWeights, ObjectiveInputs,
};
use crate::model::{FusionNet, FusionNetConfig};
use crate::nn::Params;
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::seed;
use crate::statnet::ResponseCritics;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Margin of the contrastive term.
    pub eta: f64,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub ntcr_renormalize: bool,
    pub statnet_hidden: usize,
    pub statnet_layers: usize,
    pub net: FusionNetConfig,
    /// Student training corruption; ignored by the teacher.
    pub mrm: MissingnessSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-3,
            batch_size: 64,
            epochs: 30,
            seed: 0,
            eta: 1.2,
            loss_weights: LossWeights::default(),
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            ntcr_renormalize: false,
            statnet_hidden: 64,
            statnet_layers: 2,
            net: FusionNetConfig::default(),
            mrm: MissingnessSpec::random_train(0.5),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.clip_norm >= 0.0) {
            return bad(format!("clip_norm must be >= 0, got {}", self.clip_norm));
        }
        if self.statnet_hidden == 0 {
            return bad("statnet_hidden must be >= 1".into());
        }
        self.loss_weights.validate()?;
        self.net.validate()?;
        self.mrm.validate()?;
        if self.mrm.mode != MissingMode::RandomTrain {
            return bad("train.mrm must use mode = \"random_train\"".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

/// One line of the metrics log. Epoch 0 is the untrained initialisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: LossBreakdown,
    pub acc: f64,
    pub wf1: f64,
}

/// Everything needed to continue training where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub steps: u64,
    pub seed: u64,
    pub model: FusionNet<T>,
    pub critics: Option<ResponseCritics<T>>,
    pub adam: Adam<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub schema_version: u32,
    pub role: Role,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    /// Parameters of the best validation epoch.
    pub model: FusionNet<T>,
    pub critics: Option<ResponseCritics<T>>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: Vec<EpochRecord>,
    /// Hash of the frozen teacher a student was distilled from.
    pub teacher_hash: Option<String>,
    pub state: TrainState<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.train.epochs
    }

    pub fn last_valid(&self) -> Option<&EpochRecord> {
        self.history.iter().rev().find(|r| r.split == "valid")
    }
}

/// SHA-256 over the parameters in visit order, as little-endian `f64` bits.
pub fn param_hash<T: Scalar, P: Params<T> + ?Sized>(p: &P) -> String {
    let mut h = Sha256::new();
    p.visit("", &mut |name, v| {
        h.update(name.as_bytes());
        for x in v {
            h.update(x.as_f64().to_bits().to_le_bytes());
        }
    });
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension("json.tmp");
    let bytes = serde_json::to_vec(ckpt)?;
    fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let head: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: not valid JSON: {e}", path.display())))?;
    let version = head.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(u64::from(CHECKPOINT_SCHEMA)) {
        return Err(Error::Checkpoint(format!(
            "{}: schema version {:?}, expected {CHECKPOINT_SCHEMA}",
            path.display(),
            version
        )));
    }
    let ckpt: Checkpoint<T> =
        serde_json::from_value(head).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(ckpt)
}

/// Loads and checks the role.
pub fn load_checkpoint_as<T: Scalar>(path: &Path, role: Role) -> Result<Checkpoint<T>> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.role != role {
        return Err(Error::Checkpoint(format!(
            "{}: expected a {role} checkpoint, found {}",
            path.display(),
            ckpt.role
        )));
    }
    Ok(ckpt)
}

pub fn write_metrics(history: &[EpochRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "task", "scd", "cpd", "rcd", "total", "acc", "wf1"])?;
    for r in history {
        let l = &r.loss;
        w.write_record([
            r.epoch.to_string(),
            r.split.clone(),
            l.task.to_string(),
            l.scd.to_string(),
            l.cpd.to_string(),
            l.rcd.to_string(),
            l.total.to_string(),
            r.acc.to_string(),
            r.wf1.to_string(),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

// Domain tags for seed derivation.
const TAG_TEACHER: u64 = 0x7EAC;
const TAG_STUDENT: u64 = 0x57D7;
const TAG_VALID: u64 = 0x7A11;
const TAG_DROPOUT: u64 = 0xD209;
const TAG_MRM: u64 = 0x3A5C;
const TAG_PERM: u64 = 0x9E53;

/// Student and critics viewed as one parameter vector for a single optimiser.
struct Joint<'a, T> {
    net: &'a mut FusionNet<T>,
    critics: &'a mut ResponseCritics<T>,
}

impl<T: Scalar> Params<T> for Joint<'_, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.net.visit(&crate::nn::join(prefix, "student"), f);
        self.critics.visit(&crate::nn::join(prefix, "critics"), f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.net.visit_mut(f);
        self.critics.visit_mut(f);
    }
}

fn stack<T: Scalar>(rows: &[Array1<T>]) -> Array2<T> {
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal row lengths")
}

fn check_dataset<T: Scalar>(ds: &Dataset<T>, net: &FusionNetConfig) -> Result<()> {
    if ds.train.is_empty() || ds.valid.is_empty() {
        return Err(Error::InvalidConfig(
            "training needs nonempty train and valid splits".into(),
        ));
    }
    if ds.config.num_classes != net.num_classes || ds.config.feature_dims != net.input_dims {
        return Err(Error::InvalidConfig(format!(
            "dataset (K={}, dims={:?}) does not match net (K={}, dims={:?})",
            ds.config.num_classes, ds.config.feature_dims, net.num_classes, net.input_dims
        )));
    }
    Ok(())
}

fn divergence(epoch: usize, step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { component } => Error::Divergence {
            epoch,
            step: step as usize,
            detail: format!("non-finite {component} loss"),
        },
        other => other,
    }
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    sum.task += w * b.task;
    sum.scd += w * b.scd;
    sum.cpd += w * b.cpd;
    sum.rcd += w * b.rcd;
    sum.total += w * b.total;
}

fn scale(sum: &mut LossBreakdown, s: f64) {
    for v in [&mut sum.task, &mut sum.scd, &mut sum.cpd, &mut sum.rcd, &mut sum.total] {
        *v *= s;
    }
}

fn new_state<T: Scalar>(cfg: &TrainConfig, role: Role, ds: &Dataset<T>) -> Result<TrainState<T>> {
    let tag = match role {
        Role::Teacher => TAG_TEACHER,
        Role::Student => TAG_STUDENT,
    };
    let model = FusionNet::new(cfg.net.clone(), seed::mix(cfg.seed, &[tag]))?;
    let critics = match role {
        Role::Teacher => None,
        Role::Student => Some(ResponseCritics::new(
            ds.config.num_classes,
            cfg.statnet_hidden,
            cfg.statnet_layers,
            seed::mix(cfg.seed, &[tag, 1]),
        )?),
    };
    let n = model.num_params() + critics.as_ref().map_or(0, |c| c.num_params());
    Ok(TrainState {
        epoch: 0,
        steps: 0,
        seed: cfg.seed,
        model,
        critics,
        adam: Adam::new(cfg.adam, cfg.lr, n),
    })
}

/// Untrained teacher checkpoint with its epoch-0 validation record.
pub fn init_teacher<T: Scalar>(ds: &Dataset<T>, cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    check_dataset(ds, &cfg.net)?;
    let state = new_state(cfg, Role::Teacher, ds)?;
    let rec = teacher_validation(&state.model, &ds.valid, 0)?;
    Ok(Checkpoint {
        schema_version: CHECKPOINT_SCHEMA,
        role: Role::Teacher,
        train: cfg.clone(),
        dataset: ds.config.clone(),
        model: state.model.clone(),
        critics: None,
        best_epoch: 0,
        best_score: rec.acc,
        history: vec![rec],
        teacher_hash: None,
        state,
    })
}

fn teacher_validation<T: Scalar>(net: &FusionNet<T>, valid: &[ModalitySample<T>], epoch: usize) -> Result<EpochRecord> {
    let refs: Vec<&ModalitySample<T>> = valid.iter().collect();
    let (_, rs) = net.forward(&refs)?;
    let logits = stack(&rs.iter().map(|r| r.logits.clone()).collect::<Vec<_>>());
    let labels: Vec<usize> = valid.iter().map(|s| s.label).collect();
    let task = task_loss(logits.view(), &labels)?;
    let loss = crate::losses::total_loss([task, T::zero(), T::zero(), T::zero()], &LossWeights::task_only())?;
    let preds: Vec<usize> = rs.iter().map(|r| r.argmax()).collect();
    let m = classification_metrics(&preds, &labels, net.config.num_classes);
    Ok(EpochRecord {
        epoch,
        split: "valid".into(),
        loss,
        acc: m.accuracy,
        wf1: m.weighted_f1,
    })
}

fn finish_epoch<T: Scalar>(ckpt: &mut Checkpoint<T>, train_rec: EpochRecord, valid_rec: EpochRecord) {
    let score = match ckpt.role {
        Role::Teacher => valid_rec.acc,
        Role::Student => valid_rec.wf1,
    };
    let epoch = valid_rec.epoch;
    log::info!(
        "{} epoch {epoch}: train total {:.4}, valid total {:.4} acc {:.4} wf1 {:.4}",
        ckpt.role,
        train_rec.loss.total,
        valid_rec.loss.total,
        valid_rec.acc,
        valid_rec.wf1
    );
    ckpt.history.push(train_rec);
    ckpt.history.push(valid_rec);
    if score > ckpt.best_score {
        ckpt.best_score = score;
        ckpt.best_epoch = epoch;
        ckpt.model = ckpt.state.model.clone();
        ckpt.critics = ckpt.state.critics.clone();
    }
    ckpt.state.epoch = epoch;
}

fn teacher_epoch<T: Scalar>(ckpt: &mut Checkpoint<T>, ds: &Dataset<T>) -> Result<()> {
    let cfg = ckpt.train.clone();
    let epoch = ckpt.state.epoch + 1;
    let state = &mut ckpt.state;
    let mut sum = LossBreakdown::default();
    let (mut correct, mut seen) = (0usize, 0usize);
    let mut preds = Vec::with_capacity(ds.train.len());
    let mut labels_all = Vec::with_capacity(ds.train.len());
    for (b, batch) in batch_iter(&ds.train, cfg.batch_size, true, state.seed, epoch)?.enumerate() {
        let mut traces = Vec::with_capacity(batch.len());
        let mut logits = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let mut rng = seed::rng(
                state.seed,
                &[TAG_TEACHER, TAG_DROPOUT, epoch as u64, b as u64, i as u64],
            );
            let (tr, lg) = state.model.forward_trace(s, Some(&mut rng))?;
            traces.push(tr);
            logits.push(lg);
        }
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let logits = stack(&logits);
        let (task, d_logits) = task_loss_with_grad(logits.view(), &labels)?;
        let bd = crate::losses::total_loss([task, T::zero(), T::zero(), T::zero()], &LossWeights::task_only())
            .map_err(|e| divergence(epoch, state.steps, e))?;
        let mut grad = state.model.zeros_like();
        let zero_h = Array1::zeros(cfg.net.joint_dim());
        for (i, tr) in traces.iter().enumerate() {
            state
                .model
                .backward(tr, &zero_h, &d_logits.row(i).to_owned(), &mut grad);
        }
        let mut flat = grad.flatten();
        let norm = clip_grad_norm(&mut flat, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: state.steps as usize,
                detail: "non-finite gradient norm".into(),
            });
        }
        state.adam.update(&mut state.model, &flat);
        state.steps += 1;
        accumulate(&mut sum, &bd, batch.len() as f64);
        for (i, &y) in labels.iter().enumerate() {
            let p = crate::model::Response::from_logits(logits.row(i).to_owned()).argmax();
            correct += usize::from(p == y);
            preds.push(p);
            labels_all.push(y);
        }
        seen += batch.len();
    }
    scale(&mut sum, 1.0 / seen as f64);
    let m = classification_metrics(&preds, &labels_all, cfg.net.num_classes);
    debug_assert_eq!(correct as f64 / seen as f64, m.accuracy);
    let train_rec = EpochRecord {
        epoch,
        split: "train".into(),
        loss: sum,
        acc: m.accuracy,
        wf1: m.weighted_f1,
    };
    let valid_rec = teacher_validation(&ckpt.state.model, &ds.valid, epoch)?;
    finish_epoch(ckpt, train_rec, valid_rec);
    Ok(())
}

/// Frozen teacher outputs `(H^t, P^t)` on complete samples, keyed by id.
pub struct TeacherCache<T> {
    hash: String,
    outputs: HashMap<String, (Array1<T>, Array1<T>)>,
}

impl<T: Scalar> TeacherCache<T> {
    pub fn new(teacher: &FusionNet<T>, samples: &[&[ModalitySample<T>]]) -> Result<Self> {
        let mut outputs = HashMap::new();
        for split in samples {
            for s in split.iter() {
                let (h, r) = teacher.forward_sample(s)?;
                outputs.insert(s.id.clone(), (h.h, r.probs));
            }
        }
        Ok(TeacherCache {
            hash: param_hash(teacher),
            outputs,
        })
    }

    fn get(&self, id: &str) -> Result<&(Array1<T>, Array1<T>)> {
        self.outputs.get(id).ok_or_else(|| Error::Validation {
            record: id.into(),
            msg: "sample unknown to the teacher cache".into(),
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }
}

/// Untrained student checkpoint bound to `teacher`.
pub fn init_student<T: Scalar>(ds: &Dataset<T>, teacher: &Checkpoint<T>, cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    check_dataset(ds, &cfg.net)?;
    check_teacher(teacher, cfg)?;
    if teacher.dataset != ds.config {
        log::warn!("teacher was trained on a dataset with a different configuration");
    }
    let cache = TeacherCache::new(&teacher.model, &[&ds.valid])?;
    let state = new_state(cfg, Role::Student, ds)?;
    let rec = student_validation(&state, cfg, &ds.valid, &cache, 0)?;
    Ok(Checkpoint {
        schema_version: CHECKPOINT_SCHEMA,
        role: Role::Student,
        train: cfg.clone(),
        dataset: ds.config.clone(),
        model: state.model.clone(),
        critics: state.critics.clone(),
        best_epoch: 0,
        best_score: rec.wf1,
        history: vec![rec],
        teacher_hash: Some(param_hash(&teacher.model)),
        state,
    })
}

fn check_teacher<T: Scalar>(teacher: &Checkpoint<T>, cfg: &TrainConfig) -> Result<()> {
    if teacher.role != Role::Teacher {
        return Err(Error::Checkpoint(format!(
            "expected a teacher checkpoint, found {}",
            teacher.role
        )));
    }
    if teacher.model.config != cfg.net {
        return Err(Error::InvalidConfig(format!(
            "teacher/student net config mismatch: teacher {:?}, student {:?}",
            teacher.model.config, cfg.net
        )));
    }
    Ok(())
}

/// Corrupted copy of a sample with its pattern seeded by `parts`.
fn corrupt<T: Scalar>(
    s: &ModalitySample<T>,
    spec: &MissingnessSpec,
    seed: u64,
    parts: &[u64],
) -> Result<ModalitySample<T>> {
    let mut p = parts.to_vec();
    p.push(seed::str_hash(&s.id));
    let pat = sample_pattern(spec, s.seq_lens(), seed::mix(seed, &p))?;
    apply_mrm(s, &pat)
}

/// Full objective on a fixed corruption of the validation split, evaluated
/// in batches of `batch_size` in file order.
fn student_validation<T: Scalar>(
    state: &TrainState<T>,
    cfg: &TrainConfig,
    valid: &[ModalitySample<T>],
    cache: &TeacherCache<T>,
    epoch: usize,
) -> Result<EpochRecord> {
    let critics = state.critics.as_ref().expect("student state has critics");
    let mut sum = LossBreakdown::default();
    let mut preds = Vec::with_capacity(valid.len());
    let mut labels = Vec::with_capacity(valid.len());
    for (b, chunk) in valid.chunks(cfg.batch_size).enumerate() {
        let mut hs = Vec::new();
        let mut ls = Vec::new();
        let mut ht = Vec::new();
        let mut pt = Vec::new();
        for s in chunk {
            let cs = corrupt(s, &cfg.mrm, state.seed, &[TAG_VALID])?;
            let (h, r) = state.model.forward_sample(&cs)?;
            preds.push(r.argmax());
            hs.push(h.h);
            ls.push(r.logits);
            let (th, tp) = cache.get(&s.id)?;
            ht.push(th.clone());
            pt.push(tp.clone());
        }
        let lab: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let (hs, ls, ht, pt) = (stack(&hs), stack(&ls), stack(&ht), stack(&pt));
        let inp = ObjectiveInputs {
            h_s: hs.view(),
            logits_s: ls.view(),
            h_t: ht.view(),
            probs_t: pt.view(),
            labels: &lab,
        };
        let out = distillation_objective(
            &inp,
            critics,
            &cfg.loss_weights,
            T::lit(cfg.eta),
            seed::mix(state.seed, &[TAG_VALID, TAG_PERM, b as u64]),
            cfg.ntcr_renormalize,
        )?;
        accumulate(&mut sum, &out.breakdown, chunk.len() as f64);
        labels.extend(lab);
    }
    scale(&mut sum, 1.0 / valid.len() as f64);
    let m = classification_metrics(&preds, &labels, cfg.net.num_classes);
    Ok(EpochRecord {
        epoch,
        split: "valid".into(),
        loss: sum,
        acc: m.accuracy,
        wf1: m.weighted_f1,
    })
}

fn student_epoch<T: Scalar>(ckpt: &mut Checkpoint<T>, ds: &Dataset<T>, cache: &TeacherCache<T>) -> Result<()> {
    let cfg = ckpt.train.clone();
    let epoch = ckpt.state.epoch + 1;
    let state = &mut ckpt.state;
    let mut sum = LossBreakdown::default();
    let mut preds = Vec::with_capacity(ds.train.len());
    let mut labels_all = Vec::with_capacity(ds.train.len());
    let mut zero_norm = 0usize;
    let e = epoch as u64;
    for (b, batch) in batch_iter(&ds.train, cfg.batch_size, true, state.seed, epoch)?.enumerate() {
        let bb = b as u64;
        let mut traces = Vec::with_capacity(batch.len());
        let (mut hs, mut ls, mut ht, mut pt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, s) in batch.iter().enumerate() {
            let cs = corrupt(s, &cfg.mrm, state.seed, &[TAG_MRM, e, bb])?;
            let mut rng = seed::rng(state.seed, &[TAG_STUDENT, TAG_DROPOUT, e, bb, i as u64]);
            let (tr, lg) = state.model.forward_trace(&cs, Some(&mut rng))?;
            hs.push(state.model.trace_h(&tr).clone());
            ls.push(lg);
            traces.push(tr);
            let (th, tp) = cache.get(&s.id)?;
            ht.push(th.clone());
            pt.push(tp.clone());
        }
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let (hs, ls, ht, pt) = (stack(&hs), stack(&ls), stack(&ht), stack(&pt));
        let inp = ObjectiveInputs {
            h_s: hs.view(),
            logits_s: ls.view(),
            h_t: ht.view(),
            probs_t: pt.view(),
            labels: &labels,
        };
        let critics = state.critics.as_mut().expect("student state has critics");
        let out = distillation_objective(
            &inp,
            critics,
            &cfg.loss_weights,
            T::lit(cfg.eta),
            seed::mix(state.seed, &[TAG_PERM, e, bb]),
            cfg.ntcr_renormalize,
        )
        .map_err(|err| divergence(epoch, state.steps, err))?;
        zero_norm += out.zero_norm;

        let mut grad = state.model.zeros_like();
        for (i, tr) in traces.iter().enumerate() {
            state.model.backward(
                tr,
                &out.d_h.row(i).to_owned(),
                &out.d_logits.row(i).to_owned(),
                &mut grad,
            );
        }
        let mut flat = grad.flatten();
        flat.extend(out.critic_grad.flatten());
        let norm = clip_grad_norm(&mut flat, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: state.steps as usize,
                detail: "non-finite gradient norm".into(),
            });
        }
        let mut joint = Joint {
            net: &mut state.model,
            critics,
        };
        state.adam.update(&mut joint, &flat);
        state.steps += 1;

        accumulate(&mut sum, &out.breakdown, batch.len() as f64);
        for (i, &y) in labels.iter().enumerate() {
            preds.push(crate::model::Response::from_logits(ls.row(i).to_owned()).argmax());
            labels_all.push(y);
        }
    }
    if zero_norm > 0 {
        log::warn!("epoch {epoch}: {zero_norm} zero-norm cosine similarities treated as 0");
    }
    scale(&mut sum, 1.0 / ds.train.len() as f64);
    let m = classification_metrics(&preds, &labels_all, cfg.net.num_classes);
    let train_rec = EpochRecord {
        epoch,
        split: "train".into(),
        loss: sum,
        acc: m.accuracy,
        wf1: m.weighted_f1,
    };
    let valid_rec = student_validation(&ckpt.state, &cfg, &ds.valid, cache, epoch)?;
    finish_epoch(ckpt, train_rec, valid_rec);
    Ok(())
}

/// Trains `ckpt` until `until` completed epochs (capped at the configured
/// count). Students need their teacher; a stored teacher hash must match.
pub fn run_epochs<T: Scalar>(
    ckpt: &mut Checkpoint<T>,
    ds: &Dataset<T>,
    teacher: Option<&Checkpoint<T>>,
    until: usize,
) -> Result<()> {
    ckpt.train.validate()?;
    check_dataset(ds, &ckpt.train.net)?;
    if ckpt.dataset != ds.config {
        return Err(Error::InvalidConfig(
            "checkpoint was trained on a different dataset configuration".into(),
        ));
    }
    let until = until.min(ckpt.train.epochs);
    match ckpt.role {
        Role::Teacher => {
            while ckpt.state.epoch < until {
                teacher_epoch(ckpt, ds)?;
            }
        }
        Role::Student => {
            let teacher = teacher.ok_or_else(|| Error::InvalidConfig("student training needs a teacher".into()))?;
            check_teacher(teacher, &ckpt.train)?;
            let before = param_hash(&teacher.model);
            if ckpt.teacher_hash.as_deref() != Some(before.as_str()) {
                return Err(Error::Checkpoint(
                    "teacher does not match the one this student was started with".into(),
                ));
            }
            let cache = TeacherCache::new(&teacher.model, &[&ds.train, &ds.valid])?;
            while ckpt.state.epoch < until {
                student_epoch(ckpt, ds, &cache)?;
            }
            let after = param_hash(&teacher.model);
            if after != before || cache.hash() != before {
                return Err(Error::Checkpoint(
                    "teacher parameters changed during student training".into(),
                ));
            }
        }
    }
    Ok(())
}

pub fn train_teacher<T: Scalar>(ds: &Dataset<T>, cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    let mut ckpt = init_teacher(ds, cfg)?;
    run_epochs(&mut ckpt, ds, None, cfg.epochs)?;
    Ok(ckpt)
}

pub fn train_student<T: Scalar>(ds: &Dataset<T>, teacher: &Checkpoint<T>, cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    let mut ckpt = init_student(ds, teacher, cfg)?;
    run_epochs(&mut ckpt, ds, Some(teacher), cfg.epochs)?;
    Ok(ckpt)
}
