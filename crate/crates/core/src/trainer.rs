//! Few-shot training loop: prompt-anchored (or head) cross-entropy, Adam with
//! linear warm-up and linear decay, seeded augmentation, early stopping on
//! validation loss with best-epoch restore.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptedModel, Strategy};
use crate::autograd::{Gradients, Graph, Mat, Var};
use crate::backbone::argmax;
use crate::dataset::PatchSample;
use crate::error::{Error, Result};

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Defaults to `min(32, train-set size)`.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    /// Defaults to a tenth of `total_steps` (at least one step).
    pub warmup_steps: Option<usize>,
    /// Defaults to `max_epochs · steps_per_epoch`.
    pub total_steps: Option<usize>,
    pub patience: usize,
    pub min_delta: f64,
    /// Seeds shuffling, augmentation and dropout.
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: None,
            max_epochs: 100,
            warmup_steps: None,
            total_steps: None,
            patience: 5,
            min_delta: 1e-3,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Strategy defaults: a smaller learning rate for full-layer tuning.
    pub fn for_strategy(strategy: Strategy) -> Self {
        let base_lr = if strategy == Strategy::Vanilla { 1e-4 } else { 1e-3 };
        Self {
            base_lr,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("min_delta must be non-negative".into()));
        }
        if self.max_epochs == 0 || self.batch_size == Some(0) {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warm-up from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {warmup_steps} must be below total_steps {total_steps}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            self.base_lr * step as f64 / self.warmup_steps as f64
        } else {
            self.base_lr * (self.total_steps - step) as f64 / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

/// Mean cross-entropy of `softmax(img · anchorsᵀ / τ)` against `labels`.
pub fn contrastive_loss(g: &mut Graph, img: Var, anchors: Var, labels: &[usize], temperature: f64) -> Result<Var> {
    let k = g.value(anchors).nrows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::LabelOutOfRange(bad));
    }
    if g.value(img).nrows() != labels.len() {
        return Err(Error::ShapeMismatch("one label per image embedding".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let sims = g.matmul_nt(img, anchors);
    let logits = g.scale(sims, 1.0 / temperature);
    Ok(g.softmax_cross_entropy(logits, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    /// 1-based epoch holding the reference best value.
    pub best_epoch: usize,
}

/// Apply the patience rule to a minimized monitor sequence (epoch `i + 1`
/// at index `i`). An epoch improves only if it beats the best value by more
/// than `min_delta`; training stops once `patience` consecutive epochs fail
/// to improve.
pub fn early_stop(monitor: &[f64], patience: usize, min_delta: f64) -> StopDecision {
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut wait = 0;
    for (i, &m) in monitor.iter().enumerate() {
        if best - m > min_delta || best_epoch == 0 {
            best = m;
            best_epoch = i + 1;
            wait = 0;
        } else {
            wait += 1;
        }
    }
    StopDecision {
        stop: wait >= patience,
        best_epoch,
    }
}

/// One random draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
    pub brightness: f64,
    pub contrast: f64,
}

pub const FLIP_PROB: f64 = 0.5;
pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const JITTER: f64 = 0.1;

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            angle_deg: 0.0,
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip_h: rng.gen_bool(FLIP_PROB),
            flip_v: rng.gen_bool(FLIP_PROB),
            angle_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            brightness: rng.gen_range(1.0 - JITTER..=1.0 + JITTER),
            contrast: rng.gen_range(1.0 - JITTER..=1.0 + JITTER),
        }
    }

    pub fn apply(&self, pixels: &Array3<f64>) -> Array3<f64> {
        let (h, w, c) = pixels.dim();
        let mut out = pixels.clone();
        if self.flip_h {
            out = Array3::from_shape_fn((h, w, c), |(y, x, ch)| out[[y, w - 1 - x, ch]]);
        }
        if self.flip_v {
            out = Array3::from_shape_fn((h, w, c), |(y, x, ch)| out[[h - 1 - y, x, ch]]);
        }
        if self.angle_deg != 0.0 {
            out = rotate_bilinear(&out, self.angle_deg.to_radians());
        }
        if self.brightness != 1.0 || self.contrast != 1.0 {
            let mean = out.mean().unwrap_or(0.0);
            let (b, k) = (self.brightness, self.contrast);
            out.mapv_inplace(|v| (((v - mean) * k + mean) * b).clamp(0.0, 1.0));
        }
        out
    }
}

/// Rotate about the image center with edge-clamped bilinear sampling.
fn rotate_bilinear(img: &Array3<f64>, theta: f64) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, w as f64 - 1.0);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let top = img[[y0, x0, ch]] * (1.0 - fx) + img[[y0, x1, ch]] * fx;
                let bot = img[[y1, x0, ch]] * (1.0 - fx) + img[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Seeded random flip / rotation / brightness-contrast jitter. Label and
/// squareness are preserved.
pub fn augment(patch: &PatchSample, rng: &mut impl Rng) -> PatchSample {
    let params = AugmentParams::sample(rng);
    PatchSample {
        pixels: params.apply(&patch.pixels),
        label: patch.label,
        source: patch.source.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStopped => "early_stopped",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_monitor: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub steps: usize,
}

#[derive(Serialize, Deserialize)]
struct TerminalRecord {
    stop_reason: StopReason,
    best_epoch: usize,
    steps: usize,
}

impl TrainingHistory {
    /// One JSON object per epoch, then a terminal record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&TerminalRecord {
            stop_reason: self.stop_reason,
            best_epoch: self.best_epoch,
            steps: self.steps,
        })?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let (last, body) = lines
            .split_last()
            .ok_or_else(|| Error::Config("empty history file".into()))?;
        let epochs = body
            .iter()
            .map(|l| serde_json::from_str(l))
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        let t: TerminalRecord = serde_json::from_str(last)?;
        Ok(Self {
            epochs,
            best_epoch: t.best_epoch,
            stop_reason: t.stop_reason,
            steps: t.steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn best_record(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Update every parameter with a gradient. Frozen parameters never
    /// receive gradients from the graph; seeing one here is a bug.
    pub fn step(&mut self, model: &mut AdaptedModel, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, grad) in grads {
            let p = model
                .param_mut(name)
                .ok_or_else(|| Error::Adaptation(format!("gradient for unknown parameter {name}")))?;
            if !p.trainable {
                return Err(Error::Adaptation(format!("gradient reached frozen parameter {name}")));
            }
            let g = grad + &(&p.value * self.weight_decay);
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

fn text_trainable(model: &AdaptedModel) -> bool {
    model.head.is_none()
        && model
            .backbone
            .params
            .iter()
            .any(|(n, p)| p.trainable && n.starts_with("text."))
}

/// Logits for a batch, reusing precomputed prompt anchors when given.
fn batch_logits(
    model: &AdaptedModel,
    g: &mut Graph,
    images: &[&Array3<f64>],
    prompts: &[String],
    anchors: Option<&Mat>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Option<crate::adaptation::BnBatchStats>)> {
    match (anchors, &model.head) {
        (Some(a), None) => {
            let img = model.backbone.image_embeddings(g, images)?;
            let a = g.constant(a.clone());
            let sims = g.matmul_nt(img, a);
            Ok((g.scale(sims, 1.0 / model.backbone.temperature()), None))
        }
        _ => model.logits(g, images, prompts, rng),
    }
}

fn frozen_anchors(model: &AdaptedModel, prompts: &[String]) -> Result<Option<Mat>> {
    if model.head.is_some() || text_trainable(model) {
        return Ok(None);
    }
    let mut g = Graph::new();
    let t = model.backbone.text_embeddings(&mut g, prompts)?;
    Ok(Some(g.value(t).clone()))
}

/// Inference-mode class probabilities (N × K) for `samples`.
pub fn predict(model: &AdaptedModel, samples: &[PatchSample], prompts: &[String]) -> Result<Mat> {
    Ok(eval_pass(model, samples, prompts)?.0)
}

/// Probabilities plus mean cross-entropy over `samples`.
fn eval_pass(model: &AdaptedModel, samples: &[PatchSample], prompts: &[String]) -> Result<(Mat, f64)> {
    let anchors = match model.head {
        Some(_) => None,
        None => {
            let mut g = Graph::new();
            let t = model.backbone.text_embeddings(&mut g, prompts)?;
            Some(g.value(t).clone())
        }
    };
    let mut rows = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let imgs: Vec<_> = chunk.iter().map(|p| &p.pixels).collect();
        let labels: Vec<usize> = chunk.iter().map(|p| p.label.index()).collect();
        let mut g = Graph::new();
        let (logits, _) = batch_logits(model, &mut g, &imgs, prompts, anchors.as_ref(), None)?;
        let loss = g.softmax_cross_entropy(logits, &labels);
        loss_sum += g.scalar(loss) * chunk.len() as f64;
        for row in g.value(logits).rows() {
            rows.push(crate::backbone::predict_probs(&row.to_vec()));
        }
    }
    let k = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let probs = Mat::from_shape_vec((samples.len(), k), flat).expect("consistent row widths");
    Ok((probs, loss_sum / samples.len().max(1) as f64))
}

/// Inference-mode mean loss and accuracy.
pub fn evaluate_loss(model: &AdaptedModel, samples: &[PatchSample], prompts: &[String]) -> Result<(f64, f64)> {
    let (probs, loss) = eval_pass(model, samples, prompts)?;
    let correct = probs
        .rows()
        .into_iter()
        .zip(samples)
        .filter(|(r, s)| argmax(&r.to_vec()) == s.label.index())
        .count();
    Ok((loss, correct as f64 / samples.len().max(1) as f64))
}

/// Validation embeddings, when nothing in the backbone trains (head only).
fn frozen_val_embeddings(model: &AdaptedModel, val: &[PatchSample]) -> Result<Option<Mat>> {
    if model.head.is_none() || model.backbone.params.trainable_count() > 0 {
        return Ok(None);
    }
    let mut parts = Vec::new();
    for chunk in val.chunks(EVAL_CHUNK) {
        let imgs: Vec<_> = chunk.iter().map(|p| &p.pixels).collect();
        let mut g = Graph::new();
        let e = model.backbone.image_embeddings(&mut g, &imgs)?;
        parts.push(g.value(e).clone());
    }
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    Ok(Some(ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")))
}

fn head_loss(model: &AdaptedModel, embeddings: &Mat, val: &[PatchSample]) -> Result<(f64, f64)> {
    let head = model.head.as_ref().expect("head models only");
    let labels: Vec<usize> = val.iter().map(|p| p.label.index()).collect();
    let mut g = Graph::new();
    let x = g.constant(embeddings.clone());
    let (logits, _) = head.forward(&mut g, x, None)?;
    let loss = g.softmax_cross_entropy(logits, &labels);
    let correct = g
        .value(logits)
        .rows()
        .into_iter()
        .zip(&labels)
        .filter(|(r, &y)| argmax(&r.to_vec()) == y)
        .count();
    Ok((g.scalar(loss), correct as f64 / labels.len() as f64))
}

fn snapshot_trainable(model: &AdaptedModel) -> BTreeMap<String, Mat> {
    let mut snap: BTreeMap<String, Mat> = model
        .trainable_parameters()
        .into_iter()
        .map(|n| {
            let v = model.param(&n).expect("listed").value.clone();
            (n, v)
        })
        .collect();
    if let Some(h) = &model.head {
        for (n, p) in h.params.iter().filter(|(n, _)| n.starts_with("head.bn.running_")) {
            snap.insert(n.clone(), p.value.clone());
        }
    }
    snap
}

fn restore(model: &mut AdaptedModel, snap: &BTreeMap<String, Mat>) {
    for (n, v) in snap {
        model.param_mut(n).expect("snapshot names come from the model").value = v.clone();
    }
}

/// Train the trainable subset of `model` on `train`, monitoring validation
/// loss on `val`. The returned model holds the best-epoch weights.
pub fn train(
    mut model: AdaptedModel,
    train: &[PatchSample],
    val: &[PatchSample],
    prompts: &[String],
    config: &TrainConfig,
) -> Result<(AdaptedModel, TrainingHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    if model.trainable_parameters().is_empty() {
        return Err(Error::Adaptation("no trainable parameters".into()));
    }
    let batch_size = config.batch_size.unwrap_or(32).min(train.len());
    let steps_per_epoch = train.len().div_ceil(batch_size);
    let total_steps = config.total_steps.unwrap_or(config.max_epochs * steps_per_epoch);
    let warmup = config.warmup_steps.unwrap_or((total_steps / 10).max(1));
    let schedule = LrSchedule::new(config.base_lr, warmup, total_steps)?;

    let val_embeddings = frozen_val_embeddings(&model, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut monitor = Vec::new();
    let mut best = snapshot_trainable(&model);
    let mut best_epoch = 0;
    let mut step = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let anchors = frozen_anchors(&model, prompts)?;
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(batch_size) {
            step += 1;
            lr = schedule.lr_at(step);
            let samples: Vec<PatchSample> = batch
                .iter()
                .map(|&i| {
                    if config.augment {
                        augment(&train[i], &mut rng)
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let imgs: Vec<_> = samples.iter().map(|p| &p.pixels).collect();
            let labels: Vec<usize> = samples.iter().map(|p| p.label.index()).collect();
            let mut g = Graph::new();
            let (logits, bn) = batch_logits(&model, &mut g, &imgs, prompts, anchors.as_ref(), Some(&mut rng))?;
            let loss = g.softmax_cross_entropy(logits, &labels);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: value,
                });
            }
            loss_sum += value * batch.len() as f64;
            let grads = g.backward(loss);
            adam.step(&mut model, &grads, lr)?;
            if let (Some(stats), Some(head)) = (bn, model.head.as_mut()) {
                head.update_running_stats(&stats);
            }
            if step >= total_steps {
                break;
            }
        }
        let (val_loss, val_acc) = match &val_embeddings {
            Some(e) => head_loss(&model, e, val)?,
            None => evaluate_loss(&model, val, prompts)?,
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: val_loss,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_monitor: val_loss,
            val_accuracy: val_acc,
            lr,
        });
        monitor.push(val_loss);
        let decision = early_stop(&monitor, config.patience, config.min_delta);
        if decision.best_epoch == epoch {
            best = snapshot_trainable(&model);
            best_epoch = epoch;
        }
        if decision.stop {
            stop_reason = StopReason::EarlyStopped;
            break;
        }
        if step >= total_steps {
            break;
        }
    }
    restore(&mut model, &best);
    Ok((
        model,
        TrainingHistory {
            epochs: history,
            best_epoch,
            stop_reason,
            steps: step,
        },
    ))
}
