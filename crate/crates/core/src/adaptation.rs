//! The four fine-tuning strategies as transformations of a [`ToyBackbone`].
//!
//! * vanilla: unfreeze the top blocks (and final norm/projection) of both encoders
//! * lora: frozen weights plus `(α/r)·B·A` on attention projections of the top blocks
//! * adapter: residual bottleneck blocks after attention and after the MLP of
//!   the top vision blocks
//! * classifier: frozen backbone, trainable head over image embeddings

use std::fmt;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::backbone::{Encoder, LoraSettings, ToyBackbone};
use crate::dataset::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::params::{Param, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vanilla,
    Lora,
    Adapter,
    Classifier,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Vanilla, Strategy::Lora, Strategy::Adapter, Strategy::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Lora => "lora",
            Strategy::Adapter => "adapter",
            Strategy::Classifier => "classifier",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp,
    MlpBn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VanillaSpec {
    /// Blocks unfrozen per encoder, counted from the top. LoRA and adapter
    /// injection use the same blocks.
    pub top_n_layers: usize,
}

impl Default for VanillaSpec {
    fn default() -> Self {
        Self { top_n_layers: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    /// Attention projections to wrap, from {q, k, v, o}.
    pub targets: Vec<String>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: vec!["q".into(), "v".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    /// Defaults to `embed_dim / 8`.
    pub bottleneck_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub kind: HeadKind,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            kind: HeadKind::MlpBn,
            in_dim: 512,
            hidden_dim: 256,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSpec {
    pub strategy: Strategy,
    #[serde(default)]
    pub vanilla: VanillaSpec,
    #[serde(default)]
    pub lora: LoraSpec,
    #[serde(default)]
    pub adapter: AdapterSpec,
    #[serde(default)]
    pub classifier: ClassifierSpec,
    /// Seeds LoRA `A`, adapter down-projections and head weights.
    #[serde(default)]
    pub init_seed: u64,
}

impl AdaptationSpec {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            vanilla: VanillaSpec::default(),
            lora: LoraSpec::default(),
            adapter: AdapterSpec::default(),
            classifier: ClassifierSpec::default(),
            init_seed: 0,
        }
    }
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

fn top_blocks(backbone: &ToyBackbone, top_n: usize) -> Result<std::ops::Range<usize>> {
    let depth = backbone.config.depth;
    if top_n == 0 {
        return Err(Error::Adaptation("top_n_layers = 0 leaves nothing to adapt".into()));
    }
    if top_n > depth {
        return Err(Error::Adaptation(format!("top_n_layers {top_n} exceeds depth {depth}")));
    }
    Ok(depth - top_n..depth)
}

fn is_adapted(backbone: &ToyBackbone) -> bool {
    backbone.lora.is_some() || backbone.params.names().iter().any(|n| n.contains(".adapter_"))
}

/// Mark exactly the top `top_n` blocks of both encoders, plus the final
/// norms and projections, as trainable. With `top_n == depth` every encoder
/// parameter (embeddings included) is trainable. Returns the selection.
pub fn apply_vanilla(backbone: &mut ToyBackbone, top_n: usize) -> Result<Vec<String>> {
    let blocks = top_blocks(backbone, top_n)?;
    let full = top_n == backbone.config.depth;
    backbone.params.set_all_trainable(false);
    let mut selected = Vec::new();
    for enc in [Encoder::Vision, Encoder::Text] {
        let p = enc.prefix();
        for i in blocks.clone() {
            selected.extend(backbone.block_param_names(enc, i));
        }
        for n in ["ln_final.gamma", "ln_final.beta", "proj.weight"] {
            selected.push(format!("{p}.{n}"));
        }
    }
    if full {
        selected = backbone.params.names();
    }
    for n in &selected {
        backbone.params.get_mut(n).expect("selected from registry").trainable = true;
    }
    selected.sort();
    Ok(selected)
}

/// Freeze the backbone and wrap the targeted attention projections of the
/// top blocks of both encoders with zero-initialized low-rank pairs.
pub fn inject_lora(mut backbone: ToyBackbone, spec: &AdaptationSpec) -> Result<ToyBackbone> {
    let blocks = top_blocks(&backbone, spec.vanilla.top_n_layers)?;
    let lora = &spec.lora;
    if lora.rank == 0 || !(lora.alpha > 0.0) {
        return Err(Error::Adaptation("LoRA rank and alpha must be positive".into()));
    }
    if lora.targets.is_empty() {
        return Err(Error::Adaptation("no LoRA targets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    backbone.params.set_all_trainable(false);
    for enc in [Encoder::Vision, Encoder::Text] {
        for i in blocks.clone() {
            for t in &lora.targets {
                if !["q", "k", "v", "o"].contains(&t.as_str()) {
                    return Err(Error::Adaptation(format!("unknown attention projection `{t}`")));
                }
                let base = format!("{}.blocks.{i}.attn.{t}", enc.prefix());
                let (d_in, d_out) = backbone.params.get(&format!("{base}.weight")).expect("projection exists").value.dim();
                if lora.rank > d_in.min(d_out) {
                    return Err(Error::Adaptation(format!(
                        "rank {} exceeds projection dims {d_in}×{d_out}",
                        lora.rank
                    )));
                }
                let a = normal(lora.rank, d_in, 1.0 / (d_in as f64).sqrt(), &mut rng);
                backbone.params.insert(format!("{base}.lora_a"), a, true);
                backbone.params.insert(format!("{base}.lora_b"), Mat::zeros((d_out, lora.rank)), true);
            }
        }
    }
    backbone.lora = Some(LoraSettings {
        rank: lora.rank,
        alpha: lora.alpha,
    });
    Ok(backbone)
}

pub fn adapter_bottleneck(spec: &AdaptationSpec, embed_dim: usize) -> usize {
    spec.adapter.bottleneck_dim.unwrap_or((embed_dim / 8).max(1))
}

/// Freeze the backbone and insert two residual bottleneck adapters (after
/// attention, after the MLP) into each of the top vision blocks. The text
/// encoder is left untouched.
pub fn inject_adapters(mut backbone: ToyBackbone, spec: &AdaptationSpec) -> Result<ToyBackbone> {
    let blocks = top_blocks(&backbone, spec.vanilla.top_n_layers)?;
    let d = backbone.embed_dim();
    let bottleneck = adapter_bottleneck(spec, d);
    if bottleneck == 0 || bottleneck >= d {
        return Err(Error::Adaptation(format!(
            "bottleneck {bottleneck} must be in 1..{d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    backbone.params.set_all_trainable(false);
    for i in blocks {
        for slot in ["adapter_attn", "adapter_mlp"] {
            let base = format!("vision.blocks.{i}.{slot}");
            backbone
                .params
                .insert(format!("{base}.down.weight"), normal(d, bottleneck, 1.0 / (d as f64).sqrt(), &mut rng), true);
            backbone.params.insert(format!("{base}.down.bias"), Mat::zeros((1, bottleneck)), true);
            backbone.params.insert(format!("{base}.up.weight"), Mat::zeros((bottleneck, d)), true);
            backbone.params.insert(format!("{base}.up.bias"), Mat::zeros((1, d)), true);
        }
    }
    Ok(backbone)
}

/// Batch statistics produced by a training-mode forward pass of an
/// `mlp_bn` head, applied to the running estimates after the step.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n: usize,
}

const BN_MOMENTUM: f64 = 0.1;

/// Prediction head over image embeddings. Parameters are registered under
/// `head.*`; BatchNorm running statistics are frozen registry entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub spec: ClassifierSpec,
    pub n_classes: usize,
    pub params: ParamStore,
}

pub fn build_classifier_head(spec: &AdaptationSpec, n_classes: usize) -> Result<ClassifierHead> {
    let c = &spec.classifier;
    if c.in_dim == 0 || n_classes == 0 {
        return Err(Error::Adaptation("head dimensions must be positive".into()));
    }
    if !(0.0..1.0).contains(&c.dropout) {
        return Err(Error::Adaptation(format!("dropout {} outside [0, 1)", c.dropout)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let mut params = ParamStore::new();
    let xavier = |i: usize, o: usize, rng: &mut ChaCha8Rng| normal(i, o, (2.0 / (i + o) as f64).sqrt(), rng);
    match c.kind {
        HeadKind::Linear => {
            params.insert("head.out.weight", xavier(c.in_dim, n_classes, &mut rng), true);
            params.insert("head.out.bias", Mat::zeros((1, n_classes)), true);
        }
        HeadKind::Mlp | HeadKind::MlpBn => {
            if c.hidden_dim == 0 {
                return Err(Error::Adaptation("hidden_dim must be positive".into()));
            }
            params.insert("head.fc1.weight", xavier(c.in_dim, c.hidden_dim, &mut rng), true);
            params.insert("head.fc1.bias", Mat::zeros((1, c.hidden_dim)), true);
            if c.kind == HeadKind::MlpBn {
                params.insert("head.bn.gamma", Mat::ones((1, c.hidden_dim)), true);
                params.insert("head.bn.beta", Mat::zeros((1, c.hidden_dim)), true);
                params.insert("head.bn.running_mean", Mat::zeros((1, c.hidden_dim)), false);
                params.insert("head.bn.running_var", Mat::ones((1, c.hidden_dim)), false);
            }
            params.insert("head.out.weight", xavier(c.hidden_dim, n_classes, &mut rng), true);
            params.insert("head.out.bias", Mat::zeros((1, n_classes)), true);
        }
    }
    Ok(ClassifierHead {
        spec: c.clone(),
        n_classes,
        params,
    })
}

impl ClassifierHead {
    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let w = g.param(&self.params, &format!("{name}.weight"));
        let b = g.param(&self.params, &format!("{name}.bias"));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Logits for a batch of embeddings. `dropout_rng` selects training mode
    /// (batch statistics, dropout on); `None` is inference mode.
    pub fn forward(&self, g: &mut Graph, x: Var, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<(Var, Option<BnBatchStats>)> {
        let in_dim = g.value(x).ncols();
        if in_dim != self.spec.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "head expects {}-dim features, got {in_dim}",
                self.spec.in_dim
            )));
        }
        if self.spec.kind == HeadKind::Linear {
            return Ok((self.linear(g, x, "head.out"), None));
        }
        let training = dropout_rng.is_some();
        let mut h = self.linear(g, x, "head.fc1");
        let mut stats = None;
        if self.spec.kind == HeadKind::MlpBn {
            let gamma = g.param(&self.params, "head.bn.gamma");
            let beta = g.param(&self.params, "head.bn.beta");
            if training {
                let n = g.value(h).nrows();
                let (out, mean, var) = g.batch_norm_train(h, gamma, beta);
                h = out;
                stats = Some(BnBatchStats { mean, var, n });
            } else {
                let rm = &self.params.get("head.bn.running_mean").expect("bn buffer").value;
                let rv = &self.params.get("head.bn.running_var").expect("bn buffer").value;
                // inference path is never differentiated
                let inv = rv.mapv(|v| 1.0 / (v + 1e-5).sqrt());
                let normed = (g.value(h) - rm) * &inv * g.value(gamma) + g.value(beta);
                h = g.constant(normed);
            }
        }
        h = g.gelu(h);
        if let Some(rng) = dropout_rng {
            let p = self.spec.dropout;
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let mask = Mat::from_shape_fn(g.value(h).raw_dim(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
                h = g.mul_const(h, mask);
            }
        }
        Ok((self.linear(g, h, "head.out"), stats))
    }

    pub fn update_running_stats(&mut self, stats: &BnBatchStats) {
        let unbias = if stats.n > 1 { stats.n as f64 / (stats.n - 1) as f64 } else { 1.0 };
        let rm = &mut self.params.get_mut("head.bn.running_mean").expect("bn buffer").value;
        for (r, m) in rm.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = &mut self.params.get_mut("head.bn.running_var").expect("bn buffer").value;
        for (r, v) in rv.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }
}

/// A backbone plus whatever adaptation has been applied to it. Constructed
/// once per trial; adapting an already adapted model is rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub backbone: ToyBackbone,
    pub head: Option<ClassifierHead>,
    pub spec: Option<AdaptationSpec>,
    /// Registry digest of the un-adapted backbone.
    pub base_digest: String,
}

impl AdaptedModel {
    /// Frozen backbone scoring by prompt similarity (shot 0).
    pub fn zero_shot(mut backbone: ToyBackbone) -> Self {
        let base_digest = backbone.params.digest();
        backbone.params.set_all_trainable(false);
        Self {
            backbone,
            head: None,
            spec: None,
            base_digest,
        }
    }

    /// Apply `spec` to a pristine backbone.
    pub fn adapt(backbone: ToyBackbone, spec: &AdaptationSpec) -> Result<Self> {
        let mut model = Self::zero_shot(backbone);
        model.apply(spec)?;
        Ok(model)
    }

    /// Apply a strategy in place. Fails if any strategy is already active.
    pub fn apply(&mut self, spec: &AdaptationSpec) -> Result<()> {
        if self.spec.is_some() || self.head.is_some() || is_adapted(&self.backbone) {
            return Err(Error::Adaptation("a strategy is already applied to this model".into()));
        }
        let backbone = self.backbone.clone();
        self.backbone = match spec.strategy {
            Strategy::Vanilla => {
                let mut b = backbone;
                apply_vanilla(&mut b, spec.vanilla.top_n_layers)?;
                b
            }
            Strategy::Lora => inject_lora(backbone, spec)?,
            Strategy::Adapter => inject_adapters(backbone, spec)?,
            Strategy::Classifier => {
                if spec.classifier.in_dim != backbone.embed_dim() {
                    return Err(Error::Config(format!(
                        "classifier in_dim {} does not match backbone embed_dim {}",
                        spec.classifier.in_dim,
                        backbone.embed_dim()
                    )));
                }
                self.head = Some(build_classifier_head(spec, NUM_CLASSES)?);
                backbone
            }
        };
        self.spec = Some(spec.clone());
        Ok(())
    }

    pub fn strategy(&self) -> Option<Strategy> {
        self.spec.as_ref().map(|s| s.strategy)
    }

    /// Exact list of parameters the optimizer updates.
    pub fn trainable_parameters(&self) -> Vec<String> {
        let mut names = self.backbone.params.trainable_names();
        if let Some(h) = &self.head {
            names.extend(h.params.trainable_names());
        }
        names
    }

    pub fn trainable_count(&self) -> usize {
        self.backbone.params.trainable_count() + self.head.as_ref().map_or(0, |h| h.params.trainable_count())
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        if name.starts_with("head.") {
            self.head.as_ref()?.params.get(name)
        } else {
            self.backbone.params.get(name)
        }
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        if name.starts_with("head.") {
            self.head.as_mut()?.params.get_mut(name)
        } else {
            self.backbone.params.get_mut(name)
        }
    }

    /// Every non-trainable entry (backbone and head buffers), for freeze checks.
    pub fn frozen_snapshot(&self) -> ParamStore {
        let mut out = ParamStore::new();
        let stores = std::iter::once(&self.backbone.params).chain(self.head.as_ref().map(|h| &h.params));
        for store in stores {
            for (n, p) in store.iter() {
                if !p.trainable && !n.starts_with("head.bn.running_") {
                    out.insert(n.clone(), p.value.clone(), false);
                }
            }
        }
        out
    }

    /// N × K logits. Prompt-anchored for contrastive strategies, head logits
    /// for classifier tuning. `train_rng` turns on training-mode behaviour of
    /// the head (dropout, batch statistics).
    pub fn logits(
        &self,
        g: &mut Graph,
        images: &[&ndarray::Array3<f64>],
        prompts: &[String],
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Option<BnBatchStats>)> {
        match &self.head {
            Some(head) => {
                let emb = self.backbone.image_embeddings(g, images)?;
                head.forward(g, emb, train_rng)
            }
            None => Ok((self.backbone.prompt_logits(g, images, prompts)?, None)),
        }
    }

    /// Softmax probabilities, N × K, inference mode.
    pub fn predict_probs(&self, images: &[&ndarray::Array3<f64>], prompts: &[String]) -> Result<Mat> {
        let mut g = Graph::new();
        let (logits, _) = self.logits(&mut g, images, prompts, None)?;
        let mut p = g.value(logits).clone();
        for mut row in p.axis_iter_mut(Axis(0)) {
            let probs = crate::backbone::predict_probs(row.as_slice().expect("contiguous row"));
            row.assign(&ndarray::Array1::from(probs));
        }
        Ok(p)
    }
}
