//! Contrastive vision–language backbone contract and a small deterministic
//! transformer backbone implementing it.
//!
//! Both encoders are pre-norm transformer stacks with mean pooling and a
//! linear projection into a shared, L2-normalized embedding space. Class
//! scores are cosine similarities divided by a fixed temperature.

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, Var};
use crate::dataset::{PatchSample, CHANNELS};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Character vocabulary of the toy text encoder, exactly 64 symbols.
pub const VOCAB: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .";

/// Per-channel normalization applied before patch embedding.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    Vision,
    Text,
}

impl Encoder {
    pub fn prefix(self) -> &'static str {
        match self {
            Encoder::Vision => "vision",
            Encoder::Text => "text",
        }
    }
}

/// Unit-norm embedding in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBackboneConfig {
    /// Expected input side; patches must be resampled to this first.
    pub image_side: usize,
    pub patch_side: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub head_count: usize,
    pub mlp_ratio: usize,
    pub max_text_len: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch_side: 8,
            embed_dim: 64,
            depth: 2,
            head_count: 4,
            mlp_ratio: 2,
            max_text_len: 64,
            temperature: 0.01,
            seed: 0,
        }
    }
}

impl ToyBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return bad(format!(
                "image_side {} not divisible by patch_side {}",
                self.image_side, self.patch_side
            ));
        }
        if self.head_count == 0 || !self.embed_dim.is_multiple_of(self.head_count) {
            return bad(format!(
                "embed_dim {} not divisible by head_count {}",
                self.embed_dim, self.head_count
            ));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.max_text_len == 0 {
            return bad("depth, mlp_ratio and max_text_len must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    pub fn tokens_per_image(&self) -> usize {
        (self.image_side / self.patch_side).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * CHANNELS
    }
}

/// Low-rank update settings shared by every injected projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSettings {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Contract every backbone attachment satisfies: batched unit-norm encoders,
/// a fixed temperature, a parameter registry and an ordered layer list.
pub trait ContrastiveBackbone {
    fn encode_images(&self, images: &[&Array3<f64>]) -> Result<Vec<Embedding>>;
    fn encode_texts(&self, prompts: &[String]) -> Result<Vec<Embedding>>;
    fn temperature(&self) -> f64;
    fn registry(&self) -> &ParamStore;
    fn layer_count(&self, encoder: Encoder) -> usize;
}

/// The toy transformer backbone. Adaptation state (LoRA pairs, adapters)
/// lives in the same registry and is picked up by the forward pass when
/// present.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub config: ToyBackboneConfig,
    pub params: ParamStore,
    pub lora: Option<LoraSettings>,
}

pub fn tokenize(prompt: &str, max_len: usize) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Prompt("empty prompt".into()));
    }
    let ids = prompt
        .chars()
        .map(|ch| {
            VOCAB
                .find(ch)
                .ok_or_else(|| Error::Prompt(format!("character {ch:?} not in vocabulary")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.len() > max_len {
        return Err(Error::Prompt(format!("{} characters exceeds max length {max_len}", ids.len())));
    }
    Ok(ids)
}

fn block_names(prefix: &str, i: usize) -> String {
    format!("{prefix}.blocks.{i}")
}

impl ToyBackbone {
    /// Deterministic initialization from `config.seed`; every parameter is
    /// trainable until an adaptation strategy selects otherwise.
    pub fn new(config: ToyBackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let normal = |rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };

        for enc in [Encoder::Vision, Encoder::Text] {
            let p = enc.prefix();
            match enc {
                Encoder::Vision => {
                    let pd = config.patch_dim();
                    params.insert(
                        format!("{p}.patch_embed.weight"),
                        normal(pd, d, 1.0 / (pd as f64).sqrt(), &mut rng),
                        true,
                    );
                    params.insert(format!("{p}.patch_embed.bias"), Mat::zeros((1, d)), true);
                    params.insert(
                        format!("{p}.pos_embed"),
                        normal(config.tokens_per_image(), d, 0.1, &mut rng),
                        true,
                    );
                }
                Encoder::Text => {
                    params.insert(format!("{p}.token_embed"), normal(VOCAB.len(), d, 1.0, &mut rng), true);
                    params.insert(format!("{p}.pos_embed"), normal(config.max_text_len, d, 0.1, &mut rng), true);
                }
            }
            for i in 0..config.depth {
                let b = block_names(p, i);
                for ln in ["ln1", "ln2"] {
                    params.insert(format!("{b}.{ln}.gamma"), Mat::ones((1, d)), true);
                    params.insert(format!("{b}.{ln}.beta"), Mat::zeros((1, d)), true);
                }
                for proj in ["q", "k", "v", "o"] {
                    params.insert(
                        format!("{b}.attn.{proj}.weight"),
                        normal(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
                        true,
                    );
                    params.insert(format!("{b}.attn.{proj}.bias"), Mat::zeros((1, d)), true);
                }
                params.insert(
                    format!("{b}.mlp.fc1.weight"),
                    normal(d, hidden, 1.0 / (d as f64).sqrt(), &mut rng),
                    true,
                );
                params.insert(format!("{b}.mlp.fc1.bias"), Mat::zeros((1, hidden)), true);
                params.insert(
                    format!("{b}.mlp.fc2.weight"),
                    normal(hidden, d, 1.0 / (hidden as f64).sqrt(), &mut rng),
                    true,
                );
                params.insert(format!("{b}.mlp.fc2.bias"), Mat::zeros((1, d)), true);
            }
            params.insert(format!("{p}.ln_final.gamma"), Mat::ones((1, d)), true);
            params.insert(format!("{p}.ln_final.beta"), Mat::zeros((1, d)), true);
            params.insert(
                format!("{p}.proj.weight"),
                normal(d, d, 1.0 / (d as f64).sqrt(), &mut rng),
                true,
            );
        }
        Ok(Self {
            config,
            params,
            lora: None,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.config.temperature
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Registry names of block `i` of `encoder` (excluding adaptation params).
    pub fn block_param_names(&self, encoder: Encoder, i: usize) -> Vec<String> {
        let b = format!("{}.", block_names(encoder.prefix(), i));
        self.params
            .names()
            .into_iter()
            .filter(|n| n.starts_with(&b) && !n.contains(".lora_") && !n.contains(".adapter_"))
            .collect()
    }

    /// Patchify and normalize a batch into a (N·T) × patch_dim matrix.
    fn patch_tokens(&self, images: &[&Array3<f64>]) -> Result<Mat> {
        let c = &self.config;
        let per_side = c.image_side / c.patch_side;
        let t = c.tokens_per_image();
        let mut out = Mat::zeros((images.len() * t, c.patch_dim()));
        for (n, img) in images.iter().enumerate() {
            let (h, w, ch) = img.dim();
            if ch != CHANNELS {
                return Err(Error::ShapeMismatch(format!("expected {CHANNELS} channels, got {ch}")));
            }
            if h != c.image_side || w != c.image_side {
                return Err(Error::ShapeMismatch(format!(
                    "expected {0}×{0} input, got {h}×{w}",
                    c.image_side
                )));
            }
            for py in 0..per_side {
                for px in 0..per_side {
                    let mut row = out.row_mut(n * t + py * per_side + px);
                    let mut k = 0;
                    for y in 0..c.patch_side {
                        for x in 0..c.patch_side {
                            for chn in 0..CHANNELS {
                                let v = img[[py * c.patch_side + y, px * c.patch_side + x, chn]];
                                row[k] = (v - PIXEL_MEAN) / PIXEL_STD;
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// `x·W + b`, plus the low-rank update `(α/r)·(x·Aᵀ)·Bᵀ` when the
    /// projection carries a LoRA pair.
    pub fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let w = g.param(&self.params, &format!("{name}.weight"));
        let mut y = g.matmul(x, w);
        let bias = format!("{name}.bias");
        if self.params.contains(&bias) {
            let b = g.param(&self.params, &bias);
            y = g.add_row(y, b);
        }
        let a_name = format!("{name}.lora_a");
        if let (Some(lora), true) = (self.lora, self.params.contains(&a_name)) {
            let a = g.param(&self.params, &a_name);
            let b = g.param(&self.params, &format!("{name}.lora_b"));
            let xa = g.matmul_nt(x, a);
            let delta = g.matmul_nt(xa, b);
            let delta = g.scale(delta, lora.scale());
            y = g.add(y, delta);
        }
        y
    }

    /// Residual bottleneck `y + up(gelu(down(y)))` if the adapter exists.
    fn maybe_adapter(&self, g: &mut Graph, y: Var, name: &str) -> Var {
        if !self.params.contains(&format!("{name}.down.weight")) {
            return y;
        }
        let d = self.linear(g, y, &format!("{name}.down"));
        let d = g.gelu(d);
        let u = self.linear(g, d, &format!("{name}.up"));
        g.add(y, u)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let gamma = g.param(&self.params, &format!("{name}.gamma"));
        let beta = g.param(&self.params, &format!("{name}.beta"));
        g.layer_norm(x, gamma, beta)
    }

    fn block(&self, g: &mut Graph, prefix: &str, i: usize, x: Var, batch: usize, seq: usize) -> Var {
        let b = block_names(prefix, i);
        let h = self.layer_norm(g, x, &format!("{b}.ln1"));
        let q = self.linear(g, h, &format!("{b}.attn.q"));
        let k = self.linear(g, h, &format!("{b}.attn.k"));
        let v = self.linear(g, h, &format!("{b}.attn.v"));
        let att = g.attention(q, k, v, batch, seq, self.config.head_count);
        let o = self.linear(g, att, &format!("{b}.attn.o"));
        let o = self.maybe_adapter(g, o, &format!("{b}.adapter_attn"));
        let x = g.add(x, o);
        let h = self.layer_norm(g, x, &format!("{b}.ln2"));
        let m = self.linear(g, h, &format!("{b}.mlp.fc1"));
        let m = g.gelu(m);
        let m = self.linear(g, m, &format!("{b}.mlp.fc2"));
        let m = self.maybe_adapter(g, m, &format!("{b}.adapter_mlp"));
        g.add(x, m)
    }

    fn head(&self, g: &mut Graph, prefix: &str, x: Var, batch: usize, seq: usize) -> Var {
        let mut x = x;
        for i in 0..self.config.depth {
            x = self.block(g, prefix, i, x, batch, seq);
        }
        let x = self.layer_norm(g, x, &format!("{prefix}.ln_final"));
        let pooled = g.mean_pool(x, batch, seq);
        let w = g.param(&self.params, &format!("{prefix}.proj.weight"));
        let z = g.matmul(pooled, w);
        g.l2_normalize(z)
    }

    /// N × D unit-norm image embeddings on the graph.
    pub fn image_embeddings(&self, g: &mut Graph, images: &[&Array3<f64>]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        let tokens = self.patch_tokens(images)?;
        let seq = self.config.tokens_per_image();
        let x = g.constant(tokens);
        let x = self.linear(g, x, "vision.patch_embed");
        let pos = g.param(&self.params, "vision.pos_embed");
        let x = g.add_tiled(x, pos);
        Ok(self.head(g, "vision", x, images.len(), seq))
    }

    /// K × D unit-norm prompt embeddings on the graph, one row per prompt.
    pub fn text_embeddings(&self, g: &mut Graph, prompts: &[String]) -> Result<Var> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("no prompts".into()));
        }
        let mut rows = Vec::with_capacity(prompts.len());
        for prompt in prompts {
            let ids = tokenize(prompt, self.config.max_text_len)?;
            let table = g.param(&self.params, "text.token_embed");
            let x = g.gather(table, &ids);
            let pos = g.param(&self.params, "text.pos_embed");
            let pos = g.take_rows(pos, ids.len());
            let x = g.add(x, pos);
            rows.push(self.head(g, "text", x, 1, ids.len()));
        }
        Ok(g.concat_rows(&rows))
    }

    /// N × K temperature-scaled cosine logits against the prompt anchors.
    pub fn prompt_logits(&self, g: &mut Graph, images: &[&Array3<f64>], prompts: &[String]) -> Result<Var> {
        let img = self.image_embeddings(g, images)?;
        let txt = self.text_embeddings(g, prompts)?;
        let sims = g.matmul_nt(img, txt);
        Ok(g.scale(sims, 1.0 / self.temperature()))
    }

    pub fn encode_image(&self, patch: &PatchSample) -> Result<Embedding> {
        Ok(self.encode_images(&[&patch.pixels])?.remove(0))
    }

    pub fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        Ok(self.encode_texts(&[prompt.to_string()])?.remove(0))
    }
}

fn rows_to_embeddings(m: &Mat) -> Vec<Embedding> {
    m.axis_iter(Axis(0)).map(|r| Embedding(r.to_vec())).collect()
}

impl ContrastiveBackbone for ToyBackbone {
    fn encode_images(&self, images: &[&Array3<f64>]) -> Result<Vec<Embedding>> {
        let mut g = Graph::new();
        let v = self.image_embeddings(&mut g, images)?;
        Ok(rows_to_embeddings(g.value(v)))
    }

    fn encode_texts(&self, prompts: &[String]) -> Result<Vec<Embedding>> {
        let mut g = Graph::new();
        let v = self.text_embeddings(&mut g, prompts)?;
        Ok(rows_to_embeddings(g.value(v)))
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn registry(&self) -> &ParamStore {
        &self.params
    }

    fn layer_count(&self, _encoder: Encoder) -> usize {
        self.config.depth
    }
}

/// `logit_k = (img · anchor_k) / τ`.
pub fn similarity_logits(img: &Embedding, anchors: &[Embedding], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    anchors
        .iter()
        .map(|a| {
            if a.dim() != img.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "anchor dimension {} vs image dimension {}",
                    a.dim(),
                    img.dim()
                )));
            }
            Ok(img.dot(a) / temperature)
        })
        .collect()
}

/// Max-shifted softmax.
pub fn predict_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_prompt, class_prompts, generate_synthetic_dataset, ClassLabel};
    use rand::{Rng, SeedableRng};

    fn small() -> ToyBackbone {
        ToyBackbone::new(ToyBackboneConfig {
            embed_dim: 16,
            head_count: 2,
            image_side: 16,
            patch_side: 8,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn vocabulary_has_64_distinct_symbols() {
        let mut chars: Vec<char> = VOCAB.chars().collect();
        assert_eq!(chars.len(), 64);
        chars.sort();
        chars.dedup();
        assert_eq!(chars.len(), 64);
        for c in ClassLabel::ALL {
            tokenize(&build_prompt(c), 64).unwrap();
        }
    }

    #[test]
    fn tokenizer_rejects_empty_and_foreign_text() {
        assert!(matches!(tokenize("", 64), Err(Error::Prompt(_))));
        assert!(tokenize("glomérulus", 64).is_err());
        assert!(tokenize(&"a".repeat(65), 64).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let a = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let b = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let c = ToyBackbone::new(ToyBackboneConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert!(!a.params.bitwise_eq(&c.params));
    }

    #[test]
    fn image_embeddings_are_unit_norm_and_deterministic() {
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let data = generate_synthetic_dataset(2, 32, 1).unwrap();
        let e1 = bb.encode_image(&data[0]).unwrap();
        let e2 = bb.encode_image(&data[0]).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.dim(), 64);
        for p in &data {
            let e = bb.encode_image(p).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-6);
        }
        // batched and single encodings agree
        let batch = bb.encode_images(&[&data[0].pixels, &data[3].pixels]).unwrap();
        let single = bb.encode_image(&data[3]).unwrap();
        for (a, b) in batch[1].0.iter().zip(&single.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_channel_count_or_side_rejected() {
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let gray = Array3::<f64>::zeros((32, 32, 1));
        assert!(matches!(bb.encode_images(&[&gray]), Err(Error::ShapeMismatch(_))));
        let big = Array3::<f64>::zeros((64, 64, 3));
        assert!(bb.encode_images(&[&big]).is_err());
    }

    #[test]
    fn text_embeddings_form_anchor_matrix() {
        let bb = ToyBackbone::new(ToyBackboneConfig::default()).unwrap();
        let prompts = class_prompts();
        let anchors = bb.encode_texts(&prompts).unwrap();
        assert_eq!(anchors.len(), 5);
        for a in &anchors {
            assert!((a.norm() - 1.0).abs() < 1e-6);
        }
        assert_eq!(bb.encode_text(&prompts[2]).unwrap(), bb.encode_text(&prompts[2]).unwrap());
        assert!(bb.encode_text("").is_err());
    }

    #[test]
    fn similarity_logits_examples() {
        let e = |v: &[f64]| Embedding(v.to_vec());
        let anchors = vec![e(&[1.0, 0.0, 0.0]), e(&[0.0, 1.0, 0.0]), e(&[0.0, 0.0, 1.0])];
        let l1 = similarity_logits(&anchors[0], &anchors, 1.0).unwrap();
        assert_eq!(l1, vec![1.0, 0.0, 0.0]);
        let img = e(&[0.6, 0.8, 0.0]);
        let a = similarity_logits(&img, &anchors, 1.0).unwrap();
        let b = similarity_logits(&img, &anchors, 0.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
        assert_eq!(argmax(&a), argmax(&b));
        assert!(similarity_logits(&img, &[e(&[1.0, 0.0])], 1.0).is_err());
        assert!(similarity_logits(&img, &anchors, 0.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(predict_probs(&[0.0; 5]), vec![0.2; 5]);
        let p = predict_probs(&[1.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        let shifted = predict_probs(&[1001.0, 1000.0]);
        assert!((shifted[0] - p[0]).abs() < 1e-12);
        assert_eq!(argmax(&[0.3, 0.7, 0.7]), 1);
    }

    #[test]
    fn registry_has_no_orphans() {
        let bb = small();
        let data = generate_synthetic_dataset(1, 16, 2).unwrap();
        let imgs: Vec<_> = data.iter().map(|p| &p.pixels).collect();
        let mut g = Graph::new();
        let logits = bb.prompt_logits(&mut g, &imgs, &class_prompts()).unwrap();
        let labels: Vec<usize> = data.iter().map(|p| p.label.index()).collect();
        let loss = g.softmax_cross_entropy(logits, &labels);
        let grads = g.backward(loss);
        for name in bb.params.names() {
            let gr = grads.get(&name).unwrap_or_else(|| panic!("{name} never reached"));
            assert!(gr.iter().any(|v| *v != 0.0), "{name} has an all-zero gradient");
        }
    }

    /// Central finite differences on randomly sampled scalar parameters.
    #[test]
    fn gradients_match_finite_differences() {
        let bb = small();
        let data = generate_synthetic_dataset(1, 16, 5).unwrap();
        let imgs: Vec<_> = data.iter().map(|p| &p.pixels).collect();
        let labels: Vec<usize> = data.iter().map(|p| p.label.index()).collect();
        let prompts = class_prompts();
        let loss_of = |b: &ToyBackbone| {
            let mut g = Graph::new();
            let l = b.prompt_logits(&mut g, &imgs, &prompts).unwrap();
            let l = g.scale(l, 0.01); // temperature 1 for a well-conditioned check
            let loss = g.softmax_cross_entropy(l, &labels);
            (g, loss)
        };
        let (g, loss) = loss_of(&bb);
        let grads = g.backward(loss);
        let names = bb.params.names();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = 1e-3;
        for _ in 0..24 {
            let name = &names[rng.gen_range(0..names.len())];
            let (r, c) = bb.params.get(name).unwrap().value.dim();
            let (i, j) = (rng.gen_range(0..r), rng.gen_range(0..c));
            let mut plus = bb.clone();
            plus.params.get_mut(name).unwrap().value[[i, j]] += eps;
            let mut minus = bb.clone();
            minus.params.get_mut(name).unwrap().value[[i, j]] -= eps;
            let (gp, lp) = loss_of(&plus);
            let (gm, lm) = loss_of(&minus);
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * eps);
            let analytic = grads[name][[i, j]];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "{name}[{i},{j}] analytic {analytic} numeric {numeric}");
        }
    }
}
