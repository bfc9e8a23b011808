//! Grid runner: backbone × strategy × shots × seed trials, persisted as
//! per-trial records, plus table / ROC / box-plot emission and verification.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{AdaptationSpec, AdapterSpec, AdaptedModel, ClassifierSpec, LoraSpec, Strategy, VanillaSpec};
use crate::backbone::{ToyBackbone, ToyBackboneConfig};
use crate::checkpoint;
use crate::dataset::{class_prompts, generate_synthetic_dataset, load_manifest_patches, ClassLabel, PatchSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, BoxStats, EvalResult};
use crate::sampler::{build_shot_plan, ShotPlan, DEFAULT_SEED, DEFAULT_SHOT_LEVELS};
use crate::trainer::{predict, train, TrainConfig, TrainingHistory};

pub const WORKERS_ENV: &str = "FSVLM_NUM_WORKERS";
pub const DEFAULT_GRID_SHOTS: [usize; 7] = [0, 1, 2, 4, 8, 16, 32];

const RECORDS_DIR: &str = "records";
const CHECKPOINTS_DIR: &str = "checkpoints";
const HISTORIES_DIR: &str = "histories";
const PLANS_DIR: &str = "plans";
const BACKBONES_DIR: &str = "backbones";
const RESOLVED_CONFIG: &str = "experiment.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const PIVOT_FILE: &str = "results_pivot.csv";
pub const ROC_DIR: &str = "roc";
pub const BOXPLOT_DIR: &str = "boxplot";
pub const TABLE_HEADER: &str = "backbone,strategy,shots,seed,accuracy,macro_auc,macro_f1";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        #[serde(default = "default_n_per_class")]
        n_per_class: usize,
        #[serde(default = "default_side")]
        image_side: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Directory or file produced by `extract_to_dir`.
    Manifest { path: PathBuf },
}

fn default_n_per_class() -> usize {
    100
}

fn default_side() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSource {
    Toy {
        name: String,
        #[serde(default)]
        config: ToyBackboneConfig,
    },
}

impl BackboneSource {
    pub fn name(&self) -> &str {
        match self {
            BackboneSource::Toy { name, .. } => name,
        }
    }

    fn build(&self) -> Result<ToyBackbone> {
        match self {
            BackboneSource::Toy { config, .. } => ToyBackbone::new(config.clone()),
        }
    }

    fn image_side(&self) -> usize {
        match self {
            BackboneSource::Toy { config, .. } => config.image_side,
        }
    }
}

/// Strategy hyper-parameters shared by every trial.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationSettings {
    pub vanilla: VanillaSpec,
    pub lora: LoraSpec,
    pub adapter: AdapterSpec,
    pub classifier: ClassifierSpec,
    pub init_seed: u64,
}

impl AdaptationSettings {
    pub fn spec(&self, strategy: Strategy) -> AdaptationSpec {
        AdaptationSpec {
            strategy,
            vanilla: self.vanilla.clone(),
            lora: self.lora.clone(),
            adapter: self.adapter.clone(),
            classifier: self.classifier.clone(),
            init_seed: self.init_seed,
        }
    }
}

/// Partial `TrainConfig`; unset fields keep the strategy default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub base_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub warmup_steps: Option<usize>,
    pub total_steps: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub augment: Option<bool>,
}

impl TrainOverrides {
    fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.base_lr {
            c.base_lr = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if self.batch_size.is_some() {
            c.batch_size = self.batch_size;
        }
        if let Some(v) = self.max_epochs {
            c.max_epochs = v;
        }
        if self.warmup_steps.is_some() {
            c.warmup_steps = self.warmup_steps;
        }
        if self.total_steps.is_some() {
            c.total_steps = self.total_steps;
        }
        if let Some(v) = self.patience {
            c.patience = v;
        }
        if let Some(v) = self.min_delta {
            c.min_delta = v;
        }
        if let Some(v) = self.augment {
            c.augment = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub backbones: Vec<BackboneSource>,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    /// Levels the shot plan is built for; fixes the validation split.
    #[serde(default = "default_plan_levels")]
    pub plan_levels: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub adaptation: AdaptationSettings,
    /// Keys: `all` or a strategy name; strategy entries apply after `all`.
    #[serde(default)]
    pub train: BTreeMap<String, TrainOverrides>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn all_strategies() -> Vec<Strategy> {
    vec![Strategy::Vanilla, Strategy::Lora, Strategy::Adapter, Strategy::Classifier]
}

fn default_shots() -> Vec<usize> {
    DEFAULT_GRID_SHOTS.to_vec()
}

fn default_plan_levels() -> Vec<usize> {
    DEFAULT_SHOT_LEVELS.to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![DEFAULT_SEED]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        // Relative manifest paths are relative to the config file.
        if let DatasetSource::Manifest { path: p } = &mut config.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbones.is_empty() || self.strategies.is_empty() || self.seeds.is_empty() || self.shots.is_empty() {
            return bad("backbones, strategies, shots and seeds must be nonempty".into());
        }
        let mut names = BTreeSet::new();
        for b in &self.backbones {
            let n = b.name();
            if n.is_empty() || !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return bad(format!("backbone name {n:?} must be nonempty [A-Za-z0-9_-]"));
            }
            if !names.insert(n) {
                return bad(format!("duplicate backbone name {n:?}"));
            }
        }
        if BTreeSet::from_iter(&self.strategies).len() != self.strategies.len() {
            return bad("duplicate strategy".into());
        }
        if BTreeSet::from_iter(&self.seeds).len() != self.seeds.len() {
            return bad("duplicate seed".into());
        }
        if self.plan_levels.is_empty() || self.plan_levels[0] == 0 || !strictly_increasing(&self.plan_levels) {
            return bad("plan_levels must be positive and strictly increasing".into());
        }
        if !strictly_increasing(&self.shots) {
            return bad("shots must be strictly increasing".into());
        }
        if let Some(s) = self.shots.iter().find(|&&s| s != 0 && !self.plan_levels.contains(&s)) {
            return bad(format!("shots level {s} is not a plan level"));
        }
        for key in self.train.keys() {
            if key != "all" && Strategy::from_name(key).is_err() {
                return bad(format!("unknown train override section {key:?}"));
            }
        }
        if let DatasetSource::Synthetic { n_per_class, .. } = self.dataset {
            if n_per_class <= *self.plan_levels.last().expect("nonempty") {
                return bad(format!("n_per_class {n_per_class} leaves no validation samples"));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::for_strategy(strategy);
        if let Some(o) = self.train.get("all") {
            o.apply(&mut c);
        }
        if let Some(o) = self.train.get(strategy.name()) {
            o.apply(&mut c);
        }
        c.seed = seed;
        c
    }

    pub fn load_dataset(&self, image_side: usize) -> Result<Vec<PatchSample>> {
        match &self.dataset {
            DatasetSource::Synthetic {
                n_per_class,
                image_side: side,
                seed,
            } => {
                if *side != image_side {
                    return Err(Error::Config(format!(
                        "synthetic image_side {side} differs from backbone image_side {image_side}"
                    )));
                }
                generate_synthetic_dataset(*n_per_class, *side, *seed)
            }
            DatasetSource::Manifest { path } => {
                let manifest = if path.is_dir() {
                    path.join(crate::dataset::MANIFEST_FILE)
                } else {
                    path.clone()
                };
                load_manifest_patches(&manifest, image_side)
            }
        }
    }
}

/// Restricts a grid to matching cells. Empty sets match everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialFilter {
    pub backbones: BTreeSet<String>,
    pub strategies: BTreeSet<Strategy>,
    pub shots: BTreeSet<usize>,
}

impl TrialFilter {
    /// Parse `key=value,...` with keys `backbone`, `strategy`, `shots`;
    /// repeating a key widens the match.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut f = Self::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("filter term {part:?} is not key=value")))?;
            match k.trim() {
                "backbone" => {
                    f.backbones.insert(v.trim().to_string());
                }
                "strategy" => {
                    f.strategies.insert(Strategy::from_name(v.trim())?);
                }
                "shots" => {
                    let n = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("shots filter {v:?} is not a count")))?;
                    f.shots.insert(n);
                }
                other => return Err(Error::Config(format!("unknown filter key {other:?}"))),
            }
        }
        Ok(f)
    }

    pub fn matches(&self, backbone: &str, strategy: Strategy, shots: usize) -> bool {
        (self.backbones.is_empty() || self.backbones.contains(backbone))
            && (self.strategies.is_empty() || self.strategies.contains(&strategy))
            && (self.shots.is_empty() || self.shots.contains(&shots))
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialOutcome {
    Ok {
        eval: Box<EvalResult>,
        /// Relative to the output directory; `None` for zero-shot trials.
        history: Option<String>,
        checkpoint: Option<String>,
        best_epoch: Option<usize>,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub backbone: String,
    pub strategy: Strategy,
    pub shots: usize,
    pub seed: u64,
    /// SHA-256 of the validation index list.
    pub validation_digest: String,
    pub duration_secs: f64,
    #[serde(flatten)]
    pub outcome: TrialOutcome,
}

impl TrialRecord {
    pub fn id(&self) -> String {
        trial_id(&self.backbone, self.strategy, self.shots, self.seed)
    }

    pub fn eval(&self) -> Option<&EvalResult> {
        match &self.outcome {
            TrialOutcome::Ok { eval, .. } => Some(eval),
            TrialOutcome::Failed { .. } => None,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.outcome, TrialOutcome::Failed { .. })
    }

    fn sort_key(&self) -> (String, &'static str, usize, u64) {
        (self.backbone.clone(), self.strategy.name(), self.shots, self.seed)
    }
}

pub fn trial_id(backbone: &str, strategy: Strategy, shots: usize, seed: u64) -> String {
    format!("{backbone}_{}_{shots}_seed{seed}", strategy.name())
}

pub fn sort_records(records: &mut [TrialRecord]) {
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

fn validation_digest(plan: &ShotPlan) -> String {
    let mut h = Sha256::new();
    for i in &plan.validation_indices {
        h.update((*i as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Accept either a run directory or its `records/` subdirectory.
pub fn run_dir(path: &Path) -> PathBuf {
    if path.file_name().is_some_and(|n| n == RECORDS_DIR) && !path.join(RECORDS_DIR).is_dir() {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        path.to_path_buf()
    }
}

pub fn load_records(dir: &Path) -> Result<Vec<TrialRecord>> {
    let rdir = run_dir(dir).join(RECORDS_DIR);
    let mut out = Vec::new();
    for entry in fs::read_dir(&rdir).map_err(|e| Error::io(&rdir, e))? {
        let path = entry.map_err(|e| Error::io(&rdir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            out.push(serde_json::from_str(&text)?);
        }
    }
    sort_records(&mut out);
    Ok(out)
}

pub fn load_resolved_config(dir: &Path) -> Result<ExperimentConfig> {
    let p = run_dir(dir).join(RESOLVED_CONFIG);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

/// Worker count from `FSVLM_NUM_WORKERS`, or all cores.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

struct Cell<'a> {
    backbone: &'a BackboneSource,
    base: &'a ToyBackbone,
    strategy: Strategy,
    shots: usize,
    seed: u64,
    plan: &'a ShotPlan,
    data: &'a [PatchSample],
}

struct Trained {
    eval: EvalResult,
    history: Option<String>,
    checkpoint: Option<String>,
    best_epoch: Option<usize>,
}

fn run_cell(config: &ExperimentConfig, out: &Path, cell: &Cell) -> Result<Trained> {
    let prompts = class_prompts();
    let (train_set, val_set) = cell.plan.materialize(cell.shots.max(1), cell.data)?;
    let labels: Vec<usize> = val_set.iter().map(|p| p.label.index()).collect();
    if cell.shots == 0 {
        let model = AdaptedModel::zero_shot(cell.base.clone());
        return Ok(Trained {
            eval: evaluate(&predict(&model, &val_set, &prompts)?, &labels)?,
            history: None,
            checkpoint: None,
            best_epoch: None,
        });
    }
    let spec = config.adaptation.spec(cell.strategy);
    let model = AdaptedModel::adapt(cell.base.clone(), &spec)?;
    let tc = config.train_config(cell.strategy, cell.seed);
    let (model, history) = train(model, &train_set, &val_set, &prompts, &tc)?;
    let eval = evaluate(&predict(&model, &val_set, &prompts)?, &labels)?;
    let id = trial_id(cell.backbone.name(), cell.strategy, cell.shots, cell.seed);
    let hist_rel = format!("{HISTORIES_DIR}/{id}.jsonl");
    history.save(&out.join(&hist_rel))?;
    let ckpt_rel = format!("{CHECKPOINTS_DIR}/{id}.ckpt");
    checkpoint::save_delta(&model, &out.join(&ckpt_rel))?;
    Ok(Trained {
        eval,
        history: Some(hist_rel),
        checkpoint: Some(ckpt_rel),
        best_epoch: Some(history.best_epoch),
    })
}

/// Run every selected grid cell and persist one record per cell. Trial
/// failures become failed records; setup failures abort the run.
pub fn run_grid(config: &ExperimentConfig, filter: &TrialFilter) -> Result<Vec<TrialRecord>> {
    config.validate()?;
    let out = &config.output_dir;
    for d in [RECORDS_DIR, CHECKPOINTS_DIR, HISTORIES_DIR, PLANS_DIR, BACKBONES_DIR] {
        create_dir(&out.join(d))?;
    }
    write_file(&out.join(RESOLVED_CONFIG), &serde_json::to_string_pretty(config)?)?;

    let mut bases = Vec::new();
    let mut datasets: BTreeMap<usize, Vec<PatchSample>> = BTreeMap::new();
    for b in &config.backbones {
        let base = b.build()?;
        checkpoint::save_backbone(&base, &out.join(BACKBONES_DIR).join(format!("{}.ckpt", b.name())))?;
        bases.push(base);
        if let std::collections::btree_map::Entry::Vacant(slot) = datasets.entry(b.image_side()) {
            slot.insert(config.load_dataset(b.image_side())?);
        }
    }
    // Plans depend only on labels and seed, so every backbone shares them.
    let first = datasets.values().next().expect("at least one backbone");
    let labels: Vec<usize> = first.iter().map(|p| p.label.index()).collect();
    let mut plans = BTreeMap::new();
    for &seed in &config.seeds {
        let plan = build_shot_plan(&labels, &config.plan_levels, seed)?;
        plan.check_invariants().map_err(Error::InvalidArgument)?;
        plan.save(&out.join(PLANS_DIR).join(format!("seed{seed}.json")))?;
        plans.insert(seed, plan);
    }

    let mut cells = Vec::new();
    for (b, base) in config.backbones.iter().zip(&bases) {
        for &strategy in &config.strategies {
            for &shots in &config.shots {
                if !filter.matches(b.name(), strategy, shots) {
                    continue;
                }
                for &seed in &config.seeds {
                    cells.push(Cell {
                        backbone: b,
                        base,
                        strategy,
                        shots,
                        seed,
                        plan: &plans[&seed],
                        data: &datasets[&b.image_side()],
                    });
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut records: Vec<TrialRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let start = Instant::now();
                let result = run_cell(config, out, cell);
                let id = trial_id(cell.backbone.name(), cell.strategy, cell.shots, cell.seed);
                let outcome = match result {
                    Ok(t) => {
                        log::info!("{id}: accuracy {:.4}", t.eval.accuracy);
                        TrialOutcome::Ok {
                            eval: Box::new(t.eval),
                            history: t.history,
                            checkpoint: t.checkpoint,
                            best_epoch: t.best_epoch,
                        }
                    }
                    Err(e) => {
                        log::warn!("{id} failed: {e}");
                        TrialOutcome::Failed { error: e.to_string() }
                    }
                };
                let record = TrialRecord {
                    backbone: cell.backbone.name().to_string(),
                    strategy: cell.strategy,
                    shots: cell.shots,
                    seed: cell.seed,
                    validation_digest: validation_digest(cell.plan),
                    duration_secs: start.elapsed().as_secs_f64(),
                    outcome,
                };
                let path = out.join(RECORDS_DIR).join(format!("{id}.json"));
                serde_json::to_string_pretty(&record)
                    .map_err(Error::from)
                    .and_then(|text| write_file(&path, &text))
                    .map(|_| record)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    sort_records(&mut records);
    Ok(records)
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub backbone: String,
    pub strategy: Strategy,
    pub shots: usize,
    pub seed: u64,
    /// `None` for failed trials (empty cells).
    pub metrics: Option<[f64; 3]>,
}

/// Flat results table. Failed trials keep their row with empty metrics.
pub fn results_table(records: &[TrialRecord]) -> String {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = format!("{TABLE_HEADER}\n");
    for r in &sorted {
        let metrics = match r.eval() {
            Some(e) => format!("{:.4},{:.4},{:.4}", e.accuracy, e.macro_auc, e.macro_f1),
            None => ",,".to_string(),
        };
        let _ = writeln!(out, "{},{},{},{},{metrics}", r.backbone, r.strategy.name(), r.shots, r.seed);
    }
    out
}

pub fn parse_results_table(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TABLE_HEADER) {
        return Err(Error::Config("results table header mismatch".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("bad results row {line:?}"));
            if f.len() != 7 {
                return Err(bad());
            }
            let metrics = if f[4..].iter().all(|s| s.is_empty()) {
                None
            } else {
                let p = |s: &str| s.parse::<f64>().map_err(|_| bad());
                Some([p(f[4])?, p(f[5])?, p(f[6])?])
            };
            Ok(TableRow {
                backbone: f[0].to_string(),
                strategy: Strategy::from_name(f[1])?,
                shots: f[2].parse().map_err(|_| bad())?,
                seed: f[3].parse().map_err(|_| bad())?,
                metrics,
            })
        })
        .collect()
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(crate::metrics::quantile_sorted(v, 0.5))
}

/// Metric-by-shots view per backbone and strategy, median over seeds.
pub fn pivot_table(records: &[TrialRecord]) -> String {
    let shots: BTreeSet<usize> = records.iter().map(|r| r.shots).collect();
    let groups: BTreeSet<(String, &str)> = records.iter().map(|r| (r.backbone.clone(), r.strategy.name())).collect();
    let mut out = String::from("backbone,strategy,metric");
    for s in &shots {
        let _ = write!(out, ",shots_{s}");
    }
    out.push('\n');
    let metrics: [(&str, fn(&EvalResult) -> f64); 3] = [
        ("accuracy", |e| e.accuracy),
        ("macro_auc", |e| e.macro_auc),
        ("macro_f1", |e| e.macro_f1),
    ];
    for (backbone, strategy) in &groups {
        for (name, get) in metrics {
            let _ = write!(out, "{backbone},{strategy},{name}");
            for &s in &shots {
                let mut vals: Vec<f64> = records
                    .iter()
                    .filter(|r| &r.backbone == backbone && r.strategy.name() == *strategy && r.shots == s)
                    .filter_map(|r| r.eval().map(get))
                    .collect();
                match median(&mut vals) {
                    Some(m) => {
                        let _ = write!(out, ",{m:.4}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Curve rows `class,fpr,tpr,threshold` for one trial; the opening point's
/// threshold is written as `inf`.
pub fn roc_csv(eval: &EvalResult) -> String {
    let mut out = String::from("class,fpr,tpr,threshold\n");
    for (k, curve) in eval.roc.iter().enumerate() {
        let name = ClassLabel::from_index(k).map(|c| c.name()).unwrap_or("unknown");
        for p in curve.iter().flatten() {
            let _ = writeln!(out, "{name},{},{},{}", p.fpr, p.tpr, p.threshold);
        }
    }
    out
}

pub fn roc_file_name(r: &TrialRecord) -> String {
    format!("{}.csv", r.id())
}

pub fn emit_roc_data(records: &[TrialRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    for r in records {
        if let Some(e) = r.eval() {
            let p = dir.join(roc_file_name(r));
            write_file(&p, &roc_csv(e))?;
            written.push(p);
        }
    }
    Ok(written)
}

pub const BOXPLOT_HEADER: &str = "shots,class,median,q1,q3,lo,hi,n_outliers";

fn box_row(out: &mut String, shots: usize, class: &str, b: Option<&BoxStats>) {
    match b {
        Some(b) => {
            let _ = writeln!(
                out,
                "{shots},{class},{},{},{},{},{},{}",
                b.median,
                b.q1,
                b.q3,
                b.lo,
                b.hi,
                b.outliers.len()
            );
        }
        None => {
            let _ = writeln!(out, "{shots},{class},,,,,,");
        }
    }
}

/// Box-plot rows for one (backbone, strategy, seed) series, ascending in
/// shots; each level has one row per class then an `overall` row.
pub fn boxplot_csv(series: &[&TrialRecord]) -> String {
    let mut rows: Vec<&&TrialRecord> = series.iter().filter(|r| r.eval().is_some()).collect();
    rows.sort_by_key(|r| r.shots);
    let mut out = format!("{BOXPLOT_HEADER}\n");
    for r in rows {
        let stats = &r.eval().expect("filtered").boxplot;
        for (k, b) in stats.per_class.iter().enumerate() {
            let name = ClassLabel::from_index(k).map(|c| c.name()).unwrap_or("unknown");
            box_row(&mut out, r.shots, name, b.as_ref());
        }
        box_row(&mut out, r.shots, "overall", stats.overall.as_ref());
    }
    out
}

pub fn emit_boxplot_data(records: &[TrialRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut series: BTreeMap<(String, &str, u64), Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        series
            .entry((r.backbone.clone(), r.strategy.name(), r.seed))
            .or_default()
            .push(r);
    }
    let mut written = Vec::new();
    for ((backbone, strategy, seed), rs) in series {
        let p = dir.join(format!("{backbone}_{strategy}_seed{seed}.csv"));
        write_file(&p, &boxplot_csv(&rs))?;
        written.push(p);
    }
    Ok(written)
}

pub fn emit_tables(records: &[TrialRecord], dir: &Path) -> Result<()> {
    write_file(&dir.join(RESULTS_FILE), &results_table(records))?;
    write_file(&dir.join(PIVOT_FILE), &pivot_table(records))
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Rebuild the model stored for `record` and re-evaluate it on the record's
/// validation split.
pub fn checkpoint_roundtrip(dir: &Path, record: &TrialRecord) -> Result<(AdaptedModel, EvalResult)> {
    let dir = run_dir(dir);
    let config = load_resolved_config(&dir)?;
    let source = config
        .backbones
        .iter()
        .find(|b| b.name() == record.backbone)
        .ok_or_else(|| Error::Checkpoint(format!("backbone {} not in run config", record.backbone)))?;
    let base = checkpoint::load_backbone(&dir.join(BACKBONES_DIR).join(format!("{}.ckpt", record.backbone)))?;
    let model = match &record.outcome {
        TrialOutcome::Ok {
            checkpoint: Some(rel), ..
        } => checkpoint::load_delta(&dir.join(rel), &base)?,
        TrialOutcome::Ok { checkpoint: None, .. } if record.shots == 0 => AdaptedModel::zero_shot(base),
        TrialOutcome::Ok { .. } => return Err(Error::Checkpoint(format!("{} has no checkpoint", record.id()))),
        TrialOutcome::Failed { .. } => return Err(Error::Checkpoint(format!("{} failed; nothing to restore", record.id()))),
    };
    let plan = ShotPlan::load(&dir.join(PLANS_DIR).join(format!("seed{}.json", record.seed)))?;
    if validation_digest(&plan) != record.validation_digest {
        return Err(Error::Checkpoint(format!("{}: validation split differs from the stored plan", record.id())));
    }
    let data = config.load_dataset(source.image_side())?;
    let (_, val) = plan.materialize(record.shots.max(1), &data)?;
    let labels: Vec<usize> = val.iter().map(|p| p.label.index()).collect();
    let eval = evaluate(&predict(&model, &val, &class_prompts())?, &labels)?;
    Ok((model, eval))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub records: usize,
    pub checkpoints_verified: usize,
    pub failed_trials: Vec<String>,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.failed_trials.is_empty() && self.problems.is_empty()
    }
}

/// Re-check a run directory: grid completeness, shared validation splits,
/// zero-shot invariance, history files, and every checkpoint against its
/// recorded metrics.
pub fn verify(dir: &Path) -> Result<VerifyReport> {
    let dir = run_dir(dir);
    let config = load_resolved_config(&dir)?;
    let records = load_records(&dir)?;
    let mut report = VerifyReport {
        records: records.len(),
        ..VerifyReport::default()
    };
    let have: BTreeSet<String> = records.iter().map(TrialRecord::id).collect();
    if have.len() != records.len() {
        report.problems.push("duplicate trial records".into());
    }
    for r in &records {
        let known = config.backbones.iter().any(|b| b.name() == r.backbone)
            && config.strategies.contains(&r.strategy)
            && config.shots.contains(&r.shots)
            && config.seeds.contains(&r.seed);
        if !known {
            report.problems.push(format!("{} is outside the configured grid", r.id()));
        }
    }
    let mut digests: BTreeMap<u64, &str> = BTreeMap::new();
    for r in &records {
        if *digests.entry(r.seed).or_insert(&r.validation_digest) != r.validation_digest {
            report.problems.push(format!("{}: validation split differs within seed {}", r.id(), r.seed));
        }
    }
    let mut zero: BTreeMap<(String, u64), &EvalResult> = BTreeMap::new();
    for r in records.iter().filter(|r| r.shots == 0) {
        if let Some(e) = r.eval() {
            if let Some(prev) = zero.insert((r.backbone.clone(), r.seed), e) {
                if prev != e {
                    report.problems.push(format!("{}: zero-shot result depends on strategy", r.id()));
                }
            }
        }
    }
    for r in &records {
        match &r.outcome {
            TrialOutcome::Failed { error } => report.failed_trials.push(format!("{}: {error}", r.id())),
            TrialOutcome::Ok { eval, history, .. } => {
                if let Some(h) = history {
                    let p = dir.join(h);
                    if let Err(e) = fs::read_to_string(&p)
                        .map_err(|e| Error::io(&p, e))
                        .and_then(|t| TrainingHistory::from_jsonl(&t))
                    {
                        report.problems.push(format!("{}: history unreadable: {e}", r.id()));
                    }
                }
                match checkpoint_roundtrip(&dir, r) {
                    Ok((_, restored)) if restored == **eval => report.checkpoints_verified += 1,
                    Ok(_) => report.problems.push(format!("{}: restored model metrics differ", r.id())),
                    Err(e) => report.problems.push(format!("{}: {e}", r.id())),
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        kind = "synthetic"
        n_per_class = 40

        [[backbones]]
        kind = "toy"
        name = "toy"
    "#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.shots, vec![0, 1, 2, 4, 8, 16, 32]);
        assert_eq!(c.seeds, vec![42]);
        assert_eq!(c.strategies.len(), 4);
        assert_eq!(c.train_config(Strategy::Vanilla, 1).base_lr, 1e-4);
        assert_eq!(c.train_config(Strategy::Lora, 1).base_lr, 1e-3);
    }

    #[test]
    fn unknown_keys_and_bad_grids_are_rejected() {
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\nbogus = 1\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[train.lora]\nlr = 1.0\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[train.bogus]\nbase_lr = 1.0\n")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("shots = [0, 3]\n{MINIMAL}")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("seeds = []\n{MINIMAL}")).is_err());
    }

    #[test]
    fn overrides_layer_all_then_strategy() {
        let text = format!("{MINIMAL}\n[train.all]\nmax_epochs = 7\nbase_lr = 0.5\n[train.lora]\nbase_lr = 0.25\n");
        let c = ExperimentConfig::from_toml(&text).unwrap();
        let lora = c.train_config(Strategy::Lora, 3);
        assert_eq!((lora.base_lr, lora.max_epochs, lora.seed), (0.25, 7, 3));
        assert_eq!(c.train_config(Strategy::Adapter, 3).base_lr, 0.5);
    }

    #[test]
    fn filter_parsing() {
        let f = TrialFilter::parse("strategy=lora,shots=0,shots=32").unwrap();
        assert!(f.matches("anything", Strategy::Lora, 32));
        assert!(!f.matches("anything", Strategy::Lora, 8));
        assert!(!f.matches("anything", Strategy::Vanilla, 0));
        assert!(TrialFilter::parse("colour=red").is_err());
    }
}
