//! Training, evaluation, ablation grids and attention analysis on the
//! synthetic rectangle data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::attention::{cells_inside, dump_attention_map, MapFormat};
use crate::decoder::{BiasVariant, ForwardOptions, Model, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{map_range, Annotation, Detection, Metrics};
use crate::geometry::diff;
use crate::loss::{hybrid_loss, LossConfig};
use crate::matching::{hungarian, match_cost_matrix, GroundTruth};
use crate::numerics::{checkpoint, AdamW, AdamWConfig, Tape, Tensor};
use crate::synth::{generate, Sample, SyntheticSpec};

/// Evaluation images use indices from here on, disjoint from training.
pub const EVAL_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the epochs after which the learning rate drops.
    pub decay_at: f64,
    pub decay_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            epochs: 30,
            batch_size: 8,
            decay_at: 0.8,
            decay_factor: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decay_epoch = (self.decay_at * self.epochs as f64).floor() as usize;
        if epoch >= decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub data: SyntheticSpec,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train_samples: u64,
    pub eval_samples: u64,
    /// Seeds parameter initialization and the batch order.
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::toy(),
            data: SyntheticSpec::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train_samples: 512,
            eval_samples: 128,
            seed: 0,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.data.validate()?;
        if self.pipeline.image_size != self.data.image_size || self.pipeline.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "pipeline expects {}px images with {} classes, data has {}px and {}",
                self.pipeline.image_size, self.pipeline.num_classes, self.data.image_size, self.data.num_classes
            )));
        }
        if self.optim.batch_size == 0 || !(self.optim.lr > 0.0) || !(self.optim.clip_norm > 0.0) {
            return Err(Error::Config("batch size, learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }

    /// Same run with every seed (parameters, order and data) set to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.data.seed = seed;
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Images and grid-unit ground truths ready for the model.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub patch: f64,
}

impl Dataset {
    pub fn build(spec: &SyntheticSpec, indices: impl Iterator<Item = u64>, patch: usize) -> Result<Self> {
        let samples = indices.map(|i| generate(spec, i)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            patch: patch as f64,
        })
    }

    pub fn train(cfg: &RunConfig) -> Result<Self> {
        Self::build(&cfg.data, 0..cfg.train_samples, cfg.pipeline.patch_size)
    }

    pub fn eval(cfg: &RunConfig) -> Result<Self> {
        Self::build(&cfg.data, EVAL_OFFSET..EVAL_OFFSET + cfg.eval_samples, cfg.pipeline.patch_size)
    }

    pub fn grid_gts(&self, i: usize) -> Vec<GroundTruth> {
        self.samples[i].gts.iter().map(|g| g.scaled(1.0 / self.patch)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optim: AdamW,
    /// Epochs already completed.
    pub epoch: usize,
}

impl TrainState {
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            model: Model::new(cfg.pipeline.clone(), cfg.seed)?,
            optim: AdamW::new(AdamWConfig {
                lr: cfg.optim.lr,
                weight_decay: cfg.optim.weight_decay,
                ..AdamWConfig::default()
            }),
            epoch: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.optim.step_count()
    }

    /// Writes `checkpoint.json` and `optimizer.json` (each with a `.bin` blob).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::json!({ "epoch": self.epoch, "step": self.step() });
        self.model.save(&dir.join("checkpoint.json"), meta.clone())?;
        let (first, second) = self.optim.moments();
        let names = self.model.store.names();
        let mut tensors = Vec::new();
        for (i, (m, v)) in first.iter().zip(second).enumerate() {
            let shape = self.model.store.tensors()[i].shape().to_vec();
            tensors.push((format!("m.{}", names[i]), Tensor::new(shape.clone(), m.clone())?));
            tensors.push((format!("v.{}", names[i]), Tensor::new(shape, v.clone())?));
        }
        checkpoint::save(
            &dir.join("optimizer.json"),
            tensors.iter().map(|(n, t)| (n.as_str(), t)),
            meta,
        )
    }

    /// Restores a state written by [`TrainState::save`].
    pub fn load(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let (model, meta) = Model::load(&dir.join("checkpoint.json"))?;
        let epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
        let step = meta["step"].as_u64().unwrap_or(0);
        let mut optim = AdamW::new(AdamWConfig {
            lr: cfg.optim.lr,
            weight_decay: cfg.optim.weight_decay,
            ..AdamWConfig::default()
        });
        let opt_path = dir.join("optimizer.json");
        if opt_path.exists() {
            let (entries, _) = checkpoint::load::<f64>(&opt_path)?;
            let (mut first, mut second) = (Vec::new(), Vec::new());
            for (name, t) in entries {
                if name.starts_with("m.") {
                    first.push(t.into_data());
                } else {
                    second.push(t.into_data());
                }
            }
            optim.restore(step, first, second)?;
        }
        Ok(Self { model, optim, epoch })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Epoch the run started from (non-zero when resumed).
    pub start_epoch: usize,
    pub history: Vec<EpochLog>,
    pub metrics: Metrics,
}

/// Detections of the one-to-one group for every image, in pixels.
pub fn predict_all(model: &Model, data: &Dataset) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        for p in model.predict(&s.image)? {
            dets.push(Detection::new(i, p.class, p.bbox, p.score)?);
        }
    }
    Ok(dets)
}

pub fn annotations(data: &Dataset) -> Vec<Annotation> {
    data.samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.gts.iter().map(move |g| Annotation {
                image: i,
                class: g.class,
                bbox: g.bbox,
            })
        })
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Metrics> {
    map_range(&predict_all(model, data)?, &annotations(data))
}

/// One pass over a mini-batch: accumulates mean gradients into the store and
/// returns the mean loss.
fn batch_gradients(state: &mut TrainState, cfg: &RunConfig, data: &Dataset, batch: &[usize], epoch: usize) -> Result<f64> {
    let model = &mut state.model;
    model.store.zero_grad();
    let opts = ForwardOptions {
        aux: cfg.pipeline.hybrid,
        ..ForwardOptions::default()
    };
    let mut total = 0.0;
    for &i in batch {
        let mut tape = Tape::new().with_finite_check(false);
        let p = model.store.bind(&mut tape)?;
        let trace = model.forward(&mut tape, &p, &data.samples[i].image, &opts)?;
        let (loss, _) = hybrid_loss(&mut tape, &trace, &data.grid_gts(i), cfg.pipeline.reparam, &cfg.loss)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: state.optim.step_count() as usize,
            });
        }
        total += value;
        let grads = tape.backward(loss)?;
        model.store.accumulate(&grads, &p)?;
    }
    let n = batch.len() as f64;
    model.store.scale_grads(1.0 / n);
    Ok(total / n)
}

/// Continues training from `state` until `cfg.optim.epochs`, evaluating
/// after every epoch.
pub fn train_from(cfg: &RunConfig, mut state: TrainState) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = Dataset::train(cfg)?;
    let eval = Dataset::eval(cfg)?;
    let mut history = Vec::new();
    let mut metrics = None;
    let start_epoch = state.epoch;
    for epoch in start_epoch..cfg.optim.epochs {
        let lr = cfg.optim.lr_at(epoch);
        state.optim.set_lr(lr);
        let mut order: Vec<usize> = (0..train.samples.len()).collect();
        order.shuffle(&mut StdRng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407)));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.optim.batch_size) {
            loss_sum += batch_gradients(&mut state, cfg, &train, batch, epoch)?;
            let norm = state.model.store.clip_grad_norm(cfg.optim.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: state.optim.step_count() as usize,
                });
            }
            state.optim.step(state.model.store.tensors_mut())?;
            batches += 1;
        }
        state.epoch = epoch + 1;
        let m = evaluate(&state.model, &eval)?;
        history.push(EpochLog {
            epoch,
            step: state.step(),
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            ap: m.ap,
            ap50: m.ap50,
            ap75: m.ap75,
        });
        metrics = Some(m);
    }
    let metrics = match metrics {
        Some(m) => m,
        None => evaluate(&state.model, &eval)?,
    };
    let outcome = TrainOutcome {
        state,
        start_epoch,
        history,
        metrics,
    };
    if let Some(dir) = &cfg.out {
        write_outputs(dir, cfg, &outcome)?;
    }
    Ok(outcome)
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_from(cfg, TrainState::fresh(cfg)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_outputs(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    outcome.state.save(dir)?;
    write_json(&dir.join("metrics.json"), &outcome.metrics)?;
    let path = dir.join("loss_log.csv");
    let mut log = String::from("epoch,step,lr,train_loss,AP,AP50,AP75\n");
    if outcome.start_epoch > 0 {
        if let Ok(old) = fs::read_to_string(&path) {
            for line in old.lines().skip(1) {
                let epoch = line.split(',').next().and_then(|e| e.parse::<usize>().ok());
                if epoch.is_some_and(|e| e < outcome.start_epoch) {
                    log.push_str(line);
                    log.push('\n');
                }
            }
        }
    }
    for e in &outcome.history {
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{}",
            e.epoch, e.step, e.lr, e.train_loss, e.ap, e.ap50, e.ap75
        );
    }
    fs::write(&path, log).map_err(|e| Error::io(&path, e))
}

/// A named set of toggles applied on top of a base run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub bias: BiasVariant,
    pub reparam: bool,
    pub lft: bool,
    pub mqs: bool,
    pub hybrid: bool,
}

impl Arm {
    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.with_seed(seed);
        c.pipeline.bias = self.bias;
        c.pipeline.reparam = self.reparam;
        c.pipeline.lft = self.lft;
        c.pipeline.mqs = self.mqs;
        c.pipeline.hybrid = self.hybrid;
        c
    }

    fn toggles(&self) -> (BiasVariant, bool, bool, bool, bool) {
        (self.bias, self.reparam, self.lft, self.mqs, self.hybrid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationGrid {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self::recipe_ladder()
    }
}

impl AblationGrid {
    /// Components added one at a time: relative position bias,
    /// re-parameterized boxes, look-forward-twice, mixed query selection and
    /// hybrid matching.
    pub fn recipe_ladder() -> Self {
        let mut arm = Arm {
            name: "baseline".into(),
            bias: BiasVariant::None,
            reparam: false,
            lft: false,
            mqs: false,
            hybrid: false,
        };
        let mut arms = vec![arm.clone()];
        let steps: [(&str, fn(&mut Arm)); 5] = [
            ("+boxrpb", |a| a.bias = BiasVariant::Decomposed),
            ("+reparam", |a| a.reparam = true),
            ("+lft", |a| a.lft = true),
            ("+mqs", |a| a.mqs = true),
            ("+hybrid", |a| a.hybrid = true),
        ];
        for (name, f) in steps {
            f(&mut arm);
            arm.name = name.into();
            arms.push(arm.clone());
        }
        Self {
            arms,
            seeds: vec![0, 1, 2],
        }
    }

    /// Drops arms whose toggles repeat an earlier arm; returns warnings.
    pub fn dedup(&mut self) -> Vec<String> {
        let mut seen = Vec::new();
        let mut warnings = Vec::new();
        self.arms.retain(|a| {
            if let Some(first) = seen.iter().find(|(t, _)| *t == a.toggles()) {
                warnings.push(format!("arm '{}' duplicates '{}' and was dropped", a.name, first.1));
                false
            } else {
                seen.push((a.toggles(), a.name.clone()));
                true
            }
        });
        warnings
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seeds: Vec<SeedResult>,
}

/// Mean, min and max over the seeds that finished.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ArmResult {
    pub fn spread(&self, f: fn(&Metrics) -> f64) -> Option<Spread> {
        let v: Vec<f64> = self.seeds.iter().filter_map(|s| s.metrics.as_ref().map(f)).collect();
        if v.is_empty() {
            return None;
        }
        Some(Spread {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    pub fn seconds(&self) -> f64 {
        self.seeds.iter().map(|s| s.seconds).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ArmResult>,
    pub warnings: Vec<String>,
}

fn fmt_spread(s: Option<Spread>) -> String {
    match s {
        Some(s) => format!("{:.4} [{:.4}, {:.4}]", s.mean, s.min, s.max),
        None => "failed".into(),
    }
}

impl AblationReport {
    /// Whether mean AP50 never decreases down the arm list.
    pub fn monotone_ap50(&self) -> bool {
        let means: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.spread(|m| m.ap50).map_or(f64::NAN, |s| s.mean))
            .collect();
        means.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| arm | bias | reparam | lft | mqs | hybrid | AP | AP50 | AP75 | seconds |\n|---|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let a = &r.arm;
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {:.1} |",
                a.name,
                a.bias.name(),
                a.reparam,
                a.lft,
                a.mqs,
                a.hybrid,
                fmt_spread(r.spread(|m| m.ap)),
                fmt_spread(r.spread(|m| m.ap50)),
                fmt_spread(r.spread(|m| m.ap75)),
                r.seconds()
            );
        }
        out.push_str("\nValues are mean [min, max] over seeds.\n");
        let _ = writeln!(
            out,
            "AP50 trend down the arm list: {}",
            if self.monotone_ap50() { "monotone" } else { "not monotone" }
        );
        for r in &self.rows {
            for s in r.seeds.iter().filter(|s| s.error.is_some()) {
                let _ = writeln!(out, "arm {} seed {} failed: {}", r.arm.name, s.seed, s.error.as_deref().unwrap_or(""));
            }
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,bias,reparam,lft,mqs,hybrid,seed,AP,AP50,AP75,seconds,error\n");
        for r in &self.rows {
            let a = &r.arm;
            for s in &r.seeds {
                let (ap, ap50, ap75) = s
                    .metrics
                    .as_ref()
                    .map_or((String::new(), String::new(), String::new()), |m| {
                        (m.ap.to_string(), m.ap50.to_string(), m.ap75.to_string())
                    });
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{:.3},{}",
                    a.name,
                    a.bias.name(),
                    a.reparam,
                    a.lft,
                    a.mqs,
                    a.hybrid,
                    s.seed,
                    ap,
                    ap50,
                    ap75,
                    s.seconds,
                    s.error.as_deref().unwrap_or("").replace(',', ";")
                );
            }
        }
        out
    }
}

/// Trains every arm for every seed. Failures are recorded, not raised.
/// With an output directory each run writes to `{dir}/{arm}/seed{seed}`.
pub fn run_ablation(base: &RunConfig, grid: &AblationGrid, dir: Option<&Path>) -> AblationReport {
    let mut grid = grid.clone();
    let warnings = grid.dedup();
    let mut rows = Vec::new();
    for arm in &grid.arms {
        let mut seeds = Vec::new();
        for &seed in &grid.seeds {
            let mut cfg = arm.apply(base, seed);
            cfg.out = dir.map(|d| d.join(sanitize(&arm.name)).join(format!("seed{seed}")));
            let t0 = Instant::now();
            let r = train(&cfg);
            let seconds = t0.elapsed().as_secs_f64();
            seeds.push(match r {
                Ok(o) => SeedResult {
                    seed,
                    metrics: Some(o.metrics),
                    error: None,
                    seconds,
                },
                Err(e) => SeedResult {
                    seed,
                    metrics: None,
                    error: Some(e.to_string()),
                    seconds,
                },
            });
        }
        rows.push(ArmResult {
            arm: arm.clone(),
            seeds,
        });
    }
    AblationReport { rows, warnings }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Last-layer cross-attention of the one-to-one queries, averaged over
/// heads: `[queries][h*w]`.
fn head_mean(weights: &[f64], heads: usize, rows: usize, queries: usize, cells: usize) -> Vec<Vec<f64>> {
    (0..queries)
        .map(|q| {
            (0..cells)
                .map(|c| (0..heads).map(|m| weights[(m * rows + q) * cells + c]).sum::<f64>() / heads as f64)
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpIndex {
    pub sample: u64,
    pub layers: usize,
    pub heads: usize,
    pub queries: usize,
    pub files: Vec<DumpEntry>,
    /// Per query: head-averaged last-layer attention mass on the cells
    /// inside the box that layer attended from.
    pub inside_box_mass: Vec<f64>,
    pub mean_inside_box_mass: f64,
}

/// Writes one map per (layer, head, query) plus `attention_index.json`.
pub fn dump_attention(model: &Model, image: &[f64], sample: u64, dir: &Path, format: MapFormat) -> Result<DumpIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape)?;
    let opts = ForwardOptions {
        keep_attention: true,
        ..ForwardOptions::default()
    };
    let trace = model.forward(&mut tape, &p, image, &opts)?;
    let grid = model.grid();
    let heads = model.cfg.heads;
    let mut files = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        let w = layer.attention.expect("attention kept");
        let rows = tape.shape(w)[1];
        let values = tape.value(w);
        for m in 0..heads {
            for q in 0..trace.queries {
                let off = (m * rows + q) * grid.cells();
                let paths = dump_attention_map(dir, l, m, q, &values[off..off + grid.cells()], grid, format)?;
                files.push(DumpEntry {
                    layer: l,
                    head: m,
                    query: q,
                    paths,
                });
            }
        }
    }
    let last = trace.layers.last().expect("at least one layer");
    let w = last.attention.expect("attention kept");
    let maps = head_mean(tape.value(w), heads, tape.shape(w)[1], trace.queries, grid.cells());
    let refs = diff::boxes_value(&tape, last.reference)?;
    let inside_box_mass: Vec<f64> = maps
        .iter()
        .zip(&refs)
        .map(|(map, b)| cells_inside(b, grid).iter().map(|&(i, j)| map[i * grid.w + j]).sum())
        .collect();
    let index = DumpIndex {
        sample,
        layers: trace.layers.len(),
        heads,
        queries: trace.queries,
        files,
        mean_inside_box_mass: inside_box_mass.iter().sum::<f64>() / inside_box_mass.len().max(1) as f64,
        inside_box_mass,
    };
    write_json(&dir.join("attention_index.json"), &index)?;
    Ok(index)
}

/// Mean head-averaged last-layer attention mass inside the matched ground
/// truth box, over all matched one-to-one queries of `data`.
pub fn attention_focus(model: &Model, data: &Dataset) -> Result<f64> {
    let grid = model.grid();
    let heads = model.cfg.heads;
    let c = model.cfg.num_classes;
    let cost_weights = LossConfig::default().cost;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, s) in data.samples.iter().enumerate() {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape)?;
        let opts = ForwardOptions {
            keep_attention: true,
            ..ForwardOptions::default()
        };
        let trace = model.forward(&mut tape, &p, &s.image, &opts)?;
        let last = trace.layers.last().expect("at least one layer");
        let gts = data.grid_gts(i);
        let boxes = diff::boxes_value(&tape, last.boxes)?;
        let logits = &tape.value(last.logits)[..trace.queries * c];
        let cost = match_cost_matrix(logits, c, &boxes[..trace.queries], &gts, grid, &cost_weights)?;
        let m = hungarian(&cost, trace.queries, gts.len())?;
        let w = last.attention.expect("attention kept");
        let maps = head_mean(tape.value(w), heads, tape.shape(w)[1], trace.queries, grid.cells());
        for &(q, g) in &m.pairs {
            sum += cells_inside(&gts[g].bbox, grid)
                .iter()
                .map(|&(r, col)| maps[q][r * grid.w + col])
                .sum::<f64>();
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Per-arm summaries keyed by arm name, used by reports.
pub fn summarize(report: &AblationReport) -> BTreeMap<String, Option<Spread>> {
    report
        .rows
        .iter()
        .map(|r| (r.arm.name.clone(), r.spread(|m| m.ap50)))
        .collect()
}
