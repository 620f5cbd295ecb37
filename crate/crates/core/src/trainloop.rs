//! Optimization, validation and the evaluation pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint;
use crate::conditioning::{ConditionBatch, ConditionSet};
use crate::datagen::{corrupt_mask, make_example, SamplePair};
use crate::degradation::{degrade, DegradationConfig};
use crate::denoiser::DenoiserParams;
use crate::edm::{heun_sample, loss_weight, sample_training_sigma, training_loss_on, NoiseLevel, Preconditioned, SigmaParams};
use crate::error::{Error, Result};
use crate::image::{ChangeMask, Image};
use crate::metrics::{feature_stats, frechet_distance, psnr, region_psnr, Extractor, MetricRecord, Region, Score};
use crate::rng::{derive, normals, uniform_int, Rng};
use crate::tensor::Tensor;

/// Value range of images in `[-1, 1]`.
pub const DATA_RANGE: f64 = 2.0;

const STREAM_BATCH: u64 = 0xBA7C;
const STREAM_DROPOUT: u64 = 0xD209;
const STREAM_SIGMA: u64 = 0x5161;
const STREAM_EVAL_LR: u64 = 0xE7A1;
const STREAM_SAMPLE: u64 = 0x5A3B;
const STREAM_CORRUPT: u64 = 0xC022;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub crop_size: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// 0 disables periodic validation.
    pub validate_every: usize,
    pub val_heun_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_steps: 5000,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            crop_size: 64,
            checkpoint_every: 1000,
            validate_every: 0,
            val_heun_steps: 18,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if self.crop_size == 0 {
            return bad("crop_size must be positive".into());
        }
        if self.val_heun_steps < 2 {
            return bad(format!("val_heun_steps {} below 2", self.val_heun_steps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update at step `t ≥ 1`. Parameters without a
/// gradient are treated as having a zero gradient.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Contract("adam step index starts at 1".into()));
    }
    if let Some(k) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::Contract(format!("gradient for unknown parameter {k}")));
    }
    for (name, p) in params.iter() {
        let shape_ok = |t: Option<&Tensor>| t.is_none_or(|t| t.shape() == p.shape());
        if !shape_ok(grads.get(name)) || !shape_ok(state.m.get(name)) || !shape_ok(state.v.get(name)) {
            return Err(Error::Contract(format!("shape mismatch for parameter {name}")));
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            p.data_mut()[i] -= cfg.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall: f64,
}

/// Training images plus how to synthesize their LR inputs.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub pairs: &'a [SamplePair],
    pub degradation: &'a DegradationConfig,
}

/// Periodic validation during training.
pub struct ValidationHook<'a> {
    pub examples: &'a [EvalExample],
    pub extractor: &'a dyn Extractor,
}

pub struct TrainRun {
    pub params: DenoiserParams,
    pub log: Vec<LogRecord>,
    pub validations: Vec<(usize, Report)>,
}

/// Clean targets and conditions for training step `step`.
pub fn draw_batch(cfg: &TrainConfig, data: &TrainData, num_classes: usize, step: usize) -> Result<(Tensor, ConditionBatch)> {
    if data.pairs.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut rng = derive(cfg.seed, &[STREAM_BATCH, step as u64]);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    let mut sets = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = uniform_int(&mut rng, 0, data.pairs.len() as i64 - 1) as usize;
        let ex = make_example(&data.pairs[idx], cfg.crop_size, data.degradation, &mut rng)?;
        sets.push(ConditionSet::build(&ex.lr, &ex.reference, &ex.mask, data.degradation.scale, num_classes)?);
        targets.push(ex.hr);
    }
    let refs: Vec<&Image> = targets.iter().collect();
    let set_refs: Vec<&ConditionSet> = sets.iter().collect();
    Ok((Tensor::from_images(&refs)?, ConditionBatch::from_sets(&set_refs)?))
}

/// Loss and gradients for one batch; the loss is checked for finiteness.
pub fn train_step_grads(
    params: &DenoiserParams,
    sigma: &SigmaParams,
    cfg: &TrainConfig,
    y: &Tensor,
    cond: &ConditionBatch,
    step: usize,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let b = y.shape()[0];
    let mut srng = derive(cfg.seed, &[STREAM_SIGMA, step as u64]);
    let sigmas: Vec<NoiseLevel> = (0..b).map(|_| sample_training_sigma(&mut srng, sigma)).collect();
    let per = y.numel() / b;
    let mut noise = Tensor::from_vec(y.shape(), normals(&mut srng, y.numel()))?;
    for (i, v) in noise.data_mut().iter_mut().enumerate() {
        *v *= sigmas[i / per].get();
    }
    let diagnose = |what: String| {
        let s: Vec<String> = sigmas.iter().map(|s| format!("{:.4e}", s.get())).collect();
        let w: Vec<String> = sigmas.iter().map(|&s| format!("{:.4e}", loss_weight(s, sigma))).collect();
        Error::Numeric(format!("step {step}: {what}; sigmas [{}]; loss weights [{}]", s.join(", "), w.join(", ")))
    };
    let g = Graph::new().with_dropout(derive(cfg.seed, &[STREAM_DROPOUT, step as u64]));
    let loss = training_loss_on(&g, params, y, &noise, &sigmas, cond, sigma).map_err(|e| match e {
        Error::Numeric(m) => diagnose(m),
        other => other,
    })?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(diagnose(format!("loss is {value}")));
    }
    let grads = g.backward(loss)?.into_params();
    if let Some((k, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(diagnose(format!("non-finite gradient for {k} (loss {value})")));
    }
    Ok((value, grads))
}

fn checkpoint_path(dir: &Path, step: usize) -> std::path::PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.rdck"))
}

/// Runs `cfg.total_steps` Adam steps. With `out` set, appends the metric log
/// to `out/train_log.jsonl`, writes checkpoints at the configured cadence and
/// the final parameters to `out/checkpoint.rdck`.
pub fn train(
    cfg: &TrainConfig,
    sigma: &SigmaParams,
    data: &TrainData,
    model: DenoiserParams,
    out: Option<&Path>,
    hook: Option<&ValidationHook>,
) -> Result<TrainRun> {
    cfg.validate()?;
    sigma.validate()?;
    data.degradation.validate()?;
    model.config.validate()?;
    if data.pairs.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let start = Instant::now();
    let adam = cfg.adam();
    let mut params = model;
    let mut state = AdamState::default();
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut validations = Vec::new();
    let k = params.config.num_classes;
    for step in 1..=cfg.total_steps {
        let (y, cond) = draw_batch(cfg, data, k, step)?;
        let (loss, grads) = train_step_grads(&params, sigma, cfg, &y, &cond, step)?;
        adam_step(&mut params.tensors, &grads, &mut state, step as u64, &adam)?;
        let rec = LogRecord {
            step,
            loss,
            lr: cfg.learning_rate,
            wall: start.elapsed().as_secs_f64(),
        };
        if let Some((f, p)) = log_file.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p.clone(), e))?;
        }
        log.push(rec);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                checkpoint::save(&checkpoint_path(dir, step), &params, step as u64, cfg.seed)?;
            }
        }
        if let Some(h) = hook {
            if cfg.validate_every > 0 && step % cfg.validate_every == 0 {
                let restorer = HeunRestorer::new(&params, *sigma, cfg.val_heun_steps, data.degradation.scale);
                let ev = evaluate(&restorer, h.examples, cfg.seed, h.extractor)?;
                if let Some(dir) = out {
                    let p = dir.join(format!("val_{step:06}.json"));
                    fs::write(&p, serde_json::to_vec_pretty(&ev.report)?).map_err(|e| Error::io(&p, e))?;
                }
                validations.push((step, ev.report));
            }
        }
    }
    if let Some(dir) = out {
        checkpoint::save(&dir.join("checkpoint.rdck"), &params, cfg.total_steps as u64, cfg.seed)?;
    }
    Ok(TrainRun {
        params,
        log,
        validations,
    })
}

/// One held-out example. `cond_mask` is what the model sees; `mask` is the
/// ground truth used to split metrics by region.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalExample {
    pub id: String,
    pub hr: Image,
    pub reference: Image,
    pub lr: Image,
    pub mask: ChangeMask,
    pub cond_mask: ChangeMask,
}

impl EvalExample {
    pub fn conditions(&self, scale: usize, num_classes: usize) -> Result<ConditionSet> {
        ConditionSet::build(&self.lr, &self.reference, &self.cond_mask, scale, num_classes)
    }
}

/// Degrades each full-size HR image with a per-example seed.
pub fn prepare_eval(pairs: &[SamplePair], degradation: &DegradationConfig, seed: u64) -> Result<Vec<EvalExample>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = derive(seed, &[STREAM_EVAL_LR, i as u64]);
            Ok(EvalExample {
                id: p.id.clone(),
                lr: degrade(&p.hr, degradation, &mut rng)?,
                hr: p.hr.clone(),
                reference: p.reference.clone(),
                mask: p.mask.clone(),
                cond_mask: p.mask.clone(),
            })
        })
        .collect()
}

/// Replaces each conditioning mask with an FN/FP-corrupted copy.
pub fn corrupt_examples(examples: &[EvalExample], fn_rate: f64, fp_rate: f64, num_classes: usize, seed: u64) -> Result<Vec<EvalExample>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = derive(seed, &[STREAM_CORRUPT, i as u64]);
            Ok(EvalExample {
                cond_mask: corrupt_mask(&e.mask, &mut rng, fn_rate, fp_rate, num_classes)?,
                ..e.clone()
            })
        })
        .collect()
}

/// Gives example `i` the reference of example `i + 1` (cyclically).
pub fn rotate_references(examples: &[EvalExample]) -> Vec<EvalExample> {
    let n = examples.len();
    (0..n)
        .map(|i| EvalExample {
            reference: examples[(i + 1) % n].reference.clone(),
            ..examples[i].clone()
        })
        .collect()
}

/// Produces an SR estimate for one example.
pub trait Restorer {
    fn restore(&self, example: &EvalExample, rng: &mut Rng) -> Result<Image>;
}

impl<F> Restorer for F
where
    F: Fn(&EvalExample, &mut Rng) -> Result<Image>,
{
    fn restore(&self, example: &EvalExample, rng: &mut Rng) -> Result<Image> {
        self(example, rng)
    }
}

/// Heun sampling from the trained denoiser.
pub struct HeunRestorer<'a> {
    pub params: &'a DenoiserParams,
    pub sigma: SigmaParams,
    pub steps: usize,
    pub scale: usize,
}

impl<'a> HeunRestorer<'a> {
    pub fn new(params: &'a DenoiserParams, sigma: SigmaParams, steps: usize, scale: usize) -> Self {
        Self {
            params,
            sigma,
            steps,
            scale,
        }
    }
}

impl Restorer for HeunRestorer<'_> {
    fn restore(&self, example: &EvalExample, rng: &mut Rng) -> Result<Image> {
        let set = example.conditions(self.scale, self.params.config.num_classes)?;
        let cond = ConditionBatch::from_sets(&[&set])?;
        let den = Preconditioned {
            net: self.params,
            params: self.sigma,
        };
        let out = heun_sample(&den, &cond, self.steps, &self.sigma, rng)?;
        let mut img = out.to_image(0);
        img.clamp(-1.0, 1.0);
        Ok(img)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub id: String,
    pub psnr: Score,
    pub psnr_changed: Option<Score>,
    pub psnr_unchanged: Option<Score>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub examples: usize,
    pub failed: usize,
    pub psnr: Option<Score>,
    pub psnr_changed: Option<Score>,
    pub psnr_unchanged: Option<Score>,
    /// Toy-feature Fréchet distance between SR and HR sets.
    pub frechet: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ExampleRow>,
    pub failures: Vec<Failure>,
    pub aggregate: Aggregate,
}

impl Report {
    /// Flat `(metric, scope, value, example)` records.
    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |metric: &str, scope: &str, value: Score, id: Option<&str>| MetricRecord {
            metric: metric.into(),
            scope: scope.into(),
            value,
            example_id: id.map(str::to_string),
        };
        let mut out = Vec::new();
        for r in &self.rows {
            out.push(rec("psnr", "all", r.psnr, Some(&r.id)));
            if let Some(s) = r.psnr_changed {
                out.push(rec("psnr", "changed", s, Some(&r.id)));
            }
            if let Some(s) = r.psnr_unchanged {
                out.push(rec("psnr", "unchanged", s, Some(&r.id)));
            }
        }
        let a = &self.aggregate;
        for (scope, v) in [("all", a.psnr), ("changed", a.psnr_changed), ("unchanged", a.psnr_unchanged)] {
            if let Some(s) = v {
                out.push(rec("mean_psnr", scope, s, None));
            }
        }
        if let Some(f) = a.frechet {
            out.push(rec("toy_frechet", "all", Score(f), None));
        }
        out
    }
}

pub struct Evaluation {
    pub report: Report,
    /// SR output per successful example.
    pub outputs: Vec<(String, Image)>,
}

fn mean(scores: impl Iterator<Item = Score>) -> Option<Score> {
    let v: Vec<f64> = scores.map(|s| s.0).collect();
    (!v.is_empty()).then(|| Score(v.iter().sum::<f64>() / v.len() as f64))
}

fn optional_region(sr: &Image, ex: &EvalExample, region: Region) -> Result<Option<Score>> {
    match region_psnr(sr, &ex.hr, &ex.mask, region, DATA_RANGE) {
        Ok(s) => Ok(Some(s)),
        Err(Error::Domain(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Restores every example with its own derived seed and scores the results.
/// A failing example is recorded and excluded from the aggregates.
pub fn evaluate<R: Restorer + ?Sized>(restorer: &R, examples: &[EvalExample], seed: u64, extractor: &dyn Extractor) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Domain("validation set is empty".into()));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut outputs = Vec::new();
    let mut targets = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let mut rng = derive(seed, &[STREAM_SAMPLE, i as u64]);
        let scored = restorer.restore(ex, &mut rng).and_then(|sr| {
            let row = ExampleRow {
                id: ex.id.clone(),
                psnr: psnr(&sr, &ex.hr, DATA_RANGE)?,
                psnr_changed: optional_region(&sr, ex, Region::Changed)?,
                psnr_unchanged: optional_region(&sr, ex, Region::Unchanged)?,
            };
            Ok((row, sr))
        });
        match scored {
            Ok((row, sr)) => {
                rows.push(row);
                outputs.push((ex.id.clone(), sr));
                targets.push(ex.hr.clone());
            }
            Err(e) => failures.push(Failure {
                id: ex.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let frechet = if outputs.len() >= 2 {
        let srs: Vec<Image> = outputs.iter().map(|(_, im)| im.clone()).collect();
        let a = feature_stats(&srs, extractor)?;
        let b = feature_stats(&targets, extractor)?;
        Some(frechet_distance(&a, &b)?)
    } else {
        None
    };
    let aggregate = Aggregate {
        examples: examples.len(),
        failed: failures.len(),
        psnr: mean(rows.iter().map(|r| r.psnr)),
        psnr_changed: mean(rows.iter().filter_map(|r| r.psnr_changed)),
        psnr_unchanged: mean(rows.iter().filter_map(|r| r.psnr_unchanged)),
        frechet,
    };
    Ok(Evaluation {
        report: Report {
            rows,
            failures,
            aggregate,
        },
        outputs,
    })
}
