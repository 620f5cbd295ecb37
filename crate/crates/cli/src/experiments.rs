//! Experiment drivers shared by the subcommands and the acceptance suite.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use refdiff_core::conditioning::ConditionSwitches;
use refdiff_core::datagen::{default_palette, ingest_dataset, load_dataset, synthetic_dataset, write_dataset, Manifest, SamplePair, SyntheticConfig};
use refdiff_core::denoiser::{DecoderSwitches, DenoiserConfig, DenoiserParams, SftMode};
use refdiff_core::image::{ChangeMask, Image};
use refdiff_core::metrics::{toy_extractor, Score};
use refdiff_core::resample::{resize, Interpolation};
use refdiff_core::rng::derive_seed;
use refdiff_core::trainloop::{corrupt_examples, evaluate, prepare_eval, train, EvalExample, Evaluation, HeunRestorer, Report, TrainData, TrainRun};
use refdiff_core::{Error, Result};

use crate::config::ExperimentConfig;

const VAL_STREAM: u64 = 0x7A1;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `train/` and `val/` trees under the data root.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<(Manifest, Manifest)> {
    let root = cfg.data_root();
    let k = cfg.data.synthetic.num_classes;
    let train = synthetic_dataset(&cfg.data.synthetic, cfg.seed)?;
    let val_cfg = SyntheticConfig {
        count: cfg.data.val_count,
        ..cfg.data.synthetic.clone()
    };
    let val = synthetic_dataset(&val_cfg, derive_seed(cfg.seed, &[VAL_STREAM]))?;
    Ok((write_dataset(&root.join("train"), &train, k)?, write_dataset(&root.join("val"), &val, k)?))
}

/// Validates and loads one split of the data root.
pub fn load_split(cfg: &ExperimentConfig, split: &str) -> Result<Vec<SamplePair>> {
    let root = cfg.data_root().join(split);
    let manifest = ingest_dataset(&root, cfg.degradation.scale, cfg.model.num_classes)?;
    if manifest.entries.is_empty() {
        return Err(Error::Validation(format!("{} holds no examples", root.display())));
    }
    load_dataset(&root, &manifest)
}

pub fn train_model(cfg: &ExperimentConfig, model: &DenoiserConfig, pairs: &[SamplePair], out: Option<&Path>) -> Result<TrainRun> {
    let params = DenoiserParams::init(model, cfg.seed)?;
    let data = TrainData {
        pairs,
        degradation: &cfg.degradation,
    };
    train(&cfg.train, &cfg.sigma, &data, params, out, None)
}

pub fn eval_examples(cfg: &ExperimentConfig, pairs: &[SamplePair]) -> Result<Vec<EvalExample>> {
    let n = cfg.eval.max_examples.unwrap_or(pairs.len()).min(pairs.len());
    prepare_eval(&pairs[..n], &cfg.degradation, cfg.seed)
}

pub fn evaluate_model(cfg: &ExperimentConfig, params: &DenoiserParams, examples: &[EvalExample]) -> Result<Evaluation> {
    let restorer = HeunRestorer::new(params, cfg.sigma, cfg.eval.heun_steps, cfg.degradation.scale);
    let fx = toy_extractor(cfg.eval.extractor_seed, cfg.eval.extractor_dim)?;
    evaluate(&restorer, examples, cfg.seed, &fx)
}

/// Class colors for display; unchanged pixels are black.
pub fn colorize_mask(mask: &ChangeMask, num_classes: usize) -> Image {
    let palette = default_palette(num_classes);
    let (h, w) = (mask.height(), mask.width());
    let mut img = Image::filled(h, w, 3, -1.0);
    for y in 0..h {
        for x in 0..w {
            let c = mask.get(y, x) as usize;
            if c > 0 {
                let color = palette.get(c - 1).map_or([1.0; 3], |s| s.color);
                for (ch, v) in color.iter().enumerate() {
                    img.set(y, x, ch, *v);
                }
            }
        }
    }
    img
}

/// Mosaic with one row per example: LR | Ref | mask | SR | HR.
pub fn image_grid(examples: &[EvalExample], outputs: &[(String, Image)], rows: usize, num_classes: usize) -> Result<Image> {
    let picked: Vec<(&EvalExample, &Image)> = outputs
        .iter()
        .filter_map(|(id, sr)| examples.iter().find(|e| &e.id == id).map(|e| (e, sr)))
        .take(rows)
        .collect();
    let Some((first, _)) = picked.first() else {
        return Err(Error::Domain("no restored examples to show".into()));
    };
    let (h, w) = (first.hr.height(), first.hr.width());
    let mut grid = Image::filled(h * picked.len(), w * 5, 3, 1.0);
    for (r, (ex, sr)) in picked.iter().enumerate() {
        let tiles = [
            resize(&ex.lr, h, w, Interpolation::Nearest)?,
            ex.reference.clone(),
            colorize_mask(&ex.cond_mask, num_classes),
            (*sr).clone(),
            ex.hr.clone(),
        ];
        for (col, tile) in tiles.iter().enumerate() {
            if !tile.same_size(&ex.hr) || (tile.height(), tile.width()) != (h, w) {
                return Err(Error::Contract(format!("example {} differs in size from the first row", ex.id)));
            }
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        grid.set(r * h + y, col * w + x, c, tile.get(y, x, c));
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// One configuration of the ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub conditions: ConditionSwitches,
    pub decoder: DecoderSwitches,
}

impl AblationRow {
    fn new(name: &str, use_ref: bool, use_mask: bool, texture: bool, semantic: bool, mode: SftMode) -> Self {
        Self {
            name: name.into(),
            conditions: ConditionSwitches {
                use_lr: true,
                use_ref,
                use_mask,
            },
            decoder: DecoderSwitches {
                semantic_sft: semantic,
                ref_texture_sft: texture,
                sft_mode: mode,
            },
        }
    }

    pub fn apply(&self, model: &DenoiserConfig) -> DenoiserConfig {
        DenoiserConfig {
            conditions: self.conditions,
            decoder: self.decoder,
            ..model.clone()
        }
    }
}

/// The six rows: LR, +Ref, +mask, +texture SFT, +semantic SFT, both SFTs.
pub fn ablation_rows(mode: SftMode) -> Vec<AblationRow> {
    vec![
        AblationRow::new("lr", false, false, false, false, mode),
        AblationRow::new("lr+ref", true, false, false, false, mode),
        AblationRow::new("lr+ref+mask", true, true, false, false, mode),
        AblationRow::new("lr+ref+mask+tex_sft", true, true, true, false, mode),
        AblationRow::new("lr+ref+mask+sem_sft", true, true, false, true, mode),
        AblationRow::new("full", true, true, true, true, mode),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub psnr: Option<Score>,
    pub frechet: Option<f64>,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seeds: Vec<SeedResult>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub frechet_mean: f64,
    pub frechet_std: f64,
}

/// Sample mean and unbiased standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trained parameters and evaluation for one (row, seed) pair.
pub struct AblationRun {
    pub row: usize,
    pub seed: u64,
    pub params: DenoiserParams,
    pub report: Report,
}

/// Trains and evaluates every row for every ablation seed. With `out`, each
/// run writes its training artifacts to `out/<row>/seed_<n>/`.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    train_pairs: &[SamplePair],
    examples: &[EvalExample],
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<(Vec<AblationResult>, Vec<AblationRun>)> {
    let rows = ablation_rows(cfg.model.decoder.sft_mode);
    let mut runs = Vec::new();
    let mut results = Vec::new();
    for (ri, row) in rows.iter().enumerate() {
        let mut seeds = Vec::new();
        for &seed in &cfg.ablation.seeds {
            let run_cfg = ExperimentConfig {
                seed,
                train: refdiff_core::trainloop::TrainConfig {
                    seed,
                    ..cfg.train.clone()
                },
                ..cfg.clone()
            };
            let model = row.apply(&cfg.model);
            let dir: Option<PathBuf> = out.map(|o| o.join(&row.name).join(format!("seed_{seed}")));
            let trained = train_model(&run_cfg, &model, train_pairs, dir.as_deref())?;
            // Evaluation sampling noise is shared across rows and seeds.
            let ev = evaluate_model(cfg, &trained.params, examples)?;
            if let Some(d) = &dir {
                write_json(&d.join("report.json"), &ev.report)?;
            }
            let agg = &ev.report.aggregate;
            progress(&format!(
                "row {} seed {seed}: psnr {:.3} frechet {:.5}",
                row.name,
                agg.psnr.map_or(f64::NAN, |s| s.0),
                agg.frechet.unwrap_or(f64::NAN)
            ));
            seeds.push(SeedResult {
                seed,
                psnr: agg.psnr,
                frechet: agg.frechet,
                final_loss: trained.log.last().map_or(f64::NAN, |r| r.loss),
            });
            runs.push(AblationRun {
                row: ri,
                seed,
                params: trained.params,
                report: ev.report,
            });
        }
        let psnrs: Vec<f64> = seeds.iter().map(|s| s.psnr.map_or(f64::NAN, |p| p.0)).collect();
        let fids: Vec<f64> = seeds.iter().map(|s| s.frechet.unwrap_or(f64::NAN)).collect();
        let (psnr_mean, psnr_std) = mean_std(&psnrs);
        let (frechet_mean, frechet_std) = mean_std(&fids);
        results.push(AblationResult {
            row: row.clone(),
            seeds,
            psnr_mean,
            psnr_std,
            frechet_mean,
            frechet_std,
        });
    }
    Ok((results, runs))
}

/// Markdown comparison table of ablation results.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mark = |b: bool| if b { "x" } else { "" };
    let mut s = String::from("| row | LR | Ref | mask | tex SFT | sem SFT | PSNR (dB) | toy Fréchet |\n|---|---|---|---|---|---|---|---|\n");
    for r in results {
        let c = &r.row.conditions;
        let d = &r.row.decoder;
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {:.3} ± {:.3} | {:.5} ± {:.5} |\n",
            r.row.name,
            mark(c.use_lr),
            mark(c.use_ref),
            mark(c.use_mask),
            mark(d.ref_texture_sft),
            mark(d.semantic_sft),
            r.psnr_mean,
            r.psnr_std,
            r.frechet_mean,
            r.frechet_std
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub fn_rate: f64,
    pub fp_rate: f64,
    pub report: Report,
}

/// The clean setting followed by an FN sweep (FP = 0) and an FP sweep
/// (FN = 0). Zero rates reuse the clean conditioning masks.
pub fn robustness_settings(cfg: &ExperimentConfig) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0)];
    out.extend(cfg.robustness.fn_rates.iter().filter(|&&r| r > 0.0).map(|&r| (r, 0.0)));
    out.extend(cfg.robustness.fp_rates.iter().filter(|&&r| r > 0.0).map(|&r| (0.0, r)));
    out
}

pub fn run_robustness(
    cfg: &ExperimentConfig,
    params: &DenoiserParams,
    examples: &[EvalExample],
    mut progress: impl FnMut(&str),
) -> Result<Vec<RobustnessRow>> {
    robustness_settings(cfg)
        .into_iter()
        .map(|(fn_rate, fp_rate)| {
            let corrupted = corrupt_examples(examples, fn_rate, fp_rate, cfg.model.num_classes, cfg.seed)?;
            let ev = evaluate_model(cfg, params, &corrupted)?;
            progress(&format!(
                "fn {fn_rate} fp {fp_rate}: psnr {:.3}",
                ev.report.aggregate.psnr.map_or(f64::NAN, |s| s.0)
            ));
            Ok(RobustnessRow {
                fn_rate,
                fp_rate,
                report: ev.report,
            })
        })
        .collect()
}
