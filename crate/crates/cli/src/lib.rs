//! `refdiff` command-line experiments.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 config, 4 I/O,
//! 5 checkpoint, 6 numeric, 7 data validation. Failures print one line:
//! `error: kind=<kind> code=<n> msg="<message>"`.

pub mod config;
pub mod experiments;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use refdiff_core::checkpoint;
use refdiff_core::conditioning::{ConditionBatch, ConditionSet};
use refdiff_core::degradation::degrade_traced;
use refdiff_core::denoiser::SftMode;
use refdiff_core::edm::{heun_sample, Preconditioned};
use refdiff_core::image::{ChangeMask, Image};
use refdiff_core::rng::{derive, seeded};
use refdiff_core::{Error, Result};

use config::{ExperimentConfig, Overrides};
use experiments::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;
pub const EXIT_NUMERIC: i32 = 6;
pub const EXIT_VALIDATION: i32 = 7;

const SAMPLE_STREAM: u64 = 0x5A4D;

#[derive(Parser, Debug)]
#[command(name = "refdiff", version, about = "Change-aware diffusion super-resolution experiments")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SftModeArg {
    Enhanced,
    Original,
}

fn parse_scale(s: &str) -> std::result::Result<usize, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("scale must be 8 or 16, got {s}")),
    }
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML experiment config; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_scale)]
    scale: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Output root (default: $REFDIFF_OUT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    sft_mode: Option<SftModeArg>,
    #[arg(long, global = true)]
    no_ref: bool,
    #[arg(long, global = true)]
    no_mask: bool,
    #[arg(long, global = true)]
    no_semantic_sft: bool,
    #[arg(long, global = true)]
    no_texture_sft: bool,
    /// Comma-separated false-negative rates.
    #[arg(long, global = true, value_delimiter = ',')]
    fn_rate: Option<Vec<f64>>,
    /// Comma-separated false-positive rates.
    #[arg(long, global = true, value_delimiter = ',')]
    fp_rate: Option<Vec<f64>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (train and val splits).
    GenData,
    /// Preview LR synthesis for the given seeds.
    Degrade {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// HR image (default: first training image).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train a denoiser.
    Train,
    /// Super-resolve one LR + Ref + mask triplet.
    Sample {
        #[arg(long)]
        lr: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Metric report and image grid on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the six-row switch matrix.
    Ablate,
    /// Evaluate under corrupted change masks.
    Robustness {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Degrade { .. } => "degrade",
            Command::Train => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::Robustness { .. } => "robustness",
        }
    }
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            scale: self.scale,
            steps: self.steps,
            out: self.out.clone(),
            sft_mode: self.sft_mode.map(|m| match m {
                SftModeArg::Enhanced => SftMode::Enhanced,
                SftModeArg::Original => SftMode::Original,
            }),
            no_ref: self.no_ref,
            no_mask: self.no_mask,
            no_semantic_sft: self.no_semantic_sft,
            no_texture_sft: self.no_texture_sft,
            fn_rates: self.fn_rate.clone(),
            fp_rates: self.fp_rate.clone(),
        }
    }
}

pub fn exit_code(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Config(_) => (EXIT_CONFIG, "config"),
        Error::Io { .. } => (EXIT_IO, "io"),
        Error::Checkpoint(_) => (EXIT_CHECKPOINT, "checkpoint"),
        Error::Numeric(_) => (EXIT_NUMERIC, "numeric"),
        Error::Validation(_) | Error::ValidationBatch(_) => (EXIT_VALIDATION, "validation"),
        Error::Domain(_) => (EXIT_OTHER, "domain"),
        Error::Contract(_) => (EXIT_OTHER, "contract"),
        Error::Codec(_) => (EXIT_OTHER, "codec"),
        Error::Serde(_) => (EXIT_OTHER, "serde"),
    }
}

/// Single-line machine-parsable error.
pub fn error_line(kind: &str, code: i32, msg: &str) -> String {
    let escaped: String = msg
        .chars()
        .flat_map(|c| match c {
            '"' => vec!['\\', '"'],
            '\\' => vec!['\\', '\\'],
            '\n' | '\r' => vec![' '],
            c => vec![c],
        })
        .collect();
    format!("error: kind={kind} code={code} msg=\"{escaped}\"")
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, &args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (code, kind) = exit_code(&e);
            eprintln!("{}", error_line(kind, code, &e.to_string()));
            code
        }
    }
}

fn resolve(common: &CommonArgs) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    base.resolve(&common.overrides())
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    argv: Vec<String>,
    seed: u64,
    config_hash: String,
    code_version: &'static str,
    config: &'a ExperimentConfig,
}

fn write_provenance(dir: &Path, command: &str, argv: &[OsString], cfg: &ExperimentConfig) -> Result<()> {
    let record = Provenance {
        command,
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    write_json(&dir.join("run.json"), &record)
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn note(msg: &str) {
    eprintln!("[refdiff] {msg}");
}

fn dispatch(cli: &Cli, argv: &[OsString]) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let out = cfg.out_dir();
    let name = cli.command.name();
    match &cli.command {
        Command::GenData => {
            let (train, val) = gen_data(&cfg)?;
            let root = cfg.data_root();
            write_provenance(&root, name, argv, &cfg)?;
            println!(
                "wrote {} training and {} validation pairs to {}",
                train.entries.len(),
                val.entries.len(),
                root.display()
            );
        }
        Command::Degrade { seeds, input } => {
            let dir = out.join("degrade");
            create_dir(&dir)?;
            let hr = match input {
                Some(p) => {
                    require_file(p)?;
                    Image::load_png(p)?
                }
                None => load_split(&cfg, "train")?.swap_remove(0).hr,
            };
            hr.save_png(&dir.join("hr.png"))?;
            for &s in seeds {
                let (lr, trace) = degrade_traced(&hr, &cfg.degradation, &mut seeded(s))?;
                lr.save_png(&dir.join(format!("lr_seed{s}.png")))?;
                write_json(&dir.join(format!("trace_seed{s}.json")), &trace)?;
            }
            write_provenance(&dir, name, argv, &cfg)?;
            println!("wrote {} previews to {}", seeds.len(), dir.display());
        }
        Command::Train => {
            let dir = out.join("train");
            let pairs = load_split(&cfg, "train")?;
            note(&format!("training on {} pairs for {} steps", pairs.len(), cfg.train.total_steps));
            let run = train_model(&cfg, &cfg.model, &pairs, Some(&dir))?;
            write_provenance(&dir, name, argv, &cfg)?;
            println!(
                "final loss {:.6}; checkpoint at {}",
                run.log.last().map_or(f64::NAN, |r| r.loss),
                dir.join("checkpoint.rdck").display()
            );
        }
        Command::Sample {
            lr,
            reference,
            mask,
            checkpoint: ck,
            output,
        } => {
            let ck_path = ck.clone().unwrap_or_else(|| out.join("train").join("checkpoint.rdck"));
            require_file(&ck_path)?;
            for p in [lr, reference, mask] {
                require_file(p)?;
            }
            let params = checkpoint::load_expecting(&ck_path, &cfg.model)?.params;
            let lr_img = Image::load_png(lr)?;
            let ref_img = Image::load_png(reference)?;
            let mask_img = ChangeMask::load_png(mask)?;
            let scale = cfg.degradation.scale;
            if lr_img.height() * scale != ref_img.height() || lr_img.width() * scale != ref_img.width() {
                return Err(Error::Validation(format!(
                    "LR {}x{} times scale {scale} does not match Ref {}x{}",
                    lr_img.height(),
                    lr_img.width(),
                    ref_img.height(),
                    ref_img.width()
                )));
            }
            let set = ConditionSet::build(&lr_img, &ref_img, &mask_img, scale, cfg.model.num_classes)?;
            let cond = ConditionBatch::from_sets(&[&set])?;
            let den = Preconditioned {
                net: &params,
                params: cfg.sigma,
            };
            let mut rng = derive(cfg.seed, &[SAMPLE_STREAM]);
            let mut sr = heun_sample(&den, &cond, cfg.eval.heun_steps, &cfg.sigma, &mut rng)?.to_image(0);
            sr.clamp(-1.0, 1.0);
            let dir = out.join("sample");
            let target = output.clone().unwrap_or_else(|| dir.join("sr.png"));
            if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            sr.save_png(&target)?;
            write_provenance(&dir, name, argv, &cfg)?;
            println!("wrote {}", target.display());
        }
        Command::Eval { checkpoint: ck } => {
            let dir = out.join("eval");
            create_dir(&dir)?;
            let ck_path = ck.clone().unwrap_or_else(|| out.join("train").join("checkpoint.rdck"));
            require_file(&ck_path)?;
            let params = checkpoint::load_expecting(&ck_path, &cfg.model)?.params;
            let examples = eval_examples(&cfg, &load_split(&cfg, "val")?)?;
            note(&format!("evaluating {} examples", examples.len()));
            let ev = evaluate_model(&cfg, &params, &examples)?;
            write_json(&dir.join("report.json"), &ev.report)?;
            let records_path = dir.join("records.jsonl");
            let mut f = fs::File::create(&records_path).map_err(|e| io_err(&records_path, e))?;
            for r in ev.report.records() {
                writeln!(f, "{}", serde_json::to_string(&r)?).map_err(|e| io_err(&records_path, e))?;
            }
            if !ev.outputs.is_empty() {
                image_grid(&examples, &ev.outputs, cfg.eval.grid_rows, cfg.model.num_classes)?.save_png(&dir.join("grid.png"))?;
            }
            write_provenance(&dir, name, argv, &cfg)?;
            let a = &ev.report.aggregate;
            println!(
                "psnr {:.3} dB, unchanged {:.3} dB, changed {:.3} dB, toy frechet {:.6}, failures {}",
                a.psnr.map_or(f64::NAN, |s| s.0),
                a.psnr_unchanged.map_or(f64::NAN, |s| s.0),
                a.psnr_changed.map_or(f64::NAN, |s| s.0),
                a.frechet.unwrap_or(f64::NAN),
                a.failed
            );
        }
        Command::Ablate => {
            let dir = out.join("ablate");
            create_dir(&dir)?;
            let train_pairs = load_split(&cfg, "train")?;
            let examples = eval_examples(&cfg, &load_split(&cfg, "val")?)?;
            let (results, _) = run_ablation(&cfg, &train_pairs, &examples, Some(&dir), note)?;
            write_json(&dir.join("ablation.json"), &results)?;
            let table = ablation_table(&results);
            fs::write(dir.join("table.md"), &table).map_err(|e| io_err(&dir.join("table.md"), e))?;
            write_provenance(&dir, name, argv, &cfg)?;
            print!("{table}");
        }
        Command::Robustness { checkpoint: ck } => {
            let dir = out.join("robustness");
            create_dir(&dir)?;
            let ck_path = ck.clone().unwrap_or_else(|| out.join("train").join("checkpoint.rdck"));
            require_file(&ck_path)?;
            let params = checkpoint::load_expecting(&ck_path, &cfg.model)?.params;
            let examples = eval_examples(&cfg, &load_split(&cfg, "val")?)?;
            let rows = run_robustness(&cfg, &params, &examples, note)?;
            write_json(&dir.join("robustness.json"), &rows)?;
            write_provenance(&dir, name, argv, &cfg)?;
            println!("| fn_rate | fp_rate | PSNR (dB) | changed | unchanged | toy Fréchet |");
            println!("|---|---|---|---|---|---|");
            for r in &rows {
                let a = &r.report.aggregate;
                println!(
                    "| {} | {} | {:.3} | {:.3} | {:.3} | {:.5} |",
                    r.fn_rate,
                    r.fp_rate,
                    a.psnr.map_or(f64::NAN, |s| s.0),
                    a.psnr_changed.map_or(f64::NAN, |s| s.0),
                    a.psnr_unchanged.map_or(f64::NAN, |s| s.0),
                    a.frechet.unwrap_or(f64::NAN)
                );
            }
        }
    }
    Ok(())
}
