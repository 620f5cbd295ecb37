//! Experiment configuration: defaults, then the TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use refdiff_core::datagen::SyntheticConfig;
use refdiff_core::degradation::DegradationConfig;
use refdiff_core::denoiser::{DenoiserConfig, SftMode};
use refdiff_core::edm::SigmaParams;
use refdiff_core::trainloop::TrainConfig;
use refdiff_core::{Error, Result};

/// Default output root when neither `--out` nor the config sets one.
pub const OUT_ENV: &str = "REFDIFF_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `train/` and `val/`; defaults to `<out>/data`.
    pub root: Option<PathBuf>,
    pub val_count: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            val_count: 16,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub heun_steps: usize,
    /// Evaluate only the first N validation pairs.
    pub max_examples: Option<usize>,
    pub extractor_seed: u64,
    pub extractor_dim: usize,
    /// Rows in the image grid.
    pub grid_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heun_steps: 18,
            max_examples: None,
            extractor_seed: 0,
            extractor_dim: 16,
            grid_rows: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub fn_rates: Vec<f64>,
    pub fp_rates: Vec<f64>,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        let sweep = vec![0.0, 0.25, 0.5, 1.0];
        Self {
            fn_rates: sweep.clone(),
            fp_rates: sweep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Drives data generation, initialization, training and sampling.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub sigma: SigmaParams,
    pub model: DenoiserConfig,
    pub degradation: DegradationConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub robustness: RobustnessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            data: DataConfig::default(),
            sigma: SigmaParams::default(),
            model: DenoiserConfig::default(),
            degradation: DegradationConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            robustness: RobustnessConfig::default(),
        }
    }
}

/// Flag values that override config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scale: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
    pub sft_mode: Option<SftMode>,
    pub no_ref: bool,
    pub no_mask: bool,
    pub no_semantic_sft: bool,
    pub no_texture_sft: bool,
    pub fn_rates: Option<Vec<f64>>,
    pub fp_rates: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies flags, propagates the global seed and checks consistency.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(s) = o.scale {
            self.degradation.scale = s;
        }
        if let Some(n) = o.steps {
            self.train.total_steps = n;
        }
        if let Some(p) = &o.out {
            self.out = Some(p.clone());
        }
        if self.out.is_none() {
            self.out = Some(std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from));
        }
        if let Some(m) = o.sft_mode {
            self.model.decoder.sft_mode = m;
        }
        self.model.conditions.use_ref &= !o.no_ref;
        self.model.conditions.use_mask &= !o.no_mask;
        self.model.decoder.semantic_sft &= !o.no_semantic_sft;
        self.model.decoder.ref_texture_sft &= !o.no_texture_sft;
        if let Some(r) = &o.fn_rates {
            self.robustness.fn_rates = r.clone();
        }
        if let Some(r) = &o.fp_rates {
            self.robustness.fp_rates = r.clone();
        }
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.sigma.validate()?;
        self.model.validate()?;
        self.degradation.validate()?;
        self.train.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.model.num_classes != self.data.synthetic.num_classes {
            return bad(format!(
                "model.num_classes {} differs from data.synthetic.num_classes {}",
                self.model.num_classes, self.data.synthetic.num_classes
            ));
        }
        let crop = self.train.crop_size;
        let scale = self.degradation.scale;
        if crop % scale != 0 || crop % self.model.size_multiple() != 0 {
            return bad(format!(
                "train.crop_size {crop} must be divisible by the scale {scale} and by {}",
                self.model.size_multiple()
            ));
        }
        if crop > self.data.synthetic.size {
            return bad(format!("train.crop_size {crop} exceeds image size {}", self.data.synthetic.size));
        }
        if self.eval.heun_steps < 2 {
            return bad(format!("eval.heun_steps {} below 2", self.eval.heun_steps));
        }
        if self.eval.extractor_dim < 8 {
            return bad(format!("eval.extractor_dim {} below 8", self.eval.extractor_dim));
        }
        for r in self.robustness.fn_rates.iter().chain(&self.robustness.fp_rates) {
            if !(0.0..=1.0).contains(r) {
                return bad(format!("robustness rate {r} outside [0, 1]"));
            }
        }
        if self.ablation.seeds.is_empty() {
            return bad("ablation.seeds is empty".into());
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.out_dir().join("data"))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
