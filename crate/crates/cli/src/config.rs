//! Run configuration: built-in defaults, then a TOML file, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use ssmix::data::DataConfig;
use ssmix::eval::synth::SynthConfig;
use ssmix::model::{ModelConfig, Squeeze};
use ssmix::train::{OptimizerKind, TrainConfig};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw KPI log (CSV with a `timestamp` column).
    pub input: PathBuf,
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input: "kpi.csv".into(),
            dataset: "dataset.ssmix".into(),
            model: "model.ssmix".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub bootstrap: bool,
    pub level: f64,
    pub resamples: usize,
    pub importance: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { bootstrap: false, level: 0.95, resamples: 2000, importance: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub windows: Vec<usize>,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { windows: vec![64, 128, 256, 512], warmup: 10, repetitions: 100 }
    }
}

/// Everything a run needs. The top-level `seed` drives every random stream
/// and overwrites the per-section seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalSettings,
    pub bench: BenchSettings,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn parse_squeeze(s: &str) -> Result<Squeeze, String> {
    parse_enum(s)
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    parse_enum(s)
}

/// Flags that override config-file values.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, help_heading = "Paths")]
    pub input: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "Paths")]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "Paths")]
    pub model: Option<PathBuf>,
    #[arg(long, global = true, help_heading = "Paths")]
    pub report_dir: Option<PathBuf>,

    /// Aggregation bin width in seconds
    #[arg(long, global = true, help_heading = "Data")]
    pub bin_width: Option<f64>,
    /// Grid stride in seconds
    #[arg(long, global = true, help_heading = "Data")]
    pub stride: Option<f64>,
    #[arg(long, global = true, help_heading = "Data")]
    pub grid_start: Option<f64>,
    /// Lookback length L
    #[arg(long, global = true, help_heading = "Data")]
    pub window: Option<usize>,
    /// Target column; repeat for several
    #[arg(long = "target", global = true, help_heading = "Data")]
    pub targets: Vec<String>,
    #[arg(long, global = true, help_heading = "Data")]
    pub val_frac: Option<f64>,
    #[arg(long, global = true, help_heading = "Data")]
    pub test_frac: Option<f64>,
    #[arg(long, global = true, help_heading = "Data")]
    pub prune: Option<bool>,
    #[arg(long, global = true, help_heading = "Data")]
    pub q_low: Option<f64>,
    #[arg(long, global = true, help_heading = "Data")]
    pub q_high: Option<f64>,
    #[arg(long, global = true, help_heading = "Data")]
    pub iqr_k: Option<f64>,
    #[arg(long, global = true, help_heading = "Data")]
    pub sentinel_column: Option<String>,

    #[arg(long, global = true, help_heading = "Model")]
    pub width: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub n_state: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub n_components: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub n_layers: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub kernel_len: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub se_reduction: Option<usize>,
    #[arg(long, global = true, help_heading = "Model")]
    pub glu_ratio: Option<f64>,
    #[arg(long, global = true, help_heading = "Model")]
    pub dropout: Option<f64>,
    #[arg(long, global = true, help_heading = "Model")]
    pub ln_epsilon: Option<f64>,
    /// causal | window
    #[arg(long, global = true, value_parser = parse_squeeze, help_heading = "Model")]
    pub squeeze: Option<Squeeze>,

    #[arg(long, global = true, help_heading = "Training")]
    pub lr: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub clip_norm: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub batch_size: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    pub max_epochs: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    pub patience: Option<usize>,
    #[arg(long, global = true, help_heading = "Training")]
    pub tol: Option<f64>,
    #[arg(long, global = true, help_heading = "Training")]
    pub plateau_factor: Option<f64>,
    /// Keep the learning rate fixed
    #[arg(long, global = true, help_heading = "Training")]
    pub no_plateau: bool,
    /// adamw | sgdwd
    #[arg(long, global = true, value_parser = parse_optimizer, help_heading = "Training")]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, global = true, help_heading = "Training")]
    pub threads: Option<usize>,

    /// Synthetic log length in steps
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub steps: Option<usize>,
    #[arg(long, global = true, help_heading = "Synthetic data")]
    pub period: Option<f64>,

    /// Add bootstrap confidence intervals to the report
    #[arg(long, global = true, help_heading = "Evaluation")]
    pub bootstrap: bool,
    #[arg(long, global = true, help_heading = "Evaluation")]
    pub level: Option<f64>,
    #[arg(long, global = true, help_heading = "Evaluation")]
    pub resamples: Option<usize>,
    /// Add permutation importance per feature to the report
    #[arg(long, global = true, help_heading = "Evaluation")]
    pub importance: bool,

    /// Lookback grid, comma separated
    #[arg(long, global = true, value_delimiter = ',', help_heading = "Benchmark")]
    pub windows: Vec<usize>,
    #[arg(long, global = true, help_heading = "Benchmark")]
    pub warmup: Option<usize>,
    #[arg(long, global = true, help_heading = "Benchmark")]
    pub repetitions: Option<usize>,
}

macro_rules! set {
    ($($src:expr => $dst:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst = v; })*
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
    }

    /// Defaults, then `--config`, then the remaining flags.
    pub fn resolve(o: &Overrides) -> Result<Self, Failure> {
        let mut c = match &o.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        set!(
            o.seed => c.seed,
            o.input => c.paths.input,
            o.dataset => c.paths.dataset,
            o.model => c.paths.model,
            o.report_dir => c.paths.report_dir,
            o.bin_width => c.data.bin_width,
            o.stride => c.data.stride,
            o.window => c.data.window,
            o.val_frac => c.data.val_frac,
            o.test_frac => c.data.test_frac,
            o.prune => c.data.prune,
            o.q_low => c.data.q_low,
            o.q_high => c.data.q_high,
            o.iqr_k => c.data.iqr_k,
            o.sentinel_column => c.data.sentinel_column,
            o.width => c.model.width,
            o.n_state => c.model.n_state,
            o.n_components => c.model.n_components,
            o.n_layers => c.model.n_layers,
            o.kernel_len => c.model.kernel_len,
            o.se_reduction => c.model.se_reduction,
            o.glu_ratio => c.model.glu_ratio,
            o.dropout => c.model.dropout,
            o.ln_epsilon => c.model.ln_epsilon,
            o.squeeze => c.model.squeeze,
            o.lr => c.train.lr,
            o.weight_decay => c.train.weight_decay,
            o.clip_norm => c.train.clip_norm,
            o.batch_size => c.train.batch_size,
            o.max_epochs => c.train.max_epochs,
            o.patience => c.train.patience,
            o.tol => c.train.tol,
            o.optimizer => c.train.optimizer,
            o.threads => c.train.threads,
            o.steps => c.synth.steps,
            o.period => c.synth.period,
            o.level => c.eval.level,
            o.resamples => c.eval.resamples,
            o.warmup => c.bench.warmup,
            o.repetitions => c.bench.repetitions,
        );
        if o.grid_start.is_some() {
            c.data.grid_start = o.grid_start;
        }
        if !o.targets.is_empty() {
            c.data.targets = o.targets.clone();
        }
        if o.plateau_factor.is_some() {
            c.train.plateau_factor = o.plateau_factor;
        }
        if o.no_plateau {
            c.train.plateau_factor = None;
        }
        if !o.windows.is_empty() {
            c.bench.windows = o.windows.clone();
        }
        c.eval.bootstrap |= o.bootstrap;
        c.eval.importance |= o.importance;

        c.train.seed = c.seed;
        c.synth.seed = c.seed;
        // the model reads exactly the data window; F and O follow the dataset
        c.model.window = c.data.window;
        c.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        if !(c.eval.level > 0.0 && c.eval.level < 1.0) || c.eval.resamples == 0 {
            return Err(Failure::Usage("eval.level must lie in (0, 1) and eval.resamples be positive".into()));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[derive(Parser)]
    struct Probe {
        #[command(flatten)]
        o: Overrides,
    }

    fn resolve(args: &[&str]) -> RunConfig {
        let p = Probe::try_parse_from(std::iter::once("probe").chain(args.iter().copied())).unwrap();
        RunConfig::resolve(&p.o).unwrap()
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[train]\nlr = 0.01\nbatch_size = 32\n[model]\nsqueeze = \"window\"\n").unwrap();
        let c = resolve(&["--config", path.to_str().unwrap(), "--lr", "0.5"]);
        assert_eq!(c.train.lr, 0.5);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.max_epochs, TrainConfig::default().max_epochs);
        assert_eq!(c.model.squeeze, Squeeze::Window);
        assert_eq!((c.seed, c.train.seed, c.synth.seed), (4, 4, 4));
    }

    #[test]
    fn echo_parses_back_to_the_same_config() {
        let c = resolve(&["--window", "16", "--target", "RSRP", "--target", "SINR", "--no-plateau", "--windows", "8,16"]);
        assert_eq!(c.model.window, 16);
        assert_eq!(c.data.targets, ["RSRP", "SINR"]);
        assert_eq!(c.train.plateau_factor, None);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nlearning_rate = 0.01\n").unwrap();
        assert!(matches!(RunConfig::from_file(&path), Err(Failure::Usage(_))));
    }
}
