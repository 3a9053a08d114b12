//! Layered run configuration: defaults, then a JSON config file, then flags.
//!
//! Every resolved configuration is written as a snapshot that can be fed back
//! through `--config` to reproduce the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

fn object(value: Value, origin: &str) -> Result<Map<String, Value>, CliError> {
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(CliError::Config(format!("{origin} must be a JSON object"))),
    }
}

/// Merges defaults, an optional config file and explicitly given flags.
/// Flags are serialized with unset options skipped, so only given ones override.
pub fn resolve<T, F>(command: &str, file: Option<&Path>, flags: &F) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut merged = object(serde_json::to_value(T::default()).expect("defaults serialize"), "defaults")?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut from_file = object(value, &path.display().to_string())?;
        match from_file.remove("command") {
            Some(Value::String(c)) if c != command => {
                return Err(CliError::Config(format!("{} is a snapshot of `{c}`, not `{command}`", path.display())));
            }
            _ => {}
        }
        merged.extend(from_file);
    }
    merged.extend(object(serde_json::to_value(flags).expect("flags serialize"), "flags")?);
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Serialize)]
struct Snapshot<'a, T> {
    command: &'a str,
    #[serde(flatten)]
    config: &'a T,
}

pub fn write_snapshot<T: Serialize>(command: &str, config: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(&Snapshot { command, config }).expect("config serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// `<path>.config.json` next to a single output file.
pub fn snapshot_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

pub fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value.as_deref().ok_or_else(|| CliError::Config(format!("missing required --{flag} (flag or config file)")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub test: usize,
    pub dh: usize,
    pub dz: usize,
    pub samples: usize,
    /// `K` or `MIN-MAX`.
    pub components: String,
    pub separation: f64,
    pub component_scale: f64,
    pub scale_gain: f64,
    pub center_scale: f64,
    pub noise: f64,
    pub label_slope: f64,
    pub label_midpoint: Option<f64>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let t = ssd_core::SyntheticTeacherConfig::default();
        SynthConfig {
            n: t.n_prompts,
            test: 1000,
            dh: t.d_h,
            dz: t.d_z,
            samples: t.samples_per_prompt,
            components: format!("{}-{}", t.min_components, t.max_components),
            separation: t.separation,
            component_scale: t.component_scale,
            scale_gain: t.scale_gain,
            center_scale: t.center_scale,
            noise: t.noise,
            label_slope: t.label_slope,
            label_midpoint: t.label_midpoint,
            seed: t.seed,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitPcaConfig {
    pub dataset: Option<PathBuf>,
    pub dpca: usize,
    pub out: Option<PathBuf>,
}

impl Default for FitPcaConfig {
    fn default() -> Self {
        FitPcaConfig { dataset: None, dpca: 16, out: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCmdConfig {
    pub dataset: Option<PathBuf>,
    pub pca: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub k: usize,
    pub width: usize,
    pub depth: usize,
    pub scale_floor: f64,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub clip: f64,
}

impl Default for TrainCmdConfig {
    fn default() -> Self {
        let m = ssd_core::MdnConfig::new(1, 1);
        let t = ssd_core::TrainConfig::default();
        TrainCmdConfig {
            dataset: None,
            pca: None,
            out: None,
            k: m.components,
            width: m.hidden_width,
            depth: m.depth,
            scale_floor: m.scale_floor,
            seed: 0,
            lr: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.max_epochs,
            patience: t.patience,
            val_fraction: t.validation_fraction,
            clip: t.clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Entropy,
    Likelihood,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub pca: Option<PathBuf>,
    pub mode: ScoreMode,
    pub out: Option<PathBuf>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { model: None, dataset: None, pca: None, mode: ScoreMode::Entropy, out: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Hallucination,
    Ood,
    Fidelity,
    Consensus,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Hallucination => "hallucination",
            Suite::Ood => "ood",
            Suite::Fidelity => "fidelity",
            Suite::Consensus => "consensus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCmdConfig {
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub pca: Option<PathBuf>,
    /// Training split for the correctness-probe baseline.
    pub train_dataset: Option<PathBuf>,
    pub suites: Vec<Suite>,
    pub resamples: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for EvalCmdConfig {
    fn default() -> Self {
        EvalCmdConfig {
            model: None,
            dataset: None,
            pca: None,
            train_dataset: None,
            suites: vec![Suite::Hallucination, Suite::Ood, Suite::Fidelity, Suite::Consensus],
            resamples: ssd_core::eval::DEFAULT_RESAMPLES,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub k: Vec<usize>,
    pub width: Vec<usize>,
    pub depth: Vec<usize>,
    /// 0 trains on raw embeddings.
    pub dpca: Vec<usize>,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub resamples: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let t = ssd_core::TrainConfig::default();
        SweepConfig {
            train: None,
            test: None,
            k: vec![1, 3, 5],
            width: vec![128],
            depth: vec![2],
            dpca: vec![0],
            epochs: t.max_epochs,
            patience: t.patience,
            lr: t.learning_rate,
            batch_size: t.batch_size,
            resamples: 200,
            seed: 0,
            out: None,
        }
    }
}

pub fn parse_components(text: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("components must be K or MIN-MAX, got {text:?}"));
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    match text.split_once('-') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let k = parse(text)?;
            Ok((k, k))
        }
    }
}
