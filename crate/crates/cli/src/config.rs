//! The run configuration tree. Values come from flags, then the config file,
//! then these defaults.

use std::path::{Path, PathBuf};

use proxysteer::align_train::TrainRunConfig;
use proxysteer::dataaug::{AugmentConfig, HttpClientConfig};
use proxysteer::providers::{ProviderSpec, RemoteConfig};
use proxysteer::steer::DecodingConfig;
use proxysteer::synth::ExperimentConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "PROXYSTEER_CONFIG";

/// Name of the config snapshot written into every run directory.
pub const SNAPSHOT: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed. Every stochastic component derives from it.
    pub seed: u64,
    /// Run directory; defaults to `runs/<command>`.
    pub run_dir: Option<PathBuf>,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub synth: SynthSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    #[default]
    Mock,
    Http,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    /// Source records, JSONL.
    pub input: Option<PathBuf>,
    /// Output dataset, JSONL.
    pub output: Option<PathBuf>,
    /// External questions, one per line.
    pub external: Option<PathBuf>,
    pub client: ClientKind,
    pub http: HttpClientConfig,
    pub options: AugmentConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub data: Option<PathBuf>,
    /// Base proxy model file.
    pub base: Option<PathBuf>,
    pub run: TrainRunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub prompt: Option<String>,
    /// One prompt per line.
    pub prompt_file: Option<PathBuf>,
    /// Dataset JSONL; its questions become prompts and its ids label outputs.
    pub data: Option<PathBuf>,
    pub target: Option<ProviderSpec>,
    pub fap: Option<ProviderSpec>,
    pub hdp: Option<ProviderSpec>,
    /// A file for one prompt, a directory for several.
    pub trace_out: Option<PathBuf>,
    pub threads: usize,
    pub decoding: DecodingConfig,
    pub remote: RemoteConfig,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            prompt: None,
            prompt_file: None,
            data: None,
            target: None,
            fap: None,
            hdp: None,
            trace_out: None,
            threads: 1,
            decoding: DecodingConfig::default(),
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub pred: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub specs: Option<PathBuf>,
    pub scorer_url: Option<String>,
    pub scorer_timeout_ms: u64,
    pub label: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pred: None,
            data: None,
            specs: None,
            scorer_url: None,
            scorer_timeout_ms: 30_000,
            label: "run".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Also train the proxies and score every ablation wiring.
    pub experiment: bool,
    pub options: ExperimentConfig,
}

impl RunConfig {
    /// Reads `explicit`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn load(explicit: Option<&Path>) -> Result<Self, CliError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match explicit.map(Path::to_path_buf).or(from_env) {
            Some(path) => {
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn run_dir(&self, command: &str) -> PathBuf {
        self.run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(command))
    }
}
