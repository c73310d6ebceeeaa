//! Run configuration: TOML file values overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use ritual_core::decoding::{Sampler, Strategy, StrategyConfig};
use ritual_core::Endpoint;
use serde::{Deserialize, Serialize};

pub const DEFAULT_PROVIDER: &str = "mock:";
pub const DEFAULT_WORKERS: usize = 4;

/// Decoding and provider flags shared by `decode` and `eval`.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// TOML config file; flags override its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Provider endpoint: mock:[opts], exec:<command> or tcp:<host:port>
    #[arg(long, env = "RITUAL_PROVIDER")]
    pub provider: Option<String>,
    /// base, ritual, vcd, m3id, ritual_vcd, ritual_m3id or ritual_plus
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub noise_steps: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// greedy or multinomial
    #[arg(long)]
    pub sampler: Option<Sampler>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent decode sessions for eval
    #[arg(long)]
    pub workers: Option<usize>,
    /// Directory for reports and traces
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingFile {
    pub strategy: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub zeta: Option<f64>,
    pub noise_steps: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub sampler: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub provider: Option<String>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    #[serde(default)]
    pub decoding: DecodingFile,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// The fully resolved configuration, echoed into reports.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub provider: String,
    /// Reported with the timing stats; results do not depend on it.
    #[serde(skip)]
    pub workers: usize,
    pub decoding: StrategyConfig,
    #[serde(skip)]
    pub endpoint: Endpoint,
    #[serde(skip)]
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub file: FileConfig,
}

impl RunFlags {
    /// Flags, then `RITUAL_PROVIDER`, then the config file, then defaults.
    /// `max_new_tokens` falls back to `default_max_new_tokens`.
    pub fn resolve(&self, default_max_new_tokens: usize) -> anyhow::Result<RunConfig> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let d = &file.decoding;
        let strategy = match (self.strategy, &d.strategy) {
            (Some(s), _) => s,
            (None, Some(s)) => s.parse().map_err(anyhow::Error::msg)?,
            (None, None) => Strategy::Ritual,
        };
        let mut cfg = StrategyConfig::for_strategy(strategy);
        cfg.max_new_tokens = default_max_new_tokens;
        macro_rules! pick {
            ($field:ident) => {
                if let Some(v) = self.$field.or(d.$field) {
                    cfg.$field = v;
                }
            };
        }
        pick!(alpha);
        pick!(beta);
        pick!(gamma);
        pick!(delta);
        pick!(lambda);
        pick!(zeta);
        pick!(noise_steps);
        pick!(max_new_tokens);
        pick!(seed);
        cfg.sampler = match (self.sampler, &d.sampler) {
            (Some(s), _) => s,
            (None, Some(s)) => s.parse().map_err(anyhow::Error::msg)?,
            (None, None) => cfg.sampler,
        };
        if let Err(e) = cfg.validate() {
            bail!("invalid decoding configuration: {e}");
        }
        let provider = self
            .provider
            .clone()
            .or_else(|| file.provider.clone())
            .unwrap_or_else(|| DEFAULT_PROVIDER.to_string());
        let endpoint: Endpoint = provider.parse()?;
        let workers = self.workers.or(file.workers).unwrap_or(DEFAULT_WORKERS);
        if workers == 0 {
            bail!("workers must be positive");
        }
        let output_dir = self
            .output_dir
            .clone()
            .or_else(|| file.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(RunConfig {
            provider,
            workers,
            decoding: cfg,
            endpoint,
            output_dir,
            file,
        })
    }
}
