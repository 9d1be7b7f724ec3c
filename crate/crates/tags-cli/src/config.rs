//! TOML run configuration. Unknown keys are rejected and all paths
//! resolve relative to the config file's directory. Credentials are
//! only ever read from the environment variables named here.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use tags_core::agents::{ChatBackend, HttpBackendConfig, HttpChatBackend, MockChatBackend};
use tags_core::embedding::{
    DeterministicProvider, EmbeddingProvider, HttpEmbeddingProvider, HttpProviderConfig,
};
use tags_core::harness::{Mode, PipelineConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub backend: BackendSection,
    pub verifier_backend: Option<BackendSection>,
    pub provider: ProviderSection,
    pub paths: PathsSection,
    pub pipeline: PipelineSection,
    pub generation: GenerationSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    /// "mock" or "http".
    pub kind: Option<String>,
    /// Mock script file (kind = "mock").
    pub script: Option<PathBuf>,
    /// Chat-completion endpoint URL (kind = "http").
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_s: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderSection {
    /// "deterministic" or "http".
    pub kind: Option<String>,
    pub dim: Option<usize>,
    /// Version tag of the deterministic provider.
    pub tag: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub batch_size: Option<usize>,
    pub timeout_s: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub index: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub fewshot_train: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub mode: Option<String>,
    pub k: Option<usize>,
    pub exclude_top_n: Option<usize>,
    pub specialist_rank: Option<u8>,
    pub specialist_count: Option<u32>,
    pub seed: Option<i64>,
    pub workers: Option<usize>,
    pub cross_stage_exclusion: Option<bool>,
    pub include_round1_in_round2: Option<bool>,
    pub verifier_repeats: Option<u32>,
    pub fewshot_count: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSection {
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub retry_limit: Option<u32>,
}

impl ConfigFile {
    /// Load and validate a config file; paths become absolute against
    /// the file's directory. Without a path, defaults apply and paths
    /// resolve against the working directory.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: ConfigFile = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.paths.index = config.paths.index.map(|p| resolve(base, p));
        config.paths.corpus = config.paths.corpus.map(|p| resolve(base, p));
        config.paths.fewshot_train = config.paths.fewshot_train.map(|p| resolve(base, p));
        config.backend.script = config.backend.script.map(|p| resolve(base, p));
        if let Some(section) = &mut config.verifier_backend {
            section.script = section.script.take().map(|p| resolve(base, p));
        }
        Ok(config)
    }

    /// Merge pipeline defaults, config values and command-line
    /// overrides, in rising precedence.
    pub fn pipeline_config(&self, overrides: &PipelineOverrides) -> Result<PipelineConfig, CliError> {
        let mut cfg = PipelineConfig::default();
        let section = &self.pipeline;
        if let Some(mode) = &section.mode {
            cfg.mode = parse_mode(mode)?;
        }
        apply(&mut cfg.k, section.k);
        apply(&mut cfg.exclude_top_n, section.exclude_top_n);
        apply(&mut cfg.specialist_rank, section.specialist_rank);
        apply(&mut cfg.specialist_count, section.specialist_count);
        apply(&mut cfg.seed, section.seed);
        apply(&mut cfg.workers, section.workers);
        apply(&mut cfg.cross_stage_exclusion, section.cross_stage_exclusion);
        apply(&mut cfg.include_round1_in_round2, section.include_round1_in_round2);
        apply(&mut cfg.verifier_repeats, section.verifier_repeats);
        apply(&mut cfg.fewshot_count, section.fewshot_count);
        apply(&mut cfg.generation.temperature, self.generation.temperature);
        apply(&mut cfg.generation.max_tokens, self.generation.max_tokens);
        apply(&mut cfg.generation.retry_limit, self.generation.retry_limit);

        if let Some(mode) = &overrides.mode {
            cfg.mode = parse_mode(mode)?;
        }
        apply(&mut cfg.k, overrides.k);
        apply(&mut cfg.exclude_top_n, overrides.exclude_top_n);
        apply(&mut cfg.specialist_rank, overrides.specialist_rank);
        apply(&mut cfg.workers, overrides.workers);
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn build_backend(&self) -> Result<Box<dyn ChatBackend>, CliError> {
        build_backend_section(&self.backend, "backend")
    }

    pub fn build_verifier_backend(&self) -> Result<Option<Box<dyn ChatBackend>>, CliError> {
        self.verifier_backend
            .as_ref()
            .map(|section| build_backend_section(section, "verifier_backend"))
            .transpose()
    }

    pub fn build_provider(
        &self,
        kind_override: Option<&str>,
        dim_override: Option<usize>,
    ) -> Result<Box<dyn EmbeddingProvider>, CliError> {
        let section = &self.provider;
        let kind = kind_override
            .map(str::to_string)
            .or_else(|| section.kind.clone())
            .unwrap_or_else(|| "deterministic".to_string());
        let dim = dim_override
            .or(section.dim)
            .unwrap_or(tags_core::embedding::DEFAULT_DIM);
        match kind.as_str() {
            "deterministic" => {
                let tag = section.tag.clone().unwrap_or_else(|| "det-v1".to_string());
                Ok(Box::new(DeterministicProvider::with_tag(dim, tag)))
            }
            "http" => {
                let endpoint = section
                    .endpoint
                    .clone()
                    .ok_or_else(|| missing_key("provider.endpoint", "provider.kind = \"http\""))?;
                let model = section
                    .model
                    .clone()
                    .ok_or_else(|| missing_key("provider.model", "provider.kind = \"http\""))?;
                let mut config = HttpProviderConfig::new(endpoint, model, dim);
                config.api_key = read_key(section.api_key_env.as_deref())?;
                if let Some(batch) = section.batch_size {
                    config.batch_size = batch;
                }
                if let Some(secs) = section.timeout_s {
                    config.timeout = Duration::from_secs(secs);
                }
                Ok(Box::new(HttpEmbeddingProvider::new(config).map_err(CliError::domain)?))
            }
            other => Err(CliError::usage(format!(
                "provider.kind must be \"deterministic\" or \"http\", got {other:?}"
            ))),
        }
    }
}

/// Command-line overrides shared by `ask` and `eval`.
#[derive(Debug, Default, Clone)]
pub struct PipelineOverrides {
    pub mode: Option<String>,
    pub k: Option<usize>,
    pub exclude_top_n: Option<usize>,
    pub specialist_rank: Option<u8>,
    pub workers: Option<usize>,
}

fn apply<T>(slot: &mut T, value: Option<T>) {
    if let Some(value) = value {
        *slot = value;
    }
}

fn resolve(base: &Path, path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    s.parse().map_err(CliError::Usage)
}

fn missing_key(key: &str, context: &str) -> CliError {
    CliError::usage(format!("config key \"{key}\" is required when {context}"))
}

fn read_key(api_key_env: Option<&str>) -> Result<Option<String>, CliError> {
    match api_key_env {
        None => Ok(None),
        Some(var) => std::env::var(var).map(Some).map_err(|_| {
            CliError::usage(format!("environment variable {var} (named by api_key_env) is not set"))
        }),
    }
}

fn build_backend_section(section: &BackendSection, prefix: &str) -> Result<Box<dyn ChatBackend>, CliError> {
    let kind = section
        .kind
        .as_deref()
        .ok_or_else(|| CliError::usage(format!("config key \"{prefix}.kind\" is required")))?;
    match kind {
        "mock" => {
            let script = section
                .script
                .as_ref()
                .ok_or_else(|| missing_key(&format!("{prefix}.script"), &format!("{prefix}.kind = \"mock\"")))?;
            Ok(Box::new(MockChatBackend::from_script_file(script).map_err(CliError::domain)?))
        }
        "http" => {
            let endpoint = section
                .endpoint
                .clone()
                .ok_or_else(|| missing_key(&format!("{prefix}.endpoint"), &format!("{prefix}.kind = \"http\"")))?;
            let model = section
                .model
                .clone()
                .ok_or_else(|| missing_key(&format!("{prefix}.model"), &format!("{prefix}.kind = \"http\"")))?;
            let mut config = HttpBackendConfig::new(endpoint, model);
            config.api_key = read_key(section.api_key_env.as_deref())?;
            if let Some(secs) = section.timeout_s {
                config.timeout = Duration::from_secs(secs);
            }
            Ok(Box::new(HttpChatBackend::new(config).map_err(CliError::domain)?))
        }
        other => Err(CliError::usage(format!(
            "{prefix}.kind must be \"mock\" or \"http\", got {other:?}"
        ))),
    }
}
