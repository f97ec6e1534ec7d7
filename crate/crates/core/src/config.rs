//! Pipeline configuration.
//!
//! One TOML file with a section per module. Every field has a default, so
//! an empty file is a valid mock configuration. The `DISHFORGE_CONFIG`
//! environment variable overrides the default path.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioning::{CaptioningSettings, QualityFilter};
use crate::curation::CurationSettings;
use crate::data::BlobStore;
use crate::editset::{EditType, EditsetSettings};
use crate::hashing::sha256_hex;
use crate::par::Execution;
use crate::providers::{HttpProvider, MockProvider, ProviderEndpoint, Providers};
use crate::schedule::DEFAULT_DISH_RATIO;

pub const CONFIG_ENV: &str = "DISHFORGE_CONFIG";
pub const DEFAULT_CONFIG_FILE: &str = "dishforge.toml";

/// Provider roles that can be mapped to endpoints.
pub const ROLES: [&str; 6] = ["chat", "vision", "embed", "edit", "generation", "finetune"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Blob store root, relative to the workspace unless absolute.
    pub blob_root: PathBuf,
    pub manifest_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            blob_root: "blobs".into(),
            manifest_dir: "manifests".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryConfig {
    pub min_quality: QualityFilter,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        LibraryConfig {
            min_quality: QualityFilter::Ultra,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub dish_ratio: f64,
    pub stages: Vec<u8>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            dish_ratio: DEFAULT_DISH_RATIO,
            stages: vec![1, 2, 3, 4, 5],
        }
    }
}

/// One concept to enhance and sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptConfig {
    pub concept: String,
    pub instruction: String,
    #[serde(default = "default_edit_type")]
    pub edit_type: EditType,
    pub source_prompt: String,
    pub target_prompt: String,
    /// Prompts for the fine-tuning images; defaults to the target prompt.
    #[serde(default)]
    pub target_prompts: Vec<String>,
    #[serde(default)]
    pub source_prompts: Vec<String>,
    #[serde(default = "default_n_target")]
    pub n_target: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_base_checkpoint")]
    pub base_checkpoint: String,
}

fn default_edit_type() -> EditType {
    EditType::Custom
}

fn default_n_target() -> usize {
    8
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_base_checkpoint() -> String {
    "base".into()
}

impl ConceptConfig {
    pub fn target_prompts(&self) -> Vec<String> {
        if self.target_prompts.is_empty() {
            vec![self.target_prompt.clone()]
        } else {
            self.target_prompts.clone()
        }
    }

    pub fn source_prompts(&self) -> Vec<String> {
        if self.source_prompts.is_empty() {
            vec![self.source_prompt.clone()]
        } else {
            self.source_prompts.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditsetConfig {
    #[serde(flatten)]
    pub settings: EditsetSettings,
    pub concepts: Vec<ConceptConfig>,
    /// Build inpainting pairs from curated records.
    pub inpaint: bool,
}

impl Default for EditsetConfig {
    fn default() -> Self {
        EditsetConfig {
            settings: EditsetSettings::default(),
            concepts: vec![ConceptConfig {
                concept: "add steam".into(),
                instruction: "add rising steam to the dish".into(),
                edit_type: EditType::Add,
                source_prompt: "a bowl of hot noodle soup".into(),
                target_prompt: "a bowl of hot noodle soup with rising steam".into(),
                target_prompts: Vec::new(),
                source_prompts: Vec::new(),
                n_target: default_n_target(),
                seeds: default_seeds(),
                base_checkpoint: default_base_checkpoint(),
            }],
            inpaint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Checkpoint used to generate the images compared against the
    /// reference set.
    pub checkpoint: String,
    pub generation_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: default_base_checkpoint(),
            generation_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
    /// Directory of static UI assets; optional.
    pub static_dir: Option<PathBuf>,
    pub workers: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8080".into(),
            static_dir: None,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Serve every provider role from the deterministic mock.
    pub mock: bool,
    /// Upper bound on in-flight calls per endpoint.
    pub concurrency: usize,
    /// Run independent items on the thread pool.
    pub parallel: bool,
    pub paths: PathsConfig,
    /// Endpoints by role (`chat`, `vision`, ...) or `default`.
    pub providers: BTreeMap<String, ProviderEndpoint>,
    pub curation: CurationSettings,
    pub captioning: CaptioningSettings,
    pub library: LibraryConfig,
    pub schedule: ScheduleConfig,
    pub editset: EditsetConfig,
    pub eval: EvalConfig,
    pub server: ServerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            mock: true,
            concurrency: crate::providers::gateway::DEFAULT_CONCURRENCY,
            parallel: true,
            paths: PathsConfig::default(),
            providers: BTreeMap::new(),
            curation: CurationSettings::default(),
            captioning: CaptioningSettings::default(),
            library: LibraryConfig::default(),
            schedule: ScheduleConfig::default(),
            editset: EditsetConfig::default(),
            eval: EvalConfig::default(),
            server: ServerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        for (name, ep) in cfg.providers.iter_mut() {
            if ep.name.is_empty() {
                ep.name = name.clone();
            }
            ep.base_url = ep.base_url.trim_end_matches('/').to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// Explicit path, else `$DISHFORGE_CONFIG`, else `dishforge.toml` in the
    /// workspace when it exists, else defaults.
    pub fn resolve(explicit: Option<&Path>, workspace: &Path) -> Result<Self, ConfigError> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        if let Some(p) = std::env::var_os(CONFIG_ENV) {
            return Self::load(Path::new(&p));
        }
        let default = workspace.join(DEFAULT_CONFIG_FILE);
        if default.exists() {
            return Self::load(&default);
        }
        Ok(Self::default())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let t = self.curation.threshold;
        if !(-1.0..=1.0).contains(&t) {
            return bad(format!("curation.threshold {t} outside [-1, 1]"));
        }
        let r = self.schedule.dish_ratio;
        if !(r > 0.0 && r <= 1.0) {
            return bad(format!("schedule.dish_ratio {r} outside (0, 1]"));
        }
        if let Some(s) = self.schedule.stages.iter().find(|s| !(1..=5).contains(*s)) {
            return bad(format!("schedule.stages contains {s}"));
        }
        if let Some(rho) = self.editset.settings.rho_grid.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad(format!("editset.rho_grid contains {rho}"));
        }
        let f = self.editset.settings.source_fraction;
        if !(0.0..1.0).contains(&f) {
            return bad(format!("editset.source_fraction {f} outside [0, 1)"));
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        for (key, ep) in &self.providers {
            if key != "default" && !ROLES.contains(&key.as_str()) {
                return bad(format!("unknown provider role {key:?}"));
            }
            ep.validate().map_err(ConfigError::Invalid)?;
        }
        if !self.mock {
            for role in ROLES {
                if self.endpoint(role).is_none() {
                    return bad(format!(
                        "no endpoint for role {role} (set providers.{role} or providers.default, or mock = true)"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn endpoint(&self, role: &str) -> Option<&ProviderEndpoint> {
        self.providers.get(role).or_else(|| self.providers.get("default"))
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::default()
        } else {
            Execution::Sequential
        }
    }

    pub fn blob_root(&self, workspace: &Path) -> PathBuf {
        workspace.join(&self.paths.blob_root)
    }

    pub fn manifest_dir(&self, workspace: &Path) -> PathBuf {
        workspace.join(&self.paths.manifest_dir)
    }

    /// Providers for every role: the mock when `mock` is set, otherwise one
    /// HTTP client per distinct endpoint.
    pub fn build_providers(&self, store: Arc<BlobStore>) -> Result<Providers, ConfigError> {
        if self.mock {
            return Ok(Providers::from_one(Arc::new(MockProvider::new(store, self.seed))));
        }
        let mut clients: BTreeMap<String, Arc<HttpProvider>> = BTreeMap::new();
        let mut client = |role: &str| -> Result<Arc<HttpProvider>, ConfigError> {
            let ep = self
                .endpoint(role)
                .ok_or_else(|| ConfigError::Invalid(format!("no endpoint for role {role}")))?;
            let key = format!("{}|{}", ep.name, ep.base_url);
            Ok(clients
                .entry(key)
                .or_insert_with(|| {
                    let mut ep = ep.clone();
                    ep.concurrency = ep.concurrency.min(self.concurrency);
                    Arc::new(HttpProvider::new(ep, store.clone()))
                })
                .clone())
        };
        Ok(Providers {
            chat: client("chat")?,
            vision: client("vision")?,
            embed: client("embed")?,
            edit: client("edit")?,
            generation: client("generation")?,
            finetune: client("finetune")?,
        })
    }

    /// Digest of the configuration a stage depends on.
    pub fn section_hash(&self, stage: &str) -> String {
        let providers = serde_json::json!({
            "mock": self.mock,
            "seed": self.seed,
            "providers": self.providers,
        });
        let section = match stage {
            "curate" => serde_json::json!({"p": providers, "s": self.curation}),
            "recaption" => serde_json::json!({"p": providers, "s": self.captioning}),
            "library" => serde_json::json!({"p": providers, "s": self.library}),
            "schedule" => serde_json::json!({"s": self.schedule, "seed": self.seed}),
            "editset" => serde_json::json!({"p": providers, "s": self.editset}),
            "eval" => serde_json::json!({"p": providers, "s": self.eval}),
            other => serde_json::json!({"unknown": other}),
        };
        sha256_hex(section.to_string().as_bytes())
    }
}
