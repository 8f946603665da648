//! Engine configuration file (TOML).
//!
//! Relative paths are resolved against the directory holding the config
//! file. Secrets are never read from the file: the remote backend takes its
//! key from the environment variable named by `backend.api_key_env`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::gateway::{
    Backend, Gateway, OpenAiBackend, RateLimits, RemoteConfig, RetryPolicy, ScriptedBackend,
};
use crate::images::ImageLibrary;
use crate::pipeline::{Engine, PipelineConfig};
use crate::prompter::{Prompter, Templates};
use crate::store::{ImageEmbeddings, Store, DEFAULT_DIM};
use crate::taxonomy::{Dataset, Registry};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {path}: {message}")]
    File { path: String, message: String },
    #[error("registry: {0}")]
    Registry(#[from] crate::taxonomy::TaxonomyError),
    #[error("store: {0}")]
    Store(#[from] crate::store::StoreError),
    #[error("templates: {0}")]
    Templates(#[from] crate::prompter::PromptError),
    #[error("backend: {0}")]
    Backend(#[from] crate::gateway::GatewayError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrySource {
    /// Shipped registry to use when `path` is unset.
    pub dataset: Option<Dataset>,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarPaths {
    pub manifest: PathBuf,
    pub vectors: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Scripted { script: PathBuf },
    Replay { transcript: PathBuf },
    Openai(RemoteConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Openai(RemoteConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub workers: usize,
    pub out_dir: PathBuf,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            workers: 4,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerSettings {
    pub bind: String,
    /// Allowed CORS origin for the console; `*` allows any.
    pub cors_origin: String,
    /// Optional transcript file appended to by `/ask`.
    pub transcript: Option<PathBuf>,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            cors_origin: "*".into(),
            transcript: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub registry: RegistrySource,
    pub store: Option<SidecarPaths>,
    pub queries: Option<SidecarPaths>,
    pub image_root: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub backend: BackendConfig,
    pub retry: RetryPolicy,
    pub rate_limits: RateLimits,
    pub pipeline: PipelineConfig,
    pub eval: EvalSettings,
    pub server: ServerSettings,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl EngineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let err = |message: String| ConfigError::File {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut cfg: EngineConfig = toml::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = self.registry.path.as_mut() {
            resolve(base, p);
        }
        for sc in [self.store.as_mut(), self.queries.as_mut()].into_iter().flatten() {
            resolve(base, &mut sc.manifest);
            resolve(base, &mut sc.vectors);
        }
        for p in [self.image_root.as_mut(), self.templates.as_mut(), self.server.transcript.as_mut()]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        match &mut self.backend {
            BackendConfig::Scripted { script } => resolve(base, script),
            BackendConfig::Replay { transcript } => resolve(base, transcript),
            BackendConfig::Openai(_) => {}
        }
        resolve(base, &mut self.eval.out_dir);
    }

    pub fn load_registry(&self) -> Result<Registry, ConfigError> {
        match (&self.registry.path, self.registry.dataset) {
            (Some(p), _) => Ok(Registry::load(p)?),
            (None, Some(ds)) => Ok(Registry::builtin(ds)),
            (None, None) => Ok(Registry::builtin(Dataset::FloodNet)),
        }
    }

    pub fn load_store(&self) -> Result<Store, ConfigError> {
        match &self.store {
            Some(sc) => Ok(Store::load_sidecar(&sc.manifest, &sc.vectors)?),
            None => Ok(Store::empty(DEFAULT_DIM)),
        }
    }

    pub fn build_backend(&self, images: Arc<ImageLibrary>) -> Result<Arc<dyn Backend>, ConfigError> {
        Ok(match &self.backend {
            BackendConfig::Scripted { script } => Arc::new(ScriptedBackend::load(script)?),
            BackendConfig::Replay { transcript } => Arc::new(ScriptedBackend::from_transcript(transcript)?),
            BackendConfig::Openai(remote) => Arc::new(OpenAiBackend::new(remote.clone(), images)?),
        })
    }

    /// Loads every resource the configuration names and assembles an engine.
    pub fn build_engine(&self) -> Result<Engine, ConfigError> {
        let registry = self.load_registry()?;
        let store = self.load_store()?;
        let query_embeddings = match &self.queries {
            Some(sc) => ImageEmbeddings::load_sidecar(&sc.manifest, &sc.vectors)?,
            None => ImageEmbeddings::new(store.dim()),
        };
        if !query_embeddings.is_empty() && query_embeddings.dim() != store.dim() {
            return Err(ConfigError::Invalid(format!(
                "query embeddings have dim {} but the store has dim {}",
                query_embeddings.dim(),
                store.dim()
            )));
        }
        let templates = match &self.templates {
            Some(p) => Templates::load(p)?,
            None => Templates::default(),
        };
        let images = Arc::new(ImageLibrary::new(self.image_root.clone()));
        let backend = self.build_backend(images.clone())?;
        Ok(Engine {
            registry: Arc::new(registry),
            store: Arc::new(store),
            query_embeddings: Arc::new(query_embeddings),
            images,
            prompter: Arc::new(Prompter::new(templates)),
            gateway: Gateway::new(backend, self.retry, self.rate_limits),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("engine.toml");
        std::fs::write(
            &path,
            r#"
image_root = "images"

[registry]
dataset = "rescuenet"

[store]
manifest = "support.json"
vectors = "support.bin"

[backend]
kind = "scripted"
script = "script.json"

[pipeline]
cot = false

[pipeline.retrieval]
pool_limit_per_choice = 5
pool_sample_seed = 9

[eval]
workers = 2
"#,
        )
        .unwrap();
        let cfg = EngineConfig::load(&path).unwrap();
        assert_eq!(cfg.image_root.as_deref(), Some(dir.path().join("images").as_path()));
        assert_eq!(cfg.store.as_ref().unwrap().vectors, dir.path().join("support.bin"));
        assert_eq!(
            cfg.backend,
            BackendConfig::Scripted { script: dir.path().join("script.json") }
        );
        assert!(!cfg.pipeline.cot);
        assert!(cfg.pipeline.selection_stage);
        assert_eq!(
            cfg.pipeline.retrieval.pool_limit_per_choice,
            crate::retriever::PoolLimit::Limited(5)
        );
        assert_eq!(cfg.pipeline.retrieval.counting_top_k, 2);
        assert_eq!(cfg.eval.workers, 2);
        assert_eq!(cfg.load_registry().unwrap().entries()[0].dataset, Dataset::RescueNet);
    }

    #[test]
    fn defaults_use_zero_temperature() {
        let cfg: EngineConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.pipeline.decode.temperature, 0.0);
        assert_eq!(cfg.pipeline.decode.max_output_tokens, 1024);
        assert!(matches!(cfg.backend, BackendConfig::Openai(_)));
    }
}
