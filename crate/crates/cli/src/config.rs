//! `forge.toml`: backend, renderer, embedding providers, bank and loop
//! defaults. API keys never appear in the file; it names the environment
//! variable that holds them. `FORGE_*` variables override file values.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use forge_core::agents::{ChatBackend, ChatBackendConfig, LlmBackend, MockBackend};
use forge_core::codebank::{CodeBank, BANK_FILE};
use forge_core::pipeline::{Deps, RenderSettings, VerificationConfig};
use forge_core::render::{HeadlessConfig, HeadlessRenderer, MockRenderer, RenderAdapter, RenderSlots, SceneTemplate};
use forge_core::schema::ApiSchema;
use forge_core::similarity::{EmbeddingKind, EmbeddingProvider, HttpEmbeddingProvider, Providers};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data_dir: PathBuf,
    pub listen: String,
    /// Mock backend, mock renderer and hash-embedding providers.
    pub mock: bool,
    /// API schema JSON; the built-in reference schema when unset.
    pub schema: Option<PathBuf>,
    pub backend: Option<BackendSection>,
    pub renderer: RendererSection,
    pub embeddings: Option<EmbeddingSection>,
    pub bank: BankSection,
    pub defaults: VerificationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("forge-data"),
            listen: "127.0.0.1:8080".into(),
            mock: false,
            schema: None,
            backend: None,
            renderer: RendererSection::default(),
            embeddings: None,
            bank: BankSection::default(),
            defaults: VerificationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "yes")]
    pub vision: bool,
    #[serde(default = "default_backend_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RendererSection {
    pub executable: Option<PathBuf>,
    pub template: Option<PathBuf>,
    /// Concurrent renderer processes.
    pub slots: usize,
    pub resolution: (u32, u32),
    pub seed: u64,
    pub timeout_secs: u64,
}

impl Default for RendererSection {
    fn default() -> Self {
        let r = RenderSettings::default();
        Self {
            executable: None,
            template: None,
            slots: RenderSlots::DEFAULT_CAPACITY,
            resolution: r.resolution,
            seed: r.seed,
            timeout_secs: r.timeout.as_secs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    pub base_url: String,
    pub model: String,
    pub dimension: usize,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "all_kinds")]
    pub kinds: Vec<EmbeddingKind>,
    #[serde(default = "default_backend_timeout")]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSection {
    pub enabled: bool,
    /// Defaults to `<data_dir>/codebank.jsonl`.
    pub path: Option<PathBuf>,
}

impl Default for BankSection {
    fn default() -> Self {
        Self {
            enabled: true,
            path: None,
        }
    }
}

fn yes() -> bool {
    true
}

fn default_backend_timeout() -> u64 {
    120
}

fn default_retries() -> u32 {
    2
}

fn all_kinds() -> Vec<EmbeddingKind> {
    vec![EmbeddingKind::Face, EmbeddingKind::Image, EmbeddingKind::Text]
}

fn parse_env<T: std::str::FromStr>(name: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow::anyhow!("{name}={value:?}: {e}"))
}

fn parse_bool(name: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        _ => bail!("{name}={value:?}: expected a boolean"),
    }
}

impl Config {
    /// Reads `path` (or starts from defaults) and applies the process
    /// environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = var("FORGE_DATA_DIR") {
            self.data_dir = v.into();
        }
        if let Some(v) = var("FORGE_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = var("FORGE_MOCK") {
            self.mock = parse_bool("FORGE_MOCK", &v)?;
        }
        if let Some(v) = var("FORGE_SCHEMA") {
            self.schema = Some(v.into());
        }
        let url = var("FORGE_BACKEND_URL");
        let model = var("FORGE_BACKEND_MODEL");
        if url.is_some() || model.is_some() {
            let b = self.backend.get_or_insert_with(|| BackendSection {
                base_url: String::new(),
                model: String::new(),
                api_key_env: None,
                vision: true,
                timeout_secs: default_backend_timeout(),
                retries: default_retries(),
            });
            if let Some(u) = url {
                b.base_url = u;
            }
            if let Some(m) = model {
                b.model = m;
            }
        }
        if let (Some(v), Some(b)) = (var("FORGE_BACKEND_API_KEY_ENV"), self.backend.as_mut()) {
            b.api_key_env = Some(v);
        }
        if let Some(v) = var("FORGE_RENDERER") {
            self.renderer.executable = Some(v.into());
        }
        if let Some(v) = var("FORGE_TEMPLATE") {
            self.renderer.template = Some(v.into());
        }
        if let Some(v) = var("FORGE_TAU") {
            self.defaults.tau = parse_env("FORGE_TAU", &v)?;
        }
        if let Some(v) = var("FORGE_MAX_ITERS") {
            self.defaults.max_iterations = parse_env("FORGE_MAX_ITERS", &v)?;
        }
        Ok(())
    }

    pub fn load_schema(&self) -> Result<Arc<ApiSchema>> {
        Ok(Arc::new(match &self.schema {
            Some(p) => {
                let bytes = std::fs::read(p).with_context(|| format!("reading schema {}", p.display()))?;
                ApiSchema::load(&bytes).with_context(|| format!("loading schema {}", p.display()))?
            }
            None => ApiSchema::reference(),
        }))
    }

    pub fn bank_path(&self) -> PathBuf {
        self.bank.path.clone().unwrap_or_else(|| self.data_dir.join(BANK_FILE))
    }

    /// The chat backend, or `None` when neither mock mode nor a backend
    /// section is configured.
    pub fn llm_backend(&self, schema: &Arc<ApiSchema>) -> Result<Option<Arc<dyn LlmBackend>>> {
        if self.mock {
            return Ok(Some(Arc::new(MockBackend::new(schema.clone()))));
        }
        let Some(b) = &self.backend else {
            return Ok(None);
        };
        if b.base_url.is_empty() || b.model.is_empty() {
            bail!("backend needs both base_url and model");
        }
        let chat = ChatBackend::new(ChatBackendConfig {
            base_url: b.base_url.clone(),
            model: b.model.clone(),
            api_key: resolve_key(b.api_key_env.as_deref())?,
            vision: b.vision,
            timeout_secs: b.timeout_secs,
            retries: b.retries,
        })?;
        Ok(Some(Arc::new(chat)))
    }

    pub fn renderer(&self) -> Result<Arc<dyn RenderAdapter>> {
        if self.mock {
            return Ok(Arc::new(MockRenderer));
        }
        let Some(exe) = &self.renderer.executable else {
            bail!("renderer.executable is not configured");
        };
        let mut hc = HeadlessConfig::new(exe);
        if let Some(t) = &self.renderer.template {
            hc.template = SceneTemplate::load(t).with_context(|| format!("scene template {}", t.display()))?;
        }
        hc.slots = RenderSlots::new(self.renderer.slots.max(1));
        Ok(Arc::new(HeadlessRenderer::new(hc)))
    }

    pub fn providers(&self) -> Result<Providers> {
        if self.mock {
            return Ok(Providers::mock());
        }
        let mut p = Providers::default();
        if let Some(e) = &self.embeddings {
            let key = resolve_key(e.api_key_env.as_deref())?;
            for kind in &e.kinds {
                let provider: Arc<dyn EmbeddingProvider> = Arc::new(
                    HttpEmbeddingProvider::new(
                        *kind,
                        &e.base_url,
                        &e.model,
                        e.dimension,
                        key.clone(),
                        Duration::from_secs(e.timeout_secs.max(1)),
                    )
                    .map_err(anyhow::Error::msg)?,
                );
                match kind {
                    EmbeddingKind::Face => p.face = Some(provider),
                    EmbeddingKind::Image => p.image = Some(provider),
                    EmbeddingKind::Text => p.text = Some(provider),
                }
            }
        }
        Ok(p)
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            resolution: self.renderer.resolution,
            seed: self.renderer.seed,
            timeout: Duration::from_secs(self.renderer.timeout_secs.max(1)),
        }
    }

    /// Session dependencies, or `None` when no backend is configured.
    pub fn deps(&self, schema: Arc<ApiSchema>, with_bank: bool) -> Result<Option<Deps>> {
        let Some(backend) = self.llm_backend(&schema)? else {
            return Ok(None);
        };
        let mut deps = Deps::new(schema.clone(), backend, self.renderer()?);
        deps.providers = self.providers()?;
        deps.render = self.render_settings();
        if with_bank && self.bank.enabled {
            let path = self.bank_path();
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let bank = CodeBank::open(&path, schema).with_context(|| format!("code bank {}", path.display()))?;
            deps.bank = Some(Arc::new(bank));
        }
        Ok(Some(deps))
    }
}

fn resolve_key(var: Option<&str>) -> Result<Option<String>> {
    match var {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .with_context(|| format!("API key variable {name} is not set")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_then_env_overrides() {
        let mut c = Config::from_toml(
            r#"
            data_dir = "/srv/forge"
            [backend]
            base_url = "http://llm:8000/v1"
            model = "vlm-large"
            api_key_env = "LLM_KEY"
            [renderer]
            executable = "/opt/blender/blender"
            resolution = [256, 256]
            [defaults]
            tau = 0.8
            "#,
        )
        .unwrap();
        assert_eq!(c.defaults.tau, 0.8);
        assert_eq!(c.defaults.max_iterations, 5);
        assert_eq!(c.renderer.resolution, (256, 256));
        c.apply_env(|k| match k {
            "FORGE_TAU" => Some("0.95".into()),
            "FORGE_BACKEND_MODEL" => Some("other".into()),
            "FORGE_DATA_DIR" => Some("/tmp/x".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(c.defaults.tau, 0.95);
        assert_eq!(c.backend.as_ref().unwrap().model, "other");
        assert_eq!(c.backend.as_ref().unwrap().base_url, "http://llm:8000/v1");
        assert_eq!(c.bank_path(), PathBuf::from("/tmp/x/codebank.jsonl"));
    }

    #[test]
    fn bad_env_and_unknown_keys_are_errors() {
        let mut c = Config::default();
        assert!(c.apply_env(|k| (k == "FORGE_TAU").then(|| "high".into())).is_err());
        assert!(Config::from_toml("colour = 3").is_err());
    }

    #[test]
    fn missing_key_variable_is_reported() {
        let c = Config::from_toml(
            r#"
            [backend]
            base_url = "http://x"
            model = "m"
            api_key_env = "FORGE_TEST_SURELY_UNSET_KEY"
            "#,
        )
        .unwrap();
        let err = c.llm_backend(&Arc::new(ApiSchema::reference())).err().unwrap();
        assert!(err.to_string().contains("FORGE_TEST_SURELY_UNSET_KEY"));
    }

    #[test]
    fn no_backend_means_no_deps() {
        let c = Config::default();
        assert!(c.deps(Arc::new(ApiSchema::reference()), false).unwrap().is_none());
        let m = Config {
            mock: true,
            ..Config::default()
        };
        assert!(m.deps(Arc::new(ApiSchema::reference()), false).unwrap().is_some());
    }
}
