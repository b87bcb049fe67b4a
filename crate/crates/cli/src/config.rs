use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use drad_core::entity::{EntityExtractor, SidecarRecognizer};
use drad_core::eval::{AnswerMode, DEFAULT_ANSWER_MARKER};
use drad_core::rhd::DetectionConfig;
use drad_core::sek::{PromptTemplate, QueryWindow, DEFAULT_TOP_K, DEFAULT_TPR_THRESHOLD, DEFAULT_WINDOW};
use serde::Deserialize;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Mock,
    OpenaiChat,
    OpenaiCompletions,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: Backend,
    pub mock_script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: String,
    pub top_logprobs: usize,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub serialize_requests: bool,
    pub transcript: Option<PathBuf>,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            mock_script: None,
            endpoint: None,
            model: String::new(),
            top_logprobs: 5,
            temperature: 0.0,
            max_retries: 3,
            timeout_secs: 60,
            serialize_requests: false,
            transcript: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub m: usize,
    pub k: usize,
    pub window: QueryWindow,
    pub tpr_threshold: f64,
    pub budget: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            m: DEFAULT_WINDOW,
            k: DEFAULT_TOP_K,
            window: QueryWindow::Symmetric,
            tpr_threshold: DEFAULT_TPR_THRESHOLD,
            budget: 256,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub preamble: Option<String>,
    pub task: Option<String>,
    pub few_shot_file: Option<PathBuf>,
    pub stop_sequences: Option<Vec<String>>,
    pub answer_mode: AnswerMode,
    pub answer_marker: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntitySection {
    /// Labels to keep; all labels when absent.
    pub allow: Option<Vec<String>>,
    /// Precomputed annotations used instead of the rule recognizer.
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub version: u32,
    pub log_level: Option<String>,
    pub index: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub detection: DetectionConfig,
    pub policy: PolicySection,
    pub prompt: PromptSection,
    pub gateway: GatewaySection,
    pub entities: EntitySection,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            log_level: None,
            index: None,
            dataset: None,
            output: None,
            detection: DetectionConfig::default(),
            policy: PolicySection::default(),
            prompt: PromptSection::default(),
            gateway: GatewaySection::default(),
            entities: EntitySection::default(),
        }
    }
}

impl AppConfig {
    /// Parses a TOML config. Relative paths inside it resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: AppConfig = toml::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            bail!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version);
        }
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        rebase(&mut cfg.index);
        rebase(&mut cfg.dataset);
        rebase(&mut cfg.output);
        rebase(&mut cfg.prompt.few_shot_file);
        rebase(&mut cfg.gateway.mock_script);
        rebase(&mut cfg.gateway.transcript);
        rebase(&mut cfg.entities.sidecar);
        cfg.detection.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        let mut t = PromptTemplate::default();
        if let Some(p) = &self.prompt.preamble {
            t.preamble = p.clone();
        }
        if let Some(task) = &self.prompt.task {
            t.task = task.clone();
        }
        if let Some(path) = &self.prompt.few_shot_file {
            t.few_shot = std::fs::read_to_string(path)
                .with_context(|| format!("reading few-shot file {}", path.display()))?;
        }
        Ok(t)
    }

    pub fn marker(&self) -> &str {
        self.prompt.answer_marker.as_deref().unwrap_or(DEFAULT_ANSWER_MARKER)
    }

    pub fn extractor(&self) -> Result<EntityExtractor> {
        let extractor = match &self.entities.sidecar {
            Some(path) => EntityExtractor::new(Box::new(
                SidecarRecognizer::open(path).with_context(|| format!("reading sidecar {}", path.display()))?,
            )),
            None => EntityExtractor::rules(),
        };
        Ok(match &self.entities.allow {
            Some(labels) => extractor.with_allowed_labels(labels.iter().cloned()),
            None => extractor,
        })
    }

    /// Paths named by the config that must exist before a command starts.
    pub fn referenced_inputs(&self) -> Vec<&Path> {
        let mut out = Vec::new();
        if let Some(p) = &self.prompt.few_shot_file {
            out.push(p.as_path());
        }
        if let Some(p) = &self.entities.sidecar {
            out.push(p.as_path());
        }
        if self.gateway.backend == Backend::Mock {
            if let Some(p) = &self.gateway.mock_script {
                out.push(p.as_path());
            }
        }
        out
    }
}
