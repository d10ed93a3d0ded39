//! Shared services and configuration for sessions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::appagent::{AgentKind, ExternalAgent};
use crate::detection::{FixtureDetector, FusionOptions, NullDetector, VisionDetector};
use crate::knowledge::{HashingEmbedder, KnowledgeStore, DEFAULT_DOCS_PER_QUERY, DEFAULT_EXPERIENCE_PER_QUERY};
use crate::planner::{Planner, PlannerBackend, PromptBudget};
use crate::puppeteer::{ApiRegistry, HandlerTable, Puppeteer, RegistryError};
use crate::safeguard::{RiskScreen, RuleSet, SafeguardError};
use crate::simenv::{Catalog, CatalogError};
use crate::speculative::DEFAULT_MAX_BATCH;

pub const DEFAULT_STEP_BUDGET: usize = 30;
pub const DEFAULT_HISTORY_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    #[default]
    Speculative,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub mode: ExecutionMode,
    pub max_batch: usize,
    pub step_budget: usize,
    pub k_docs: usize,
    pub k_exp: usize,
    pub history_window: usize,
    pub fusion: FusionOptions,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            mode: ExecutionMode::Speculative,
            max_batch: DEFAULT_MAX_BATCH,
            step_budget: DEFAULT_STEP_BUDGET,
            k_docs: DEFAULT_DOCS_PER_QUERY,
            k_exp: DEFAULT_EXPERIENCE_PER_QUERY,
            history_window: DEFAULT_HISTORY_WINDOW,
            fusion: FusionOptions::default(),
        }
    }
}

impl RuntimeConfig {
    pub fn effective_max_batch(&self) -> usize {
        match self.mode {
            ExecutionMode::Single => 1,
            ExecutionMode::Speculative => self.max_batch.max(1),
        }
    }
}

/// App ids that resolve to external agents instead of the native loop.
#[derive(Clone, Default)]
pub struct AgentRegistry {
    shims: BTreeMap<String, Arc<dyn ExternalAgent>>,
}

impl AgentRegistry {
    pub fn register_shim(&mut self, app_id: impl Into<String>, agent: Arc<dyn ExternalAgent>) {
        self.shims.insert(app_id.into(), agent);
    }

    pub fn resolve(&self, app_id: &str) -> AgentKind {
        self.shims
            .get(app_id)
            .map_or(AgentKind::Native, |a| AgentKind::Shim(Arc::clone(a)))
    }
}

pub struct Services {
    pub planner: Planner,
    pub registry: Arc<ApiRegistry>,
    pub puppeteer: Puppeteer,
    pub safeguard: Arc<dyn RiskScreen>,
    pub knowledge: Arc<RwLock<KnowledgeStore>>,
    pub detector: Arc<dyn VisionDetector>,
    pub agents: AgentRegistry,
}

impl Services {
    pub fn new(backend: Arc<dyn PlannerBackend>, registry: ApiRegistry) -> Self {
        let registry = Arc::new(registry);
        Self {
            planner: Planner::new(backend),
            puppeteer: Puppeteer::new(Arc::clone(&registry)),
            registry,
            safeguard: Arc::new(RuleSet::empty()),
            knowledge: Arc::new(RwLock::new(KnowledgeStore::new(Box::new(HashingEmbedder::default())))),
            detector: Arc::new(NullDetector),
            agents: AgentRegistry::default(),
        }
    }

    pub fn with_safeguard(mut self, screen: Arc<dyn RiskScreen>) -> Self {
        self.safeguard = screen;
        self
    }

    pub fn with_detector(mut self, detector: Arc<dyn VisionDetector>) -> Self {
        self.detector = detector;
        self
    }

    pub fn with_knowledge(mut self, store: Arc<RwLock<KnowledgeStore>>) -> Self {
        self.knowledge = store;
        self
    }

    pub fn with_agents(mut self, agents: AgentRegistry) -> Self {
        self.agents = agents;
        self
    }

    pub fn with_prompt_budget(mut self, budget: PromptBudget) -> Self {
        self.planner = self.planner.with_budget(budget);
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Safeguard(#[from] SafeguardError),
}

/// Everything a catalog directory provides: apps, API manifest, risk rules.
///
/// Layout: `apps/*.json`, optional `apis.json`, optional `safeguard.json`.
#[derive(Debug, Clone)]
pub struct CatalogBundle {
    pub dir: PathBuf,
    pub catalog: Arc<Catalog>,
    apis: Option<PathBuf>,
    rules: Option<PathBuf>,
}

impl CatalogBundle {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, BundleError> {
        let dir = dir.as_ref();
        let existing = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        let bundle = Self {
            dir: dir.to_path_buf(),
            catalog: Arc::new(Catalog::load_dir(dir)?),
            apis: existing("apis.json"),
            rules: existing("safeguard.json"),
        };
        bundle.registry()?;
        bundle.ruleset()?;
        Ok(bundle)
    }

    pub fn registry(&self) -> Result<ApiRegistry, RegistryError> {
        let mut registry = ApiRegistry::new();
        if let Some(path) = &self.apis {
            registry.load_manifest_file(path, &HandlerTable::default())?;
        }
        Ok(registry)
    }

    pub fn ruleset(&self) -> Result<RuleSet, SafeguardError> {
        match &self.rules {
            Some(path) => RuleSet::load(path),
            None => Ok(RuleSet::empty()),
        }
    }

    /// Services wired from this bundle with the given planner backend and a
    /// fixture vision detector.
    pub fn services(&self, backend: Arc<dyn PlannerBackend>) -> Result<Services, BundleError> {
        Ok(Services::new(backend, self.registry()?)
            .with_safeguard(Arc::new(self.ruleset()?))
            .with_detector(Arc::new(FixtureDetector::new())))
    }
}
