//! Run configuration: one TOML file, optional command-line overrides, and the
//! run directory derived from its hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use capts_core::catr::{ModelConfig, TrainConfig, Vocab};
use capts_core::channels::{SkipGramConfig, DEFAULT_K_RET};
use capts_core::corpus::{EffectiveView, GeneratorConfig};
use capts_core::eval::DEFAULT_K_GRID;
use capts_core::routing::{Method, DEFAULT_BUDGET, DEFAULT_ETA};
use capts_core::supply::{DEFAULT_CACHE_SIZE, DEFAULT_LONG_HISTORY, DEFAULT_RECENT};
use capts_core::vam::VamConfig;
use capts_core::ChannelId;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Overrides the `data_root` of the config file.
pub const DATA_DIR_ENV: &str = "CAPTS_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub generator: GeneratorConfig,
    pub effective_view_s: f64,
    pub indexes: IndexSettings,
    pub split: SplitSettings,
    pub vam: VamConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub routing: RoutingSettings,
    pub eval: EvalSettings,
    pub supply: SupplySettings,
    pub sweep: SweepSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            paths: Paths::default(),
            generator: GeneratorConfig::default(),
            effective_view_s: 7.0,
            indexes: IndexSettings::default(),
            split: SplitSettings::default(),
            vam: VamConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            routing: RoutingSettings::default(),
            eval: EvalSettings::default(),
            supply: SupplySettings::default(),
            sweep: SweepSettings::default(),
        }
    }
}

/// Locations relative to the run directory, except `data_root`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Parent of all run directories; relative paths resolve against the
    /// working directory.
    pub data_root: PathBuf,
    pub corpus: PathBuf,
    pub snapshots: PathBuf,
    pub supervision: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    pub cache: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_root: "capts-data".into(),
            corpus: "corpus".into(),
            snapshots: "snapshots".into(),
            supervision: "supervision".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
            cache: "cache".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSettings {
    pub k_ret: usize,
    /// Seconds between snapshots; the first is taken one cadence after the
    /// corpus starts.
    pub cadence_s: i64,
    pub swing_alpha: f64,
    pub skipgram: SkipGramConfig,
}

impl Default for IndexSettings {
    fn default() -> Self {
        IndexSettings { k_ret: DEFAULT_K_RET, cadence_s: 86_400, swing_alpha: 1.0, skipgram: SkipGramConfig::default() }
    }
}

/// How request instances are carved out of each history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    /// Training anchors sit on every `stride`-th effective view.
    pub stride: usize,
    /// The evaluation window is the user's last `eval_views` effective views.
    pub eval_views: usize,
    /// Effective views a training anchor needs before it.
    pub min_history: usize,
    /// Eligible triggers scored per request, most recent first.
    pub candidates: usize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        SplitSettings { stride: 20, eval_views: 100, min_history: 20, candidates: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub d: usize,
    pub d_a: usize,
    pub d_h: usize,
    pub seq_len: usize,
    pub beta: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings { d: 32, d_a: 32, d_h: 64, seq_len: 50, beta: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingSettings {
    /// Triggers per channel.
    pub budget: usize,
    pub eta: f64,
}

impl Default for RoutingSettings {
    fn default() -> Self {
        RoutingSettings { budget: DEFAULT_BUDGET, eta: DEFAULT_ETA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub k_grid: Vec<usize>,
    pub methods: Vec<Method>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { k_grid: DEFAULT_K_GRID.to_vec(), methods: Method::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupplySettings {
    pub long_history: usize,
    pub cache_size: usize,
    pub recent: usize,
    /// Cache entries live for one refresh cycle by default.
    pub ttl_s: i64,
    /// Seconds between nearline refreshes (and model syncs).
    pub refresh_s: i64,
}

impl Default for SupplySettings {
    fn default() -> Self {
        SupplySettings {
            long_history: DEFAULT_LONG_HISTORY,
            cache_size: DEFAULT_CACHE_SIZE,
            recent: DEFAULT_RECENT,
            ttl_s: 86_400,
            refresh_s: 86_400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub window_sizes: Vec<usize>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings { window_sizes: vec![50, 100] }
    }
}

/// Command-line overrides; `None` keeps the file's value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k_grid: Option<Vec<usize>>,
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub beta: Option<f64>,
    pub window_size: Option<usize>,
    pub methods: Option<Vec<Method>>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> CliResult<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = &o.k_grid {
            self.eval.k_grid = k.clone();
        }
        if let Some(x) = o.eta {
            self.routing.eta = x;
        }
        if let Some(x) = o.lambda {
            self.train.lambda = x;
        }
        if let Some(x) = o.mu {
            self.train.mu = x;
        }
        if let Some(x) = o.beta {
            self.model.beta = x;
        }
        if let Some(x) = o.window_size {
            self.vam.window_size = x;
        }
        if let Some(m) = &o.methods {
            self.eval.methods = m.clone();
        }
        self.validate()
    }

    /// Replaces `data_root` when the environment variable is set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            self.paths.data_root = dir.into();
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg = |m: &str| Err(CliError::Config(m.into()));
        self.generator.validate()?;
        self.vam.validate()?;
        self.train.validate()?;
        self.model_config(Vocab::new(1, 1, 1), true).validate()?;
        if !(self.effective_view_s >= 0.0 && self.effective_view_s.is_finite()) {
            return cfg("effective_view_s must be a nonnegative number");
        }
        if self.indexes.k_ret == 0 || self.indexes.cadence_s <= 0 {
            return cfg("indexes.k_ret and indexes.cadence_s must be positive");
        }
        if self.indexes.skipgram.dim < 4 {
            return cfg("indexes.skipgram.dim must be at least 4");
        }
        if self.split.stride == 0 || self.split.eval_views == 0 || self.split.candidates == 0 {
            return cfg("split.stride, split.eval_views and split.candidates must be positive");
        }
        if self.routing.budget == 0 || !(self.routing.eta >= 0.0 && self.routing.eta.is_finite()) {
            return cfg("routing.budget must be positive and routing.eta nonnegative");
        }
        if self.eval.k_grid.is_empty() || self.eval.k_grid.contains(&0) {
            return cfg("eval.k_grid needs at least one positive K");
        }
        if self.eval.methods.is_empty() {
            return cfg("eval.methods is empty");
        }
        if self.supply.recent == 0 || self.supply.cache_size == 0 || self.supply.ttl_s < 0 || self.supply.refresh_s <= 0 {
            return cfg("supply settings must be positive");
        }
        if self.sweep.window_sizes.contains(&0) {
            return cfg("sweep.window_sizes must be positive");
        }
        Ok(())
    }

    pub fn roster(&self) -> Vec<ChannelId> {
        self.vam.roster()
    }

    pub fn effective(&self) -> EffectiveView {
        EffectiveView { threshold_s: self.effective_view_s }
    }

    pub fn budgets(&self) -> BTreeMap<ChannelId, usize> {
        self.roster().into_iter().map(|c| (c, self.routing.budget)).collect()
    }

    pub fn model_config(&self, vocab: Vocab, calibrator: bool) -> ModelConfig {
        let m = &self.model;
        ModelConfig { d: m.d, d_a: m.d_a, d_h: m.d_h, seq_len: m.seq_len, beta: m.beta, calibrator, vocab, channels: self.roster() }
    }

    /// Hex digest of everything that determines the run's outputs apart from
    /// the seed and where files live.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.paths.data_root = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.data_root.join(format!("{}-seed{}", self.hash(), self.seed))
    }
}

/// Per-stage seed derived from the run seed, so any stage reruns alone with
/// the same randomness.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}
