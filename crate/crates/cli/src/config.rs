//! Run configuration: defaults, JSON config file, `MOE_CARVE_*` environment
//! overrides and command-line flags, applied in that order.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use carve_core::{Error, GateMode, MoeConfig, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Prefix of the environment variable overriding each config key, e.g.
/// `MOE_CARVE_N_ACTIVE`.
pub const ENV_PREFIX: &str = "MOE_CARVE_";

/// Every key is optional so layers can be merged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub n_experts: Option<usize>,
    pub n_shared: Option<usize>,
    pub n_active: Option<usize>,
    pub k_a: Option<usize>,
    pub gamma: Option<f64>,
    pub max_kmeans_iters: Option<usize>,
    pub normalize: Option<bool>,
    pub seed: Option<u64>,
    /// Dense weight file (`w_up`, `w_gate`, `w_down`).
    pub weights: Option<PathBuf>,
    /// Calibration token file (`x`).
    pub calib: Option<PathBuf>,
    /// Held-out token file for `eval` (`x`).
    pub tokens: Option<PathBuf>,
    /// Saved profile to reuse in `carve`.
    pub profile: Option<PathBuf>,
    /// Directory written by `carve`.
    pub moe: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<String>,
    pub steps: Option<usize>,
    pub histogram_bins: Option<usize>,
}

impl PartialConfig {
    /// Keys recognised in config files and the environment.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(PartialConfig::default()) {
            Ok(Value::Object(map)) => map.keys().cloned().collect(),
            _ => unreachable!("PartialConfig serializes to an object"),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Reads `MOE_CARVE_<KEY>` for every key. Values are parsed as JSON when
    /// possible and taken as strings otherwise.
    pub fn from_env_map(env: &BTreeMap<String, String>) -> Result<Self> {
        let mut map = serde_json::Map::new();
        for key in Self::keys() {
            let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
            if let Some(raw) = env.get(&var) {
                let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
                map.insert(key, v);
            }
        }
        serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::InvalidConfig(format!("environment override: {e}")))
    }

    pub fn from_env() -> Result<Self> {
        let env: BTreeMap<String, String> = std::env::vars()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        Self::from_env_map(&env)
    }

    /// Keys set in `other` replace those in `self`.
    pub fn merge(self, other: PartialConfig) -> PartialConfig {
        macro_rules! pick {
            ($($f:ident),*) => {
                PartialConfig { $($f: other.$f.or(self.$f)),* }
            };
        }
        pick!(
            n_experts,
            n_shared,
            n_active,
            k_a,
            gamma,
            max_kmeans_iters,
            normalize,
            seed,
            weights,
            calib,
            tokens,
            profile,
            moe,
            out,
            mode,
            steps,
            histogram_bins
        )
    }

    pub fn resolve(self) -> Result<RunConfig> {
        let mode = match &self.mode {
            Some(m) => m.parse()?,
            None => GateMode::Binary,
        };
        let cfg = RunConfig {
            n_experts: self.n_experts.unwrap_or(8),
            n_shared: self.n_shared.unwrap_or(1),
            n_active: self.n_active.unwrap_or(1),
            n_active_explicit: self.n_active.is_some(),
            k_a: self.k_a.unwrap_or(MoeConfig::DEFAULT_K_A),
            gamma: self.gamma.unwrap_or(MoeConfig::DEFAULT_GAMMA),
            max_kmeans_iters: self
                .max_kmeans_iters
                .unwrap_or(MoeConfig::DEFAULT_MAX_KMEANS_ITERS),
            normalize: self.normalize.unwrap_or(true),
            seed: self.seed.unwrap_or(0),
            weights: self.weights,
            calib: self.calib,
            tokens: self.tokens,
            profile: self.profile,
            moe: self.moe,
            out: self.out,
            mode,
            steps: self.steps.unwrap_or(200),
            histogram_bins: self.histogram_bins.unwrap_or(50),
        };
        for (name, p) in [
            ("weights", &cfg.weights),
            ("calib", &cfg.calib),
            ("tokens", &cfg.tokens),
            ("profile", &cfg.profile),
            ("moe", &cfg.moe),
            ("out", &cfg.out),
        ] {
            if p.as_ref().is_some_and(|p| p.as_os_str().is_empty()) {
                return Err(Error::InvalidConfig(format!("{name} path is empty")));
            }
        }
        Ok(cfg)
    }
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n_experts: usize,
    pub n_shared: usize,
    pub n_active: usize,
    /// Whether `n_active` was set by the user rather than defaulted.
    pub n_active_explicit: bool,
    pub k_a: usize,
    pub gamma: f64,
    pub max_kmeans_iters: usize,
    pub normalize: bool,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub moe: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: GateMode,
    pub steps: usize,
    pub histogram_bins: usize,
}

impl RunConfig {
    /// The expert layout for an FFN of intermediate width `d_h`.
    pub fn moe_config(&self, d_h: usize) -> Result<MoeConfig> {
        if self.n_experts == 0 || !d_h.is_multiple_of(self.n_experts) {
            return Err(Error::InvalidConfig(format!(
                "d_h = {d_h} is not a multiple of n_experts = {}",
                self.n_experts
            )));
        }
        let cfg = MoeConfig {
            n_experts: self.n_experts,
            n_shared: self.n_shared,
            n_routed: self.n_experts.saturating_sub(self.n_shared),
            n_active: self.n_active,
            expert_size: d_h / self.n_experts,
            k_a: self.k_a,
            gamma: self.gamma,
            max_kmeans_iters: self.max_kmeans_iters,
            normalize: self.normalize,
            seed: self.seed,
        };
        if self.n_shared >= self.n_experts {
            return Err(Error::InvalidConfig(format!(
                "n_shared = {} leaves no routed experts out of {}",
                self.n_shared, self.n_experts
            )));
        }
        cfg.validate(d_h)?;
        Ok(cfg)
    }

    pub fn require<'a>(&self, name: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::InvalidConfig(format!("missing required path `{name}`")))
    }
}
