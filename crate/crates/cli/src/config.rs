//! Declarative run configuration, CLI overrides and the provenance echo.

use std::fmt;
use std::path::{Path, PathBuf};

use projclust::data::{BasisSpec, FixedDesign, SharedSet};
use projclust::sampler::{McmcConfig, PriorSpec};
use projclust::synthgen::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Long-format dataset read by `fit`, `cluster`, `select-k`, `evaluate`
    /// and `spectrum`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Not echoed: the echo lives inside this directory.
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub draws: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<PathBuf>,
    /// `subject,label` file of reference labels for `evaluate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionConfig>,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub spectrum: SpectrumConfig,
}

fn default_seed() -> u64 {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            input: None,
            output: None,
            draws: None,
            partitions: None,
            labels: None,
            k: None,
            selection: None,
            simulate: SimulateConfig::default(),
            model: ModelConfig::default(),
            mcmc: McmcSection::default(),
            cluster: ClusterConfig::default(),
            spectrum: SpectrumConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_per_group: usize,
    pub t: usize,
    pub noise_var: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            n_per_group: d.n_per_group,
            t: d.t,
            noise_var: d.noise_var,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub fixed: FixedDesign,
    pub random: BasisSpec,
    pub shared: SharedArg,
    pub priors: PriorSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fixed: FixedDesign::Intercept,
            random: BasisSpec::fourier(9),
            shared: SharedArg::Band("all".into()),
            priors: PriorSpec::default(),
        }
    }
}

/// Shared columns as explicit 0-based indices or a named band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SharedArg {
    Indices(Vec<usize>),
    Band(String),
}

impl SharedArg {
    /// Parses `all`, `low:a..b`, `mid:a..b`, `high:a..b` (inclusive) or a
    /// comma-separated index list.
    pub fn parse(s: &str) -> Self {
        let s = s.trim();
        let list: Option<Vec<usize>> = s.split(',').map(|t| t.trim().parse().ok()).collect();
        match list {
            Some(v) if !s.is_empty() => SharedArg::Indices(v),
            _ => SharedArg::Band(s.to_owned()),
        }
    }

    pub fn resolve(&self, q: usize) -> Result<SharedSet, CliError> {
        let set = match self {
            SharedArg::Indices(v) => SharedSet::new(v.clone())?,
            SharedArg::Band(b) if b == "all" => SharedSet::all(q)?,
            SharedArg::Band(b) => {
                let bad = || CliError::Validation(format!("invalid shared band {b:?}; expected all, low:a..b, mid:a..b or high:a..b"));
                let (name, range) = b.split_once(':').ok_or_else(bad)?;
                if !matches!(name, "low" | "mid" | "high") {
                    return Err(bad());
                }
                let (lo, hi) = range.split_once("..").ok_or_else(bad)?;
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                SharedSet::range(lo, hi)?
            }
        };
        set.check(q)?;
        Ok(set)
    }
}

impl fmt::Display for SharedArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SharedArg::Indices(v) => {
                let s: Vec<String> = v.iter().map(usize::to_string).collect();
                write!(f, "{}", s.join(","))
            }
            SharedArg::Band(b) => f.write_str(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcSection {
    pub n_chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for McmcSection {
    fn default() -> Self {
        let d = McmcConfig::default();
        Self {
            n_chains: d.n_chains,
            n_iter: d.n_iter,
            burn_in: d.burn_in,
            thin: d.thin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Number of draws to project, spread evenly; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_draws: Option<usize>,
    pub max_iter: usize,
    pub n_restarts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            n_draws: None,
            max_iter: 100,
            n_restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<KlSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapSelection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlSelection {
    pub epsilon: f64,
    pub k_max: usize,
    /// Draws averaged into the KL curve, spread evenly.
    pub n_draws: usize,
}

impl Default for KlSelection {
    fn default() -> Self {
        Self {
            epsilon: projclust::selection::DEFAULT_EPSILON,
            k_max: 10,
            n_draws: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSelection {
    pub reps: usize,
    pub k_max: usize,
    /// Draws averaged into the fitted replicate means.
    pub n_draws: usize,
}

impl Default for BootstrapSelection {
    fn default() -> Self {
        Self {
            reps: projclust::selection::DEFAULT_BOOTSTRAP_REPS,
            k_max: projclust::selection::DEFAULT_K_MAX,
            n_draws: projclust::selection::MAX_FITTED_DRAWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumConfig {
    pub n_freq: usize,
    pub h: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self { n_freq: 40, h: 0.5 }
    }
}

/// Flag values that replace config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
    pub shared: Option<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("reading config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))
            }
        }
    }

    /// `--k` replaces any selection method.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.output = Some(out.clone());
        }
        if let Some(k) = o.k {
            self.k = Some(k);
            self.selection = None;
        }
        if let Some(s) = &o.shared {
            self.model.shared = SharedArg::parse(s);
        }
    }

    pub fn output_dir(&self) -> Result<&Path, CliError> {
        self.output
            .as_deref()
            .ok_or_else(|| CliError::Validation("no output directory: set `output` or pass --out".into()))
    }

    pub fn input_path(&self) -> Result<&Path, CliError> {
        self.input
            .as_deref()
            .ok_or_else(|| CliError::Validation("no input dataset: set `input` in the config".into()))
    }

    /// Path of an upstream artifact: the configured one or `name` in the output directory.
    pub fn artifact(&self, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
        match configured {
            Some(p) => Ok(p.clone()),
            None => Ok(self.output_dir()?.join(name)),
        }
    }

    pub fn check_k_or_selection(&self) -> Result<(), CliError> {
        let has_sel = self
            .selection
            .as_ref()
            .is_some_and(|s| s.kl.is_some() || s.bootstrap.is_some());
        match (self.k, has_sel) {
            (Some(_), true) => Err(CliError::Validation("give either `k` or a `selection` method, not both".into())),
            (None, false) => Err(CliError::Validation("give either `k` or a `selection` method".into())),
            (Some(0), _) => Err(CliError::Validation("k must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn mcmc_config(&self) -> McmcConfig {
        McmcConfig {
            n_chains: self.mcmc.n_chains,
            n_iter: self.mcmc.n_iter,
            burn_in: self.mcmc.burn_in,
            thin: self.mcmc.thin,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_per_group: self.simulate.n_per_group,
            t: self.simulate.t,
            noise_var: self.simulate.noise_var,
            seed: self.seed,
        }
    }

    /// Canonical TOML of the effective config and its SHA-256.
    pub fn echo(&self) -> Result<(String, String), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Validation(format!("serializing config: {e}")))?;
        let hash = Sha256::digest(text.as_bytes());
        let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
        Ok((text, hex))
    }
}
