//! Declarative experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qrp_core::design::{DisplacementSet, OptimizeConfig};
use qrp_core::dynamics::{DeviceParams, ReadoutErrorModel, SequenceConfig};
use qrp_core::experiment::Settings;
use qrp_core::learn::{NuPolicy, DEFAULT_DEGRADE_STRENGTH};
use qrp_core::reconstruct::{LikelihoodKind, McmcConfig, SigmaMode};

use crate::CliError;

/// One dimension or a list of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dims {
    One(usize),
    Many(Vec<usize>),
}

impl Dims {
    pub fn list(&self) -> Vec<usize> {
        match self {
            Dims::One(d) => vec![*d],
            Dims::Many(v) => v.clone(),
        }
    }
}

/// Which imperfections the simulated apparatus has.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseFlags {
    pub decoherence: bool,
    pub finite_pulses: bool,
    pub readout_error: bool,
    pub shot_noise: bool,
    pub state_preparation: bool,
}

impl Default for NoiseFlags {
    fn default() -> Self {
        Self {
            decoherence: true,
            finite_pulses: true,
            readout_error: true,
            shot_noise: true,
            state_preparation: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub iters: usize,
    pub restarts: usize,
    pub step: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizeConfig::default();
        Self {
            iters: d.iters,
            restarts: d.restarts,
            step: d.step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSection {
    pub n_samples: usize,
    pub thinning: usize,
    pub sigma: Option<f64>,
    pub sigma_mode: SigmaMode,
    pub likelihood: LikelihoodKind,
}

impl Default for McmcSection {
    fn default() -> Self {
        let d = Settings::default().mcmc;
        Self {
            n_samples: d.n_samples,
            thinning: d.thinning,
            sigma: d.sigma,
            sigma_mode: d.sigma_mode,
            likelihood: d.likelihood,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSection {
    pub chi_rel: f64,
    pub higher_order_rel: f64,
}

impl Default for PerturbationSection {
    fn default() -> Self {
        let s = Settings::default();
        Self {
            chi_rel: s.chi_rel,
            higher_order_rel: s.higher_order_rel,
        }
    }
}

pub const OPTIMIZE: &str = "optimize";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "D")]
    pub dims: Dims,
    /// `"optimize"`, or a displacement-set JSON path; `{D}` is replaced by
    /// the dimension.
    #[serde(default = "default_displacements")]
    pub displacements: String,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shots")]
    pub shots: u64,
    #[serde(default)]
    pub noise: NoiseFlags,
    #[serde(default)]
    pub readout: ReadoutErrorModel,
    #[serde(default)]
    pub device: DeviceParams,
    #[serde(default)]
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub nu: NuPolicy,
    #[serde(default)]
    pub mcmc: McmcSection,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_kitten_alpha")]
    pub kitten_alpha: f64,
    #[serde(default = "default_degrade")]
    pub degrade_strength: f64,
    #[serde(default)]
    pub perturbation: PerturbationSection,
    /// Also emit the simulated-map family from `learn`.
    #[serde(default)]
    pub simulated_band: bool,
}

fn default_displacements() -> String {
    OPTIMIZE.into()
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_shots() -> u64 {
    1000
}
fn default_resamples() -> usize {
    200
}
fn default_kitten_alpha() -> f64 {
    1.0
}
fn default_degrade() -> f64 {
    DEFAULT_DEGRADE_STRENGTH
}

pub const MAX_DIM: usize = 10;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let dims = self.dims.list();
        if dims.is_empty() {
            return Err(CliError::Config("D: at least one dimension is required".into()));
        }
        if let Some(d) = dims.iter().find(|&&d| !(2..=MAX_DIM).contains(&d)) {
            return Err(CliError::Config(format!("D: {d} is outside 2..={MAX_DIM}")));
        }
        if self.noise.shot_noise && self.shots == 0 {
            return Err(CliError::Config("shots: must be positive when shot noise is on".into()));
        }
        if !(self.kitten_alpha > 0.0 && self.kitten_alpha.is_finite()) {
            return Err(CliError::Config("kitten_alpha: must be positive".into()));
        }
        for (name, v) in [
            ("perturbation.chi_rel", self.perturbation.chi_rel),
            ("perturbation.higher_order_rel", self.perturbation.higher_order_rel),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(CliError::Config(format!("{name}: must lie in [0, 1)")));
            }
        }
        if self.displacements != OPTIMIZE && dims.len() > 1 && !self.displacements.contains("{D}") {
            return Err(CliError::Config(
                "displacements: a path used with several D must contain {D}".into(),
            ));
        }
        self.settings()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    /// Core settings with the noise switches applied.
    pub fn settings(&self) -> Settings {
        let mut sequence = self.sequence;
        sequence.decoherence = self.noise.decoherence;
        if !self.noise.finite_pulses {
            sequence.instant_parity = true;
            sequence.ideal_displacement = true;
        }
        Settings {
            device: self.device,
            sequence,
            readout: if self.noise.readout_error {
                self.readout
            } else {
                ReadoutErrorModel::ideal()
            },
            shots: if self.noise.shot_noise { self.shots } else { 0 },
            degrade_strength: if self.noise.state_preparation {
                self.degrade_strength
            } else {
                0.0
            },
            optimize: OptimizeConfig {
                iters: self.optimizer.iters,
                restarts: self.optimizer.restarts,
                step: self.optimizer.step,
                seed: 0,
            },
            nu: self.nu.clone(),
            mcmc: McmcConfig {
                n_samples: self.mcmc.n_samples,
                thinning: self.mcmc.thinning,
                sigma: self.mcmc.sigma,
                sigma_mode: self.mcmc.sigma_mode,
                likelihood: self.mcmc.likelihood,
                seed: 0,
            },
            bootstrap_resamples: self.bootstrap_resamples,
            kitten_alpha: self.kitten_alpha,
            chi_rel: self.perturbation.chi_rel,
            higher_order_rel: self.perturbation.higher_order_rel,
            seed: self.seed,
        }
    }

    /// SHA-256 of the resolved configuration, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = PathBuf::new();
        let text = serde_json::to_string(&canonical).expect("config serialises");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Displacement file for `dim`, if one is configured.
    pub fn displacement_path(&self, dim: usize) -> Option<PathBuf> {
        (self.displacements != OPTIMIZE).then(|| PathBuf::from(self.displacements.replace("{D}", &dim.to_string())))
    }

    pub fn load_displacements(&self, dim: usize) -> Result<Option<DisplacementSet>, CliError> {
        let Some(path) = self.displacement_path(dim) else {
            return Ok(None);
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("displacements: cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("displacements: {}: {e}", path.display())))?;
        if let Some(obj) = value.as_object_mut() {
            obj.remove("provenance");
        }
        let set = DisplacementSet::from_json(&value.to_string())
            .map_err(|e| CliError::Config(format!("displacements: {}: {e}", path.display())))?;
        if set.dim() != dim {
            return Err(CliError::Config(format!(
                "displacements: {} holds D={}, expected D={dim}",
                path.display(),
                set.dim()
            )));
        }
        Ok(Some(set))
    }
}
