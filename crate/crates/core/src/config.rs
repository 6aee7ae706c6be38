//! Experiment configuration (TOML), dotted-key overrides and validation.
//!
//! The schema is versioned by `schema_version`; unknown keys are rejected at
//! every level. A written manifest is itself a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bel::{CutoffSpec, Observable};
use crate::coupling::{CouplingParams, ProximityRule};
use crate::error::{Error, Result};
use crate::integrator::{Discretization, Scheme};
use crate::lab::{InvariantPlan, MixingSetup};
use crate::noise::{NoiseKind, NoiseSpec, DEFAULT_MODULATION};
use crate::spectral::{build_shell_model_with, build_torus_model, Forcing, GalerkinModel, SpectralState};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Couple,
    Mix,
    BelCheck,
    Invariant,
    SmallNoise,
}

impl Command {
    pub const ALL: [Command; 6] =
        [Command::Simulate, Command::Couple, Command::Mix, Command::BelCheck, Command::Invariant, Command::SmallNoise];

    pub fn from_name(name: &str) -> Option<Command> {
        Command::ALL.into_iter().find(|c| c.as_str() == name)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Couple => "couple",
            Command::Mix => "mix",
            Command::BelCheck => "bel-check",
            Command::Invariant => "invariant",
            Command::SmallNoise => "small-noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Shell,
    Torus,
}

fn default_mu1() -> f64 {
    4.0 * std::f64::consts::PI * std::f64::consts::PI
}
fn default_lambda() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub kind: ModelKind,
    #[serde(default)]
    pub n_shells: Option<usize>,
    #[serde(default)]
    pub coupling: Option<f64>,
    #[serde(default = "default_mu1")]
    pub mu1: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub cutoff: Option<u32>,
    #[serde(default = "one")]
    pub viscosity: f64,
    #[serde(default)]
    pub forcing_amplitude: f64,
    #[serde(default)]
    pub forcing_modes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub kind: NoiseKind,
    pub s: f64,
    #[serde(default)]
    pub modulation: Option<f64>,
    /// Common factor on every amplitude.
    #[serde(default = "one")]
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingBlock {
    #[serde(rename = "T")]
    pub macro_length: f64,
    pub delta: f64,
    pub dt: f64,
    pub rho: f64,
    pub max_macro_steps: usize,
    #[serde(default)]
    pub delta3: Option<f64>,
    #[serde(default)]
    pub proximity: ProximityRule,
}

fn default_seed() -> u64 {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_alphas() -> Vec<f64> {
    vec![0.25, 0.5, 1.0, 2.0, 4.0]
}
fn default_replicas() -> usize {
    8
}
fn default_samples() -> usize {
    250
}
fn default_censor() -> f64 {
    0.1
}
fn default_bins() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub n_chains: usize,
    /// Solo-path length for `simulate` and the small-noise window default.
    pub horizon: f64,
    pub burn_in: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Solo-path step; defaults to the model's stable step.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Initial pair `(+a e_mode, -a e_mode)`.
    #[serde(default)]
    pub x0_amplitude: f64,
    #[serde(default)]
    pub x0_mode: usize,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Invariant-measure sampling gap; defaults to `T`.
    #[serde(default)]
    pub spacing: Option<f64>,
    #[serde(default = "default_samples")]
    pub samples_per_replica: usize,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_censor")]
    pub max_censored_fraction: f64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Squared `H2` radii for the meet-probability sweep; defaults to
    /// `delta * [1, 1/2, 1/4]`.
    #[serde(default)]
    pub meet_radii: Option<Vec<f64>>,
}

fn default_bel_samples() -> usize {
    2000
}
fn default_nodes() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BelBlock {
    /// Cutoff level `K0`; `inf` disables the cutoff, absent means the pilot
    /// quantile of the energy integral.
    #[serde(default)]
    pub k0: Option<f64>,
    pub observable: Observable,
    pub horizon: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default = "default_bel_samples")]
    pub n_samples: usize,
    #[serde(default = "default_nodes")]
    pub theta_nodes: usize,
    /// Second start point; the first is the run block's `x0`.
    pub x0_target: Vec<f64>,
}

fn default_small_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmallNoiseBlock {
    #[serde(default)]
    pub t: Option<f64>,
    /// Levels `M`; absent means empirical quantiles of a pilot sample.
    #[serde(default)]
    pub levels: Option<Vec<f64>>,
    #[serde(default = "default_small_samples")]
    pub n_samples: usize,
}

impl Default for SmallNoiseBlock {
    fn default() -> Self {
        SmallNoiseBlock { t: None, levels: None, n_samples: default_small_samples() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub command: Option<Command>,
    pub model: ModelBlock,
    pub noise: NoiseBlock,
    pub coupling: CouplingBlock,
    pub run: RunBlock,
    #[serde(default)]
    pub bel: Option<BelBlock>,
    #[serde(default)]
    pub small_noise: SmallNoiseBlock,
    /// Written by the CLI into manifests; ignored on input.
    #[serde(default)]
    pub provenance: Option<toml::Table>,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses `KEY=VALUE`; the value is read as a TOML value and falls back to
/// a bare string.
pub fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text.split_once('=').ok_or_else(|| config_err(format!("override `{text}` is not KEY=VALUE")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` has an empty segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("override `{}`: `{p}` is not a table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut table, &path, value)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Checks every numeric field; also builds the model and noise once.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let model = self.build_model()?;
        let noise = self.build_noise(&model)?;
        noise.ensure_nondegenerate()?;
        self.coupling_params()?.validate()?;
        let r = &self.run;
        if r.n_chains == 0 {
            return Err(Error::invalid("run.n_chains", "must be positive"));
        }
        if !(r.horizon > 0.0 && r.horizon.is_finite()) {
            return Err(Error::invalid("run.horizon", "must be positive"));
        }
        if !(r.burn_in >= 0.0 && r.burn_in.is_finite()) {
            return Err(Error::invalid("run.burn_in", "must be nonnegative"));
        }
        if r.x0_mode >= model.dim() {
            return Err(Error::invalid("run.x0_mode", format!("{} out of range for {} modes", r.x0_mode, model.dim())));
        }
        if !r.x0_amplitude.is_finite() {
            return Err(Error::NonFinite("run.x0_amplitude"));
        }
        if r.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("run.alphas", "entries must be positive"));
        }
        if !(0.0..=1.0).contains(&r.max_censored_fraction) {
            return Err(Error::invalid("run.max_censored_fraction", "must lie in [0, 1]"));
        }
        if r.histogram_bins == 0 {
            return Err(Error::invalid("run.histogram_bins", "must be positive"));
        }
        if let Some(radii) = &r.meet_radii {
            if radii.is_empty() || radii.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid("run.meet_radii", "entries must be positive"));
            }
        }
        self.invariant_plan(&model)?.validate()?;
        self.solo_discretization(&model)?;
        if let Some(b) = &self.bel {
            if let Some(k0) = b.k0 {
                CutoffSpec::new(k0)?;
            }
            b.observable.validate(model.dim())?;
            if b.x0_target.len() != model.dim() {
                return Err(Error::DimensionMismatch { expected: model.dim(), found: b.x0_target.len() });
            }
            if b.n_samples == 0 || b.theta_nodes == 0 {
                return Err(Error::invalid("bel.n_samples", "n_samples and theta_nodes must be positive"));
            }
            self.bel_discretization(&model)?.steps_for(b.horizon)?;
        }
        let sn = &self.small_noise;
        if let Some(t) = sn.t {
            if !(t > 0.0) {
                return Err(Error::invalid("small_noise.t", "must be positive"));
            }
        }
        if let Some(levels) = &sn.levels {
            if levels.is_empty() || levels.iter().any(|m| !(*m > 0.0)) {
                return Err(Error::invalid("small_noise.levels", "entries must be positive"));
            }
        }
        if sn.n_samples == 0 {
            return Err(Error::invalid("small_noise.n_samples", "must be positive"));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<GalerkinModel> {
        let m = &self.model;
        if !(m.viscosity > 0.0 && m.viscosity.is_finite()) {
            return Err(Error::invalid("model.viscosity", "must be positive"));
        }
        let forcing = if m.forcing_amplitude == 0.0 || m.forcing_modes.is_empty() {
            Forcing::Zero
        } else {
            Forcing::Modes { amplitude: m.forcing_amplitude, indices: m.forcing_modes.clone() }
        };
        let base = match m.kind {
            ModelKind::Shell => {
                if m.cutoff.is_some() {
                    return Err(Error::invalid("model.cutoff", "only valid for the torus model"));
                }
                let n = m.n_shells.ok_or_else(|| Error::invalid("model.n_shells", "required for the shell model"))?;
                build_shell_model_with(n, m.coupling.unwrap_or(1.0), m.mu1, m.lambda)?
                    .with_viscosity(m.viscosity)?
                    .with_forcing(&forcing)?
            }
            ModelKind::Torus => {
                if m.n_shells.is_some() || m.coupling.is_some() {
                    return Err(Error::invalid("model.n_shells", "only valid for the shell model"));
                }
                let cutoff = m.cutoff.ok_or_else(|| Error::invalid("model.cutoff", "required for the torus model"))?;
                build_torus_model(cutoff, m.viscosity, &forcing)?
            }
        };
        Ok(base)
    }

    pub fn build_noise(&self, model: &GalerkinModel) -> Result<NoiseSpec> {
        let n = &self.noise;
        let spec = match n.kind {
            NoiseKind::ConstantDiagonal => {
                if n.modulation.is_some() {
                    return Err(Error::invalid("noise.modulation", "only valid for modulated_diagonal noise"));
                }
                NoiseSpec::constant_diagonal(model, n.s)?
            }
            NoiseKind::ModulatedDiagonal => {
                NoiseSpec::modulated_diagonal(model, n.s, n.modulation.unwrap_or(DEFAULT_MODULATION))?
            }
        };
        spec.scaled(n.scale)
    }

    pub fn coupling_params(&self) -> Result<CouplingParams> {
        let c = &self.coupling;
        let p = CouplingParams {
            macro_length: c.macro_length,
            delta: c.delta,
            dt: c.dt,
            rho: c.rho,
            max_macro_steps: c.max_macro_steps,
            delta3: c.delta3,
            proximity: c.proximity,
            scheme: Scheme::SemiImplicit,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn solo_discretization(&self, model: &GalerkinModel) -> Result<Discretization> {
        match self.run.dt {
            Some(dt) => Discretization::new(dt, Scheme::SemiImplicit),
            None => Ok(Discretization::default_for(model)),
        }
    }

    pub fn bel_discretization(&self, model: &GalerkinModel) -> Result<Discretization> {
        match self.bel.as_ref().and_then(|b| b.dt) {
            Some(dt) => Discretization::new(dt, Scheme::SemiImplicit),
            None => self.solo_discretization(model),
        }
    }

    /// The configured pair `(+a e_mode, -a e_mode)`.
    pub fn initial_pair(&self, model: &GalerkinModel) -> (SpectralState, SpectralState) {
        let mut x1 = model.zero_state();
        x1[self.run.x0_mode] = self.run.x0_amplitude;
        let x2 = x1.scaled(-1.0);
        (x1, x2)
    }

    pub fn invariant_plan(&self, _model: &GalerkinModel) -> Result<InvariantPlan> {
        let c = &self.coupling;
        Ok(InvariantPlan {
            burn_in: self.run.burn_in,
            spacing: self.run.spacing.unwrap_or(c.macro_length),
            samples_per_replica: self.run.samples_per_replica,
            replicas: self.run.replicas,
            disc: Discretization::new(c.dt, Scheme::SemiImplicit)?,
        })
    }

    pub fn mixing_setup(&self, model: &GalerkinModel) -> Result<MixingSetup> {
        let (x0_1, x0_2) = self.initial_pair(model);
        Ok(MixingSetup {
            params: self.coupling_params()?,
            x0_1,
            x0_2,
            n_chains: self.run.n_chains,
            alphas: self.run.alphas.clone(),
            invariant: self.invariant_plan(model)?,
            max_censored_fraction: self.run.max_censored_fraction,
            histogram_bins: self.run.histogram_bins,
        })
    }

    pub fn meet_radii(&self) -> Vec<f64> {
        self.run.meet_radii.clone().unwrap_or_else(|| {
            let d = self.coupling.delta;
            vec![d, d / 2.0, d / 4.0]
        })
    }
}
