//! Experiment configuration: TOML-backed, with presets and key=value
//! overrides.

use serde::{Deserialize, Serialize};

use crate::amp::{AmpOptions, LikelihoodForm, SigmaMode, StoppingRule};
use crate::cloud::SolverSettings;
use crate::detect::DetectorConfig;
use crate::error::{Error, Result};
use crate::scenario::{ActivityModel, ScenarioConfig, MIN_DISTANCE_KM};

/// Solver section of the experiment configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub epsilon: f64,
    pub gamma_init: f64,
    #[serde(default)]
    pub damping: f64,
    #[serde(default)]
    pub likelihood_form: LikelihoodForm,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
}

impl SolverConfig {
    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            options: AmpOptions {
                likelihood: self.likelihood_form,
                sigma_mode: self.sigma_mode,
                damping: self.damping,
            },
            stopping: StoppingRule {
                max_iters: self.max_iters,
                epsilon: self.epsilon,
            },
            gamma_init: self.gamma_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings().validate()
    }
}

/// A processing deployment to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Deployment {
    Cloud,
    Fog { n_co: usize },
    Baseline,
}

impl std::fmt::Display for Deployment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Deployment::Cloud => write!(f, "cloud"),
            Deployment::Fog { n_co } => write!(f, "fog:{n_co}"),
            Deployment::Baseline => write!(f, "baseline"),
        }
    }
}

impl std::str::FromStr for Deployment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cloud" => Ok(Deployment::Cloud),
            "baseline" => Ok(Deployment::Baseline),
            other => {
                if let Some(n) = other.strip_prefix("fog:") {
                    let n_co: usize = n
                        .parse()
                        .map_err(|_| Error::config(format!("bad cooperation size in '{other}'")))?;
                    Ok(Deployment::Fog { n_co })
                } else {
                    Err(Error::config(format!(
                        "unknown deployment '{other}' (expected cloud, fog:N, or baseline)"
                    )))
                }
            }
        }
    }
}

impl TryFrom<String> for Deployment {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Deployment> for String {
    fn from(d: Deployment) -> String {
        d.to_string()
    }
}

/// What to do when a trial fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FailPolicy {
    #[default]
    Abort,
    Skip,
}

/// Parameter swept across experiment points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    AntennasPerAp,
    PilotLength,
    TransmitPowerDbm,
    /// Cooperation size of every fog deployment.
    NCo,
}

impl SweepVariable {
    pub fn name(&self) -> &'static str {
        match self {
            SweepVariable::AntennasPerAp => "antennas_per_ap",
            SweepVariable::PilotLength => "pilot_length",
            SweepVariable::TransmitPowerDbm => "transmit_power_dbm",
            SweepVariable::NCo => "n_co",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSection {
    pub deployments: Vec<Deployment>,
    pub trials: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub fail_policy: FailPolicy,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

/// Complete experiment description.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub solver: SolverConfig,
    pub detector: DetectorConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    /// Full-scale profile: seven cells of 500 users at 1 km radius, 5%
    /// active, 23 dBm uplink power against -174 dBm/Hz noise over 10 MHz,
    /// 8-14 multipath components, 200 solver iterations at 1e-5 relative
    /// change, 3000 Monte-Carlo runs. Not desk-feasible; emitted for
    /// documentation and cluster use.
    pub fn paper_preset() -> ExperimentConfig {
        ExperimentConfig {
            scenario: ScenarioConfig {
                cells: 7,
                users_per_cell: 500,
                cell_radius_km: 1.0,
                activity: ActivityModel::GlobalFraction { fraction: 0.05 },
                transmit_power_dbm: 23.0,
                noise_density_dbm_hz: -174.0,
                bandwidth_hz: 1.0e7,
                path_count_min: 8,
                path_count_max: 14,
                antennas_per_ap: 8,
                pilot_length: 300,
                frame_length: 600,
                min_distance_km: MIN_DISTANCE_KM,
                ap_positions: None,
            },
            solver: SolverConfig {
                max_iters: 200,
                epsilon: 1e-5,
                gamma_init: 0.1,
                damping: 0.0,
                likelihood_form: LikelihoodForm::Complex,
                sigma_mode: SigmaMode::PerColumn,
            },
            detector: DetectorConfig::default(),
            experiment: ExperimentSection {
                deployments: vec![
                    Deployment::Cloud,
                    Deployment::Fog { n_co: 1 },
                    Deployment::Fog { n_co: 2 },
                    Deployment::Fog { n_co: 3 },
                    Deployment::Baseline,
                ],
                trials: 3000,
                base_seed: 1,
                fail_policy: FailPolicy::Abort,
                sweep: Some(SweepConfig {
                    variable: SweepVariable::AntennasPerAp,
                    values: vec![1.0, 2.0, 4.0, 8.0],
                }),
            },
        }
    }

    /// Reduced profile that keeps the full-scale power, noise, and path-loss
    /// numbers but shrinks the network to 50 users per cell with 60 pilot
    /// slots, sized so the detection problem sits near its phase transition
    /// and a 200-trial sweep finishes on a desktop.
    pub fn desk_preset() -> ExperimentConfig {
        let mut cfg = Self::paper_preset();
        cfg.scenario.users_per_cell = 50;
        cfg.scenario.pilot_length = 60;
        cfg.scenario.frame_length = 120;
        cfg.solver.max_iters = 30;
        cfg.experiment.trials = 200;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.solver.validate()?;
        self.detector.validate()?;
        if self.experiment.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        for d in &self.experiment.deployments {
            if let Deployment::Fog { n_co } = d {
                if *n_co == 0 || *n_co > self.scenario.cells {
                    return Err(Error::config(format!(
                        "fog cooperation size {n_co} must lie in 1..={}",
                        self.scenario.cells
                    )));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for d in &self.experiment.deployments {
            if !seen.insert(*d) {
                return Err(Error::config(format!("deployment '{d}' listed twice")));
            }
        }
        if let Some(sweep) = &self.experiment.sweep {
            if sweep.values.is_empty() {
                return Err(Error::config("sweep needs at least one value"));
            }
            for &v in &sweep.values {
                self.at_sweep_value(sweep.variable, v)?.validate_point()?;
            }
        }
        Ok(())
    }

    /// Validation without sweep recursion.
    fn validate_point(&self) -> Result<()> {
        self.scenario.validate()?;
        self.solver.validate()?;
        self.detector.validate()?;
        for d in &self.experiment.deployments {
            if let Deployment::Fog { n_co } = d {
                if *n_co == 0 || *n_co > self.scenario.cells {
                    return Err(Error::config(format!(
                        "fog cooperation size {n_co} must lie in 1..={}",
                        self.scenario.cells
                    )));
                }
            }
        }
        Ok(())
    }

    /// The configuration with one sweep value substituted in.
    pub fn at_sweep_value(&self, variable: SweepVariable, value: f64) -> Result<ExperimentConfig> {
        let mut point = self.clone();
        point.experiment.sweep = None;
        let as_count = |what: &str| -> Result<usize> {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::config(format!(
                    "sweep value {value} is not a positive integer for {what}"
                )));
            }
            Ok(value as usize)
        };
        match variable {
            SweepVariable::AntennasPerAp => {
                point.scenario.antennas_per_ap = as_count("antennas_per_ap")?;
            }
            SweepVariable::PilotLength => {
                point.scenario.pilot_length = as_count("pilot_length")?;
                point.scenario.frame_length =
                    point.scenario.frame_length.max(point.scenario.pilot_length);
            }
            SweepVariable::TransmitPowerDbm => {
                point.scenario.transmit_power_dbm = value;
            }
            SweepVariable::NCo => {
                let n_co = as_count("n_co")?;
                for d in point.experiment.deployments.iter_mut() {
                    if let Deployment::Fog { n_co: slot } = d {
                        *slot = n_co;
                    }
                }
            }
        }
        Ok(point)
    }

    /// Sweep points as `(variable name, value, configuration)`; a single
    /// unnamed point when no sweep is configured.
    pub fn sweep_points(&self) -> Result<Vec<(String, f64, ExperimentConfig)>> {
        match &self.experiment.sweep {
            None => {
                let mut point = self.clone();
                point.experiment.sweep = None;
                Ok(vec![("none".to_string(), 0.0, point)])
            }
            Some(sweep) => sweep
                .values
                .iter()
                .map(|&v| {
                    Ok((
                        sweep.variable.name().to_string(),
                        v,
                        self.at_sweep_value(sweep.variable, v)?,
                    ))
                })
                .collect(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Apply one `section.key=value` override. The key is a dotted path into
    /// the TOML structure; the value is parsed as TOML, falling back to a
    /// string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let doc = toml::Value::try_from(&*self)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        let mut doc = doc;
        let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(table) => table["v"].clone(),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let segments: Vec<&str> = key.split('.').collect();
        if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
            return Err(Error::config(format!("bad override key '{key}'")));
        }
        let mut slot = &mut doc;
        for (i, seg) in segments.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("'{key}' does not address a table entry")))?;
            if i + 1 == segments.len() {
                table.insert(seg.to_string(), parsed);
                break;
            }
            slot = table
                .entry(seg.to_string())
                .or_insert(toml::Value::Table(Default::default()));
        }
        *self = doc
            .try_into()
            .map_err(|e| Error::config(format!("override '{key}={value}' rejected: {e}")))?;
        Ok(())
    }
}
