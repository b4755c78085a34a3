//! Scenario files: the JSON description of one simulation run.
//!
//! Only `population`, `regions`, `scheme`, `rounds` and `seed` are required;
//! everything else defaults. Unknown keys are rejected so typos surface as
//! configuration errors instead of silently ignored settings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::CentralizedParams;
use crate::protocol::ProtocolParams;
use crate::sim::topology::LatencyModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid scenario field {field}: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Layered,
    Flat,
    Central,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Layered => "layered",
            Scheme::Flat => "flat",
            Scheme::Central => "central",
        })
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "layered" => Ok(Scheme::Layered),
            "flat" => Ok(Scheme::Flat),
            "central" => Ok(Scheme::Central),
            other => Err(format!("unknown scheme '{other}' (expected layered, flat or central)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSpec {
    /// Feature-space dimensionality (number of known application tags).
    pub dims: usize,
    /// Distinct application clusters generated per region; VMs rotate through
    /// them, each carrying the one-hot vector of its cluster's tag.
    pub clusters_per_region: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { dims: 1, clusters_per_region: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    /// Stop mutating workload values from this round on; samples continue
    /// with frozen values so exact aggregate checks become possible.
    pub freeze_round: Option<u64>,
    /// Random-walk step bound for the percentage metrics.
    pub pct_step: f64,
    /// Random-walk step bound for net_kbps.
    pub net_step: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec { freeze_round: None, pct_step: 5.0, net_step: 50.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChurnAction {
    /// The VM stops participating; pending messages to it are dropped.
    Leave { vm: u32 },
    /// A new VM appears in `region` carrying `cluster`'s feature vector and
    /// joins the nearest existing group there.
    Join { region: u16, cluster: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnEvent {
    pub round: u64,
    pub action: ChurnAction,
}

/// Optional per-field protocol overrides as they appear in the file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolOverrides {
    pub t_gossip: Option<u64>,
    pub beta: Option<f64>,
    pub f_max: Option<usize>,
    pub k_group: Option<u64>,
    pub k_cloud: Option<u64>,
    pub staleness_window: Option<u64>,
    pub epsilon_latency: Option<f64>,
}

impl ProtocolOverrides {
    pub fn resolve(&self) -> ProtocolParams {
        let defaults = ProtocolParams::default();
        let t_gossip = self.t_gossip.unwrap_or(defaults.t_gossip);
        ProtocolParams {
            t_gossip,
            beta: self.beta.unwrap_or(defaults.beta),
            f_max: self.f_max.unwrap_or(defaults.f_max),
            k_group: self.k_group.unwrap_or(defaults.k_group),
            k_cloud: self.k_cloud.unwrap_or(defaults.k_cloud),
            staleness_window: self.staleness_window.unwrap_or(10 * t_gossip),
            epsilon_latency: self.epsilon_latency.unwrap_or(defaults.epsilon_latency),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    population: u64,
    regions: Vec<u64>,
    scheme: Scheme,
    rounds: u64,
    seed: u64,
    #[serde(default)]
    feature_spec: FeatureSpec,
    #[serde(default)]
    tau: Option<f64>,
    #[serde(default)]
    protocol: ProtocolOverrides,
    #[serde(default)]
    centralized: CentralizedParams,
    #[serde(default)]
    latency: LatencyModel,
    #[serde(default)]
    workload: WorkloadSpec,
    #[serde(default)]
    churn: Vec<ChurnEvent>,
}

/// A validated scenario ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub population: u64,
    pub regions: Vec<u64>,
    pub scheme: Scheme,
    pub rounds: u64,
    pub seed: u64,
    pub feature_spec: FeatureSpec,
    pub tau: f64,
    pub protocol: ProtocolParams,
    pub centralized: CentralizedParams,
    pub latency: LatencyModel,
    pub workload: WorkloadSpec,
    pub churn: Vec<ChurnEvent>,
}

pub const DEFAULT_TAU: f64 = 0.8;

impl Scenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.population == 0 {
            return Err(ConfigError::invalid("population", "must be at least 1"));
        }
        if self.regions.is_empty() {
            return Err(ConfigError::invalid("regions", "at least one region is required"));
        }
        if self.regions.iter().sum::<u64>() != self.population {
            return Err(ConfigError::invalid(
                "regions",
                format!(
                    "per-region counts sum to {}, expected population {}",
                    self.regions.iter().sum::<u64>(),
                    self.population
                ),
            ));
        }
        if self.rounds == 0 {
            return Err(ConfigError::invalid("rounds", "must be at least 1"));
        }
        if self.feature_spec.dims == 0 {
            return Err(ConfigError::invalid("feature_spec.dims", "must be at least 1"));
        }
        if self.feature_spec.clusters_per_region == 0 {
            return Err(ConfigError::invalid("feature_spec.clusters_per_region", "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(ConfigError::invalid("tau", format!("must be in (0, 1], got {}", self.tau)));
        }
        self.protocol
            .validate()
            .map_err(|m| ConfigError::invalid("protocol", m))?;
        self.centralized
            .validate()
            .map_err(|m| ConfigError::invalid("centralized", m))?;
        self.latency.validate()?;
        if !(self.workload.pct_step > 0.0) || !(self.workload.net_step > 0.0) {
            return Err(ConfigError::invalid("workload", "step bounds must be positive"));
        }
        for (i, ev) in self.churn.iter().enumerate() {
            match ev.action {
                ChurnAction::Leave { vm } => {
                    if u64::from(vm) >= self.population {
                        return Err(ConfigError::invalid(
                            format!("churn[{i}].vm"),
                            "leave target outside initial population",
                        ));
                    }
                }
                ChurnAction::Join { region, .. } => {
                    if usize::from(region) >= self.regions.len() {
                        return Err(ConfigError::invalid(
                            format!("churn[{i}].region"),
                            "join region does not exist",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn from_file(file: ScenarioFile) -> Result<Scenario, ConfigError> {
        let scenario = Scenario {
            population: file.population,
            regions: file.regions,
            scheme: file.scheme,
            rounds: file.rounds,
            seed: file.seed,
            feature_spec: file.feature_spec,
            tau: file.tau.unwrap_or(DEFAULT_TAU),
            protocol: file.protocol.resolve(),
            centralized: file.centralized,
            latency: file.latency,
            workload: file.workload,
            churn: file.churn,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_json(json: &str, path: &str) -> Result<Scenario, ConfigError> {
        let file: ScenarioFile = serde_json::from_str(json)
            .map_err(|e| ConfigError::Parse { path: path.to_string(), message: e.to_string() })?;
        Scenario::from_file(file)
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Scenario::from_json(&text, &path.display().to_string())
}
