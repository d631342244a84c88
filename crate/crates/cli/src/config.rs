//! Run configuration: an optional JSON file merged with command-line
//! overrides. Flags win over file values. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use wkh_core::equilibria::ClusterSpec;
use wkh_core::integrator::{IntegrationOptions, Scheme};
use wkh_core::MarketParams;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Geometric,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Exact enumeration when the regime allows it, multistart otherwise.
    Auto,
    Multistart,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub n: usize,
    pub k: usize,
    pub a_low: f64,
    pub a_high: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub scheme: Option<SchemeName>,
    pub dt_init: Option<f64>,
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub t_max: Option<f64>,
    pub convergence_tol: Option<f64>,
    pub record_every: Option<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Rk4,
    Dp45,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriaConfig {
    pub solver: Option<Solver>,
    pub starts: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub regime: Option<String>,
    pub gamma_min: Option<f64>,
    pub gamma_max: Option<f64>,
    pub points: Option<usize>,
    pub spacing: Option<Spacing>,
    /// Explicit grid; overrides the range fields.
    pub gammas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub points: Option<usize>,
    /// 1-based label of the reference seller.
    pub base: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub checks: Option<Vec<String>>,
    pub trials: Option<usize>,
    pub samples: Option<usize>,
    pub burn_in_fraction: Option<f64>,
    pub trapping_tol: Option<f64>,
    pub two_seller: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub gamma: Option<f64>,
    pub attractiveness: Option<Vec<f64>>,
    pub cluster: Option<ClusterConfig>,
    pub initial_condition: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub equilibria: EquilibriaConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub streamfield: StreamConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn format(&self) -> Format {
        self.format.unwrap_or(Format::Csv)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn cluster_spec(&self) -> Result<Option<ClusterSpec>, CliError> {
        self.cluster
            .map(|c| ClusterSpec::new(c.n, c.k, c.a_low, c.a_high))
            .transpose()
            .map_err(|e| CliError::Config(format!("cluster: {e}")))
    }

    /// Market parameters from `gamma` plus `attractiveness`, or from the
    /// cluster when no attractiveness is given.
    pub fn params(&self) -> Result<MarketParams, CliError> {
        let gamma = self.gamma.ok_or_else(|| {
            CliError::Config("gamma: missing (use --gamma or the config key)".into())
        })?;
        match (&self.attractiveness, self.cluster_spec()?) {
            (Some(a), _) => MarketParams::new(gamma, a.clone()).map_err(config_error),
            (None, Some(c)) => c.params(gamma).map_err(config_error),
            (None, None) => Err(CliError::Config(
                "attractiveness: missing (use --attractiveness, the config key or a cluster)"
                    .into(),
            )),
        }
    }

    pub fn integration_options(&self, p: &MarketParams) -> Result<IntegrationOptions, CliError> {
        let mut o = IntegrationOptions::for_params(p);
        let c = &self.integrator;
        if let Some(s) = c.scheme {
            o.scheme = match s {
                SchemeName::Rk4 => Scheme::FixedStepRk4,
                SchemeName::Dp45 => Scheme::AdaptiveRk45,
            };
        }
        let fields = [
            (&mut o.dt_init, c.dt_init),
            (&mut o.rel_tol, c.rel_tol),
            (&mut o.abs_tol, c.abs_tol),
            (&mut o.t_max, c.t_max),
            (&mut o.convergence_tol, c.convergence_tol),
            (&mut o.record_every, c.record_every),
        ];
        for (slot, v) in fields {
            if let Some(v) = v {
                *slot = v;
            }
        }
        o.validate()
            .map_err(|e| CliError::Config(format!("integrator: {e}")))?;
        Ok(o)
    }
}

/// Core validation errors carry the offending field name already.
pub fn config_error(e: wkh_core::Error) -> CliError {
    CliError::Config(e.to_string())
}
