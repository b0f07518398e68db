use std::fs;
use std::path::{Path, PathBuf};

use flowcast::covariate_lab::{RecipeStep, DEFAULT_CORRELATION_THRESHOLD};
use flowcast::data_model::{CsvLayout, CsvSchema, ReconcileMode, NO_VOTE};
use flowcast::synth_oracle::SynthSpec;
use flowcast::transition_mnl::{Direction, DEFAULT_MARGINAL_STEP, DEFAULT_SCHEDULE, DEFAULT_SIGNIFICANCE};
use flowcast::volatility::LoyaltyRule;
use flowcast::EstimatorConfig;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One anchor model: which option's transitions to explain and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub anchor: String,
    #[serde(default = "default_direction")]
    pub direction: Direction,
    /// Reference option after grouping; the last option when absent.
    #[serde(default)]
    pub reference: Option<String>,
    /// Merged option name → member options.
    #[serde(default)]
    pub groups: IndexMap<String, Vec<String>>,
    /// Zones that get their own dummy covariate.
    #[serde(default)]
    pub dummies: Vec<String>,
}

fn default_direction() -> Direction {
    Direction::Outgoing
}

impl ModelSpec {
    /// File stem of this model's report under `models/`.
    pub fn file_stem(&self) -> String {
        let dir = match self.direction {
            Direction::Outgoing => "out",
            Direction::Incoming => "in",
        };
        format!("{}_{dir}", slug(&self.anchor))
    }
}

pub fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub spec: SynthSpec,
    /// Where generated files go, relative to the config file.
    #[serde(default = "default_sim_dir")]
    pub out_dir: String,
}

fn default_sim_dir() -> String {
    ".".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub stations: String,
    #[serde(default)]
    pub layout: CsvLayout,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default)]
    pub aggregation: Option<String>,
    pub covariates: String,
    #[serde(default = "default_min_stations")]
    pub min_stations: usize,
    #[serde(default)]
    pub electorate_mode: ReconcileMode,
    #[serde(default = "default_abstention")]
    pub abstention_label: String,
    /// Overrides the loyalty map of the aggregation file.
    #[serde(default)]
    pub loyalty: Option<LoyaltyRule>,
    /// First-election categories left out of the tables, noted in the volatility report.
    #[serde(default)]
    pub omitted_origins: Vec<String>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub covariate_recipe: Vec<RecipeStep>,
    pub model_covariates: Vec<String>,
    #[serde(default = "default_corr_threshold")]
    pub correlation_threshold: f64,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_schedule")]
    pub stepwise_schedule: Vec<f64>,
    #[serde(default = "default_significance")]
    pub significance: [f64; 2],
    #[serde(default = "default_step")]
    pub marginal_step: f64,
    /// Destinations given a section in table3.csv.
    #[serde(default)]
    pub table3_destinations: Vec<String>,
    /// Header of the first column of table1.csv.
    #[serde(default = "default_first_label")]
    pub first_election_label: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
}

fn default_min_stations() -> usize {
    10
}
fn default_abstention() -> String {
    NO_VOTE.into()
}
fn default_corr_threshold() -> f64 {
    DEFAULT_CORRELATION_THRESHOLD
}
fn default_schedule() -> Vec<f64> {
    DEFAULT_SCHEDULE.to_vec()
}
fn default_significance() -> [f64; 2] {
    DEFAULT_SIGNIFICANCE
}
fn default_step() -> f64 {
    DEFAULT_MARGINAL_STEP
}
fn default_first_label() -> String {
    "Election 1".into()
}
fn default_out_dir() -> String {
    "out".into()
}

/// A parsed config together with the directory its relative paths start from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub path: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config `{}`: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config `{}`: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            base_dir,
            path: path.to_path_buf(),
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        if rel == "." {
            return self.base_dir.clone();
        }
        self.base_dir.join(rel)
    }

    /// Input files as (role, path as written in the config).
    pub fn inputs(&self) -> Vec<(&'static str, String)> {
        let c = &self.config;
        let mut out = vec![("stations", c.stations.clone())];
        if let Some(a) = &c.aggregation {
            out.push(("aggregation", a.clone()));
        }
        out.push(("covariates", c.covariates.clone()));
        out
    }

    pub fn check_inputs_exist(&self) -> Result<(), CliError> {
        for (role, rel) in self.inputs() {
            if !self.resolve(&rel).is_file() {
                return Err(CliError::Validation(format!("{role} file `{rel}` not found")));
            }
        }
        Ok(())
    }

    /// Loyalty rule from the config, else from the aggregation file's map.
    pub fn loyalty_rule(&self, aggregation_loyalty: Option<&IndexMap<String, String>>) -> LoyaltyRule {
        match (&self.config.loyalty, aggregation_loyalty) {
            (Some(rule), _) => rule.clone(),
            (None, Some(map)) if !map.is_empty() => LoyaltyRule::Explicit(map.clone()),
            _ => LoyaltyRule::Containment,
        }
    }

    pub fn check_settings(&self) -> Result<(), CliError> {
        let c = &self.config;
        let bad = |msg: String| Err(CliError::Validation(msg));
        if c.min_stations == 0 {
            return bad("min_stations must be at least 1".into());
        }
        if c.model_covariates.is_empty() {
            return bad("model_covariates is empty".into());
        }
        let [strong, weak] = c.significance;
        if !(0.0 < strong && strong <= weak && weak < 1.0) {
            return bad(format!("significance thresholds {strong}, {weak} must satisfy 0 < strong <= weak < 1"));
        }
        if !(c.marginal_step > 0.0 && c.marginal_step.is_finite()) {
            return bad("marginal_step must be positive".into());
        }
        let mut stems = Vec::new();
        for m in &c.models {
            let stem = m.file_stem();
            if stems.contains(&stem) {
                return bad(format!("model `{}` ({:?}) listed twice", m.anchor, m.direction));
            }
            stems.push(stem);
        }
        Ok(())
    }
}
