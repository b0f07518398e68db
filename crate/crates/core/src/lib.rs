//! Voter-transition estimation from polling-station aggregates.
//!
//! The crate covers the whole analysis chain:
//!
//! - [`data_model`]: station CSV ingestion, party aggregation, zone tables;
//! - [`ei_estimator`]: per-zone ecological inference of transition
//!   probabilities, their logit-scale covariance and margin-consistent flows;
//! - [`covariate_lab`]: standardized zone covariates, composites and
//!   residualization;
//! - [`transition_mnl`]: multinomial logit models of transition counts,
//!   stepwise selection, marginal effects and residual diagnostics;
//! - [`volatility`]: row percentages and volatility indexes;
//! - [`synth_oracle`]: synthetic elections with known ground truth.

pub mod covariate_lab;
pub mod data_model;
pub mod ei_estimator;
pub mod error;
pub mod synth_oracle;
pub mod transition_mnl;
pub mod volatility;

pub use data_model::{ElectionData, OptionSet, PartyAggregation, StationRecord, ZoneTable, NO_VOTE};
pub use ei_estimator::{fit_zone, EstimatorConfig, FlowTable, TransitionEstimate};
pub use error::{Error, Result};
