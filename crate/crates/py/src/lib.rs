//! Python bindings: synthetic elections, per-zone transition estimates,
//! flow tables with volatility indexes, and multinomial transition models.

use flowcast::covariate_lab::{self, CovariateMatrix as CoreCovariates, Transform};
use flowcast::data_model::{self, OptionSet, StationRecord, ZoneTable as CoreZone};
use flowcast::ei_estimator::{self, EstimatorConfig as CoreConfig, FlowTable as CoreFlow, TransitionEstimate as CoreEstimate};
use flowcast::synth_oracle::{self, SynthOutput, SynthSpec as CoreSpec};
use flowcast::transition_mnl::{self as mnl, Direction, MnlConfig, MnlModel as CoreModel, TransitionCountPanel};
use flowcast::volatility::{self, LoyaltyRule};
use indexmap::IndexMap;
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyKeyError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(flowcast, FlowcastError, PyException);

fn err(e: flowcast::Error) -> PyErr {
    FlowcastError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A serializable value as plain Python dicts and lists.
fn to_python<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json<T: Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string_pretty(value).map_err(json_err)
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(json_err)
}

fn parse_direction(label: &str) -> PyResult<Direction> {
    match label {
        "outgoing" => Ok(Direction::Outgoing),
        "incoming" => Ok(Direction::Incoming),
        _ => Err(PyValueError::new_err(format!("direction must be 'outgoing' or 'incoming', not {label:?}"))),
    }
}

fn parse_loyalty(label: &str) -> PyResult<LoyaltyRule> {
    match label {
        "containment" => Ok(LoyaltyRule::Containment),
        "positional" => Ok(LoyaltyRule::Positional),
        _ => Err(PyValueError::new_err(format!("loyalty must be 'containment' or 'positional', not {label:?}"))),
    }
}

/// Settings of the synthetic election generator.
#[pyclass(name = "SynthSpec")]
struct SynthSpec {
    inner: CoreSpec,
}

#[pymethods]
impl SynthSpec {
    #[new]
    #[pyo3(signature = (seed = 2022, zones = 19, stations_per_zone = 53, voters_per_station = 700.0, volatility_amplitude = 0.15))]
    fn new(seed: u64, zones: usize, stations_per_zone: usize, voters_per_station: f64, volatility_amplitude: f64) -> PyResult<Self> {
        let inner = CoreSpec {
            seed,
            zones,
            stations_per_zone,
            voters_per_station,
            volatility_amplitude,
            ..CoreSpec::default()
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CoreSpec = from_json(text)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }

    /// Copy with a logit bump on one transition of one zone (zones from 1).
    fn with_outlier(&self, zone: usize, origin: &str, destination: &str, bump: f64) -> PyResult<Self> {
        Ok(Self {
            inner: synth_oracle::plant_outlier(&self.inner, zone, origin, destination, bump).map_err(err)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn zones(&self) -> usize {
        self.inner.zones
    }

    fn __repr__(&self) -> String {
        format!(
            "SynthSpec(seed={}, zones={}, stations_per_zone={})",
            self.inner.seed, self.inner.zones, self.inner.stations_per_zone
        )
    }
}

/// A generated election: stations, raw covariates and the true transitions.
#[pyclass(name = "SyntheticElection")]
struct SyntheticElection {
    inner: SynthOutput,
}

#[pymethods]
impl SyntheticElection {
    #[new]
    #[pyo3(signature = (spec = None))]
    fn new(spec: Option<PyRef<'_, SynthSpec>>) -> PyResult<Self> {
        let spec = spec.map(|s| s.inner.clone()).unwrap_or_default();
        Ok(Self {
            inner: synth_oracle::generate(&spec).map_err(err)?,
        })
    }

    /// Zone tables after party aggregation.
    #[pyo3(signature = (min_stations = 10))]
    fn zones(&self, min_stations: usize) -> PyResult<Vec<ZoneTable>> {
        let data = data_model::aggregate_parties(&self.inner.data, &self.inner.aggregation).map_err(err)?;
        Ok(data_model::group_zones(&data, min_stations)
            .map_err(err)?
            .into_iter()
            .map(|inner| ZoneTable { inner })
            .collect())
    }

    /// Model covariates built by the default recipe.
    fn covariates(&self) -> PyResult<CovariateMatrix> {
        let keep: Vec<String> = synth_oracle::COVARIATES.iter().map(|c| c.to_string()).collect();
        let inner = covariate_lab::apply_recipe(&self.inner.covariates, &synth_oracle::default_recipe(), &keep)
            .map_err(err)?;
        Ok(CovariateMatrix { inner })
    }

    /// True origin × destination probabilities of one zone.
    fn true_p(&self, zone_id: &str) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .truth
            .p_of(zone_id)
            .cloned()
            .ok_or_else(|| PyKeyError::new_err(zone_id.to_string()))
    }

    #[getter]
    fn origins(&self) -> Vec<String> {
        self.inner.truth.origins.clone()
    }

    #[getter]
    fn destinations(&self) -> Vec<String> {
        self.inner.truth.destinations.clone()
    }

    fn truth<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, &self.inner.truth)
    }

    /// Writes stations.csv, covariates.csv, aggregation.json and truth.json.
    fn write(&self, directory: &str) -> PyResult<Vec<String>> {
        let paths = synth_oracle::write_outputs(&self.inner, directory).map_err(err)?;
        Ok(paths.iter().map(|p| p.display().to_string()).collect())
    }
}

/// Stations of one zone.
#[pyclass(name = "ZoneTable")]
struct ZoneTable {
    inner: CoreZone,
}

#[pymethods]
impl ZoneTable {
    /// One row of first- and second-election counts per station.
    #[new]
    fn new(zone_id: &str, origins: Vec<String>, destinations: Vec<String>, counts1: Vec<Vec<u64>>, counts2: Vec<Vec<u64>>) -> PyResult<Self> {
        if counts1.len() != counts2.len() {
            return Err(PyValueError::new_err("counts1 and counts2 need one row per station"));
        }
        let stations = counts1
            .into_iter()
            .zip(counts2)
            .enumerate()
            .map(|(s, (c1, c2))| StationRecord {
                station_id: format!("{zone_id}-S{:03}", s + 1),
                zone_id: zone_id.to_string(),
                electorate1: c1.iter().sum(),
                electorate2: c2.iter().sum(),
                counts1: c1,
                counts2: c2,
            })
            .collect();
        let inner = CoreZone::new(
            zone_id,
            OptionSet::from_labels(origins).map_err(err)?,
            OptionSet::from_labels(destinations).map_err(err)?,
            stations,
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn zone_id(&self) -> String {
        self.inner.zone_id.clone()
    }

    #[getter]
    fn n_stations(&self) -> usize {
        self.inner.n_stations()
    }

    #[getter]
    fn origins(&self) -> Vec<String> {
        self.inner.options1.labels().to_vec()
    }

    #[getter]
    fn destinations(&self) -> Vec<String> {
        self.inner.options2.labels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("ZoneTable({:?}, {} stations)", self.inner.zone_id, self.inner.n_stations())
    }
}

/// Fitting controls of the transition estimator.
#[pyclass(name = "EstimatorConfig")]
#[derive(Default)]
struct EstimatorConfig {
    inner: CoreConfig,
}

#[pymethods]
impl EstimatorConfig {
    #[new]
    #[pyo3(signature = (max_iter = 200, theta_bound = 12.0))]
    fn new(max_iter: usize, theta_bound: f64) -> Self {
        Self {
            inner: CoreConfig {
                max_iter,
                theta_bound,
                ..CoreConfig::default()
            },
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: from_json(text)? })
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }
}

/// Estimated transition probabilities of one zone.
#[pyclass(name = "TransitionEstimate")]
struct TransitionEstimate {
    inner: CoreEstimate,
}

#[pymethods]
impl TransitionEstimate {
    #[getter]
    fn zone_id(&self) -> String {
        self.inner.zone_id.clone()
    }

    #[getter]
    fn origins(&self) -> Vec<String> {
        self.inner.origins.clone()
    }

    #[getter]
    fn destinations(&self) -> Vec<String> {
        self.inner.destinations.clone()
    }

    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        self.inner.p.clone()
    }

    #[getter]
    fn se_p(&self) -> Vec<Vec<f64>> {
        self.inner.se_p.clone()
    }

    #[getter]
    fn theta(&self) -> Vec<Vec<f64>> {
        self.inner.theta.clone()
    }

    #[getter]
    fn phi(&self) -> f64 {
        self.inner.phi
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }
}

/// Origin × destination vote counts.
#[pyclass(name = "FlowTable")]
struct FlowTable {
    inner: CoreFlow,
}

#[pymethods]
impl FlowTable {
    #[new]
    fn new(zone_id: &str, origins: Vec<String>, destinations: Vec<String>, counts: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreFlow::from_counts(zone_id, origins, destinations, counts).map_err(err)?,
        })
    }

    /// The regional flows shipped as a fixture, in votes.
    #[staticmethod]
    fn regional() -> Self {
        Self {
            inner: synth_oracle::regional_flow_table(),
        }
    }

    /// Elementwise sum of zone tables.
    #[staticmethod]
    fn aggregate(tables: Vec<PyRef<'_, FlowTable>>) -> PyResult<Self> {
        let tables: Vec<CoreFlow> = tables.iter().map(|t| t.inner.clone()).collect();
        Ok(Self {
            inner: volatility::aggregate_region(&tables).map_err(err)?,
        })
    }

    #[getter]
    fn zone_id(&self) -> String {
        self.inner.zone_id.clone()
    }

    #[getter]
    fn origins(&self) -> Vec<String> {
        self.inner.origins.clone()
    }

    #[getter]
    fn destinations(&self) -> Vec<String> {
        self.inner.destinations.clone()
    }

    #[getter]
    fn counts(&self) -> Vec<Vec<f64>> {
        self.inner.counts.clone()
    }

    /// Observed origin totals the flows were raked to.
    #[getter]
    fn row_margins(&self) -> Vec<f64> {
        self.inner.row_margins.clone()
    }

    fn row_percentages(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(volatility::row_percentages(&self.inner).map_err(err)?.values)
    }

    /// Switching, abstention and loyalty percentages as a dict.
    #[pyo3(signature = (abstention = "No vote", loyalty = "containment", omitted_origins = Vec::new()))]
    fn volatility<'py>(
        &self,
        py: Python<'py>,
        abstention: &str,
        loyalty: &str,
        omitted_origins: Vec<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let record =
            volatility::volatility_indexes_with_omitted(&self.inner, abstention, &parse_loyalty(loyalty)?, &omitted_origins)
                .map_err(err)?;
        to_python(py, &record)
    }

    /// Percent table as text, headed by `first_label`.
    #[pyo3(signature = (first_label = "Election 1"))]
    fn render(&self, first_label: &str) -> PyResult<String> {
        volatility::render_transition_table(&self.inner, first_label).map_err(err)
    }

    fn heatmap_svg(&self) -> PyResult<String> {
        volatility::flow_heatmap_svg(&self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "FlowTable({:?}, {} x {})",
            self.inner.zone_id,
            self.inner.origins.len(),
            self.inner.destinations.len()
        )
    }
}

/// Zones × covariates design matrix.
#[pyclass(name = "CovariateMatrix")]
struct CovariateMatrix {
    inner: CoreCovariates,
}

#[pymethods]
impl CovariateMatrix {
    /// Columns are taken as given, in insertion order.
    #[new]
    fn new(zone_ids: Vec<String>, columns: IndexMap<String, Vec<f64>>) -> PyResult<Self> {
        let mut inner = CoreCovariates::new(zone_ids);
        for (name, values) in columns {
            let source = name.clone();
            inner.push(name, values, Transform::Raw { source }).map_err(err)?;
        }
        Ok(Self { inner })
    }

    /// Copy with one 0/1 column per listed zone.
    fn with_zone_dummies(&self, zones: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: mnl::add_zone_dummies(&self.inner, &zones).map_err(err)?,
        })
    }

    fn select(&self, names: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.select(&names).map_err(err)?,
        })
    }

    #[getter]
    fn zone_ids(&self) -> Vec<String> {
        self.inner.zone_ids.clone()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names()
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner
            .column(name)
            .map(|c| c.values.clone())
            .ok_or_else(|| PyKeyError::new_err(name.to_string()))
    }

    /// Pairwise Pearson correlations and the pairs above `threshold`.
    #[pyo3(signature = (threshold = 0.7))]
    fn correlations<'py>(&self, py: Python<'py>, threshold: f64) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, &covariate_lab::correlation_report(&self.inner, threshold).map_err(err)?)
    }
}

/// Zone × option counts of transitions out of (or into) one anchor option.
#[pyclass(name = "TransitionPanel")]
struct TransitionPanel {
    inner: TransitionCountPanel,
}

#[pymethods]
impl TransitionPanel {
    #[new]
    #[pyo3(signature = (anchor, zone_ids, options, counts, direction = "outgoing"))]
    fn new(anchor: &str, zone_ids: Vec<String>, options: Vec<String>, counts: Vec<Vec<f64>>, direction: &str) -> PyResult<Self> {
        if counts.len() != zone_ids.len() || counts.iter().any(|r| r.len() != options.len()) {
            return Err(PyValueError::new_err("counts must be zones × options"));
        }
        let inner = TransitionCountPanel {
            direction: parse_direction(direction)?,
            anchor: anchor.to_string(),
            totals: counts.iter().map(|r| r.iter().sum()).collect(),
            count_se: vec![vec![0.0; options.len()]; zone_ids.len()],
            zone_ids,
            options,
            counts,
        };
        Ok(Self { inner })
    }

    /// Panel taken from zone flow tables; with estimates, their count
    /// standard errors enter the residual diagnostics.
    #[staticmethod]
    #[pyo3(signature = (flows, anchor, direction = "outgoing", estimates = None))]
    fn from_flows(
        flows: Vec<PyRef<'_, FlowTable>>,
        anchor: &str,
        direction: &str,
        estimates: Option<Vec<PyRef<'_, TransitionEstimate>>>,
    ) -> PyResult<Self> {
        let flows: Vec<CoreFlow> = flows.iter().map(|f| f.inner.clone()).collect();
        let dir = parse_direction(direction)?;
        let inner = match estimates {
            Some(est) => {
                let se: Vec<Vec<Vec<f64>>> = est.iter().map(|e| e.inner.se_p.clone()).collect();
                mnl::build_panel_with_se(&flows, &se, anchor, dir)
            }
            None => mnl::build_panel(&flows, anchor, dir),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// Merged option name → member options.
    fn merge_options(&self, groups: IndexMap<String, Vec<String>>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.merge_options(&groups).map_err(err)?,
        })
    }

    #[getter]
    fn options(&self) -> Vec<String> {
        self.inner.options.clone()
    }

    #[getter]
    fn zone_ids(&self) -> Vec<String> {
        self.inner.zone_ids.clone()
    }

    #[getter]
    fn counts(&self) -> Vec<Vec<f64>> {
        self.inner.counts.clone()
    }
}

fn reference_index(panel: &TransitionCountPanel, reference: Option<&str>) -> PyResult<Option<usize>> {
    reference
        .map(|r| {
            panel
                .options
                .iter()
                .position(|o| o == r)
                .ok_or_else(|| PyKeyError::new_err(format!("no option {r:?}")))
        })
        .transpose()
}

/// A fitted multinomial logit model of one panel.
#[pyclass(name = "MnlModel")]
struct MnlModel {
    inner: CoreModel,
}

#[pymethods]
impl MnlModel {
    /// Fits every covariate for every non-reference option, or the cells set in `mask`.
    #[staticmethod]
    #[pyo3(signature = (panel, covariates, reference = None, mask = None))]
    fn fit(
        panel: PyRef<'_, TransitionPanel>,
        covariates: PyRef<'_, CovariateMatrix>,
        reference: Option<&str>,
        mask: Option<Vec<Vec<bool>>>,
    ) -> PyResult<Self> {
        let cfg = MnlConfig {
            reference: reference_index(&panel.inner, reference)?,
            ..MnlConfig::default()
        };
        let mask = mask.unwrap_or_else(|| mnl::full_mask(panel.inner.n_options(), covariates.inner.n_covariates()));
        Ok(Self {
            inner: mnl::fit(&panel.inner, &covariates.inner, &mask, &cfg).map_err(err)?,
        })
    }

    /// Backward elimination over increasing |z| thresholds.
    #[staticmethod]
    #[pyo3(signature = (panel, covariates, reference = None, schedule = mnl::DEFAULT_SCHEDULE.to_vec()))]
    fn stepwise(
        panel: PyRef<'_, TransitionPanel>,
        covariates: PyRef<'_, CovariateMatrix>,
        reference: Option<&str>,
        schedule: Vec<f64>,
    ) -> PyResult<Self> {
        let cfg = MnlConfig {
            reference: reference_index(&panel.inner, reference)?,
            ..MnlConfig::default()
        };
        Ok(Self {
            inner: mnl::stepwise_select(&panel.inner, &covariates.inner, &schedule, &cfg).map_err(err)?,
        })
    }

    #[getter]
    fn options(&self) -> Vec<String> {
        self.inner.options.clone()
    }

    #[getter]
    fn covariates(&self) -> Vec<String> {
        self.inner.covariates.clone()
    }

    #[getter]
    fn reference(&self) -> String {
        self.inner.options[self.inner.reference_index].clone()
    }

    #[getter]
    fn beta0(&self) -> Vec<f64> {
        self.inner.beta0.clone()
    }

    #[getter]
    fn beta(&self) -> Vec<Vec<f64>> {
        self.inner.beta.clone()
    }

    #[getter]
    fn std_errors(&self) -> Vec<Vec<f64>> {
        self.inner.std_errors.clone()
    }

    #[getter]
    fn z_ratios(&self) -> Vec<Vec<f64>> {
        self.inner.z_ratios.clone()
    }

    #[getter]
    fn mask(&self) -> Vec<Vec<bool>> {
        self.inner.mask.clone()
    }

    #[getter]
    fn fitted(&self) -> Vec<Vec<f64>> {
        self.inner.fitted.clone()
    }

    #[getter]
    fn deviance(&self) -> f64 {
        self.inner.deviance
    }

    #[getter]
    fn pct_deviance_explained(&self) -> f64 {
        self.inner.pct_deviance_explained
    }

    /// Option × covariate probability changes per unit covariate, at the means.
    #[pyo3(signature = (step = mnl::DEFAULT_MARGINAL_STEP))]
    fn marginal_effects(&self, step: f64) -> Vec<Vec<f64>> {
        mnl::marginal_effects(&self.inner, step)
    }

    /// Standardized residuals and flagged outliers against `panel`.
    fn residuals<'py>(&self, py: Python<'py>, panel: PyRef<'_, TransitionPanel>) -> PyResult<Bound<'py, PyAny>> {
        to_python(py, &mnl::residual_diagnostics(&self.inner, &panel.inner).map_err(err)?)
    }

    fn summary(&self) -> String {
        mnl::summary(&self.inner)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }
}

/// Fits the transition probabilities of one zone.
#[pyfunction]
#[pyo3(signature = (zone, config = None))]
fn fit_zone(zone: PyRef<'_, ZoneTable>, config: Option<PyRef<'_, EstimatorConfig>>) -> PyResult<TransitionEstimate> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    Ok(TransitionEstimate {
        inner: ei_estimator::fit_zone(&zone.inner, &cfg).map_err(err)?,
    })
}

/// Expected flows of a fitted zone, raked to its observed margins.
#[pyfunction]
#[pyo3(signature = (estimate, zone, config = None))]
fn flow_counts(
    estimate: PyRef<'_, TransitionEstimate>,
    zone: PyRef<'_, ZoneTable>,
    config: Option<PyRef<'_, EstimatorConfig>>,
) -> PyResult<FlowTable> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    Ok(FlowTable {
        inner: ei_estimator::flow_counts(&estimate.inner, &zone.inner, &cfg).map_err(err)?,
    })
}

/// Iterative proportional fitting of `seed` to row and column totals.
#[pyfunction]
#[pyo3(signature = (seed, rows, cols, tol = 1e-10, max_sweeps = 10_000))]
fn rake_to_margins(seed: Vec<Vec<f64>>, rows: Vec<f64>, cols: Vec<f64>, tol: f64, max_sweeps: usize) -> PyResult<Vec<Vec<f64>>> {
    let ncols = seed.first().map_or(0, Vec::len);
    if seed.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("seed rows differ in length"));
    }
    let m = DMatrix::from_fn(seed.len(), ncols, |i, j| seed[i][j]);
    let out = ei_estimator::rake_to_margins(&m, &rows, &cols, tol, max_sweeps).map_err(err)?;
    Ok(out.table.row_iter().map(|r| r.iter().copied().collect()).collect())
}

#[pymodule]
#[pyo3(name = "flowcast")]
fn flowcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FlowcastError", m.py().get_type::<FlowcastError>())?;
    m.add_class::<SynthSpec>()?;
    m.add_class::<SyntheticElection>()?;
    m.add_class::<ZoneTable>()?;
    m.add_class::<EstimatorConfig>()?;
    m.add_class::<TransitionEstimate>()?;
    m.add_class::<FlowTable>()?;
    m.add_class::<CovariateMatrix>()?;
    m.add_class::<TransitionPanel>()?;
    m.add_class::<MnlModel>()?;
    m.add_function(wrap_pyfunction!(fit_zone, m)?)?;
    m.add_function(wrap_pyfunction!(flow_counts, m)?)?;
    m.add_function(wrap_pyfunction!(rake_to_margins, m)?)?;
    Ok(())
}
