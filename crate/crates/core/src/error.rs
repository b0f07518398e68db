use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ingestion and validation
    #[error("missing column `{column}`")]
    MissingColumn { column: String },
    #[error("row {row}: negative count in column `{column}`")]
    NegativeCount { row: usize, column: String },
    #[error("row {row}: non-integer count `{value}` in column `{column}`")]
    NonIntegerCount {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: duplicate station `{station_id}`")]
    DuplicateStation { row: usize, station_id: String },
    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("label `{label}` has no entry in the party aggregation")]
    UnmappedLabel { label: String },
    #[error("invalid option set: {0}")]
    InvalidOptionSet(String),
    #[error("station `{station_id}` has a zero electorate")]
    ZeroElectorate { station_id: String },
    #[error("station `{station_id}`: electorates differ ({electorate1} vs {electorate2})")]
    ElectorateMismatch {
        station_id: String,
        electorate1: u64,
        electorate2: u64,
    },
    #[error("zone `{zone_id}` has {found} stations, at least {required} required")]
    MinStations {
        zone_id: String,
        found: usize,
        required: usize,
    },

    // estimation
    #[error("no convergence after {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("singular information matrix: {0}")]
    SingularInformation(String),
    #[error("option `{label}` has a zero total in every station")]
    DegenerateOption { label: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("covariance matrix is not positive semidefinite")]
    NonPsdCovariance,
    #[error("infeasible margins: {0}")]
    InfeasibleMargins(String),
    #[error("raking did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    // covariates
    #[error("zero variance in `{0}`")]
    ZeroVariance(String),
    #[error("perfect collinearity between `{0}` and `{1}`")]
    PerfectCollinearity(String, String),
    #[error("zero denominator at position {0}")]
    ZeroDenominator(usize),
    #[error("unknown zone `{0}`")]
    UnknownZone(String),
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    // multinomial models
    #[error("anchor option `{0}` not present in every flow table")]
    MissingAnchor(String),
    #[error("separation: coefficient for option `{option}` diverged (|beta| = {magnitude:.1})")]
    Separation { option: String, magnitude: f64 },
    #[error("rank-deficient design for option `{0}`")]
    RankDeficientDesign(String),
    #[error("invalid stepwise schedule: {0}")]
    InvalidSchedule(String),

    // volatility
    #[error("row `{0}` has a zero total")]
    ZeroRowTotal(String),
    #[error("abstention option `{0}` missing from the flow table")]
    MissingAbstention(String),
    #[error("option sets differ between flow tables")]
    OptionMismatch,

    // synthetic data
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("unknown transition cell ({zone}, {origin}, {destination})")]
    UnknownCell {
        zone: usize,
        origin: String,
        destination: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
