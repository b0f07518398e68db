//! Zone-level ecological inference of voter-transition probabilities.
//!
//! Within a zone every voter of origin `i` is assumed to move to destination
//! `j` with the same probability `p_ij`. For polling station `s` with origin
//! counts `n_s` the destination counts `y_s` then have mean `Σ_i n_si p_i` and
//! covariance `φ Σ_i n_si (diag(p_i) − p_i p_iᵀ)`. Dropping the last
//! destination (the counts of a station sum to a known total) gives a
//! non-singular normal approximation whose log-likelihood is maximised over
//! the row logits `θ_ij = log(p_ij / p_iJ)` by Fisher scoring. The
//! overdispersion `φ` is estimated afterwards from the Pearson statistic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::{option_contains, StationRecord, ZoneTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub max_iter: usize,
    pub tol_loglik: f64,
    pub tol_grad: f64,
    pub phi_floor: f64,
    pub rake_tol: f64,
    pub rake_max_sweeps: usize,
    /// Box constraint on every logit; keeps the likelihood bounded when a
    /// transition is (nearly) absent.
    pub theta_bound: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol_loglik: 1e-8,
            tol_grad: 1e-6,
            phi_floor: 1.0,
            rake_tol: 1e-6,
            rake_max_sweeps: 1000,
            theta_bound: 12.0,
        }
    }
}

/// Zone counts in floating point, ready for likelihood evaluation.
///
/// Origin counts of each station are rescaled to the station's
/// second-election total so that expected and observed totals agree.
#[derive(Debug, Clone)]
pub struct PreparedZone {
    pub origins: Vec<String>,
    pub destinations: Vec<String>,
    /// stations × origins
    pub n: DMatrix<f64>,
    /// stations × destinations
    pub y: DMatrix<f64>,
}

impl PreparedZone {
    pub fn from_zone(zone: &ZoneTable) -> Self {
        Self::from_stations(
            zone.options1.labels().to_vec(),
            zone.options2.labels().to_vec(),
            &zone.stations,
        )
    }

    pub fn from_stations(origins: Vec<String>, destinations: Vec<String>, stations: &[StationRecord]) -> Self {
        let (s_count, i_count, j_count) = (stations.len(), origins.len(), destinations.len());
        let mut n = DMatrix::zeros(s_count, i_count);
        let mut y = DMatrix::zeros(s_count, j_count);
        for (s, st) in stations.iter().enumerate() {
            let t1 = st.total1() as f64;
            let t2 = st.total2() as f64;
            let scale = if t1 > 0.0 { t2 / t1 } else { 0.0 };
            for (i, &c) in st.counts1.iter().enumerate() {
                n[(s, i)] = c as f64 * scale;
            }
            for (j, &c) in st.counts2.iter().enumerate() {
                y[(s, j)] = c as f64;
            }
        }
        Self {
            origins,
            destinations,
            n,
            y,
        }
    }

    pub fn from_matrices(
        origins: Vec<String>,
        destinations: Vec<String>,
        n: DMatrix<f64>,
        y: DMatrix<f64>,
    ) -> Result<Self> {
        if n.nrows() != y.nrows() {
            return Err(Error::DimensionMismatch {
                expected: n.nrows(),
                found: y.nrows(),
            });
        }
        if n.ncols() != origins.len() {
            return Err(Error::DimensionMismatch {
                expected: origins.len(),
                found: n.ncols(),
            });
        }
        if y.ncols() != destinations.len() {
            return Err(Error::DimensionMismatch {
                expected: destinations.len(),
                found: y.ncols(),
            });
        }
        Ok(Self {
            origins,
            destinations,
            n,
            y,
        })
    }

    pub fn n_stations(&self) -> usize {
        self.n.nrows()
    }

    pub fn n_origins(&self) -> usize {
        self.n.ncols()
    }

    pub fn n_destinations(&self) -> usize {
        self.y.ncols()
    }

    /// Number of free logits, `I·(J−1)`.
    pub fn n_params(&self) -> usize {
        self.n_origins() * (self.n_destinations() - 1)
    }

    pub fn origin_totals(&self) -> Vec<f64> {
        self.n.column_iter().map(|c| c.sum()).collect()
    }

    pub fn destination_totals(&self) -> Vec<f64> {
        self.y.column_iter().map(|c| c.sum()).collect()
    }
}

/// Row-stochastic matrix from row logits against the last destination.
pub fn probabilities_from_theta(theta: &[f64], n_origins: usize, n_destinations: usize) -> DMatrix<f64> {
    let m = n_destinations - 1;
    assert_eq!(theta.len(), n_origins * m, "theta length");
    let mut p = DMatrix::zeros(n_origins, n_destinations);
    for i in 0..n_origins {
        let row = &theta[i * m..(i + 1) * m];
        let max = row.iter().copied().fold(0.0f64, f64::max);
        let mut denom = (-max).exp();
        for &t in row {
            denom += (t - max).exp();
        }
        for (j, &t) in row.iter().enumerate() {
            p[(i, j)] = (t - max).exp() / denom;
        }
        p[(i, m)] = (-max).exp() / denom;
    }
    p
}

/// Row logits `log(p_ij / p_iJ)` of a row-stochastic matrix.
pub fn theta_from_probabilities(p: &DMatrix<f64>) -> Vec<f64> {
    let m = p.ncols() - 1;
    let mut theta = Vec::with_capacity(p.nrows() * m);
    for i in 0..p.nrows() {
        for j in 0..m {
            theta.push((p[(i, j)] / p[(i, m)]).ln());
        }
    }
    theta
}

struct Evaluation {
    loglik: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
    pearson: f64,
}

/// Station-level pieces of the normal approximation: residual, covariance
/// (unit dispersion) and its inverse, on the first `J−1` destinations.
struct StationMoments {
    resid: DVector<f64>,
    v: DMatrix<f64>,
}

fn station_moments(zone: &PreparedZone, s: usize, p: &DMatrix<f64>) -> StationMoments {
    let (i_count, m) = (zone.n_origins(), zone.n_destinations() - 1);
    let mut resid = DVector::zeros(m);
    let mut v = DMatrix::zeros(m, m);
    for k in 0..m {
        resid[k] = zone.y[(s, k)];
    }
    for i in 0..i_count {
        let n_si = zone.n[(s, i)];
        if n_si == 0.0 {
            continue;
        }
        for k in 0..m {
            let pk = p[(i, k)];
            resid[k] -= n_si * pk;
            v[(k, k)] += n_si * pk;
            for l in 0..m {
                v[(k, l)] -= n_si * pk * p[(i, l)];
            }
        }
    }
    StationMoments { resid, v }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Need {
    Loglik,
    Score,
    Information,
}

fn evaluate(zone: &PreparedZone, theta: &[f64], need: Need) -> Result<Evaluation> {
    let (i_count, j_count) = (zone.n_origins(), zone.n_destinations());
    let m = j_count - 1;
    let n_par = i_count * m;
    let p = probabilities_from_theta(theta, i_count, j_count);
    let log_2pi = (2.0 * std::f64::consts::PI).ln();

    let mut loglik = 0.0;
    let mut pearson = 0.0;
    let mut grad = DVector::zeros(n_par);
    let mut info = DMatrix::zeros(n_par, n_par);
    // per-parameter derivative of the mean and of V⁻¹·dV
    let mut d_mu = DMatrix::<f64>::zeros(m, n_par);
    let mut m_mats: Vec<DMatrix<f64>> = vec![DMatrix::zeros(m, m); n_par];
    let mut active = vec![false; n_par];
    let mut dp = vec![0.0; m];
    let mut dv = DMatrix::<f64>::zeros(m, m);
    let mut dv_w = DVector::<f64>::zeros(m);
    // rows: vec(V⁻¹·dV_a); columns: vec of its transpose, so that
    // flat · flat_t holds tr(V⁻¹dV_a V⁻¹dV_b)
    let mut flat = DMatrix::<f64>::zeros(if need == Need::Information { n_par } else { 0 }, m * m);
    let mut flat_t = DMatrix::<f64>::zeros(m * m, flat.nrows());

    for s in 0..zone.n_stations() {
        let StationMoments { resid, v } = station_moments(zone, s, &p);
        let chol = v.clone().cholesky().ok_or_else(|| {
            Error::SingularInformation(format!("station {s}: covariance not positive definite"))
        })?;
        let v_inv = chol.inverse();
        let w = &v_inv * &resid;
        let quad = resid.dot(&w);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        loglik += -0.5 * (log_det + quad + m as f64 * log_2pi);
        pearson += quad;
        if need == Need::Loglik {
            continue;
        }

        d_mu.fill(0.0);
        for i in 0..i_count {
            let n_si = zone.n[(s, i)];
            for j in 0..m {
                let a = i * m + j;
                active[a] = n_si > 0.0;
                if !active[a] {
                    continue;
                }
                // dp_k = p_ik (δ_kj − p_ij)
                for (k, d) in dp.iter_mut().enumerate() {
                    *d = p[(i, k)] * (if k == j { 1.0 } else { 0.0 } - p[(i, j)]);
                }
                for k in 0..m {
                    d_mu[(k, a)] = n_si * dp[k];
                    for l in 0..m {
                        dv[(k, l)] = -n_si * (dp[k] * p[(i, l)] + p[(i, k)] * dp[l]);
                    }
                    dv[(k, k)] += n_si * dp[k];
                }
                dv_w.gemv(1.0, &dv, &w, 0.0);
                m_mats[a].gemm(1.0, &v_inv, &dv, 0.0);
                grad[a] += d_mu.column(a).dot(&w) + 0.5 * w.dot(&dv_w) - 0.5 * m_mats[a].trace();
            }
        }
        if need == Need::Information {
            let vd = &v_inv * &d_mu;
            info.gemm_tr(1.0, &d_mu, &vd, 1.0);
            for a in 0..n_par {
                let mat = &m_mats[a];
                for k in 0..m {
                    for l in 0..m {
                        let (x, xt) = if active[a] { (mat[(k, l)], mat[(l, k)]) } else { (0.0, 0.0) };
                        flat[(a, l * m + k)] = x;
                        flat_t[(l * m + k, a)] = xt;
                    }
                }
            }
            info.gemm(0.5, &flat, &flat_t, 1.0);
        }
    }
    if need == Need::Information {
        info = (&info + info.transpose()) * 0.5;
    }
    Ok(Evaluation {
        loglik,
        grad,
        info,
        pearson,
    })
}

/// Normal-approximation log-likelihood at unit dispersion.
pub fn asymptotic_loglik(zone: &PreparedZone, theta: &[f64]) -> Result<f64> {
    Ok(evaluate(zone, theta, Need::Loglik)?.loglik)
}

/// Analytic gradient of [`asymptotic_loglik`] with respect to the row logits.
pub fn asymptotic_score(zone: &PreparedZone, theta: &[f64]) -> Result<Vec<f64>> {
    Ok(evaluate(zone, theta, Need::Score)?.grad.iter().copied().collect())
}

/// Expected information of the normal approximation at unit dispersion.
pub fn expected_information(zone: &PreparedZone, theta: &[f64]) -> Result<DMatrix<f64>> {
    Ok(evaluate(zone, theta, Need::Information)?.info)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationFit {
    pub station_id: String,
    pub expected: Vec<f64>,
    pub pearson_residuals: Vec<f64>,
    pub chi_square: f64,
    pub df: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub stations: Vec<StationFit>,
    pub pearson_chi2: f64,
    pub residual_df: i64,
    pub mean_station_chi2: f64,
    pub pseudo_r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionEstimate {
    pub zone_id: String,
    pub origins: Vec<String>,
    pub destinations: Vec<String>,
    /// origins × destinations transition probabilities
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    /// origins × (destinations − 1) logits against the last destination
    pub theta: Vec<Vec<f64>>,
    /// covariance of the row-major vectorised `theta`
    pub cov_theta: Vec<Vec<f64>>,
    pub phi: f64,
    #[serde(rename = "se_P")]
    pub se_p: Vec<Vec<f64>>,
    pub loglik: f64,
    pub iterations: usize,
    /// Logits held at the box constraint at convergence.
    pub bounded_params: Vec<usize>,
    pub fit: FitReport,
}

impl TransitionEstimate {
    pub fn p_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.p)
    }

    pub fn theta_vec(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.cov_theta)
    }
}

pub(crate) fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c])
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn starting_theta(zone: &PreparedZone) -> Vec<f64> {
    let (i_count, m) = (zone.n_origins(), zone.n_destinations() - 1);
    let mut theta = vec![0.0; i_count * m];
    for (i, origin) in zone.origins.iter().enumerate() {
        let Some(j) = zone
            .destinations
            .iter()
            .position(|d| d == origin || option_contains(d, origin))
        else {
            continue;
        };
        if j < m {
            theta[i * m + j] = 1.0;
        } else {
            // loyalty on the reference destination
            theta[i * m..(i + 1) * m].iter_mut().for_each(|t| *t = -1.0);
        }
    }
    theta
}

fn matrix_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&v| v > max * 1e-10).count()
}

fn check_zone(zone: &PreparedZone) -> Result<()> {
    if zone.n_stations() < 2 {
        return Err(Error::MinStations {
            zone_id: String::new(),
            found: zone.n_stations(),
            required: 2,
        });
    }
    if zone.n_origins() < 1 || zone.n_destinations() < 2 {
        return Err(Error::InvalidOptionSet(
            "at least one origin and two destinations required".into(),
        ));
    }
    for (i, total) in zone.origin_totals().into_iter().enumerate() {
        if total <= 0.0 {
            return Err(Error::DegenerateOption {
                label: zone.origins[i].clone(),
            });
        }
    }
    for (j, total) in zone.destination_totals().into_iter().enumerate() {
        if total <= 0.0 {
            return Err(Error::DegenerateOption {
                label: zone.destinations[j].clone(),
            });
        }
    }
    // origin compositions must span all origins
    let mut shares = zone.n.clone();
    for mut row in shares.row_iter_mut() {
        let t = row.sum();
        if t > 0.0 {
            row /= t;
        }
    }
    if matrix_rank(&shares) < zone.n_origins() {
        return Err(Error::SingularInformation(
            "origin compositions are collinear across stations".into(),
        ));
    }
    Ok(())
}

/// Solves `a x = b` for a symmetric positive definite `a`.
fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

fn subset(a: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| a[(idx[r], idx[c])])
}

/// Fits the transition model of one zone.
pub fn fit_zone(zone: &ZoneTable, cfg: &EstimatorConfig) -> Result<TransitionEstimate> {
    let prepared = PreparedZone::from_zone(zone);
    let ids: Vec<String> = zone.stations.iter().map(|s| s.station_id.clone()).collect();
    fit_prepared(&zone.zone_id, &prepared, &ids, cfg).map_err(|e| match e {
        Error::MinStations { found, required, .. } => Error::MinStations {
            zone_id: zone.zone_id.clone(),
            found,
            required,
        },
        other => other,
    })
}

pub fn fit_prepared(
    zone_id: &str,
    zone: &PreparedZone,
    station_ids: &[String],
    cfg: &EstimatorConfig,
) -> Result<TransitionEstimate> {
    check_zone(zone)?;
    let (i_count, j_count) = (zone.n_origins(), zone.n_destinations());
    let n_par = zone.n_params();
    let bound = cfg.theta_bound;

    let mut theta = starting_theta(zone);
    let mut current = evaluate(zone, &theta, Need::Information)?;
    let mut previous_ll = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut pinned = Vec::new();

    while iterations < cfg.max_iter {
        // logits on the box with an outward gradient stay fixed
        pinned.clear();
        let mut free = Vec::with_capacity(n_par);
        for a in 0..n_par {
            let g = current.grad[a];
            if (theta[a] >= bound && g > 0.0) || (theta[a] <= -bound && g < 0.0) {
                pinned.push(a);
            } else {
                free.push(a);
            }
        }
        // a bounded logit whose scoring step points outward is pinned too
        let (grad_f, step_f) = loop {
            let info_ff = subset(&current.info, &free);
            let grad_f = DVector::from_iterator(free.len(), free.iter().map(|&a| current.grad[a]));
            let step_f = spd_solve(&info_ff, &grad_f)
                .ok_or_else(|| Error::SingularInformation("Fisher information is not positive definite".into()))?;
            let outward: Vec<usize> = free
                .iter()
                .zip(step_f.iter())
                .filter(|(&a, &d)| (theta[a] >= bound && d > 0.0) || (theta[a] <= -bound && d < 0.0))
                .map(|(&a, _)| a)
                .collect();
            if outward.is_empty() {
                break (grad_f, step_f);
            }
            free.retain(|a| !outward.contains(a));
            pinned.extend(outward);
            pinned.sort_unstable();
        };
        let scaled_grad = grad_f.dot(&step_f).max(0.0).sqrt();
        let rel_change = (current.loglik - previous_ll).abs() / current.loglik.abs().max(1.0);
        if scaled_grad < cfg.tol_grad && rel_change < cfg.tol_loglik {
            converged = true;
            break;
        }
        if scaled_grad < cfg.tol_grad * 1e-3 {
            // already at the optimum to working precision
            converged = true;
            break;
        }

        iterations += 1;
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = theta.clone();
            for (k, &a) in free.iter().enumerate() {
                trial[a] = (theta[a] + lambda * step_f[k]).clamp(-bound, bound);
            }
            if let Ok(eval) = evaluate(zone, &trial, Need::Loglik) {
                if eval.loglik >= current.loglik {
                    accepted = Some(trial);
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some(next) = accepted else {
            // no ascent direction left at working precision
            converged = scaled_grad < cfg.tol_grad.sqrt();
            break;
        };
        theta = next;
        previous_ll = current.loglik;
        current = evaluate(zone, &theta, Need::Information)?;
    }
    if !converged {
        return Err(Error::NotConverged { iterations });
    }

    let residual_df = (zone.n_stations() * (j_count - 1)) as i64 - n_par as i64;
    let phi = if residual_df > 0 {
        (current.pearson / residual_df as f64).max(cfg.phi_floor)
    } else {
        cfg.phi_floor
    };
    let cov = current
        .info
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularInformation("Fisher information is not positive definite".into()))?
        .inverse()
        * phi;
    let cov = (&cov + cov.transpose()) * 0.5;
    let p = probabilities_from_theta(&theta, i_count, j_count);
    let se = standard_errors_from(&p, &cov)?;
    let m = j_count - 1;
    let mut est = TransitionEstimate {
        zone_id: zone_id.to_string(),
        origins: zone.origins.clone(),
        destinations: zone.destinations.clone(),
        p: to_rows(&p),
        theta: theta.chunks(m).map(<[f64]>::to_vec).collect(),
        cov_theta: to_rows(&cov),
        phi,
        se_p: to_rows(&se),
        loglik: current.loglik,
        iterations,
        bounded_params: pinned,
        fit: FitReport {
            stations: Vec::new(),
            pearson_chi2: 0.0,
            residual_df: 0,
            mean_station_chi2: 0.0,
            pseudo_r2: 0.0,
        },
    };
    est.fit = goodness_of_fit_prepared(&est, zone, station_ids);
    Ok(est)
}

/// Expected destination counts of one station, `ŷ_j = Σ_i n_i p_ij`.
pub fn predict_station(est: &TransitionEstimate, station: &StationRecord) -> Result<Vec<f64>> {
    let counts: Vec<f64> = station.counts1.iter().map(|&c| c as f64).collect();
    predict_counts(est, &counts)
}

pub fn predict_counts(est: &TransitionEstimate, counts1: &[f64]) -> Result<Vec<f64>> {
    if counts1.len() != est.p.len() {
        return Err(Error::DimensionMismatch {
            expected: est.p.len(),
            found: counts1.len(),
        });
    }
    let j_count = est.destinations.len();
    let mut out = vec![0.0; j_count];
    for (row, &n) in est.p.iter().zip(counts1) {
        for (o, &p) in out.iter_mut().zip(row) {
            *o += n * p;
        }
    }
    Ok(out)
}

/// Pearson residuals, station chi-squares and the zone pseudo-R².
pub fn goodness_of_fit(est: &TransitionEstimate, zone: &ZoneTable) -> FitReport {
    let prepared = PreparedZone::from_zone(zone);
    let ids: Vec<String> = zone.stations.iter().map(|s| s.station_id.clone()).collect();
    goodness_of_fit_prepared(est, &prepared, &ids)
}

pub fn goodness_of_fit_prepared(est: &TransitionEstimate, zone: &PreparedZone, station_ids: &[String]) -> FitReport {
    let p = est.p_matrix();
    let j_count = zone.n_destinations();
    let m = j_count - 1;
    let s_count = zone.n_stations();
    let col_means: Vec<f64> = zone
        .y
        .column_iter()
        .map(|c| c.sum() / s_count as f64)
        .collect();
    let mut stations = Vec::with_capacity(s_count);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut pearson = 0.0;
    for s in 0..s_count {
        let n_row: Vec<f64> = zone.n.row(s).iter().copied().collect();
        let expected = predict_counts(est, &n_row).expect("dimensions checked by construction");
        let mut residuals = Vec::with_capacity(j_count);
        for j in 0..j_count {
            let var: f64 = est.phi * (0..zone.n_origins()).map(|i| n_row[i] * p[(i, j)] * (1.0 - p[(i, j)])).sum::<f64>();
            let r = zone.y[(s, j)] - expected[j];
            residuals.push(if var > 0.0 { r / var.sqrt() } else { 0.0 });
            ss_res += r * r;
            ss_tot += (zone.y[(s, j)] - col_means[j]).powi(2);
        }
        let moments = station_moments(zone, s, &p);
        let chi = match (moments.v * est.phi).cholesky() {
            Some(c) => moments.resid.dot(&c.solve(&moments.resid)),
            None => 0.0,
        };
        pearson += chi;
        stations.push(StationFit {
            station_id: station_ids.get(s).cloned().unwrap_or_else(|| s.to_string()),
            expected,
            pearson_residuals: residuals,
            chi_square: chi,
            df: m,
        });
    }
    let pseudo_r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    FitReport {
        stations,
        pearson_chi2: pearson,
        residual_df: (s_count * m) as i64 - (zone.n_origins() * m) as i64,
        mean_station_chi2: pearson / s_count as f64,
        pseudo_r2,
    }
}

/// Jacobian of the row-major vectorised `P` with respect to the vectorised logits.
pub fn probability_jacobian(p: &DMatrix<f64>) -> DMatrix<f64> {
    let (i_count, j_count) = (p.nrows(), p.ncols());
    let m = j_count - 1;
    let mut jac = DMatrix::zeros(i_count * j_count, i_count * m);
    for i in 0..i_count {
        for j in 0..j_count {
            for k in 0..m {
                let delta = if j == k { 1.0 } else { 0.0 };
                jac[(i * j_count + j, i * m + k)] = p[(i, j)] * (delta - p[(i, k)]);
            }
        }
    }
    jac
}

fn standard_errors_from(p: &DMatrix<f64>, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let jac = probability_jacobian(p);
    if cov.nrows() != jac.ncols() || cov.ncols() != jac.ncols() {
        return Err(Error::DimensionMismatch {
            expected: jac.ncols(),
            found: cov.nrows(),
        });
    }
    let scale = cov.diagonal().iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut se = DMatrix::zeros(p.nrows(), p.ncols());
    for r in 0..jac.nrows() {
        let g = jac.row(r).transpose();
        let var = g.dot(&(cov * &g));
        if var < -1e-10 * scale {
            return Err(Error::NonPsdCovariance);
        }
        se[(r / p.ncols(), r % p.ncols())] = var.max(0.0).sqrt();
    }
    Ok(se)
}

/// Delta-method standard errors of the transition probabilities.
pub fn standard_errors(est: &TransitionEstimate) -> Result<DMatrix<f64>> {
    standard_errors_from(&est.p_matrix(), &est.cov_matrix())
}

/// Origin × destination expected vote counts with observed margins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTable {
    pub zone_id: String,
    pub origins: Vec<String>,
    pub destinations: Vec<String>,
    pub counts: Vec<Vec<f64>>,
    pub row_margins: Vec<f64>,
    pub col_margins: Vec<f64>,
}

impl FlowTable {
    /// Table whose margins are its own row and column sums.
    pub fn from_counts(
        zone_id: impl Into<String>,
        origins: Vec<String>,
        destinations: Vec<String>,
        counts: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if counts.len() != origins.len() {
            return Err(Error::DimensionMismatch {
                expected: origins.len(),
                found: counts.len(),
            });
        }
        for row in &counts {
            if row.len() != destinations.len() {
                return Err(Error::DimensionMismatch {
                    expected: destinations.len(),
                    found: row.len(),
                });
            }
        }
        let row_margins = counts.iter().map(|r| r.iter().sum()).collect();
        let col_margins = (0..destinations.len())
            .map(|j| counts.iter().map(|r| r[j]).sum())
            .collect();
        Ok(Self {
            zone_id: zone_id.into(),
            origins,
            destinations,
            counts,
            row_margins,
            col_margins,
        })
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        to_matrix(&self.counts)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.destinations.len())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    pub fn transpose(&self) -> Self {
        let m = self.matrix().transpose();
        Self {
            zone_id: self.zone_id.clone(),
            origins: self.destinations.clone(),
            destinations: self.origins.clone(),
            counts: to_rows(&m),
            row_margins: self.col_margins.clone(),
            col_margins: self.row_margins.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RakeOutcome {
    pub table: DMatrix<f64>,
    pub sweeps: usize,
}

fn margins_match(f: &DMatrix<f64>, rows: &[f64], cols: &[f64], tol: f64) -> bool {
    let close = |a: f64, t: f64| (a - t).abs() <= tol * t.abs().max(f64::MIN_POSITIVE);
    f.row_iter().zip(rows).all(|(r, &t)| close(r.sum(), t))
        && f.column_iter().zip(cols).all(|(c, &t)| close(c.sum(), t))
}

/// Iterative proportional fitting of a non-negative seed table to row and
/// column targets. Zeros of the seed stay zero and cross-product ratios of
/// the seed are preserved.
pub fn rake_to_margins(
    seed: &DMatrix<f64>,
    rows: &[f64],
    cols: &[f64],
    tol: f64,
    max_sweeps: usize,
) -> Result<RakeOutcome> {
    if rows.len() != seed.nrows() {
        return Err(Error::DimensionMismatch {
            expected: seed.nrows(),
            found: rows.len(),
        });
    }
    if cols.len() != seed.ncols() {
        return Err(Error::DimensionMismatch {
            expected: seed.ncols(),
            found: cols.len(),
        });
    }
    if seed.iter().chain(rows).chain(cols).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InfeasibleMargins("negative or non-finite input".into()));
    }
    let (row_total, col_total): (f64, f64) = (rows.iter().sum(), cols.iter().sum());
    if (row_total - col_total).abs() > 1e-9 * row_total.max(col_total).max(1.0) {
        return Err(Error::InfeasibleMargins(format!(
            "row total {row_total} differs from column total {col_total}"
        )));
    }
    for (i, r) in seed.row_iter().enumerate() {
        if r.sum() == 0.0 && rows[i] > 0.0 {
            return Err(Error::InfeasibleMargins(format!("row {i} is zero but its target is positive")));
        }
    }
    for (j, c) in seed.column_iter().enumerate() {
        if c.sum() == 0.0 && cols[j] > 0.0 {
            return Err(Error::InfeasibleMargins(format!("column {j} is zero but its target is positive")));
        }
    }

    let mut f = seed.clone();
    let mut sweeps = 0;
    while !margins_match(&f, rows, cols, tol) {
        if sweeps == max_sweeps {
            return Err(Error::NoConvergence { sweeps });
        }
        for (i, &target) in rows.iter().enumerate() {
            let sum = f.row(i).sum();
            if sum > 0.0 {
                f.row_mut(i).scale_mut(target / sum);
            }
        }
        for (j, &target) in cols.iter().enumerate() {
            let sum = f.column(j).sum();
            if sum > 0.0 {
                f.column_mut(j).scale_mut(target / sum);
            }
        }
        sweeps += 1;
    }
    Ok(RakeOutcome { table: f, sweeps })
}

/// Expected origin→destination vote counts of a zone, raked to its margins.
pub fn flow_counts(est: &TransitionEstimate, zone: &ZoneTable, cfg: &EstimatorConfig) -> Result<FlowTable> {
    flow_counts_prepared(est, &PreparedZone::from_zone(zone), cfg)
}

pub fn flow_counts_prepared(est: &TransitionEstimate, zone: &PreparedZone, cfg: &EstimatorConfig) -> Result<FlowTable> {
    let rows = zone.origin_totals();
    let cols = zone.destination_totals();
    let p = est.p_matrix();
    if p.nrows() != rows.len() || p.ncols() != cols.len() {
        return Err(Error::DimensionMismatch {
            expected: p.nrows() * p.ncols(),
            found: rows.len() * cols.len(),
        });
    }
    let seed = DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| rows[i] * p[(i, j)]);
    let raked = rake_to_margins(&seed, &rows, &cols, cfg.rake_tol, cfg.rake_max_sweeps)?;
    Ok(FlowTable {
        zone_id: est.zone_id.clone(),
        origins: est.origins.clone(),
        destinations: est.destinations.clone(),
        counts: to_rows(&raked.table),
        row_margins: rows,
        col_margins: cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::OptionSet;
    use approx::assert_abs_diff_eq;

    fn labels(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn zone_from(n: Vec<Vec<u64>>, y: Vec<Vec<u64>>) -> ZoneTable {
        let stations = n
            .into_iter()
            .zip(y)
            .enumerate()
            .map(|(s, (c1, c2))| StationRecord {
                station_id: format!("s{s}"),
                zone_id: "z".into(),
                electorate1: c1.iter().sum(),
                electorate2: c2.iter().sum(),
                counts1: c1,
                counts2: c2,
            })
            .collect::<Vec<_>>();
        let i = stations[0].counts1.len();
        let j = stations[0].counts2.len();
        ZoneTable::new(
            "z",
            OptionSet::from_labels(labels("o", i)).unwrap(),
            OptionSet::from_labels(labels("d", j)).unwrap(),
            stations,
        )
        .unwrap()
    }

    #[test]
    fn logits_round_trip() {
        let theta = vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.5];
        let p = probabilities_from_theta(&theta, 2, 4);
        for row in p.row_iter() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-14);
        }
        let back = theta_from_probabilities(&p);
        for (a, b) in theta.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_origin_matches_column_shares() {
        let y = vec![
            vec![50, 30, 20],
            vec![40, 35, 25],
            vec![70, 20, 30],
            vec![33, 33, 34],
            vec![90, 50, 40],
        ];
        let n = DMatrix::from_fn(5, 1, |s, _| y[s].iter().sum::<u64>() as f64);
        let ym = DMatrix::from_fn(5, 3, |s, j| y[s][j] as f64);
        let zone = PreparedZone::from_matrices(vec!["o".into()], labels("d", 3), n, ym).unwrap();
        let est = fit_prepared("z", &zone, &[], &EstimatorConfig::default()).unwrap();
        let total: u64 = y.iter().flatten().sum();
        for j in 0..3 {
            let share = y.iter().map(|r| r[j]).sum::<u64>() as f64 / total as f64;
            // the variance terms of the normal likelihood move the maximum by O(√S/N)
            assert_abs_diff_eq!(est.p[0][j], share, epsilon = 2e-3);
        }
    }

    #[test]
    fn identical_origin_rows_are_singular() {
        let zone = zone_from(
            vec![vec![60, 40], vec![60, 40]],
            vec![vec![50, 50], vec![55, 45]],
        );
        assert!(matches!(
            fit_zone(&zone, &EstimatorConfig::default()),
            Err(Error::SingularInformation(_))
        ));
    }

    #[test]
    fn zero_destination_is_degenerate() {
        let zone = zone_from(
            vec![vec![60, 40], vec![30, 70], vec![50, 50]],
            vec![vec![50, 50, 0], vec![55, 45, 0], vec![40, 60, 0]],
        );
        assert!(matches!(
            fit_zone(&zone, &EstimatorConfig::default()),
            Err(Error::DegenerateOption { label }) if label == "d2"
        ));
    }

    #[test]
    fn perfect_loyalty_recovers_identity() {
        let n = vec![
            vec![300, 200, 100],
            vec![100, 400, 200],
            vec![250, 150, 300],
            vec![500, 100, 100],
            vec![120, 330, 260],
            vec![200, 200, 200],
        ];
        let zone = zone_from(n.clone(), n);
        let est = fit_zone(&zone, &EstimatorConfig::default()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((est.p[i][j] - target).abs() < 0.01, "p[{i}][{j}] = {}", est.p[i][j]);
            }
        }
    }

    fn identity_estimate(i: usize) -> TransitionEstimate {
        let p = DMatrix::<f64>::identity(i, i);
        TransitionEstimate {
            zone_id: "z".into(),
            origins: labels("o", i),
            destinations: labels("d", i),
            p: to_rows(&p),
            theta: vec![vec![0.0; i - 1]; i],
            cov_theta: vec![vec![0.0; i * (i - 1)]; i * (i - 1)],
            phi: 1.0,
            se_p: vec![vec![0.0; i]; i],
            loglik: 0.0,
            iterations: 0,
            bounded_params: vec![],
            fit: FitReport {
                stations: vec![],
                pearson_chi2: 0.0,
                residual_df: 0,
                mean_station_chi2: 0.0,
                pseudo_r2: 1.0,
            },
        }
    }

    #[test]
    fn prediction_with_identity_and_uniform() {
        let mut est = identity_estimate(3);
        let station = StationRecord {
            station_id: "s".into(),
            zone_id: "z".into(),
            counts1: vec![10, 20, 30],
            counts2: vec![10, 20, 30],
            electorate1: 60,
            electorate2: 60,
        };
        assert_eq!(predict_station(&est, &station).unwrap(), vec![10.0, 20.0, 30.0]);
        est.p = vec![vec![1.0 / 3.0; 3]; 3];
        for v in predict_station(&est, &station).unwrap() {
            assert_abs_diff_eq!(v, 20.0, epsilon = 1e-12);
        }
        let bad = StationRecord {
            counts1: vec![1, 2],
            ..station
        };
        assert!(matches!(
            predict_station(&est, &bad),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exact_fit_has_zero_residuals() {
        let p = DMatrix::from_row_slice(2, 3, &[0.5, 0.3, 0.2, 0.1, 0.6, 0.3]);
        let n = vec![vec![100u64, 200], vec![300, 100], vec![200, 200]];
        // y = n P exactly
        let y: Vec<Vec<u64>> = n
            .iter()
            .map(|r| {
                (0..3)
                    .map(|j| (r[0] as f64 * p[(0, j)] + r[1] as f64 * p[(1, j)]).round() as u64)
                    .collect()
            })
            .collect();
        let zone = zone_from(n, y);
        let mut est = identity_estimate(2);
        est.destinations = labels("d", 3);
        est.p = to_rows(&p);
        let report = goodness_of_fit(&est, &zone);
        assert_abs_diff_eq!(report.pseudo_r2, 1.0, epsilon = 1e-12);
        for s in &report.stations {
            assert!(s.pearson_residuals.iter().all(|r| r.abs() < 1e-9));
            assert!(s.chi_square.abs() < 1e-9);
        }
    }

    #[test]
    fn two_option_delta_method() {
        let v = 0.04;
        let theta: f64 = 0.7;
        let p = 1.0 / (1.0 + (-theta).exp());
        let mut est = identity_estimate(2);
        est.origins = vec!["o".into()];
        est.p = vec![vec![p, 1.0 - p]];
        est.theta = vec![vec![theta]];
        est.cov_theta = vec![vec![v]];
        let se = standard_errors(&est).unwrap();
        assert_abs_diff_eq!(se[(0, 0)], p * (1.0 - p) * v.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(se[(0, 1)], p * (1.0 - p) * v.sqrt(), epsilon = 1e-14);

        est.cov_theta = vec![vec![0.0]];
        assert_eq!(standard_errors(&est).unwrap()[(0, 0)], 0.0);
        est.cov_theta = vec![vec![-1.0]];
        assert!(matches!(standard_errors(&est), Err(Error::NonPsdCovariance)));
    }

    #[test]
    fn raking_examples() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let out = rake_to_margins(&f, &[3.0, 1.0], &[2.0, 2.0], 1e-10, 1000).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.5, 1.5, 0.5, 0.5]);
        assert!((out.table - expected).abs().max() < 1e-12);

        let out = rake_to_margins(&f, &[2.0, 2.0], &[2.0, 2.0], 1e-10, 1000).unwrap();
        assert_eq!(out.sweeps, 0);
        assert_eq!(out.table, f);

        let f = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let out = rake_to_margins(&f, &[10.0, 10.0], &[10.0, 10.0], 1e-10, 1000).unwrap();
        let t = out.table;
        assert_abs_diff_eq!(t[(0, 0)] * t[(1, 1)] / (t[(0, 1)] * t[(1, 0)]), 4.0, epsilon = 1e-6);
    }

    #[test]
    fn raking_rejects_infeasible() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(
            rake_to_margins(&f, &[1.0, 1.0], &[1.0, 1.0], 1e-6, 100),
            Err(Error::InfeasibleMargins(_))
        ));
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            rake_to_margins(&f, &[1.0, 1.0], &[1.0, 2.0], 1e-6, 100),
            Err(Error::InfeasibleMargins(_))
        ));
        // block-diagonal seed cannot reach crossed margins
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            rake_to_margins(&f, &[2.0, 1.0], &[1.0, 2.0], 1e-6, 50),
            Err(Error::NoConvergence { sweeps: 50 })
        ));
    }

    #[test]
    fn identity_flows_are_diagonal() {
        let n = vec![vec![30u64, 70], vec![60, 40], vec![10, 90]];
        let zone = zone_from(n.clone(), n);
        let est = identity_estimate(2);
        let flows = flow_counts(&est, &zone, &EstimatorConfig::default()).unwrap();
        assert_eq!(flows.counts, vec![vec![100.0, 0.0], vec![0.0, 200.0]]);
    }
}
