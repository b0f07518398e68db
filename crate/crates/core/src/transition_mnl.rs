//! Multinomial logit models of zone-level transition counts.
//!
//! For a fixed anchor option, each zone contributes a vector of (real-valued)
//! counts over the other election's options. Log-odds against a reference
//! option are linear in mean-centered zone covariates; coefficients can be
//! switched off cell by cell through an inclusion mask.

use std::fmt::Write as _;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::covariate_lab::{mean, CovariateMatrix, Transform};
use crate::data_model::option_contains;
use crate::ei_estimator::FlowTable;
use crate::error::{Error, Result};

pub const DEFAULT_SCHEDULE: [f64; 2] = [0.5, 1.0];
pub const DEFAULT_SIGNIFICANCE: [f64; 2] = [0.01, 0.08];
pub const DEFAULT_MARGINAL_STEP: f64 = 1e-5;
pub const SEPARATION_THRESHOLD: f64 = 30.0;
pub const OUTLIER_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Where the anchor origin's voters went.
    Outgoing,
    /// Where the anchor destination's voters came from.
    Incoming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionCountPanel {
    pub direction: Direction,
    pub anchor: String,
    pub zone_ids: Vec<String>,
    pub options: Vec<String>,
    /// Zone × option counts.
    pub counts: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
    /// Zone × option standard errors of the counts.
    pub count_se: Vec<Vec<f64>>,
}

impl TransitionCountPanel {
    pub fn n_zones(&self) -> usize {
        self.zone_ids.len()
    }

    pub fn n_options(&self) -> usize {
        self.options.len()
    }

    /// Sum the columns of each group into one option named by the group key.
    /// Standard errors combine in quadrature. Ungrouped options are kept.
    pub fn merge_options(&self, groups: &IndexMap<String, Vec<String>>) -> Result<Self> {
        let mut owner: Vec<Option<usize>> = vec![None; self.options.len()];
        for (g, members) in groups.values().enumerate() {
            for m in members {
                let j = self
                    .options
                    .iter()
                    .position(|o| o == m)
                    .ok_or_else(|| Error::UnmappedLabel { label: m.clone() })?;
                if owner[j].is_some() {
                    return Err(Error::InvalidOptionSet(format!("`{m}` appears in two groups")));
                }
                owner[j] = Some(g);
            }
        }
        // output slots in order of first appearance
        let mut labels: Vec<String> = Vec::new();
        let mut slot_of: Vec<usize> = Vec::with_capacity(self.options.len());
        let mut group_slot: Vec<Option<usize>> = vec![None; groups.len()];
        let group_names: Vec<&String> = groups.keys().collect();
        for (j, o) in self.options.iter().enumerate() {
            match owner[j] {
                Some(g) => {
                    let slot = *group_slot[g].get_or_insert_with(|| {
                        labels.push(group_names[g].clone());
                        labels.len() - 1
                    });
                    slot_of.push(slot);
                }
                None => {
                    labels.push(o.clone());
                    slot_of.push(labels.len() - 1);
                }
            }
        }
        let k = labels.len();
        let mut counts = vec![vec![0.0; k]; self.n_zones()];
        let mut var = vec![vec![0.0; k]; self.n_zones()];
        for z in 0..self.n_zones() {
            for j in 0..self.options.len() {
                counts[z][slot_of[j]] += self.counts[z][j];
                var[z][slot_of[j]] += self.count_se[z][j].powi(2);
            }
        }
        Ok(Self {
            direction: self.direction,
            anchor: self.anchor.clone(),
            zone_ids: self.zone_ids.clone(),
            options: labels,
            counts,
            totals: self.totals.clone(),
            count_se: var.into_iter().map(|r| r.into_iter().map(f64::sqrt).collect()).collect(),
        })
    }
}

/// Panel of anchor rows (outgoing) or columns (incoming), without count errors.
pub fn build_panel(flows: &[FlowTable], anchor: &str, direction: Direction) -> Result<TransitionCountPanel> {
    build_panel_inner(flows, None, anchor, direction)
}

/// As [`build_panel`], with count standard errors taken as the probability
/// standard errors (origin × destination, one matrix per flow table) scaled
/// by each table's origin margins.
pub fn build_panel_with_se(
    flows: &[FlowTable],
    se_p: &[Vec<Vec<f64>>],
    anchor: &str,
    direction: Direction,
) -> Result<TransitionCountPanel> {
    if se_p.len() != flows.len() {
        return Err(Error::DimensionMismatch {
            expected: flows.len(),
            found: se_p.len(),
        });
    }
    build_panel_inner(flows, Some(se_p), anchor, direction)
}

fn build_panel_inner(
    flows: &[FlowTable],
    se_p: Option<&[Vec<Vec<f64>>]>,
    anchor: &str,
    direction: Direction,
) -> Result<TransitionCountPanel> {
    let first = flows.first().ok_or_else(|| Error::MissingAnchor(anchor.to_string()))?;
    let options = match direction {
        Direction::Outgoing => first.destinations.clone(),
        Direction::Incoming => first.origins.clone(),
    };
    let mut panel = TransitionCountPanel {
        direction,
        anchor: anchor.to_string(),
        zone_ids: Vec::with_capacity(flows.len()),
        options,
        counts: Vec::with_capacity(flows.len()),
        totals: Vec::with_capacity(flows.len()),
        count_se: Vec::with_capacity(flows.len()),
    };
    for (t, f) in flows.iter().enumerate() {
        if f.origins != first.origins || f.destinations != first.destinations {
            return Err(Error::OptionMismatch);
        }
        let (row, se): (Vec<f64>, Vec<f64>) = match direction {
            Direction::Outgoing => {
                let i = f
                    .origins
                    .iter()
                    .position(|o| o == anchor)
                    .ok_or_else(|| Error::MissingAnchor(anchor.to_string()))?;
                let se = match se_p {
                    Some(s) => (0..f.destinations.len())
                        .map(|j| cell_se(s, t, i, j) * f.row_margins[i])
                        .collect(),
                    None => vec![0.0; f.destinations.len()],
                };
                (f.counts[i].clone(), se)
            }
            Direction::Incoming => {
                let j = f
                    .destinations
                    .iter()
                    .position(|d| d == anchor)
                    .ok_or_else(|| Error::MissingAnchor(anchor.to_string()))?;
                let se = match se_p {
                    Some(s) => (0..f.origins.len())
                        .map(|i| cell_se(s, t, i, j) * f.row_margins[i])
                        .collect(),
                    None => vec![0.0; f.origins.len()],
                };
                (f.counts.iter().map(|r| r[j]).collect(), se)
            }
        };
        panel.zone_ids.push(f.zone_id.clone());
        panel.totals.push(row.iter().sum());
        panel.counts.push(row);
        panel.count_se.push(se);
    }
    Ok(panel)
}

fn cell_se(se: &[Vec<Vec<f64>>], t: usize, i: usize, j: usize) -> f64 {
    se[t].get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0)
}

/// Option × covariate inclusion flags; the reference row is ignored.
pub type Mask = Vec<Vec<bool>>;

pub fn full_mask(n_options: usize, n_covariates: usize) -> Mask {
    vec![vec![true; n_covariates]; n_options]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MnlConfig {
    /// Reference option index; `None` picks the last option.
    pub reference: Option<usize>,
    pub max_iter: usize,
    /// Tolerance on the gradient norm of the per-voter mean log-likelihood.
    pub tol_grad: f64,
}

impl Default for MnlConfig {
    fn default() -> Self {
        Self {
            reference: None,
            max_iter: 100,
            tol_grad: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnlModel {
    pub anchor: String,
    pub direction: Direction,
    pub zone_ids: Vec<String>,
    pub options: Vec<String>,
    pub covariates: Vec<String>,
    pub reference_index: usize,
    /// Intercepts per option; zero for the reference.
    pub beta0: Vec<f64>,
    /// Option × covariate coefficients; excluded cells are exactly zero.
    pub beta: Vec<Vec<f64>>,
    pub mask: Mask,
    pub std_errors: Vec<Vec<f64>>,
    /// Zero where a cell is excluded.
    pub z_ratios: Vec<Vec<f64>>,
    /// Names of the free parameters, ordered as `cov_beta`.
    pub param_names: Vec<String>,
    pub cov_beta: Vec<Vec<f64>>,
    pub loglik: f64,
    pub null_loglik: f64,
    pub deviance: f64,
    pub null_deviance: f64,
    pub pct_deviance_explained: f64,
    pub iterations: usize,
    pub covariate_means: Vec<f64>,
    /// Zone × covariate values after centering.
    pub centered_design: Vec<Vec<f64>>,
    /// Zone × option fitted probabilities.
    pub fitted: Vec<Vec<f64>>,
}

impl MnlModel {
    /// Probabilities at a centered covariate vector.
    pub fn probabilities_at(&self, x: &[f64]) -> Vec<f64> {
        let eta: Vec<f64> = (0..self.options.len())
            .map(|j| self.beta0[j] + self.beta[j].iter().zip(x).map(|(b, v)| b * v).sum::<f64>())
            .collect();
        softmax(&eta)
    }

    fn free_cells(&self) -> Vec<(usize, usize)> {
        layout(self.options.len(), self.covariates.len(), self.reference_index, &self.mask)
    }
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Free parameters as (option, column) with column 0 the intercept and
/// column v + 1 covariate v.
fn layout(n_options: usize, n_cov: usize, reference: usize, mask: &Mask) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for j in (0..n_options).filter(|&j| j != reference) {
        cells.push((j, 0));
        for v in 0..n_cov {
            if mask[j][v] {
                cells.push((j, v + 1));
            }
        }
    }
    cells
}

struct Problem<'a> {
    counts: &'a [Vec<f64>],
    totals: &'a [f64],
    x: Vec<Vec<f64>>,
    n_options: usize,
    cells: Vec<(usize, usize)>,
}

impl Problem<'_> {
    fn design(&self, z: usize, c: usize) -> f64 {
        if c == 0 {
            1.0
        } else {
            self.x[z][c - 1]
        }
    }

    fn probabilities(&self, params: &[f64]) -> Vec<Vec<f64>> {
        (0..self.counts.len())
            .map(|z| {
                let mut eta = vec![0.0; self.n_options];
                for (k, &(j, c)) in self.cells.iter().enumerate() {
                    eta[j] += params[k] * self.design(z, c);
                }
                softmax(&eta)
            })
            .collect()
    }

    fn loglik_from(&self, probs: &[Vec<f64>]) -> f64 {
        let mut ll = 0.0;
        for (row, p) in self.counts.iter().zip(probs) {
            for (&n, &pj) in row.iter().zip(p) {
                if n > 0.0 {
                    ll += n * pj.ln();
                }
            }
        }
        ll
    }

    fn gradient(&self, probs: &[Vec<f64>]) -> DVector<f64> {
        DVector::from_iterator(
            self.cells.len(),
            self.cells.iter().map(|&(j, c)| {
                (0..self.counts.len())
                    .map(|z| (self.counts[z][j] - self.totals[z] * probs[z][j]) * self.design(z, c))
                    .sum::<f64>()
            }),
        )
    }

    /// Negative Hessian of the log-likelihood.
    fn information(&self, probs: &[Vec<f64>]) -> DMatrix<f64> {
        let k = self.cells.len();
        let mut info = DMatrix::zeros(k, k);
        for z in 0..self.counts.len() {
            let p = &probs[z];
            let n = self.totals[z];
            for a in 0..k {
                let (j, c) = self.cells[a];
                let xa = self.design(z, c);
                for b in a..k {
                    let (l, d) = self.cells[b];
                    let kron = if j == l { p[j] } else { 0.0 };
                    let v = n * (kron - p[j] * p[l]) * xa * self.design(z, d);
                    info[(a, b)] += v;
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        info
    }
}

fn numeric_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > max * 1e-10 * (m.nrows().max(m.ncols()) as f64)).count()
}

/// Multinomial log-likelihood of the panel at given probabilities, with
/// `0·log 0 = 0`.
pub fn multinomial_loglik(counts: &[Vec<f64>], probs: &[Vec<f64>]) -> f64 {
    let mut ll = 0.0;
    for (row, p) in counts.iter().zip(probs) {
        for (&n, &pj) in row.iter().zip(p) {
            if n > 0.0 {
                ll += n * pj.ln();
            }
        }
    }
    ll
}

/// Deviance against the saturated model.
pub fn deviance(counts: &[Vec<f64>], totals: &[f64], probs: &[Vec<f64>]) -> f64 {
    let mut d = 0.0;
    for ((row, p), &n) in counts.iter().zip(probs).zip(totals) {
        for (&c, &pj) in row.iter().zip(p) {
            if c > 0.0 {
                d += c * (c / (n * pj)).ln();
            }
        }
    }
    (2.0 * d).max(0.0)
}

/// Mean-center columns of `x` (zone order of `panel`) and check the panel.
fn prepare(panel: &TransitionCountPanel, x: &CovariateMatrix) -> Result<(Vec<String>, Vec<f64>, Vec<Vec<f64>>)> {
    let aligned = x.align_to(&panel.zone_ids)?;
    let names = aligned.names();
    let means: Vec<f64> = aligned.columns.iter().map(|c| mean(&c.values)).collect();
    let centered = (0..panel.n_zones())
        .map(|z| {
            aligned
                .columns
                .iter()
                .zip(&means)
                .map(|(c, m)| c.values[z] - m)
                .collect()
        })
        .collect();
    for (z, row) in panel.counts.iter().enumerate() {
        if row.len() != panel.n_options() {
            return Err(Error::DimensionMismatch {
                expected: panel.n_options(),
                found: row.len(),
            });
        }
        if row.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::LengthMismatch(format!(
                "zone `{}` has a negative or non-finite count",
                panel.zone_ids[z]
            )));
        }
    }
    Ok((names, means, centered))
}

pub fn fit(panel: &TransitionCountPanel, x: &CovariateMatrix, mask: &Mask, cfg: &MnlConfig) -> Result<MnlModel> {
    let (names, means, centered) = prepare(panel, x)?;
    let n_opt = panel.n_options();
    let n_cov = names.len();
    if n_opt < 2 {
        return Err(Error::InvalidOptionSet("a multinomial model needs two options".into()));
    }
    let reference = cfg.reference.unwrap_or(n_opt - 1);
    if reference >= n_opt {
        return Err(Error::DimensionMismatch {
            expected: n_opt,
            found: reference,
        });
    }
    if mask.len() != n_opt || mask.iter().any(|r| r.len() != n_cov) {
        return Err(Error::DimensionMismatch {
            expected: n_opt * n_cov,
            found: mask.iter().map(Vec::len).sum(),
        });
    }

    let grand: f64 = panel.totals.iter().sum();
    let col_totals: Vec<f64> = (0..n_opt)
        .map(|j| panel.counts.iter().map(|r| r[j]).sum())
        .collect();
    for (j, &t) in col_totals.iter().enumerate() {
        if t <= 0.0 {
            return Err(Error::Separation {
                option: panel.options[j].clone(),
                magnitude: f64::INFINITY,
            });
        }
    }

    // design rank per option over zones carrying votes
    let active: Vec<usize> = (0..panel.n_zones()).filter(|&z| panel.totals[z] > 0.0).collect();
    for j in (0..n_opt).filter(|&j| j != reference) {
        let cols: Vec<usize> = (0..n_cov).filter(|&v| mask[j][v]).collect();
        let m = DMatrix::from_fn(active.len(), cols.len() + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                centered[active[r]][cols[c - 1]]
            }
        });
        if numeric_rank(&m) < cols.len() + 1 {
            return Err(Error::RankDeficientDesign(panel.options[j].clone()));
        }
    }

    let problem = Problem {
        counts: &panel.counts,
        totals: &panel.totals,
        x: centered.clone(),
        n_options: n_opt,
        cells: layout(n_opt, n_cov, reference, mask),
    };
    let k = problem.cells.len();
    let null_probs: Vec<f64> = col_totals.iter().map(|t| t / grand).collect();
    let mut params: Vec<f64> = problem
        .cells
        .iter()
        .map(|&(j, c)| {
            if c == 0 {
                (null_probs[j] / null_probs[reference]).ln()
            } else {
                0.0
            }
        })
        .collect();

    let scale = grand.max(1.0);
    let mut probs = problem.probabilities(&params);
    let mut ll = problem.loglik_from(&probs);
    let mut iterations = 0;
    let mut converged = false;
    let mut info = problem.information(&probs);
    while iterations < cfg.max_iter {
        let grad = problem.gradient(&probs);
        if grad.norm() / scale < cfg.tol_grad {
            converged = true;
            break;
        }
        iterations += 1;
        let chol = info
            .clone()
            .cholesky()
            .ok_or_else(|| Error::RankDeficientDesign(format!("{} (information not positive definite)", panel.anchor)))?;
        let step = chol.solve(&grad);
        let decrement = grad.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + t * s).collect();
            let trial_probs = problem.probabilities(&trial);
            let trial_ll = problem.loglik_from(&trial_probs);
            if trial_ll.is_finite() && trial_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                params = trial;
                probs = trial_probs;
                ll = trial_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        check_separation(&problem.cells, &params, &panel.options)?;
        info = problem.information(&probs);
        if !accepted {
            // no further improvement possible in floating point
            if decrement / scale < 1e-12 {
                converged = true;
            }
            break;
        }
    }
    if !converged {
        let grad = problem.gradient(&probs);
        if grad.norm() / scale < cfg.tol_grad {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NotConverged { iterations });
    }
    // quadratic convergence: a couple more steps reach machine precision
    for _ in 0..2 {
        let grad = problem.gradient(&probs);
        let Some(chol) = info.clone().cholesky() else { break };
        let step = chol.solve(&grad);
        let trial: Vec<f64> = params.iter().zip(step.iter()).map(|(p, s)| p + s).collect();
        let trial_probs = problem.probabilities(&trial);
        let trial_ll = problem.loglik_from(&trial_probs);
        if !(trial_ll.is_finite() && trial_ll >= ll) {
            break;
        }
        params = trial;
        probs = trial_probs;
        ll = trial_ll;
        info = problem.information(&probs);
    }

    let cov = info
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficientDesign(panel.anchor.clone()))?;
    let mut beta0 = vec![0.0; n_opt];
    let mut beta = vec![vec![0.0; n_cov]; n_opt];
    let mut std_errors = vec![vec![0.0; n_cov]; n_opt];
    let mut z_ratios = vec![vec![0.0; n_cov]; n_opt];
    let mut param_names = Vec::with_capacity(k);
    for (a, &(j, c)) in problem.cells.iter().enumerate() {
        if c == 0 {
            beta0[j] = params[a];
            param_names.push(format!("{}:(intercept)", panel.options[j]));
        } else {
            let se = cov[(a, a)].max(0.0).sqrt();
            beta[j][c - 1] = params[a];
            std_errors[j][c - 1] = se;
            z_ratios[j][c - 1] = if se > 0.0 { params[a] / se } else { 0.0 };
            param_names.push(format!("{}:{}", panel.options[j], names[c - 1]));
        }
    }
    let mut clean_mask = mask.clone();
    clean_mask[reference].iter_mut().for_each(|m| *m = false);

    let null_fitted: Vec<Vec<f64>> = vec![null_probs; panel.n_zones()];
    let null_loglik = multinomial_loglik(&panel.counts, &null_fitted);
    let dev = deviance(&panel.counts, &panel.totals, &probs);
    let null_dev = deviance(&panel.counts, &panel.totals, &null_fitted);
    let pct = if null_dev > 1e-12 * scale {
        (100.0 * (1.0 - dev / null_dev)).clamp(0.0, 100.0)
    } else {
        0.0
    };
    Ok(MnlModel {
        anchor: panel.anchor.clone(),
        direction: panel.direction,
        zone_ids: panel.zone_ids.clone(),
        options: panel.options.clone(),
        covariates: names,
        reference_index: reference,
        beta0,
        beta,
        mask: clean_mask,
        std_errors,
        z_ratios,
        param_names,
        cov_beta: (0..k).map(|r| (0..k).map(|c| cov[(r, c)]).collect()).collect(),
        loglik: ll,
        null_loglik,
        deviance: dev,
        null_deviance: null_dev,
        pct_deviance_explained: pct,
        iterations,
        covariate_means: means,
        centered_design: centered,
        fitted: probs,
    })
}

fn check_separation(cells: &[(usize, usize)], params: &[f64], options: &[String]) -> Result<()> {
    for (&(j, c), &b) in cells.iter().zip(params) {
        // intercepts absorb the (legitimately large) base-rate log-odds
        let limit = if c == 0 { 2.0 * SEPARATION_THRESHOLD } else { SEPARATION_THRESHOLD };
        if b.abs() > limit || !b.is_finite() {
            return Err(Error::Separation {
                option: options[j].clone(),
                magnitude: b.abs(),
            });
        }
    }
    Ok(())
}

/// Log-likelihood of the panel at a parameter vector ordered as the free
/// cells of `mask` (per non-reference option: intercept, then included
/// covariates). Covariates are centered as in [`fit`].
pub fn loglik_at(
    panel: &TransitionCountPanel,
    x: &CovariateMatrix,
    mask: &Mask,
    reference: usize,
    params: &[f64],
) -> Result<f64> {
    let (problem, _) = problem_for(panel, x, mask, reference, params.len())?;
    Ok(problem.loglik_from(&problem.probabilities(params)))
}

/// Analytic gradient matching [`loglik_at`].
pub fn score_at(
    panel: &TransitionCountPanel,
    x: &CovariateMatrix,
    mask: &Mask,
    reference: usize,
    params: &[f64],
) -> Result<Vec<f64>> {
    let (problem, _) = problem_for(panel, x, mask, reference, params.len())?;
    Ok(problem.gradient(&problem.probabilities(params)).iter().copied().collect())
}

fn problem_for<'a>(
    panel: &'a TransitionCountPanel,
    x: &CovariateMatrix,
    mask: &Mask,
    reference: usize,
    n_params: usize,
) -> Result<(Problem<'a>, Vec<String>)> {
    let (names, _, centered) = prepare(panel, x)?;
    let cells = layout(panel.n_options(), names.len(), reference, mask);
    if cells.len() != n_params {
        return Err(Error::DimensionMismatch {
            expected: cells.len(),
            found: n_params,
        });
    }
    Ok((
        Problem {
            counts: &panel.counts,
            totals: &panel.totals,
            x: centered,
            n_options: panel.n_options(),
            cells,
        },
        names,
    ))
}

pub fn deviance_explained(m: &MnlModel) -> f64 {
    m.pct_deviance_explained
}

/// Backward elimination: refit and drop every cell with |z| below each
/// successive threshold, then refit with the cumulative mask.
pub fn stepwise_select(
    panel: &TransitionCountPanel,
    x: &CovariateMatrix,
    schedule: &[f64],
    cfg: &MnlConfig,
) -> Result<MnlModel> {
    if schedule.is_empty() {
        return Err(Error::InvalidSchedule("empty".into()));
    }
    if schedule.iter().any(|t| !t.is_finite() || *t < 0.0) {
        return Err(Error::InvalidSchedule("thresholds must be finite and non-negative".into()));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidSchedule("thresholds must be strictly increasing".into()));
    }
    let mut mask = full_mask(panel.n_options(), x.n_covariates());
    for &threshold in schedule {
        let model = fit(panel, x, &mask, cfg)?;
        for (j, row) in mask.iter_mut().enumerate() {
            for (v, keep) in row.iter_mut().enumerate() {
                if *keep && model.z_ratios[j][v].abs() < threshold {
                    *keep = false;
                }
            }
        }
        log::debug!(
            "stepwise {} threshold {threshold}: {} cells kept",
            panel.anchor,
            mask.iter().flatten().filter(|k| **k).count()
        );
    }
    fit(panel, x, &mask, cfg)
}

/// Forward-difference change in each option's probability per unit of each
/// covariate, all other covariates held at their means.
pub fn marginal_effects(m: &MnlModel, step: f64) -> Vec<Vec<f64>> {
    let n_cov = m.covariates.len();
    let base = m.probabilities_at(&vec![0.0; n_cov]);
    let mut out = vec![vec![0.0; n_cov]; m.options.len()];
    for v in 0..n_cov {
        let mut x = vec![0.0; n_cov];
        x[v] = step;
        let moved = m.probabilities_at(&x);
        for j in 0..m.options.len() {
            out[j][v] = (moved[j] - base[j]) / step;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    Strong,
    Weak,
    None,
}

pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

pub fn classify(z: f64, thresholds: [f64; 2]) -> Significance {
    let p = two_sided_p(z);
    if p < thresholds[0] {
        Significance::Strong
    } else if p < thresholds[1] {
        Significance::Weak
    } else {
        Significance::None
    }
}

/// Option × covariate flags; excluded and reference cells are `None`.
pub fn significance_flags(m: &MnlModel, thresholds: [f64; 2]) -> Vec<Vec<Significance>> {
    m.z_ratios
        .iter()
        .zip(&m.mask)
        .map(|(zs, ms)| {
            zs.iter()
                .zip(ms)
                .map(|(&z, &inc)| if inc { classify(z, thresholds) } else { Significance::None })
                .collect()
        })
        .collect()
}

/// Marginal effects kept only where the coefficient is flagged.
pub fn reported_effects(m: &MnlModel, step: f64, thresholds: [f64; 2]) -> Vec<Vec<f64>> {
    let effects = marginal_effects(m, step);
    let flags = significance_flags(m, thresholds);
    effects
        .into_iter()
        .zip(flags)
        .map(|(e, f)| {
            e.into_iter()
                .zip(f)
                .map(|(v, s)| if s == Significance::None { 0.0 } else { v })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub zone_id: String,
    pub option: String,
    pub std_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub zone_ids: Vec<String>,
    pub options: Vec<String>,
    /// Observed share minus fitted share.
    pub residuals: Vec<Vec<f64>>,
    pub std_residuals: Vec<Vec<f64>>,
    pub outliers: Vec<Outlier>,
}

/// Share residuals standardized by the model's delta-method variance plus the
/// variance of the estimated counts.
pub fn residual_diagnostics(m: &MnlModel, panel: &TransitionCountPanel) -> Result<ResidualReport> {
    if panel.zone_ids != m.zone_ids || panel.options != m.options {
        return Err(Error::LengthMismatch("panel does not match the fitted model".into()));
    }
    let cells = m.free_cells();
    let k = cells.len();
    let cov = DMatrix::from_fn(k, k, |r, c| m.cov_beta[r][c]);
    let n_opt = m.options.len();
    let mut residuals = vec![vec![0.0; n_opt]; panel.n_zones()];
    let mut std_residuals = vec![vec![0.0; n_opt]; panel.n_zones()];
    let mut outliers = Vec::new();
    for z in 0..panel.n_zones() {
        let n = panel.totals[z];
        if n <= 0.0 {
            continue;
        }
        let p = &m.fitted[z];
        for j in 0..n_opt {
            let r = panel.counts[z][j] / n - p[j];
            let g = DVector::from_iterator(
                k,
                cells.iter().map(|&(l, c)| {
                    let xa = if c == 0 { 1.0 } else { m.centered_design[z][c - 1] };
                    let kron = if j == l { 1.0 } else { 0.0 };
                    p[j] * (kron - p[l]) * xa
                }),
            );
            let model_var = (g.transpose() * &cov * &g)[(0, 0)].max(0.0);
            let ei_var = (panel.count_se[z][j] / n).powi(2);
            let var = model_var + ei_var;
            let s = if var > 0.0 { r / var.sqrt() } else { 0.0 };
            residuals[z][j] = r;
            std_residuals[z][j] = s;
            if s.abs() > OUTLIER_THRESHOLD {
                outliers.push(Outlier {
                    zone_id: panel.zone_ids[z].clone(),
                    option: m.options[j].clone(),
                    std_residual: s,
                });
            }
        }
    }
    Ok(ResidualReport {
        zone_ids: panel.zone_ids.clone(),
        options: m.options.clone(),
        residuals,
        std_residuals,
        outliers,
    })
}

pub fn dummy_name(zone: &str) -> String {
    format!("zone_{zone}")
}

/// Append one unstandardized 0/1 indicator column per listed zone.
pub fn add_zone_dummies(x: &CovariateMatrix, zones: &[String]) -> Result<CovariateMatrix> {
    let mut out = x.clone();
    for zone in zones {
        let idx = x.zone_index(zone).ok_or_else(|| Error::UnknownZone(zone.clone()))?;
        let values = (0..x.n_zones()).map(|z| if z == idx { 1.0 } else { 0.0 }).collect();
        out.push(dummy_name(zone), values, Transform::ZoneDummy { zone: zone.clone() })?;
    }
    Ok(out)
}

/// Everything reported for one anchor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: MnlModel,
    pub p_values: Vec<Vec<f64>>,
    pub marginal_effects: Vec<Vec<f64>>,
    pub reported_effects: Vec<Vec<f64>>,
    pub flags: Vec<Vec<Significance>>,
    pub residuals: ResidualReport,
}

pub fn model_report(
    model: MnlModel,
    panel: &TransitionCountPanel,
    step: f64,
    thresholds: [f64; 2],
) -> Result<ModelReport> {
    let residuals = residual_diagnostics(&model, panel)?;
    let p_values = model
        .z_ratios
        .iter()
        .zip(&model.mask)
        .map(|(zs, ms)| zs.iter().zip(ms).map(|(&z, &inc)| if inc { two_sided_p(z) } else { 1.0 }).collect())
        .collect();
    Ok(ModelReport {
        marginal_effects: marginal_effects(&model, step),
        reported_effects: reported_effects(&model, step, thresholds),
        flags: significance_flags(&model, thresholds),
        p_values,
        residuals,
        model,
    })
}

fn find_option(options: &[String], label: &str) -> Option<usize> {
    options
        .iter()
        .position(|o| o == label)
        .or_else(|| options.iter().position(|o| option_contains(o, label)))
}

fn to_csv(rows: &[Vec<String>]) -> Result<String> {
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for r in rows {
        wtr.write_record(r)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn model_title(m: &MnlModel) -> String {
    let dir = match m.direction {
        Direction::Outgoing => "out of",
        Direction::Incoming => "into",
    };
    format!("Transitions {dir} {} (% dev. {:.1})", m.anchor, m.pct_deviance_explained)
}

/// Marginal effects of flagged covariates: one section per destination, one
/// row per anchor model. `**` marks strong, `*` weak significance; the
/// reference option of a model is left blank.
pub fn render_table3(reports: &[ModelReport], destinations: &[String]) -> Result<String> {
    let covariates: Vec<String> = match reports.first() {
        Some(r) => r.model.covariates.clone(),
        None => return Ok(String::new()),
    };
    let mut rows = Vec::new();
    let mut header = vec!["Origin".to_string()];
    header.extend(covariates.iter().cloned());
    rows.push(header);
    for dest in destinations {
        rows.push(vec![format!("Transitions towards {dest}")]);
        for r in reports {
            let Some(j) = find_option(&r.model.options, dest) else { continue };
            let mut row = vec![r.model.anchor.clone()];
            for cov in &covariates {
                let cell = match r.model.covariates.iter().position(|c| c == cov) {
                    Some(_) if j == r.model.reference_index => String::new(),
                    Some(v) => {
                        let mark = match r.flags[j][v] {
                            Significance::Strong => "**",
                            Significance::Weak => "*",
                            Significance::None => "",
                        };
                        if mark.is_empty() {
                            "0".to_string()
                        } else {
                            format!("{:.3}{mark}", r.reported_effects[j][v])
                        }
                    }
                    None => String::new(),
                };
                row.push(cell);
            }
            rows.push(row);
        }
    }
    rows.push(vec!["** p < 0.01; * p < 0.08 (two-sided)".to_string()]);
    to_csv(&rows)
}

/// Coefficients and z ratios per non-reference destination of each model;
/// excluded cells show b = 0 and an empty z.
pub fn render_table_c1(reports: &[ModelReport]) -> Result<String> {
    let covariates: Vec<String> = match reports.first() {
        Some(r) => r.model.covariates.clone(),
        None => return Ok(String::new()),
    };
    let mut rows = Vec::new();
    let mut header = vec!["Model".to_string(), "Destination".into(), "Coeff.".into()];
    header.extend(covariates.iter().cloned());
    rows.push(header);
    for r in reports {
        let m = &r.model;
        let mut first = true;
        for j in (0..m.options.len()).filter(|&j| j != m.reference_index) {
            let title = if first { model_title(m) } else { String::new() };
            first = false;
            let mut b_row = vec![title, m.options[j].clone(), "b".into()];
            let mut z_row = vec![String::new(), String::new(), "z".into()];
            for cov in &covariates {
                match m.covariates.iter().position(|c| c == cov) {
                    Some(v) if m.mask[j][v] => {
                        b_row.push(format!("{:.2}", m.beta[j][v]));
                        z_row.push(format!("{:.2}", m.z_ratios[j][v]));
                    }
                    Some(_) => {
                        b_row.push("0".into());
                        z_row.push(String::new());
                    }
                    None => {
                        b_row.push(String::new());
                        z_row.push(String::new());
                    }
                }
            }
            rows.push(b_row);
            rows.push(z_row);
        }
    }
    to_csv(&rows)
}

/// Human-readable summary of a fitted model.
pub fn summary(m: &MnlModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}  reference: {}", model_title(m), m.options[m.reference_index]);
    for j in (0..m.options.len()).filter(|&j| j != m.reference_index) {
        let _ = write!(s, "  {:<16} b0={:>8.3}", m.options[j], m.beta0[j]);
        for (v, name) in m.covariates.iter().enumerate() {
            if m.mask[j][v] {
                let _ = write!(s, "  {name}={:.3} (z {:.2})", m.beta[j][v], m.z_ratios[j][v]);
            }
        }
        s.push('\n');
    }
    s
}
