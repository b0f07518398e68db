//! Zone-level design matrix: standardization, sign inversion, composite
//! indices, residualization against a conditioning covariate and
//! dichotomous coding.
//!
//! Standard deviations are population ones (divide by `n`).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw zone-level indicators as read from `covariates.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCovariates {
    pub zone_ids: Vec<String>,
    pub columns: IndexMap<String, Vec<f64>>,
}

impl RawCovariates {
    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }
}

/// Reads `zone_id,<var>...`; every cell must be a finite number.
pub fn read_covariates<R: Read>(reader: R) -> Result<RawCovariates> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("zone_id") {
        return Err(Error::MissingColumn {
            column: "zone_id".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut zone_ids = Vec::new();
    let mut columns: IndexMap<String, Vec<f64>> = names.iter().map(|n| (n.clone(), Vec::new())).collect();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = record.position().map_or(i + 2, |p| p.line() as usize);
        let zone = record.get(0).unwrap_or_default().to_string();
        if zone_ids.contains(&zone) {
            return Err(Error::MalformedRow {
                row,
                message: format!("duplicate zone `{zone}`"),
            });
        }
        zone_ids.push(zone);
        for (k, name) in names.iter().enumerate() {
            let raw = record.get(k + 1).unwrap_or_default();
            let value: f64 = raw.parse().map_err(|_| Error::MalformedRow {
                row,
                message: format!("`{name}`: `{raw}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("`{name}` is not finite"),
                });
            }
            columns[name.as_str()].push(value);
        }
    }
    Ok(RawCovariates { zone_ids, columns })
}

pub fn load_covariates(path: impl AsRef<Path>) -> Result<RawCovariates> {
    read_covariates(File::open(path)?)
}

pub fn write_raw_covariates<W: Write>(writer: W, table: &RawCovariates) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["zone_id".to_string()];
    header.extend(table.columns.keys().cloned());
    wtr.write_record(&header)?;
    for (z, zone) in table.zone_ids.iter().enumerate() {
        let mut row = vec![zone.clone()];
        row.extend(table.columns.values().map(|c| c[z].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// How a design column was derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Raw { source: String },
    Standardized { source: String, inverted: bool },
    Composite { components: Vec<String>, inverted: Vec<bool> },
    Residualized { source: String, on: String },
    Dichotomous { numerator: String, denominator: String, ratio: f64 },
    ZoneDummy { zone: String },
}

impl Transform {
    /// Whether the column holds 0/1 indicators.
    pub fn is_dichotomous(&self) -> bool {
        matches!(self, Transform::Dichotomous { .. } | Transform::ZoneDummy { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub name: String,
    pub values: Vec<f64>,
    pub transform: Transform,
}

/// Zones × covariates design matrix with per-column provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMatrix {
    pub zone_ids: Vec<String>,
    pub columns: Vec<CovariateColumn>,
}

impl CovariateMatrix {
    pub fn new(zone_ids: Vec<String>) -> Self {
        Self {
            zone_ids,
            columns: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f64>, transform: Transform) -> Result<()> {
        if values.len() != self.zone_ids.len() {
            return Err(Error::LengthMismatch(format!(
                "column has {} values for {} zones",
                values.len(),
                self.zone_ids.len()
            )));
        }
        self.columns.push(CovariateColumn {
            name: name.into(),
            values,
            transform,
        });
        Ok(())
    }

    pub fn n_zones(&self) -> usize {
        self.zone_ids.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn column(&self, name: &str) -> Option<&CovariateColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn zone_index(&self, zone: &str) -> Option<usize> {
        self.zone_ids.iter().position(|z| z == zone)
    }

    /// Value of covariate `v` in zone `z`.
    pub fn value(&self, z: usize, v: usize) -> f64 {
        self.columns[v].values[z]
    }

    /// Keeps the named columns, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self> {
        let columns = names
            .iter()
            .map(|n| {
                self.column(n)
                    .cloned()
                    .ok_or_else(|| Error::UnknownCovariate(n.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            zone_ids: self.zone_ids.clone(),
            columns,
        })
    }

    /// Reorders zones to `order`; every zone must be present.
    pub fn align_to(&self, order: &[String]) -> Result<Self> {
        let idx = order
            .iter()
            .map(|z| self.zone_index(z).ok_or_else(|| Error::UnknownZone(z.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            zone_ids: order.to_vec(),
            columns: self
                .columns
                .iter()
                .map(|c| CovariateColumn {
                    values: idx.iter().map(|&i| c.values[i]).collect(),
                    ..c.clone()
                })
                .collect(),
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["zone_id".to_string()];
        header.extend(self.names());
        wtr.write_record(&header)?;
        for (z, zone) in self.zone_ids.iter().enumerate() {
            let mut row = vec![zone.clone()];
            row.extend(self.columns.iter().map(|c| c.values[z].to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Provenance sidecar: column name → transform.
    pub fn transforms(&self) -> IndexMap<String, Transform> {
        self.columns
            .iter()
            .map(|c| (c.name.clone(), c.transform.clone()))
            .collect()
    }

    /// Inverse of [`CovariateMatrix::write_csv`] plus the provenance sidecar.
    pub fn read_csv<R: Read>(reader: R, transforms: &IndexMap<String, Transform>) -> Result<Self> {
        let raw = read_covariates(reader)?;
        let mut out = CovariateMatrix::new(raw.zone_ids);
        for (name, values) in raw.columns {
            let transform = transforms
                .get(&name)
                .cloned()
                .unwrap_or(Transform::Raw { source: name.clone() });
            out.push(name, values, transform)?;
        }
        Ok(out)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Pearson correlation; NaN when either vector is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return f64::NAN;
    }
    sab / (saa * sbb).sqrt()
}

fn standardize_named(x: &[f64], invert: bool, name: &str) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::LengthMismatch(format!("`{name}` needs at least two values")));
    }
    let m = mean(x);
    let sd = variance(x).sqrt();
    if sd <= 1e-12 * m.abs().max(1.0) {
        return Err(Error::ZeroVariance(name.to_string()));
    }
    let sign = if invert { -1.0 } else { 1.0 };
    Ok(x.iter().map(|v| sign * (v - m) / sd).collect())
}

/// `(x − mean) / sd`, negated when `invert` is set.
pub fn standardize(x: &[f64], invert: bool) -> Result<Vec<f64>> {
    standardize_named(x, invert, "input")
}

/// Average of standardized (and optionally inverted) components,
/// re-standardized to unit variance.
pub fn composite(xs: &[&[f64]], invert: &[bool]) -> Result<Vec<f64>> {
    if xs.is_empty() || xs.len() != invert.len() {
        return Err(Error::LengthMismatch(
            "one inversion flag per component required".into(),
        ));
    }
    let n = xs[0].len();
    if xs.iter().any(|x| x.len() != n) {
        return Err(Error::LengthMismatch("components differ in length".into()));
    }
    let mut avg = vec![0.0; n];
    for (k, (x, &inv)) in xs.iter().zip(invert).enumerate() {
        let z = standardize_named(x, inv, &format!("component {k}"))?;
        for (a, v) in avg.iter_mut().zip(z) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= xs.len() as f64);
    standardize_named(&avg, false, "composite")
}

/// Least-squares residuals of `y` on `on` (with intercept), re-standardized.
pub fn residualize(y: &[f64], on: &[f64]) -> Result<Vec<f64>> {
    if y.len() != on.len() {
        return Err(Error::LengthMismatch("residualize inputs differ in length".into()));
    }
    let (my, mo) = (mean(y), mean(on));
    let var_on = variance(on);
    if var_on <= 0.0 {
        return Err(Error::ZeroVariance("conditioning covariate".into()));
    }
    let r = pearson(y, on);
    if r.is_nan() || r.abs() > 1.0 - 1e-12 {
        return Err(Error::PerfectCollinearity("input".into(), "conditioning covariate".into()));
    }
    let cov: f64 = y.iter().zip(on).map(|(a, b)| (a - my) * (b - mo)).sum::<f64>() / y.len() as f64;
    let slope = cov / var_on;
    let resid: Vec<f64> = y.iter().zip(on).map(|(a, b)| (a - my) - slope * (b - mo)).collect();
    // exact orthogonality to the conditioning column up to rounding
    let centered_on: Vec<f64> = on.iter().map(|b| b - mo).collect();
    let proj = resid.iter().zip(&centered_on).map(|(r, c)| r * c).sum::<f64>()
        / centered_on.iter().map(|c| c * c).sum::<f64>();
    let resid: Vec<f64> = resid.iter().zip(&centered_on).map(|(r, c)| r - proj * c).collect();
    standardize_named(&resid, false, "residual")
        .map_err(|_| Error::PerfectCollinearity("input".into(), "conditioning covariate".into()))
}

/// 1 where `votes_a > ratio · votes_b`, else 0.
pub fn dichotomize_tradition(votes_a: &[f64], votes_b: &[f64], ratio: f64) -> Result<Vec<f64>> {
    if votes_a.len() != votes_b.len() {
        return Err(Error::LengthMismatch("vote vectors differ in length".into()));
    }
    votes_a
        .iter()
        .zip(votes_b)
        .enumerate()
        .map(|(i, (&a, &b))| {
            if b <= 0.0 {
                Err(Error::ZeroDenominator(i))
            } else {
                Ok(if a > ratio * b { 1.0 } else { 0.0 })
            }
        })
        .collect()
}

pub const DEFAULT_TRADITION_RATIO: f64 = 1.5;
pub const DEFAULT_CORRELATION_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub names: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// Pairs whose absolute correlation exceeds the threshold.
    pub flagged: Vec<(String, String, f64)>,
}

pub fn correlation_report(m: &CovariateMatrix, threshold: f64) -> Result<CorrelationReport> {
    if m.n_covariates() < 2 {
        return Err(Error::LengthMismatch("at least two covariates required".into()));
    }
    let k = m.n_covariates();
    let mut matrix = vec![vec![0.0; k]; k];
    let mut flagged = Vec::new();
    for a in 0..k {
        matrix[a][a] = 1.0;
        for b in a + 1..k {
            let r = pearson(&m.columns[a].values, &m.columns[b].values);
            matrix[a][b] = r;
            matrix[b][a] = r;
            if r.abs() > threshold {
                flagged.push((m.columns[a].name.clone(), m.columns[b].name.clone(), r));
            }
        }
    }
    Ok(CorrelationReport {
        names: m.names(),
        matrix,
        flagged,
    })
}

/// One transform of the covariate recipe; applied in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum RecipeStep {
    Standardize {
        name: String,
        source: String,
        #[serde(default)]
        invert: bool,
    },
    Composite {
        name: String,
        sources: Vec<String>,
        #[serde(default)]
        invert: Vec<bool>,
    },
    Residualize {
        name: String,
        source: String,
        on: String,
    },
    Dichotomize {
        name: String,
        numerator: String,
        denominator: String,
        #[serde(default = "default_ratio")]
        ratio: f64,
    },
}

fn default_ratio() -> f64 {
    DEFAULT_TRADITION_RATIO
}

/// Runs the recipe over the raw indicators and returns the `keep` columns.
///
/// Steps may refer to raw columns or to columns produced by earlier steps.
/// Residualization standardizes its inputs first.
pub fn apply_recipe(raw: &RawCovariates, steps: &[RecipeStep], keep: &[String]) -> Result<CovariateMatrix> {
    let mut work = CovariateMatrix::new(raw.zone_ids.clone());
    for (name, values) in &raw.columns {
        work.push(name.clone(), values.clone(), Transform::Raw { source: name.clone() })?;
    }
    let get = |work: &CovariateMatrix, name: &str| -> Result<Vec<f64>> {
        work.column(name)
            .map(|c| c.values.clone())
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    };
    for step in steps {
        let (name, values, transform) = match step {
            RecipeStep::Standardize { name, source, invert } => {
                let x = get(&work, source)?;
                (
                    name,
                    standardize_named(&x, *invert, source)?,
                    Transform::Standardized {
                        source: source.clone(),
                        inverted: *invert,
                    },
                )
            }
            RecipeStep::Composite { name, sources, invert } => {
                let flags = if invert.is_empty() {
                    vec![false; sources.len()]
                } else {
                    invert.clone()
                };
                let xs = sources.iter().map(|s| get(&work, s)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
                (
                    name,
                    composite(&refs, &flags)?,
                    Transform::Composite {
                        components: sources.clone(),
                        inverted: flags,
                    },
                )
            }
            RecipeStep::Residualize { name, source, on } => {
                let y = standardize_named(&get(&work, source)?, false, source)?;
                let o = standardize_named(&get(&work, on)?, false, on)?;
                let values = residualize(&y, &o).map_err(|e| match e {
                    Error::PerfectCollinearity(..) => Error::PerfectCollinearity(source.clone(), on.clone()),
                    other => other,
                })?;
                (
                    name,
                    values,
                    Transform::Residualized {
                        source: source.clone(),
                        on: on.clone(),
                    },
                )
            }
            RecipeStep::Dichotomize {
                name,
                numerator,
                denominator,
                ratio,
            } => (
                name,
                dichotomize_tradition(&get(&work, numerator)?, &get(&work, denominator)?, *ratio)?,
                Transform::Dichotomous {
                    numerator: numerator.clone(),
                    denominator: denominator.clone(),
                    ratio: *ratio,
                },
            ),
        };
        work.columns.retain(|c| &c.name != name);
        work.push(name.clone(), values, transform)?;
    }
    work.select(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn constant_vector_has_zero_variance() {
        assert!(matches!(standardize(&[3.0, 3.0, 3.0], false), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn table_two_geog_maximum() {
        // Table 2: X1 mean 60.0, st.dev 23.9, max 93.0
        let z: f64 = (93.0 - 60.0) / 23.9;
        assert_abs_diff_eq!(z, 1.381, epsilon = 5e-4);
        // a vector with exactly that mean and population sd
        let x = [60.0 - 23.9, 60.0 + 23.9, 93.0, 27.0];
        let s = standardize(&x, false).unwrap();
        let (m, sd) = (mean(&x), variance(&x).sqrt());
        assert_abs_diff_eq!(s[2], (93.0 - m) / sd, epsilon = 1e-12);
    }

    #[test]
    fn inversion_flips_sign() {
        let x = [1.0, 4.0, 2.0, 8.0];
        let a = standardize(&x, false).unwrap();
        let b = standardize(&x, true).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(*u, -*v);
        }
        assert_abs_diff_eq!(mean(&b), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(variance(&b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn composite_edge_cases() {
        let x = [1.0, 4.0, 2.0, 8.0, 5.0];
        let single = composite(&[&x], &[false]).unwrap();
        let direct = standardize(&x, false).unwrap();
        for (a, b) in single.iter().zip(&direct) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 7.0).collect();
        let both = composite(&[&x, &y], &[false, false]).unwrap();
        for (a, b) in both.iter().zip(&direct) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(matches!(
            composite(&[&x, &[1.0; 5]], &[false, false]),
            Err(Error::ZeroVariance(_))
        ));
    }

    #[test]
    fn residualize_uncorrelated_is_identity() {
        let y = standardize(&[1.0, -1.0, 1.0, -1.0], false).unwrap();
        let on = standardize(&[1.0, 1.0, -1.0, -1.0], false).unwrap();
        let r = residualize(&y, &on).unwrap();
        for (a, b) in r.iter().zip(&y) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(matches!(residualize(&y, &y), Err(Error::PerfectCollinearity(..))));
    }

    #[test]
    fn tradition_coding_is_strict() {
        assert_eq!(dichotomize_tradition(&[160.0], &[100.0], 1.5).unwrap(), vec![1.0]);
        assert_eq!(dichotomize_tradition(&[150.0], &[100.0], 1.5).unwrap(), vec![0.0]);
        assert!(matches!(
            dichotomize_tradition(&[1.0, 2.0], &[1.0, 0.0], 1.5),
            Err(Error::ZeroDenominator(1))
        ));
    }

    #[test]
    fn correlation_report_diagonal_and_orthogonal() {
        let geog = standardize(&[1.0, 3.0, 2.0, 7.0, 5.0, 4.0], false).unwrap();
        let other = standardize(&[2.0, 1.0, 5.0, 6.0, 3.0, 9.0], false).unwrap();
        let resid = residualize(&other, &geog).unwrap();
        let mut m = CovariateMatrix::new((0..6).map(|i| i.to_string()).collect());
        m.push("geog", geog.clone(), Transform::Raw { source: "geog".into() }).unwrap();
        m.push("twin", geog.iter().map(|v| v * 2.0).collect(), Transform::Raw { source: "twin".into() })
            .unwrap();
        m.push("resid", resid, Transform::Residualized { source: "other".into(), on: "geog".into() })
            .unwrap();
        let rep = correlation_report(&m, DEFAULT_CORRELATION_THRESHOLD).unwrap();
        assert_abs_diff_eq!(rep.matrix[0][0], 1.0);
        assert_abs_diff_eq!(rep.matrix[0][2], 0.0, epsilon = 1e-10);
        assert_eq!(rep.flagged.len(), 1);
        assert_eq!(rep.flagged[0].0, "geog");
    }

    #[test]
    fn recipe_runs_in_order() {
        let raw = RawCovariates {
            zone_ids: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            columns: IndexMap::from([
                ("x1".to_string(), vec![1.0, 2.0, 3.0, 5.0]),
                ("x2".to_string(), vec![2.0, 2.5, 3.5, 4.0]),
                ("inc".to_string(), vec![10.0, 9.0, 11.0, 7.0]),
                ("pci".to_string(), vec![160.0, 100.0, 200.0, 90.0]),
                ("dc".to_string(), vec![100.0, 100.0, 100.0, 100.0]),
            ]),
        };
        let steps: Vec<RecipeStep> = serde_json::from_str(
            r#"[
                {"op": "composite", "name": "geog", "sources": ["x1", "x2"]},
                {"op": "standardize", "name": "income", "source": "inc", "invert": true},
                {"op": "residualize", "name": "income", "source": "income", "on": "geog"},
                {"op": "dichotomize", "name": "lefttrad", "numerator": "pci", "denominator": "dc"}
            ]"#,
        )
        .unwrap();
        let keep: Vec<String> = ["geog", "income", "lefttrad"].map(String::from).to_vec();
        let m = apply_recipe(&raw, &steps, &keep).unwrap();
        assert_eq!(m.names(), keep);
        assert_eq!(m.columns[2].values, vec![1.0, 0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(pearson(&m.columns[0].values, &m.columns[1].values), 0.0, epsilon = 1e-10);
        assert!(matches!(m.columns[1].transform, Transform::Residualized { .. }));
        assert!(matches!(
            apply_recipe(&raw, &steps, &["nope".to_string()]),
            Err(Error::UnknownCovariate(_))
        ));
    }

    fn arb_vec() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-100.0f64..100.0, 5..30).prop_filter("non-constant", |v| variance(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn standardized_moments_and_idempotence(x in arb_vec(), invert in any::<bool>()) {
            let z = standardize(&x, invert).unwrap();
            prop_assert!(mean(&z).abs() < 1e-10);
            prop_assert!((variance(&z) - 1.0).abs() < 1e-8);
            let again = standardize(&z, false).unwrap();
            for (a, b) in z.iter().zip(&again) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn residual_is_orthogonal_and_affine_invariant(
            pair in (5usize..30).prop_flat_map(|n| (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )),
            scale in 0.1f64..10.0,
            shift in -50.0f64..50.0,
        ) {
            let (y, on) = pair;
            prop_assume!(variance(&y) > 1e-3 && variance(&on) > 1e-3);
            prop_assume!(pearson(&y, &on).abs() < 0.99);
            let ys = standardize(&y, false).unwrap();
            let os = standardize(&on, false).unwrap();
            let r = residualize(&ys, &os).unwrap();
            prop_assert!(pearson(&r, &os).abs() < 1e-10);
            let moved: Vec<f64> = on.iter().map(|v| scale * v + shift).collect();
            let r2 = residualize(&ys, &moved).unwrap();
            for (a, b) in r.iter().zip(&r2) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn composite_ignores_component_order(a in arb_vec(), seed in 0u64..1000) {
            let n = a.len();
            let b: Vec<f64> = (0..n).map(|i| ((i as u64 * 7919 + seed) % 101) as f64).collect();
            prop_assume!(variance(&b) > 1e-3);
            let ab = composite(&[&a, &b], &[false, true]);
            let ba = composite(&[&b, &a], &[true, false]);
            match (ab, ba) {
                (Ok(ab), Ok(ba)) => for (x, y) in ab.iter().zip(&ba) {
                    prop_assert!((x - y).abs() < 1e-10);
                },
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "order changed the outcome"),
            }
        }
    }
}
