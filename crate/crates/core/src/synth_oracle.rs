//! Synthetic two-election data with known ground truth.
//!
//! Zones get latent covariates, zone-level transition matrices built from a
//! baseline matrix plus covariate effects on the transition logits, and
//! stations whose first-election counts vary around the zone's origin shares.
//! Every voter of a station follows the zone's transition rows, so behaviour
//! is homogeneous within a zone unless heterogeneity stress is switched on.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariate_lab::{apply_recipe, composite, standardize, write_raw_covariates, CovariateMatrix, RawCovariates, RecipeStep, Transform};
use crate::data_model::{write_stations, CsvSchema, ElectionData, OptionSet, PartyAggregation, StationRecord, NO_VOTE};
use crate::ei_estimator::FlowTable;
use crate::error::{Error, Result};
use crate::transition_mnl::{Direction, TransitionCountPanel};
use crate::volatility::LoyaltyRule;

/// Estimated 2018 → 2022 regional flows for Umbria, thousands of votes.
pub const REGIONAL_ORIGINS: [&str; 5] = ["M5S", "PD", "FI", "Lega", NO_VOTE];
pub const REGIONAL_DESTINATIONS: [&str; 6] = ["M5S-OL", "PD", "OCL", "FdI", "Lega-FI-OCR", NO_VOTE];
pub const REGIONAL_FLOWS: [[f64; 6]; 5] = [
    [50.2, 5.7, 3.6, 16.6, 16.1, 38.2],
    [5.6, 69.6, 9.9, 6.8, 3.9, 23.9],
    [0.2, 0.2, 9.1, 17.3, 22.5, 7.8],
    [0.7, 0.0, 0.5, 59.3, 22.0, 15.9],
    [11.0, 5.1, 6.0, 13.4, 7.7, 133.5],
];

/// The regional flows as a table of votes (not thousands).
pub fn regional_flow_table() -> FlowTable {
    FlowTable::from_counts(
        "REGION",
        REGIONAL_ORIGINS.iter().map(|s| s.to_string()).collect(),
        REGIONAL_DESTINATIONS.iter().map(|s| s.to_string()).collect(),
        REGIONAL_FLOWS
            .iter()
            .map(|r| r.iter().map(|v| v * 1000.0).collect())
            .collect(),
    )
    .expect("fixture dimensions")
}

/// Final covariate names produced by [`default_recipe`].
pub const COVARIATES: [&str; 9] = [
    "geog", "recovery", "skill", "income", "unempl", "educ", "ksoc", "eutrust", "lefttrad",
];

/// Recipe turning the generated raw indicators into the model covariates.
pub fn default_recipe() -> Vec<RecipeStep> {
    let std = |name: &str, source: &str, invert: bool| RecipeStep::Standardize {
        name: name.into(),
        source: source.into(),
        invert,
    };
    let resid = |name: &str, source: &str| RecipeStep::Residualize {
        name: name.into(),
        source: source.into(),
        on: "geog".into(),
    };
    vec![
        RecipeStep::Composite {
            name: "geog".into(),
            sources: vec!["altitude_m".into(), "distance_km".into()],
            invert: vec![false, false],
        },
        std("recovery", "employment_change", true),
        std("skill_std", "high_skill_share", true),
        std("income_std", "mean_income", true),
        std("educ_std", "graduate_share", true),
        resid("skill", "skill_std"),
        resid("income", "income_std"),
        resid("educ", "educ_std"),
        std("unempl", "unemployment_rate", false),
        RecipeStep::Composite {
            name: "ksoc".into(),
            sources: vec![
                "volunteers".into(),
                "associations".into(),
                "blood_donors".into(),
                "local_turnout".into(),
            ],
            invert: vec![true; 4],
        },
        std("eutrust", "eu_distrust", false),
        RecipeStep::Dichotomize {
            name: "lefttrad".into(),
            numerator: "dc87_votes".into(),
            denominator: "pci87_votes".into(),
            ratio: crate::covariate_lab::DEFAULT_TRADITION_RATIO,
        },
    ]
}

/// Additive logit effect of a model covariate on one transition cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Effect {
    pub covariate: String,
    pub origin: String,
    pub destination: String,
    pub beta: f64,
}

/// Logit bump on one transition cell of one zone (zones numbered from 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedOutlier {
    pub zone: usize,
    pub origin: String,
    pub destination: String,
    pub bump: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub zones: usize,
    pub stations_per_zone: usize,
    /// Poisson mean of the station electorate.
    pub voters_per_station: f64,
    /// Dirichlet concentration of station origin shares around the zone's.
    pub origin_concentration: f64,
    /// Standard deviation of zone origin-share logits around `origin_shares`.
    pub zone_share_spread: f64,
    pub origins: Vec<String>,
    pub destinations: Vec<String>,
    pub origin_shares: Vec<f64>,
    /// Baseline transition rows, applied at zero covariates.
    pub base_p: Vec<Vec<f64>>,
    /// Explicit per-zone transition matrices; when set, replaces the baseline,
    /// effects, volatility factors and outliers.
    pub zone_p: Option<Vec<Vec<Vec<f64>>>>,
    pub effects: Vec<Effect>,
    /// Correlation of the zone factors shifting party-switch and
    /// to-abstention shares (relative scale per unit factor: `volatility_amplitude`).
    pub volatility_correlation: f64,
    pub volatility_amplitude: f64,
    pub outliers: Vec<PlantedOutlier>,
    /// Loyalty logit shift per unit log ratio of station to zone origin
    /// share; non-zero values break within-zone homogeneity.
    pub heterogeneity_stress: f64,
    /// Aggregated destination → raw labels with fixed split fractions.
    pub destination_split: IndexMap<String, IndexMap<String, f64>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let origin_shares: Vec<f64> = REGIONAL_FLOWS.iter().map(|r| r.iter().sum()).collect();
        let base_p = REGIONAL_FLOWS
            .iter()
            .map(|r| {
                let floored: Vec<f64> = r.iter().map(|v| v.max(0.3)).collect();
                let s: f64 = floored.iter().sum();
                floored.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let effect = |c: &str, o: &str, d: &str, beta: f64| Effect {
            covariate: c.into(),
            origin: o.into(),
            destination: d.into(),
            beta,
        };
        Self {
            seed: 2022,
            zones: 19,
            stations_per_zone: 53,
            voters_per_station: 700.0,
            origin_concentration: 8.0,
            zone_share_spread: 0.25,
            origins: REGIONAL_ORIGINS.iter().map(|s| s.to_string()).collect(),
            destinations: REGIONAL_DESTINATIONS.iter().map(|s| s.to_string()).collect(),
            origin_shares,
            base_p,
            zone_p: None,
            effects: vec![
                effect("geog", NO_VOTE, "FdI", 0.35),
                effect("recovery", "Lega", "FdI", 0.25),
                effect("eutrust", "M5S", NO_VOTE, 0.25),
                effect("lefttrad", "PD", "FdI", -0.3),
                effect("ksoc", "FI", NO_VOTE, 0.2),
                effect("skill", "FI", "FdI", 0.2),
            ],
            volatility_correlation: -0.42,
            volatility_amplitude: 0.15,
            outliers: Vec::new(),
            heterogeneity_stress: 0.0,
            destination_split: IndexMap::from([
                ("M5S-OL".to_string(), IndexMap::from([("M5S".to_string(), 0.85), ("OL".to_string(), 0.15)])),
                (
                    "Lega-FI-OCR".to_string(),
                    IndexMap::from([
                        ("Lega".to_string(), 0.5),
                        ("FI".to_string(), 0.38),
                        ("OCR".to_string(), 0.12),
                    ]),
                ),
            ]),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

fn check_rows(rows: &[Vec<f64>], n_rows: usize, n_cols: usize, what: &str) -> Result<()> {
    if rows.len() != n_rows {
        return Err(invalid(format!("{what}: expected {n_rows} rows, found {}", rows.len())));
    }
    for row in rows {
        if row.len() != n_cols {
            return Err(invalid(format!("{what}: expected {n_cols} columns, found {}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!("{what}: entries must be finite and non-negative")));
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("{what}: rows must sum to 1")));
        }
    }
    Ok(())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.zones == 0 || self.stations_per_zone < 2 {
            return Err(invalid("need at least one zone and two stations per zone"));
        }
        if !(self.voters_per_station > 0.0) || !(self.origin_concentration > 0.0) {
            return Err(invalid("voters_per_station and origin_concentration must be positive"));
        }
        if !self.zone_share_spread.is_finite() || self.zone_share_spread < 0.0 {
            return Err(invalid("zone_share_spread must be non-negative"));
        }
        if !(-1.0..=1.0).contains(&self.volatility_correlation) || !self.volatility_amplitude.is_finite() {
            return Err(invalid("volatility_correlation must lie in [-1, 1]"));
        }
        OptionSet::from_labels(self.origins.clone()).map_err(|e| invalid(e.to_string()))?;
        OptionSet::from_labels(self.destinations.clone()).map_err(|e| invalid(e.to_string()))?;
        let (i, j) = (self.origins.len(), self.destinations.len());
        if self.origin_shares.len() != i || self.origin_shares.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(invalid("origin_shares must be positive, one per origin"));
        }
        check_rows(&self.base_p, i, j, "base_p")?;
        if let Some(zp) = &self.zone_p {
            if zp.len() != self.zones {
                return Err(invalid("zone_p needs one matrix per zone"));
            }
            for m in zp {
                check_rows(m, i, j, "zone_p")?;
            }
        }
        for e in &self.effects {
            if !COVARIATES.contains(&e.covariate.as_str()) {
                return Err(invalid(format!("unknown covariate `{}`", e.covariate)));
            }
            self.cell(1, &e.origin, &e.destination)?;
            if !e.beta.is_finite() {
                return Err(invalid("effect sizes must be finite"));
            }
        }
        for o in &self.outliers {
            self.cell(o.zone, &o.origin, &o.destination)?;
            if !o.bump.is_finite() {
                return Err(invalid("outlier bumps must be finite"));
            }
        }
        for (dest, parts) in &self.destination_split {
            if !self.destinations.contains(dest) {
                return Err(invalid(format!("split of unknown destination `{dest}`")));
            }
            if parts.is_empty() || parts.values().any(|f| !(*f > 0.0)) {
                return Err(invalid(format!("split of `{dest}` needs positive fractions")));
            }
            if (parts.values().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("split fractions of `{dest}` must sum to 1")));
            }
        }
        let raw = self.raw_destinations();
        let mut seen = std::collections::HashSet::new();
        if raw.iter().any(|l| !seen.insert(l)) {
            return Err(invalid("raw destination labels must be unique"));
        }
        Ok(())
    }

    fn cell(&self, zone: usize, origin: &str, destination: &str) -> Result<(usize, usize)> {
        let unknown = || Error::UnknownCell {
            zone,
            origin: origin.to_string(),
            destination: destination.to_string(),
        };
        if zone == 0 || zone > self.zones {
            return Err(unknown());
        }
        let i = self.origins.iter().position(|o| o == origin).ok_or_else(unknown)?;
        let j = self.destinations.iter().position(|d| d == destination).ok_or_else(unknown)?;
        Ok((i, j))
    }

    pub fn zone_id(&self, zone: usize) -> String {
        format!("Z{zone:02}")
    }

    /// Second-election labels as they appear in the station file.
    pub fn raw_destinations(&self) -> Vec<String> {
        self.destinations
            .iter()
            .flat_map(|d| match self.destination_split.get(d) {
                Some(parts) => parts.keys().cloned().collect(),
                None => vec![d.clone()],
            })
            .collect()
    }

    /// Mapping from raw labels back to the analysed options.
    pub fn aggregation(&self) -> PartyAggregation {
        let mut election2 = IndexMap::new();
        for d in &self.destinations {
            match self.destination_split.get(d) {
                Some(parts) => parts.keys().for_each(|r| {
                    election2.insert(r.clone(), d.clone());
                }),
                None => {
                    election2.insert(d.clone(), d.clone());
                }
            }
        }
        PartyAggregation {
            election1: self.origins.iter().map(|o| (o.clone(), o.clone())).collect(),
            election2,
            loyalty: IndexMap::new(),
        }
    }
}

/// Copy of `spec` with an extra logit bump on one cell of one zone.
pub fn plant_outlier(spec: &SynthSpec, zone: usize, origin: &str, destination: &str, bump: f64) -> Result<SynthSpec> {
    spec.cell(zone, origin, destination)?;
    if !bump.is_finite() {
        return Err(invalid("bump must be finite"));
    }
    let mut out = spec.clone();
    if bump != 0.0 {
        out.outliers.push(PlantedOutlier {
            zone,
            origin: origin.to_string(),
            destination: destination.to_string(),
            bump,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneTruth {
    pub zone_id: String,
    pub origin_shares: Vec<f64>,
    /// True origin × destination transition probabilities.
    pub p: Vec<Vec<f64>>,
    /// Realized individual-level transitions, summed over the zone's stations.
    pub flows: Vec<Vec<u64>>,
    pub switch_factor: f64,
    pub abstention_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SynthSpec,
    pub origins: Vec<String>,
    pub destinations: Vec<String>,
    /// Model covariates per zone, as produced by the default recipe.
    pub covariates: IndexMap<String, Vec<f64>>,
    pub zones: Vec<ZoneTruth>,
}

impl Truth {
    pub fn p_of(&self, zone_id: &str) -> Option<&Vec<Vec<f64>>> {
        self.zones.iter().find(|z| z.zone_id == zone_id).map(|z| &z.p)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    /// Stations with raw second-election labels.
    pub data: ElectionData,
    pub covariates: RawCovariates,
    pub aggregation: PartyAggregation,
    pub truth: Truth,
}

fn softmax_logits(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = eta.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Draw `n` items over categories with probabilities `p` (sequential binomials).
pub fn multinomial(rng: &mut ChaCha8Rng, n: u64, p: &[f64]) -> Vec<u64> {
    let mut out = vec![0; p.len()];
    let mut remaining = n;
    let mut mass: f64 = p.iter().sum();
    for (k, &pk) in p.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if k + 1 == p.len() {
            out[k] = remaining;
            break;
        }
        let q = if mass > 0.0 { (pk / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(remaining, q).expect("valid binomial").sample(rng);
        out[k] = draw;
        remaining -= draw;
        mass -= pk;
    }
    out
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let s: f64 = draws.iter().sum();
    if s > 0.0 {
        draws.into_iter().map(|d| d / s).collect()
    } else {
        vec![1.0 / alpha.len() as f64; alpha.len()]
    }
}

struct ZoneLatents {
    raw: RawCovariates,
    covariates: CovariateMatrix,
    switch: Vec<f64>,
    abstention: Vec<f64>,
    share_noise: Vec<Vec<f64>>,
}

fn latents(spec: &SynthSpec) -> Result<ZoneLatents> {
    let z = spec.zones;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let zone_ids: Vec<String> = (1..=z).map(|k| spec.zone_id(k)).collect();

    // geography: two indicators with r ≈ 0.55
    let g = normals(&mut rng, z);
    let e1 = normals(&mut rng, z);
    let e2 = normals(&mut rng, z);
    let loading = 0.55f64.sqrt();
    let resid = (1.0 - 0.55f64).sqrt();
    let altitude: Vec<f64> = (0..z).map(|k| 350.0 + 180.0 * (loading * g[k] + resid * e1[k])).collect();
    let distance: Vec<f64> = (0..z).map(|k| 25.0 + 9.0 * (loading * g[k] + resid * e2[k])).collect();
    let geog = if z >= 2 {
        composite(&[&altitude, &distance], &[false, false]).unwrap_or_else(|_| g.clone())
    } else {
        g.clone()
    };

    // slow recovery correlates −0.75 with geography
    let er = normals(&mut rng, z);
    let recovery: Vec<f64> = (0..z).map(|k| -0.75 * geog[k] + (1.0 - 0.5625f64).sqrt() * er[k]).collect();

    // skill, income, education: shared geographic part plus correlated residuals
    let common = normals(&mut rng, z);
    let mut econ = Vec::new();
    for _ in 0..3 {
        let e = normals(&mut rng, z);
        let u: Vec<f64> = (0..z).map(|k| 0.35f64.sqrt() * common[k] + 0.65f64.sqrt() * e[k]).collect();
        econ.push((0..z).map(|k| 0.8 * geog[k] + 0.6 * u[k]).collect::<Vec<f64>>());
    }
    let unempl = normals(&mut rng, z);
    let k_latent = normals(&mut rng, z);
    let ksoc_parts: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let e = normals(&mut rng, z);
            (0..z).map(|k| -k_latent[k] + 0.8 * e[k]).collect()
        })
        .collect();
    let eu = normals(&mut rng, z);
    let dc_noise = normals(&mut rng, z);
    let ratio_noise = normals(&mut rng, z);

    let mut columns = IndexMap::new();
    columns.insert("altitude_m".to_string(), altitude);
    columns.insert("distance_km".to_string(), distance);
    columns.insert("employment_change".to_string(), recovery.iter().map(|r| 2.0 - 3.0 * r).collect());
    columns.insert("high_skill_share".to_string(), econ[0].iter().map(|v| 30.0 - 5.0 * v).collect());
    columns.insert("mean_income".to_string(), econ[1].iter().map(|v| 18000.0 - 2500.0 * v).collect());
    columns.insert("graduate_share".to_string(), econ[2].iter().map(|v| 12.0 - 3.0 * v).collect());
    columns.insert("unemployment_rate".to_string(), unempl.iter().map(|v| 8.0 + 2.0 * v).collect());
    for (name, part) in ["volunteers", "associations", "blood_donors", "local_turnout"].iter().zip(&ksoc_parts) {
        let (centre, scale) = match *name {
            "volunteers" => (60.0, 12.0),
            "associations" => (9.0, 2.0),
            "blood_donors" => (45.0, 8.0),
            _ => (55.0, 6.0),
        };
        columns.insert(name.to_string(), part.iter().map(|v| centre + scale * v).collect());
    }
    columns.insert("eu_distrust".to_string(), eu.iter().map(|v| 40.0 + 6.0 * v).collect());
    let dc87: Vec<f64> = dc_noise.iter().map(|v| (3000.0 * (1.0 + 0.2 * v)).max(100.0)).collect();
    let pci87: Vec<f64> = (0..z).map(|k| dc87[k] * (-0.3 + 0.45 * ratio_noise[k]).exp()).collect();
    columns.insert("dc87_votes".to_string(), dc87.iter().map(|v| v.round()).collect());
    columns.insert("pci87_votes".to_string(), pci87.iter().map(|v| v.round()).collect());
    let raw = RawCovariates {
        zone_ids: zone_ids.clone(),
        columns,
    };

    let keep: Vec<String> = COVARIATES.iter().map(|s| s.to_string()).collect();
    let covariates = if z >= 3 {
        apply_recipe(&raw, &default_recipe(), &keep)?
    } else {
        // too few zones to standardize: expose the latent scores directly
        let mut m = CovariateMatrix::new(zone_ids);
        for name in &keep {
            m.push(name.clone(), vec![0.0; z], Transform::Raw { source: name.clone() })?;
        }
        m
    };

    let us = normals(&mut rng, z);
    let ue = normals(&mut rng, z);
    let rho = spec.volatility_correlation;
    let switch = us.clone();
    let abstention = (0..z).map(|k| rho * us[k] + (1.0 - rho * rho).sqrt() * ue[k]).collect();
    let share_noise = (0..z).map(|_| normals(&mut rng, spec.origins.len())).collect();
    Ok(ZoneLatents {
        raw,
        covariates,
        switch,
        abstention,
        share_noise,
    })
}

/// Rescale a row's switch and abstention shares by `1 + ds` and `1 + da`,
/// taking the difference from the loyal cell. Shares move linearly in the
/// zone factors, so aggregated volatility percentages inherit their
/// correlation.
fn shift_volatility(row: &[f64], loyal: Option<usize>, abst: Option<usize>, ds: f64, da: f64) -> Vec<f64> {
    let Some(l) = loyal else { return row.to_vec() };
    let group = |j: usize| {
        if Some(j) == abst {
            1
        } else if j == l {
            2
        } else {
            0
        }
    };
    let switch: f64 = (0..row.len()).filter(|&j| group(j) == 0).map(|j| row[j]).sum();
    let abstain: f64 = (0..row.len()).filter(|&j| group(j) == 1).map(|j| row[j]).sum();
    let (mut ds, mut da) = (ds.max(-0.9), da.max(-0.9));
    // keep at least 2% loyalty (or the original, if smaller)
    let floor = row[l].min(0.02);
    let loyal_after = row[l] - switch * ds - abstain * da;
    if loyal_after < floor {
        let growth = switch * ds.max(0.0) + abstain * da.max(0.0);
        let room = row[l] - floor + switch * (-ds).max(0.0) + abstain * (-da).max(0.0);
        let shrink = if growth > 0.0 { (room / growth).clamp(0.0, 1.0) } else { 1.0 };
        if ds > 0.0 {
            ds *= shrink;
        }
        if da > 0.0 {
            da *= shrink;
        }
    }
    let loyal_share = row[l] - switch * ds - abstain * da;
    row.iter()
        .enumerate()
        .map(|(j, &v)| match group(j) {
            0 => v * (1.0 + ds),
            1 => v * (1.0 + da),
            _ => loyal_share,
        })
        .collect()
}

fn ln_or_neg_inf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn zone_matrices(spec: &SynthSpec, lat: &ZoneLatents) -> Result<Vec<Vec<Vec<f64>>>> {
    if let Some(zp) = &spec.zone_p {
        return Ok(zp.clone());
    }
    let abst = spec.destinations.iter().position(|d| d == NO_VOTE);
    let abst_origin = spec.origins.iter().position(|o| o == NO_VOTE);
    let loyal: Vec<Option<usize>> = spec
        .origins
        .iter()
        .enumerate()
        .map(|(i, o)| LoyaltyRule::Containment.loyal_destination(i, o, &spec.destinations))
        .collect();
    let mut out = Vec::with_capacity(spec.zones);
    for z in 0..spec.zones {
        let mut p = Vec::with_capacity(spec.origins.len());
        for (i, base_row) in spec.base_p.iter().enumerate() {
            let mut eta: Vec<f64> = base_row.iter().map(|&v| ln_or_neg_inf(v)).collect();
            for e in &spec.effects {
                let (ei, ej) = spec.cell(1, &e.origin, &e.destination)?;
                if ei == i {
                    let x = lat
                        .covariates
                        .column(&e.covariate)
                        .ok_or_else(|| Error::UnknownCovariate(e.covariate.clone()))?
                        .values[z];
                    eta[ej] += e.beta * x;
                }
            }
            let mut row = softmax_logits(&eta);
            if Some(i) != abst_origin && spec.volatility_amplitude != 0.0 {
                row = shift_volatility(
                    &row,
                    loyal[i],
                    abst,
                    spec.volatility_amplitude * lat.switch[z],
                    spec.volatility_amplitude * lat.abstention[z],
                );
            }
            let bumps: Vec<(usize, f64)> = spec
                .outliers
                .iter()
                .filter(|o| o.zone == z + 1)
                .map(|o| spec.cell(o.zone, &o.origin, &o.destination).map(|(oi, oj)| (oi, oj, o.bump)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter(|(oi, _, _)| *oi == i)
                .map(|(_, oj, b)| (oj, b))
                .collect();
            if !bumps.is_empty() {
                let mut eta: Vec<f64> = row.iter().map(|&v| ln_or_neg_inf(v)).collect();
                for (oj, b) in bumps {
                    eta[oj] += b;
                }
                row = softmax_logits(&eta);
            }
            p.push(row);
        }
        out.push(p);
    }
    Ok(out)
}

/// Zone-level true transition matrices and model covariates, without
/// drawing any stations.
pub fn true_transition_matrices(spec: &SynthSpec) -> Result<(Vec<Vec<Vec<f64>>>, CovariateMatrix)> {
    spec.validate()?;
    let lat = latents(spec)?;
    Ok((zone_matrices(spec, &lat)?, lat.covariates))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let lat = latents(spec)?;
    let matrices = zone_matrices(spec, &lat)?;
    let n_orig = spec.origins.len();
    let n_dest = spec.destinations.len();
    let raw_dest = spec.raw_destinations();
    let ln_shares: Vec<f64> = spec.origin_shares.iter().map(|s| s.ln()).collect();
    let electorate = Poisson::new(spec.voters_per_station).map_err(|e| invalid(e.to_string()))?;
    let loyal: Vec<Option<usize>> = spec
        .origins
        .iter()
        .enumerate()
        .map(|(i, o)| LoyaltyRule::Containment.loyal_destination(i, o, &spec.destinations))
        .collect();

    let mut stations = Vec::with_capacity(spec.zones * spec.stations_per_zone);
    let mut zones = Vec::with_capacity(spec.zones);
    for z in 0..spec.zones {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(z as u64 + 1);
        let zone_id = spec.zone_id(z + 1);
        let eta: Vec<f64> = (0..n_orig)
            .map(|i| ln_shares[i] + spec.zone_share_spread * lat.share_noise[z][i])
            .collect();
        let zone_shares = softmax_logits(&eta);
        let alpha: Vec<f64> = zone_shares.iter().map(|s| s * spec.origin_concentration).collect();
        let p = &matrices[z];
        let mut flows = vec![vec![0u64; n_dest]; n_orig];
        for s in 0..spec.stations_per_zone {
            let voters = (electorate.sample(&mut rng) as u64).max(1);
            let shares = dirichlet(&mut rng, &alpha);
            let counts1 = multinomial(&mut rng, voters, &shares);
            let mut agg2 = vec![0u64; n_dest];
            for i in 0..n_orig {
                let row = if spec.heterogeneity_stress != 0.0 && spec.zone_p.is_none() {
                    stressed_row(&p[i], loyal[i], spec.heterogeneity_stress, shares[i], zone_shares[i])
                } else {
                    p[i].clone()
                };
                let moved = multinomial(&mut rng, counts1[i], &row);
                for j in 0..n_dest {
                    agg2[j] += moved[j];
                    flows[i][j] += moved[j];
                }
            }
            let mut counts2 = Vec::with_capacity(raw_dest.len());
            for (j, d) in spec.destinations.iter().enumerate() {
                match spec.destination_split.get(d) {
                    Some(parts) => {
                        let fr: Vec<f64> = parts.values().copied().collect();
                        counts2.extend(multinomial(&mut rng, agg2[j], &fr));
                    }
                    None => counts2.push(agg2[j]),
                }
            }
            stations.push(StationRecord {
                station_id: format!("{zone_id}-S{:03}", s + 1),
                zone_id: zone_id.clone(),
                electorate1: voters,
                electorate2: voters,
                counts1,
                counts2,
            });
        }
        zones.push(ZoneTruth {
            zone_id,
            origin_shares: zone_shares,
            p: p.clone(),
            flows,
            switch_factor: lat.switch[z],
            abstention_factor: lat.abstention[z],
        });
    }

    let data = ElectionData::new(
        OptionSet::from_labels(spec.origins.clone())?,
        OptionSet::from_labels(raw_dest)?,
        stations,
    )?;
    let covariates = lat
        .covariates
        .columns
        .iter()
        .map(|c| (c.name.clone(), c.values.clone()))
        .collect();
    Ok(SynthOutput {
        data,
        covariates: lat.raw,
        aggregation: spec.aggregation(),
        truth: Truth {
            spec: spec.clone(),
            origins: spec.origins.clone(),
            destinations: spec.destinations.clone(),
            covariates,
            zones,
        },
    })
}

fn stressed_row(row: &[f64], loyal: Option<usize>, stress: f64, share: f64, zone_share: f64) -> Vec<f64> {
    let Some(l) = loyal else { return row.to_vec() };
    let shift = stress * (share.max(1e-6) / zone_share.max(1e-6)).ln();
    let mut eta: Vec<f64> = row.iter().map(|&v| ln_or_neg_inf(v)).collect();
    eta[l] += shift;
    softmax_logits(&eta)
}

pub const STATIONS_FILE: &str = "stations.csv";
pub const COVARIATES_FILE: &str = "covariates.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const AGGREGATION_FILE: &str = "aggregation.json";

/// Write stations.csv, covariates.csv, aggregation.json and truth.json.
pub fn write_outputs(out: &SynthOutput, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let paths = [STATIONS_FILE, COVARIATES_FILE, AGGREGATION_FILE, TRUTH_FILE].map(|f| dir.join(f));
    write_stations(fs::File::create(&paths[0])?, &out.data, &CsvSchema::default())?;
    write_raw_covariates(fs::File::create(&paths[1])?, &out.covariates)?;
    fs::write(&paths[2], serde_json::to_string_pretty(&out.aggregation)? + "\n")?;
    fs::write(&paths[3], serde_json::to_string_pretty(&out.truth)? + "\n")?;
    Ok(paths.to_vec())
}

/// Multinomial panel drawn straight from a logit model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSpec {
    pub seed: u64,
    pub zones: usize,
    pub options: Vec<String>,
    pub covariates: Vec<String>,
    /// Intercept per option (reference entries are ignored if zero).
    pub beta0: Vec<f64>,
    /// Option × covariate logit coefficients.
    pub beta: Vec<Vec<f64>>,
    /// Poisson mean of each zone's total.
    pub total_per_zone: f64,
    /// Pairwise correlation of the standard-normal covariates.
    pub covariate_correlation: f64,
    /// Extra logit on (zone index from 0, option index).
    pub bump: Option<(usize, usize, f64)>,
}

impl Default for PanelSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            zones: 19,
            options: vec!["a".into(), "b".into(), "c".into()],
            covariates: vec!["x1".into(), "x2".into()],
            beta0: vec![0.0, 0.0, 0.0],
            beta: vec![vec![0.0, 0.0]; 3],
            total_per_zone: 3000.0,
            covariate_correlation: 0.0,
            bump: None,
        }
    }
}

/// Zone probabilities implied by a panel spec at given covariate values.
pub fn panel_probabilities(spec: &PanelSpec, x: &CovariateMatrix) -> Vec<Vec<f64>> {
    (0..x.n_zones())
        .map(|z| {
            let mut eta: Vec<f64> = (0..spec.options.len())
                .map(|j| spec.beta0[j] + (0..x.n_covariates()).map(|v| spec.beta[j][v] * x.value(z, v)).sum::<f64>())
                .collect();
            if let Some((bz, bj, b)) = spec.bump {
                if bz == z {
                    eta[bj] += b;
                }
            }
            softmax_logits(&eta)
        })
        .collect()
}

pub fn simulate_panel(spec: &PanelSpec) -> Result<(TransitionCountPanel, CovariateMatrix)> {
    let (j, v) = (spec.options.len(), spec.covariates.len());
    if j < 2 || spec.zones < 3 {
        return Err(invalid("panel needs two options and three zones"));
    }
    if spec.beta0.len() != j || spec.beta.len() != j || spec.beta.iter().any(|r| r.len() != v) {
        return Err(invalid("coefficient dimensions do not match options × covariates"));
    }
    if !(0.0..1.0).contains(&spec.covariate_correlation) || !(spec.total_per_zone > 0.0) {
        return Err(invalid("covariate_correlation must lie in [0, 1) and totals be positive"));
    }
    if let Some((bz, bj, _)) = spec.bump {
        if bz >= spec.zones || bj >= j {
            return Err(invalid("bump cell out of range"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let zone_ids: Vec<String> = (1..=spec.zones).map(|z| format!("Z{z:02}")).collect();
    let common = normals(&mut rng, spec.zones);
    let r = spec.covariate_correlation;
    let mut x = CovariateMatrix::new(zone_ids.clone());
    for name in &spec.covariates {
        let e = normals(&mut rng, spec.zones);
        let raw: Vec<f64> = (0..spec.zones).map(|z| r.sqrt() * common[z] + (1.0 - r).sqrt() * e[z]).collect();
        let values = standardize(&raw, false)?;
        x.push(name.clone(), values, Transform::Standardized { source: name.clone(), inverted: false })?;
    }
    let probs = panel_probabilities(spec, &x);
    let poisson = Poisson::new(spec.total_per_zone).map_err(|e| invalid(e.to_string()))?;
    let mut counts = Vec::with_capacity(spec.zones);
    for p in &probs {
        let n = poisson.sample(&mut rng) as u64;
        counts.push(multinomial(&mut rng, n, p).into_iter().map(|c| c as f64).collect::<Vec<f64>>());
    }
    let panel = TransitionCountPanel {
        direction: Direction::Outgoing,
        anchor: "synthetic".into(),
        zone_ids,
        options: spec.options.clone(),
        totals: counts.iter().map(|r| r.iter().sum()).collect(),
        count_se: vec![vec![0.0; j]; spec.zones],
        counts,
    };
    Ok((panel, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            zones: 4,
            stations_per_zone: 12,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid_with_stochastic_rows() {
        let spec = SynthSpec::default();
        spec.validate().unwrap();
        let (mats, cov) = true_transition_matrices(&spec).unwrap();
        assert_eq!(mats.len(), 19);
        assert_eq!(cov.names(), COVARIATES.to_vec());
        for m in &mats {
            for row in m {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn identity_transitions_copy_counts() {
        let n = 5;
        let identity: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let labels: Vec<String> = ["A", "B", "C", "D", NO_VOTE].map(String::from).to_vec();
        let spec = SynthSpec {
            zones: 3,
            stations_per_zone: 10,
            origins: labels.clone(),
            destinations: labels,
            origin_shares: vec![1.0; n],
            base_p: identity.clone(),
            zone_p: Some(vec![identity; 3]),
            effects: vec![],
            destination_split: IndexMap::new(),
            ..SynthSpec::default()
        };
        let out = generate(&spec).unwrap();
        for s in &out.data.stations {
            assert_eq!(s.counts1, s.counts2);
            assert_eq!(s.total1(), s.electorate1);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = small_spec();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_outputs(&generate(&spec).unwrap(), a.path()).unwrap();
        write_outputs(&generate(&spec).unwrap(), b.path()).unwrap();
        for f in [STATIONS_FILE, COVARIATES_FILE, AGGREGATION_FILE, TRUTH_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let other = generate(&SynthSpec { seed: 7, ..spec }).unwrap();
        assert_ne!(other.data.stations[0].counts1, generate(&small_spec()).unwrap().data.stations[0].counts1);
    }

    #[test]
    fn counts_are_consistent() {
        let out = generate(&small_spec()).unwrap();
        let raw = out.data.options2.labels().to_vec();
        assert_eq!(raw, vec!["M5S", "OL", "PD", "OCL", "FdI", "Lega", "FI", "OCR", NO_VOTE]);
        for s in &out.data.stations {
            assert_eq!(s.total1(), s.electorate1);
            assert_eq!(s.total2(), s.electorate2);
        }
        for zt in &out.truth.zones {
            let zone_total: u64 = out
                .data
                .stations
                .iter()
                .filter(|s| s.zone_id == zt.zone_id)
                .map(|s| s.total1())
                .sum();
            assert_eq!(zt.flows.iter().flatten().sum::<u64>(), zone_total);
        }
    }

    #[test]
    fn outlier_planting() {
        let spec = SynthSpec {
            effects: vec![],
            volatility_amplitude: 0.0,
            ..SynthSpec::default()
        };
        assert_eq!(plant_outlier(&spec, 2, "FI", "FdI", 0.0).unwrap(), spec);
        let bumped = plant_outlier(&spec, 2, "FI", "FdI", 1.0).unwrap();
        let (mats, _) = true_transition_matrices(&bumped).unwrap();
        let (fi, fdi) = (2, 3);
        for (z, m) in mats.iter().enumerate() {
            if z != 1 {
                assert!(mats[1][fi][fdi] > m[fi][fdi]);
            }
        }
        assert!(matches!(plant_outlier(&spec, 20, "FI", "FdI", 1.0), Err(Error::UnknownCell { .. })));
        assert!(matches!(plant_outlier(&spec, 2, "FI", "XX", 1.0), Err(Error::UnknownCell { .. })));
        assert!(matches!(plant_outlier(&spec, 2, "FI", "FdI", f64::NAN), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SynthSpec::default();
        s.base_p[0][0] += 0.5;
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        let s = SynthSpec {
            zones: 0,
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.effects[0].covariate = "nope".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn aggregation_maps_raw_labels() {
        let spec = SynthSpec::default();
        let agg = spec.aggregation();
        assert_eq!(agg.election2["OL"], "M5S-OL");
        assert_eq!(agg.election2["OCR"], "Lega-FI-OCR");
        assert_eq!(agg.election2["FdI"], "FdI");
        assert_eq!(agg.election1.len(), 5);
    }

    #[test]
    fn panel_simulation_shapes() {
        let (panel, x) = simulate_panel(&PanelSpec::default()).unwrap();
        assert_eq!(panel.n_zones(), 19);
        assert_eq!(x.n_covariates(), 2);
        for (row, t) in panel.counts.iter().zip(&panel.totals) {
            assert_eq!(row.iter().sum::<f64>(), *t);
        }
    }
}
