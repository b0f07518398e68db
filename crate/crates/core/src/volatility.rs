//! Row-percentage tables and electoral volatility indexes.
//!
//! Volatility is measured on first-election party voters only: the share
//! that moved to another party and the share that moved to abstention.

use std::fmt::Write as _;
use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::covariate_lab::pearson;
use crate::data_model::option_contains;
use crate::ei_estimator::FlowTable;
use crate::error::{Error, Result};

pub const REGION: &str = "REGION";

/// Which destination counts as repeating an origin's choice.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoyaltyRule {
    /// Same label, or the aggregated destination containing the origin label
    /// (`FI` → `Lega-FI-OCR`).
    #[default]
    Containment,
    /// The destination in the same position as the origin.
    Positional,
    /// Origin label → destination label; unlisted origins fall back to containment.
    Explicit(IndexMap<String, String>),
}

impl LoyaltyRule {
    pub fn loyal_destination(&self, origin_index: usize, origin: &str, destinations: &[String]) -> Option<usize> {
        let contained = || {
            destinations
                .iter()
                .position(|d| d == origin)
                .or_else(|| destinations.iter().position(|d| option_contains(d, origin)))
        };
        match self {
            LoyaltyRule::Containment => contained(),
            LoyaltyRule::Positional => (origin_index < destinations.len()).then_some(origin_index),
            LoyaltyRule::Explicit(map) => match map.get(origin) {
                Some(dest) => destinations.iter().position(|d| d == dest),
                None => contained(),
            },
        }
    }

    fn describe(&self) -> &'static str {
        match self {
            LoyaltyRule::Containment => "containment",
            LoyaltyRule::Positional => "positional",
            LoyaltyRule::Explicit(_) => "explicit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentTable {
    pub origins: Vec<String>,
    pub destinations: Vec<String>,
    /// Unrounded row percentages.
    pub values: Vec<Vec<f64>>,
}

impl PercentTable {
    /// Percentages rounded to one decimal for display.
    pub fn rounded(&self) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .map(|r| r.iter().map(|v| round1(*v)).collect())
            .collect()
    }
}

pub fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

pub fn row_percentages(f: &FlowTable) -> Result<PercentTable> {
    let values = f
        .counts
        .iter()
        .zip(&f.origins)
        .map(|(row, label)| {
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(Error::ZeroRowTotal(label.clone()));
            }
            Ok(row.iter().map(|v| 100.0 * v / total).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(PercentTable {
        origins: f.origins.clone(),
        destinations: f.destinations.clone(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityRecord {
    pub zone_id: String,
    pub party_switch_pct: f64,
    pub to_abstention_pct: f64,
    /// Origin label → percentage of its voters repeating their choice.
    pub loyalty_pct: IndexMap<String, f64>,
    pub loyalty_rule: String,
    pub notes: Vec<String>,
}

pub fn volatility_indexes(f: &FlowTable, abstention_label: &str, rule: &LoyaltyRule) -> Result<VolatilityRecord> {
    volatility_indexes_with_omitted(f, abstention_label, rule, &[])
}

/// As [`volatility_indexes`]; `omitted_origins` names first-election party
/// categories absent from the table, recorded as a note on the result.
pub fn volatility_indexes_with_omitted(
    f: &FlowTable,
    abstention_label: &str,
    rule: &LoyaltyRule,
    omitted_origins: &[String],
) -> Result<VolatilityRecord> {
    let abst_origin = f.origins.iter().position(|o| o == abstention_label);
    let abst_dest = f
        .destinations
        .iter()
        .position(|d| d == abstention_label)
        .ok_or_else(|| Error::MissingAbstention(abstention_label.to_string()))?;
    if abst_origin.is_none() {
        return Err(Error::MissingAbstention(abstention_label.to_string()));
    }

    let mut party_total = 0.0;
    let mut switched = 0.0;
    let mut abstained = 0.0;
    let mut loyalty_pct = IndexMap::new();
    let mut notes = Vec::new();
    for (i, (origin, row)) in f.origins.iter().zip(&f.counts).enumerate() {
        let total: f64 = row.iter().sum();
        let loyal = rule.loyal_destination(i, origin, &f.destinations);
        if let Some(j) = loyal {
            if total > 0.0 {
                loyalty_pct.insert(origin.clone(), 100.0 * row[j] / total);
            }
            let dest = &f.destinations[j];
            if dest != origin && matches!(rule, LoyaltyRule::Containment) {
                notes.push(format!("{origin} -> {dest} counted as loyalty (aggregated destination)"));
            }
        }
        if Some(i) == abst_origin {
            continue;
        }
        party_total += total;
        for (j, &v) in row.iter().enumerate() {
            if j == abst_dest {
                abstained += v;
            } else if Some(j) != loyal {
                switched += v;
            }
        }
    }
    if party_total <= 0.0 {
        return Err(Error::ZeroRowTotal("party origins".into()));
    }
    if !omitted_origins.is_empty() {
        notes.push(format!(
            "excludes first-election categories {}; indexes that include them differ",
            omitted_origins.join(", ")
        ));
    }
    Ok(VolatilityRecord {
        zone_id: f.zone_id.clone(),
        party_switch_pct: 100.0 * switched / party_total,
        to_abstention_pct: 100.0 * abstained / party_total,
        loyalty_pct,
        loyalty_rule: rule.describe().to_string(),
        notes,
    })
}

/// Elementwise sum of zone tables.
pub fn aggregate_region(tables: &[FlowTable]) -> Result<FlowTable> {
    let first = tables.first().ok_or(Error::OptionMismatch)?;
    let mut out = FlowTable {
        zone_id: REGION.to_string(),
        origins: first.origins.clone(),
        destinations: first.destinations.clone(),
        counts: vec![vec![0.0; first.destinations.len()]; first.origins.len()],
        row_margins: vec![0.0; first.origins.len()],
        col_margins: vec![0.0; first.destinations.len()],
    };
    for t in tables {
        if t.origins != out.origins || t.destinations != out.destinations {
            return Err(Error::OptionMismatch);
        }
        for (acc, row) in out.counts.iter_mut().zip(&t.counts) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        out.row_margins.iter_mut().zip(&t.row_margins).for_each(|(a, v)| *a += v);
        out.col_margins.iter_mut().zip(&t.col_margins).for_each(|(a, v)| *a += v);
    }
    Ok(out)
}

/// Pearson correlation of the two volatility components across zones.
pub fn volatility_correlation(records: &[VolatilityRecord]) -> Result<f64> {
    if records.len() < 3 {
        return Err(Error::LengthMismatch("at least three zones required".into()));
    }
    let a: Vec<f64> = records.iter().map(|r| r.party_switch_pct).collect();
    let b: Vec<f64> = records.iter().map(|r| r.to_abstention_pct).collect();
    let r = pearson(&a, &b);
    if r.is_nan() {
        let which = if crate::covariate_lab::variance(&a) == 0.0 {
            "party_switch_pct"
        } else {
            "to_abstention_pct"
        };
        return Err(Error::ZeroVariance(which.into()));
    }
    Ok(r)
}

/// `zone_id,party_switch_pct,to_abstention_pct,loyalty_<origin>...`
pub fn write_volatility_csv<W: Write>(writer: W, records: &[VolatilityRecord]) -> Result<()> {
    let mut origins: Vec<String> = Vec::new();
    for r in records {
        for k in r.loyalty_pct.keys() {
            if !origins.contains(k) {
                origins.push(k.clone());
            }
        }
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["zone_id".to_string(), "party_switch_pct".into(), "to_abstention_pct".into()];
    header.extend(origins.iter().map(|o| format!("loyalty_{o}")));
    wtr.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.zone_id.clone(),
            format!("{:.4}", r.party_switch_pct),
            format!("{:.4}", r.to_abstention_pct),
        ];
        row.extend(
            origins
                .iter()
                .map(|o| r.loyalty_pct.get(o).map_or(String::new(), |v| format!("{v:.4}"))),
        );
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Counts in thousands (upper panel) and row percentages (lower panel),
/// both to one decimal.
pub fn render_transition_table(f: &FlowTable, first_label: &str) -> Result<String> {
    let pct = row_percentages(f)?;
    let mut out = String::new();
    let cell = |v: f64| format!("{:.1}", round1(v));
    let _ = writeln!(out, "{first_label},{},Total", f.destinations.join(","));
    let _ = writeln!(out, "Numbers of vote (thousands){}", ",".repeat(f.destinations.len() + 1));
    for (origin, row) in f.origins.iter().zip(&f.counts) {
        let total: f64 = row.iter().sum();
        let cells: Vec<String> = row.iter().map(|v| cell(v / 1000.0)).collect();
        let _ = writeln!(out, "{origin},{},{}", cells.join(","), cell(total / 1000.0));
    }
    let _ = writeln!(out, "Percentages on row totals{}", ",".repeat(f.destinations.len() + 1));
    for (origin, row) in pct.origins.iter().zip(&pct.values) {
        let cells: Vec<String> = row.iter().map(|v| cell(*v)).collect();
        let _ = writeln!(out, "{origin},{},100.0", cells.join(","));
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heatmap of row percentages with cell labels.
pub fn flow_heatmap_svg(f: &FlowTable) -> Result<String> {
    let pct = row_percentages(f)?;
    let (cw, ch, left, top) = (90.0, 32.0, 110.0, 60.0);
    let width = left + cw * f.destinations.len() as f64 + 20.0;
    let height = top + ch * f.origins.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{} (row %)</text>"#, escape(&f.zone_id));
    for (j, d) in f.destinations.iter().enumerate() {
        let x = left + cw * (j as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 8.0, escape(d));
    }
    for (i, (o, row)) in pct.origins.iter().zip(&pct.values).enumerate() {
        let y = top + ch * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 8.0, y + ch * 0.65, escape(o));
        for (j, v) in row.iter().enumerate() {
            let x = left + cw * j as f64;
            let shade = (255.0 - 2.2 * v.clamp(0.0, 100.0)).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="rgb({shade},{shade},255)" stroke="white"/>"#
            );
            let color = if *v > 55.0 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{color}">{:.1}</text>"#,
                x + cw / 2.0,
                y + ch * 0.65,
                round1(*v)
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Two-panel horizontal bar chart of zone volatility components.
pub fn volatility_bars_svg(records: &[VolatilityRecord]) -> String {
    let (row_h, left, panel_w, top) = (18.0, 90.0, 260.0, 40.0);
    let max = records
        .iter()
        .flat_map(|r| [r.party_switch_pct, r.to_abstention_pct])
        .fold(1.0f64, f64::max);
    let width = left + 2.0 * (panel_w + 40.0);
    let height = top + row_h * records.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let panels = [("Between parties (%)", 0usize), ("Towards abstention (%)", 1)];
    for (title, k) in panels {
        let x0 = left + k as f64 * (panel_w + 40.0);
        let _ = writeln!(s, r#"<text x="{x0}" y="20" font-size="13">{title}</text>"#);
        for (i, r) in records.iter().enumerate() {
            let v = if k == 0 { r.party_switch_pct } else { r.to_abstention_pct };
            let y = top + row_h * i as f64;
            if k == 0 {
                let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, y + 12.0, escape(&r.zone_id));
            }
            let w = panel_w * v / max;
            let fill = if k == 0 { "#4a6fa5" } else { "#a5574a" };
            let _ = writeln!(s, r#"<rect x="{x0}" y="{y}" width="{w:.2}" height="{}" fill="{fill}"/>"#, row_h - 4.0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{}">{:.1}</text>"#, x0 + w + 4.0, y + 12.0, v);
        }
    }
    s.push_str("</svg>\n");
    s
}
