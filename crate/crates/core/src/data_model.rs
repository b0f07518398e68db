//! Election data types, station CSV ingestion and party/zone aggregation.
//!
//! The canonical input is a wide CSV with one row per polling station:
//!
//! ```text
//! station_id,zone_id,electorate1,electorate2,M5S_e1,PD_e1,...,M5S-OL_e2,PD_e2,...
//! ```
//!
//! Option columns carry an election suffix (`_e1` / `_e2` by default) and their
//! order in the header defines the order of the [`OptionSet`].

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label of the pooled abstention option (abstention plus blank and invalid ballots).
pub const NO_VOTE: &str = "No vote";

/// Ordered voting options of one election.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionSet {
    labels: Vec<String>,
    reference_index: usize,
}

impl OptionSet {
    pub fn new(labels: Vec<String>, reference_index: usize) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidOptionSet(format!(
                "at least two options required, found {}",
                labels.len()
            )));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(Error::InvalidOptionSet("empty label".into()));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidOptionSet(format!("duplicate label `{label}`")));
            }
        }
        if reference_index >= labels.len() {
            return Err(Error::InvalidOptionSet(format!(
                "reference index {reference_index} out of range"
            )));
        }
        Ok(Self {
            labels,
            reference_index,
        })
    }

    /// Option set whose reference is the last label.
    pub fn from_labels<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let reference = labels.len().saturating_sub(1);
        Self::new(labels, reference)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn has_abstention(&self) -> bool {
        self.index_of(NO_VOTE).is_some()
    }
}

/// True when `label` is one of the `-`-separated components of the
/// aggregated option `aggregate` (e.g. `FI` in `Lega-FI-OCR`).
pub fn option_contains(aggregate: &str, label: &str) -> bool {
    aggregate == label || aggregate.split('-').any(|part| part == label)
}

/// Raw party label to aggregated option label, per election.
///
/// `loyalty` optionally maps an origin option to the destination option that
/// counts as repeating the same choice (see [`crate::volatility::LoyaltyRule`]).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartyAggregation {
    pub election1: IndexMap<String, String>,
    pub election2: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub loyalty: IndexMap<String, String>,
}

impl PartyAggregation {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(file)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub zone_id: String,
    pub counts1: Vec<u64>,
    pub counts2: Vec<u64>,
    pub electorate1: u64,
    pub electorate2: u64,
}

impl StationRecord {
    pub fn total1(&self) -> u64 {
        self.counts1.iter().sum()
    }

    pub fn total2(&self) -> u64 {
        self.counts2.iter().sum()
    }
}

/// Station records of two elections together with their option sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectionData {
    pub options1: OptionSet,
    pub options2: OptionSet,
    pub stations: Vec<StationRecord>,
}

impl ElectionData {
    pub fn new(options1: OptionSet, options2: OptionSet, stations: Vec<StationRecord>) -> Result<Self> {
        for s in &stations {
            check_dims(options1.len(), s.counts1.len())?;
            check_dims(options2.len(), s.counts2.len())?;
        }
        Ok(Self {
            options1,
            options2,
            stations,
        })
    }
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Stations of one zone with their exact margins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneTable {
    pub zone_id: String,
    pub options1: OptionSet,
    pub options2: OptionSet,
    pub stations: Vec<StationRecord>,
    pub margins1: Vec<u64>,
    pub margins2: Vec<u64>,
}

impl ZoneTable {
    pub fn new(
        zone_id: impl Into<String>,
        options1: OptionSet,
        options2: OptionSet,
        stations: Vec<StationRecord>,
    ) -> Result<Self> {
        let mut margins1 = vec![0u64; options1.len()];
        let mut margins2 = vec![0u64; options2.len()];
        for s in &stations {
            check_dims(options1.len(), s.counts1.len())?;
            check_dims(options2.len(), s.counts2.len())?;
            for (m, c) in margins1.iter_mut().zip(&s.counts1) {
                *m += c;
            }
            for (m, c) in margins2.iter_mut().zip(&s.counts2) {
                *m += c;
            }
        }
        Ok(Self {
            zone_id: zone_id.into(),
            options1,
            options2,
            stations,
            margins1,
            margins2,
        })
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }
}

/// Column names of the wide station CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub station_id: String,
    pub zone_id: String,
    pub electorate1: String,
    pub electorate2: String,
    pub suffix1: String,
    pub suffix2: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            station_id: "station_id".into(),
            zone_id: "zone_id".into(),
            electorate1: "electorate1".into(),
            electorate2: "electorate2".into(),
            suffix1: "_e1".into(),
            suffix2: "_e2".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvLayout {
    #[default]
    Wide,
    /// `station_id,zone_id,election,electorate,option,votes`, one row per
    /// station, election and option.
    Long,
}

fn parse_count(raw: &str, row: usize, column: &str) -> Result<u64> {
    let value = raw.trim();
    match value.parse::<i64>() {
        Ok(v) if v < 0 => Err(Error::NegativeCount {
            row,
            column: column.to_string(),
        }),
        Ok(v) => Ok(v as u64),
        Err(_) => {
            if value.parse::<f64>().is_ok_and(|v| v < 0.0) {
                Err(Error::NegativeCount {
                    row,
                    column: column.to_string(),
                })
            } else {
                Err(Error::NonIntegerCount {
                    row,
                    column: column.to_string(),
                    value: value.to_string(),
                })
            }
        }
    }
}

fn row_number(record: &csv::StringRecord, fallback: usize) -> usize {
    record
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback)
}

pub fn load_stations(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ElectionData> {
    read_stations(File::open(path)?, schema)
}

pub fn load_stations_with_layout(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    layout: CsvLayout,
) -> Result<ElectionData> {
    let file = File::open(path)?;
    match layout {
        CsvLayout::Wide => read_stations(file, schema),
        CsvLayout::Long => read_stations_long(file),
    }
}

/// Parses the wide station format.
pub fn read_stations<R: Read>(reader: R, schema: &CsvSchema) -> Result<ElectionData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    let id_col = find(&schema.station_id)?;
    let zone_col = find(&schema.zone_id)?;
    let e1_col = find(&schema.electorate1)?;
    let e2_col = find(&schema.electorate2)?;

    let mut labels1 = Vec::new();
    let mut cols1 = Vec::new();
    let mut labels2 = Vec::new();
    let mut cols2 = Vec::new();
    for (idx, h) in headers.iter().enumerate() {
        if [id_col, zone_col, e1_col, e2_col].contains(&idx) {
            continue;
        }
        if let Some(label) = h.strip_suffix(schema.suffix1.as_str()) {
            labels1.push(label.to_string());
            cols1.push(idx);
        } else if let Some(label) = h.strip_suffix(schema.suffix2.as_str()) {
            labels2.push(label.to_string());
            cols2.push(idx);
        }
    }
    if labels1.is_empty() {
        return Err(Error::MissingColumn {
            column: format!("<option>{}", schema.suffix1),
        });
    }
    if labels2.is_empty() {
        return Err(Error::MissingColumn {
            column: format!("<option>{}", schema.suffix2),
        });
    }
    let options1 = OptionSet::from_labels(labels1)?;
    let options2 = OptionSet::from_labels(labels2)?;

    let mut seen = HashSet::new();
    let mut stations = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = row_number(&record, i + 2);
        let field = |col: usize| -> Result<&str> {
            record.get(col).ok_or_else(|| Error::MalformedRow {
                row,
                message: format!("missing field `{}`", &headers[col]),
            })
        };
        let station_id = field(id_col)?.to_string();
        if !seen.insert(station_id.clone()) {
            return Err(Error::DuplicateStation { row, station_id });
        }
        let zone_id = field(zone_col)?.to_string();
        let electorate1 = parse_count(field(e1_col)?, row, &headers[e1_col])?;
        let electorate2 = parse_count(field(e2_col)?, row, &headers[e2_col])?;
        let counts1 = cols1
            .iter()
            .map(|&c| parse_count(field(c)?, row, &headers[c]))
            .collect::<Result<Vec<_>>>()?;
        let counts2 = cols2
            .iter()
            .map(|&c| parse_count(field(c)?, row, &headers[c]))
            .collect::<Result<Vec<_>>>()?;
        stations.push(StationRecord {
            station_id,
            zone_id,
            counts1,
            counts2,
            electorate1,
            electorate2,
        });
    }
    ElectionData::new(options1, options2, stations)
}

/// Parses the long station format.
pub fn read_stations_long<R: Read>(reader: R) -> Result<ElectionData> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut cols = [0usize; 6];
    for (slot, name) in cols
        .iter_mut()
        .zip(["station_id", "zone_id", "election", "electorate", "option", "votes"])
    {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })?;
    }

    struct Partial {
        zone_id: String,
        electorate: [Option<u64>; 2],
        votes: [BTreeMap<usize, u64>; 2],
    }
    let mut labels: [Vec<String>; 2] = [Vec::new(), Vec::new()];
    let mut partials: IndexMap<String, Partial> = IndexMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = row_number(&record, i + 2);
        let get = |k: usize| record.get(cols[k]).unwrap_or("");
        let election = match get(2) {
            "1" => 0,
            "2" => 1,
            other => {
                return Err(Error::MalformedRow {
                    row,
                    message: format!("election must be 1 or 2, found `{other}`"),
                })
            }
        };
        let electorate = parse_count(get(3), row, "electorate")?;
        let label = get(4).to_string();
        let votes = parse_count(get(5), row, "votes")?;
        let opt = match labels[election].iter().position(|l| *l == label) {
            Some(k) => k,
            None => {
                labels[election].push(label);
                labels[election].len() - 1
            }
        };
        let entry = partials
            .entry(get(0).to_string())
            .or_insert_with(|| Partial {
                zone_id: get(1).to_string(),
                electorate: [None, None],
                votes: [BTreeMap::new(), BTreeMap::new()],
            });
        if entry.votes[election].insert(opt, votes).is_some() {
            return Err(Error::DuplicateStation {
                row,
                station_id: get(0).to_string(),
            });
        }
        match entry.electorate[election] {
            Some(e) if e != electorate => {
                return Err(Error::MalformedRow {
                    row,
                    message: "inconsistent electorate within station".into(),
                })
            }
            _ => entry.electorate[election] = Some(electorate),
        }
    }
    let [labels1, labels2] = labels;
    let options1 = OptionSet::from_labels(labels1)?;
    let options2 = OptionSet::from_labels(labels2)?;
    let stations = partials
        .into_iter()
        .map(|(station_id, p)| {
            let dense = |m: &BTreeMap<usize, u64>, n: usize| (0..n).map(|k| *m.get(&k).unwrap_or(&0)).collect();
            StationRecord {
                counts1: dense(&p.votes[0], options1.len()),
                counts2: dense(&p.votes[1], options2.len()),
                electorate1: p.electorate[0].unwrap_or(0),
                electorate2: p.electorate[1].unwrap_or(0),
                zone_id: p.zone_id,
                station_id,
            }
        })
        .collect();
    ElectionData::new(options1, options2, stations)
}

/// Writes the wide format accepted by [`read_stations`].
pub fn write_stations<W: Write>(writer: W, data: &ElectionData, schema: &CsvSchema) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        schema.station_id.clone(),
        schema.zone_id.clone(),
        schema.electorate1.clone(),
        schema.electorate2.clone(),
    ];
    header.extend(data.options1.labels().iter().map(|l| format!("{l}{}", schema.suffix1)));
    header.extend(data.options2.labels().iter().map(|l| format!("{l}{}", schema.suffix2)));
    wtr.write_record(&header)?;
    for s in &data.stations {
        let mut row = vec![
            s.station_id.clone(),
            s.zone_id.clone(),
            s.electorate1.to_string(),
            s.electorate2.to_string(),
        ];
        row.extend(s.counts1.iter().map(u64::to_string));
        row.extend(s.counts2.iter().map(u64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_stations(path: impl AsRef<Path>, data: &ElectionData, schema: &CsvSchema) -> Result<()> {
    write_stations(File::create(path)?, data, schema)
}

fn aggregate_options(options: &OptionSet, map: &IndexMap<String, String>) -> Result<(OptionSet, Vec<usize>)> {
    let mut labels: Vec<String> = Vec::new();
    let mut target = Vec::with_capacity(options.len());
    for raw in options.labels() {
        let agg = map.get(raw).ok_or_else(|| Error::UnmappedLabel { label: raw.clone() })?;
        let idx = match labels.iter().position(|l| l == agg) {
            Some(k) => k,
            None => {
                labels.push(agg.clone());
                labels.len() - 1
            }
        };
        target.push(idx);
    }
    let reference = target[options.reference_index()];
    Ok((OptionSet::new(labels, reference)?, target))
}

fn merge_counts(counts: &[u64], target: &[usize], n: usize) -> Vec<u64> {
    let mut out = vec![0u64; n];
    for (c, &t) in counts.iter().zip(target) {
        out[t] += c;
    }
    out
}

/// Sums counts of raw labels mapped to the same aggregated option.
///
/// Aggregated options are ordered by first appearance along the raw option order.
pub fn aggregate_parties(data: &ElectionData, agg: &PartyAggregation) -> Result<ElectionData> {
    let (options1, target1) = aggregate_options(&data.options1, &agg.election1)?;
    let (options2, target2) = aggregate_options(&data.options2, &agg.election2)?;
    let stations = data
        .stations
        .iter()
        .map(|s| StationRecord {
            counts1: merge_counts(&s.counts1, &target1, options1.len()),
            counts2: merge_counts(&s.counts2, &target2, options2.len()),
            ..s.clone()
        })
        .collect();
    ElectionData::new(options1, options2, stations)
}

/// Groups stations by zone, in order of first appearance.
///
/// Stations with zero total votes in either election are dropped with a warning.
pub fn group_zones(data: &ElectionData, min_stations: usize) -> Result<Vec<ZoneTable>> {
    let mut groups: IndexMap<&str, Vec<StationRecord>> = IndexMap::new();
    for s in &data.stations {
        let bucket = groups.entry(s.zone_id.as_str()).or_default();
        if s.total1() == 0 || s.total2() == 0 {
            warn!(
                "dropping station `{}` in zone `{}`: zero total votes",
                s.station_id, s.zone_id
            );
            continue;
        }
        bucket.push(s.clone());
    }
    groups
        .into_iter()
        .map(|(zone_id, stations)| {
            if stations.len() < min_stations {
                return Err(Error::MinStations {
                    zone_id: zone_id.to_string(),
                    found: stations.len(),
                    required: min_stations,
                });
            }
            ZoneTable::new(zone_id, data.options1.clone(), data.options2.clone(), stations)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconcileMode {
    #[default]
    ProportionalScale,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectorateWarning {
    pub station_id: String,
    pub electorate1: u64,
    pub electorate2: u64,
    pub relative_change: f64,
}

/// Relative electorate change above which a station is reported.
pub const ELECTORATE_WARNING_THRESHOLD: f64 = 0.10;

/// Scales `counts` by `num / den` and rounds with the largest-remainder rule.
///
/// The result sums to `round(sum(counts) * num / den)`; remainders are compared
/// exactly in integer arithmetic, ties go to the lower index.
pub fn largest_remainder_scale(counts: &[u64], num: u64, den: u64) -> Vec<u64> {
    assert!(den > 0, "zero denominator");
    let (num, den) = (num as u128, den as u128);
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    let target = (2 * total * num + den) / (2 * den);
    let mut out: Vec<u64> = Vec::with_capacity(counts.len());
    let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(counts.len());
    for (i, &c) in counts.iter().enumerate() {
        let scaled = c as u128 * num;
        out.push((scaled / den) as u64);
        remainders.push((scaled % den, i));
    }
    let assigned: u128 = out.iter().map(|&c| c as u128).sum();
    let mut missing = target.saturating_sub(assigned) as usize;
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &remainders {
        if missing == 0 {
            break;
        }
        out[i] += 1;
        missing -= 1;
    }
    out
}

/// Aligns first-election counts with the second-election electorate.
pub fn reconcile_electorates(
    zone: &ZoneTable,
    mode: ReconcileMode,
) -> Result<(ZoneTable, Vec<ElectorateWarning>)> {
    let mut warnings = Vec::new();
    let mut stations = Vec::with_capacity(zone.stations.len());
    for s in &zone.stations {
        if s.electorate1 == 0 || s.electorate2 == 0 {
            return Err(Error::ZeroElectorate {
                station_id: s.station_id.clone(),
            });
        }
        if s.electorate1 == s.electorate2 {
            stations.push(s.clone());
            continue;
        }
        if mode == ReconcileMode::Reject {
            return Err(Error::ElectorateMismatch {
                station_id: s.station_id.clone(),
                electorate1: s.electorate1,
                electorate2: s.electorate2,
            });
        }
        let change = (s.electorate2 as f64 - s.electorate1 as f64).abs() / s.electorate1 as f64;
        if change > ELECTORATE_WARNING_THRESHOLD {
            warn!(
                "station `{}`: electorate changed by {:.1}%",
                s.station_id,
                100.0 * change
            );
            warnings.push(ElectorateWarning {
                station_id: s.station_id.clone(),
                electorate1: s.electorate1,
                electorate2: s.electorate2,
                relative_change: change,
            });
        }
        stations.push(StationRecord {
            counts1: largest_remainder_scale(&s.counts1, s.electorate2, s.electorate1),
            electorate1: s.electorate2,
            ..s.clone()
        });
    }
    let table = ZoneTable::new(
        zone.zone_id.clone(),
        zone.options1.clone(),
        zone.options2.clone(),
        stations,
    )?;
    Ok((table, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_STATIONS: &str = "\
station_id,zone_id,electorate1,electorate2,A_e1,B_e1,A_e2,B_e2
s1,z1,100,100,60,40,55,45
s2,z1,80,80,30,50,35,45
";

    #[test]
    fn loads_two_stations_exactly() {
        let data = read_stations(TWO_STATIONS.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(data.options1.labels(), ["A", "B"]);
        assert_eq!(data.options2.labels(), ["A", "B"]);
        assert_eq!(data.stations.len(), 2);
        assert_eq!(data.stations[0].counts1, vec![60, 40]);
        assert_eq!(data.stations[1].counts2, vec![35, 45]);
        assert_eq!(data.stations[1].electorate1, 80);
    }

    #[test]
    fn negative_count_names_row_two() {
        let csv = "station_id,zone_id,electorate1,electorate2,A_e1,B_e1,A_e2,B_e2\ns1,z1,100,100,-3,40,55,45\n";
        match read_stations(csv.as_bytes(), &CsvSchema::default()) {
            Err(Error::NegativeCount { row, column }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "A_e1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_integer_and_missing_column_are_rejected() {
        let csv = "station_id,zone_id,electorate1,electorate2,A_e1,B_e1,A_e2,B_e2\ns1,z1,100,100,3.5,40,55,45\n";
        assert!(matches!(
            read_stations(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::NonIntegerCount { row: 2, .. })
        ));
        let csv = "station_id,electorate1,electorate2,A_e1,B_e1,A_e2,B_e2\n";
        assert!(matches!(
            read_stations(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::MissingColumn { column }) if column == "zone_id"
        ));
    }

    #[test]
    fn duplicate_station_names_its_row() {
        let csv = format!("{TWO_STATIONS}s1,z2,10,10,5,5,5,5\n");
        assert!(matches!(
            read_stations(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::DuplicateStation { row: 4, .. })
        ));
    }

    #[test]
    fn long_layout_matches_wide() {
        let long = "\
station_id,zone_id,election,electorate,option,votes
s1,z1,1,100,A,60
s1,z1,1,100,B,40
s1,z1,2,100,A,55
s1,z1,2,100,B,45
s2,z1,1,80,A,30
s2,z1,1,80,B,50
s2,z1,2,80,A,35
s2,z1,2,80,B,45
";
        let a = read_stations_long(long.as_bytes()).unwrap();
        let b = read_stations(TWO_STATIONS.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn write_then_read_is_identical() {
        let data = read_stations(TWO_STATIONS.as_bytes(), &CsvSchema::default()).unwrap();
        let mut buf = Vec::new();
        write_stations(&mut buf, &data, &CsvSchema::default()).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), TWO_STATIONS);
        let again = read_stations(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(again, data);
    }

    fn raw_data(counts2: Vec<u64>) -> ElectionData {
        ElectionData::new(
            OptionSet::from_labels(["X", "No vote"]).unwrap(),
            OptionSet::from_labels(["Lega", "FI", "OCR"]).unwrap(),
            vec![StationRecord {
                station_id: "s".into(),
                zone_id: "z".into(),
                counts1: vec![16, 0],
                counts2,
                electorate1: 16,
                electorate2: 16,
            }],
        )
        .unwrap()
    }

    #[test]
    fn merged_labels_are_summed() {
        let data = raw_data(vec![10, 5, 1]);
        let mut agg = PartyAggregation::default();
        agg.election1.insert("X".into(), "X".into());
        agg.election1.insert("No vote".into(), "No vote".into());
        for raw in ["Lega", "FI", "OCR"] {
            agg.election2.insert(raw.into(), "Lega-FI-OCR".into());
        }
        // a single aggregated option is not a valid option set
        assert!(matches!(aggregate_parties(&data, &agg), Err(Error::InvalidOptionSet(_))));

        let data = ElectionData {
            options2: OptionSet::from_labels(["Lega", "FI", "OCR", "No vote"]).unwrap(),
            stations: vec![StationRecord {
                counts2: vec![10, 5, 1, 0],
                ..data.stations[0].clone()
            }],
            ..data
        };
        agg.election2.insert("No vote".into(), "No vote".into());
        let out = aggregate_parties(&data, &agg).unwrap();
        assert_eq!(out.options2.labels(), ["Lega-FI-OCR", "No vote"]);
        assert_eq!(out.stations[0].counts2, vec![16, 0]);
    }

    #[test]
    fn identity_aggregation_and_unmapped_label() {
        let data = raw_data(vec![10, 5, 1]);
        let mut agg = PartyAggregation::default();
        for l in data.options1.labels() {
            agg.election1.insert(l.clone(), l.clone());
        }
        for l in data.options2.labels() {
            agg.election2.insert(l.clone(), l.clone());
        }
        assert_eq!(aggregate_parties(&data, &agg).unwrap(), data);
        agg.election2.shift_remove("FI");
        assert!(matches!(
            aggregate_parties(&data, &agg),
            Err(Error::UnmappedLabel { label }) if label == "FI"
        ));
    }

    #[test]
    fn aggregation_json_parses_in_order() {
        let json = r#"{"election1": {"A": "A", "B": "B"}, "election2": {"M5S": "M5S-OL", "OL": "M5S-OL", "PD": "PD"}}"#;
        let agg: PartyAggregation = serde_json::from_str(json).unwrap();
        assert_eq!(agg.election2.keys().collect::<Vec<_>>(), ["M5S", "OL", "PD"]);
        assert!(serde_json::from_str::<PartyAggregation>(r#"{"election1": {}, "election2": {}, "x": 1}"#).is_err());
    }

    fn zone_with(counts1: Vec<u64>, e1: u64, e2: u64) -> ZoneTable {
        let n = counts1.len();
        let labels: Vec<String> = (0..n).map(|i| format!("o{i}")).collect();
        ZoneTable::new(
            "z",
            OptionSet::from_labels(labels.clone()).unwrap(),
            OptionSet::from_labels(labels).unwrap(),
            vec![StationRecord {
                station_id: "s".into(),
                zone_id: "z".into(),
                counts2: counts1.clone(),
                counts1,
                electorate1: e1,
                electorate2: e2,
            }],
        )
        .unwrap()
    }

    #[test]
    fn reconcile_equal_electorates_is_identity() {
        let z = zone_with(vec![60, 40], 100, 100);
        let (out, warnings) = reconcile_electorates(&z, ReconcileMode::ProportionalScale).unwrap();
        assert_eq!(out, z);
        assert!(warnings.is_empty());
    }

    #[test]
    fn reconcile_exact_proportional_case() {
        let z = zone_with(vec![60, 40], 100, 110);
        let (out, warnings) = reconcile_electorates(&z, ReconcileMode::ProportionalScale).unwrap();
        assert_eq!(out.stations[0].counts1, vec![66, 44]);
        assert_eq!(out.margins1, vec![66, 44]);
        assert!(warnings.is_empty());
        assert!(matches!(
            reconcile_electorates(&z, ReconcileMode::Reject),
            Err(Error::ElectorateMismatch { .. })
        ));
    }

    #[test]
    fn reconcile_flags_large_changes_and_zero_electorate() {
        let z = zone_with(vec![60, 40], 100, 120);
        let (_, warnings) = reconcile_electorates(&z, ReconcileMode::ProportionalScale).unwrap();
        assert_eq!(warnings.len(), 1);
        let z = zone_with(vec![0, 0], 0, 120);
        assert!(matches!(
            reconcile_electorates(&z, ReconcileMode::ProportionalScale),
            Err(Error::ZeroElectorate { .. })
        ));
    }

    /// Smallest total absolute deviation from the exact quotas among all
    /// non-negative integer vectors with the required sum.
    fn brute_force_min_deviation(quotas: &[f64], target: u64) -> f64 {
        fn rec(quotas: &[f64], left: u64, acc: f64, best: &mut f64) {
            if quotas.len() == 1 {
                let d = acc + (left as f64 - quotas[0]).abs();
                if d < *best {
                    *best = d;
                }
                return;
            }
            for v in 0..=left {
                rec(&quotas[1..], left - v, acc + (v as f64 - quotas[0]).abs(), best);
            }
        }
        let mut best = f64::INFINITY;
        rec(quotas, target, 0.0, &mut best);
        best
    }

    #[test]
    fn largest_remainder_minimises_deviation() {
        let counts = [50u64, 30, 20];
        let z = zone_with(counts.to_vec(), 100, 103);
        let (out, _) = reconcile_electorates(&z, ReconcileMode::ProportionalScale).unwrap();
        let rounded = &out.stations[0].counts1;
        assert_eq!(rounded.iter().sum::<u64>(), 103);
        let quotas: Vec<f64> = counts.iter().map(|&c| c as f64 * 1.03).collect();
        let dev: f64 = rounded.iter().zip(&quotas).map(|(&r, q)| (r as f64 - q).abs()).sum();
        let best = brute_force_min_deviation(&quotas, 103);
        assert!((dev - best).abs() < 1e-9, "{dev} vs {best}");
    }

    #[test]
    fn group_zones_enforces_minimum_and_drops_empty() {
        let mut data = read_stations(TWO_STATIONS.as_bytes(), &CsvSchema::default()).unwrap();
        let zones = group_zones(&data, 2).unwrap();
        assert_eq!(zones.len(), 1);
        assert_eq!(zones[0].margins1, vec![90, 90]);
        data.stations[1].counts2 = vec![0, 0];
        assert!(matches!(
            group_zones(&data, 2),
            Err(Error::MinStations { found: 1, required: 2, .. })
        ));
    }

    fn arb_data() -> impl Strategy<Value = ElectionData> {
        proptest::collection::vec(
            (0usize..3, proptest::collection::vec(0u64..500, 4), proptest::collection::vec(0u64..500, 3)),
            1..12,
        )
        .prop_map(|rows| {
            let stations = rows
                .into_iter()
                .enumerate()
                .map(|(i, (z, c1, c2))| StationRecord {
                    station_id: format!("s{i}"),
                    zone_id: format!("z{z}"),
                    electorate1: c1.iter().sum(),
                    electorate2: c2.iter().sum(),
                    counts1: c1,
                    counts2: c2,
                })
                .collect();
            ElectionData::new(
                OptionSet::from_labels(["a", "b", "c", "d"]).unwrap(),
                OptionSet::from_labels(["x", "y", "z"]).unwrap(),
                stations,
            )
            .unwrap()
        })
    }

    fn zone_sums(data: &ElectionData) -> BTreeMap<String, (Vec<u64>, Vec<u64>)> {
        let mut out: BTreeMap<String, (Vec<u64>, Vec<u64>)> = BTreeMap::new();
        for s in &data.stations {
            let e = out
                .entry(s.zone_id.clone())
                .or_insert_with(|| (vec![0; s.counts1.len()], vec![0; s.counts2.len()]));
            e.0.iter_mut().zip(&s.counts1).for_each(|(a, b)| *a += b);
            e.1.iter_mut().zip(&s.counts2).for_each(|(a, b)| *a += b);
        }
        out
    }

    proptest! {
        #[test]
        fn aggregation_commutes_with_zone_sums(data in arb_data()) {
            let mut agg = PartyAggregation::default();
            for (raw, to) in [("a", "ab"), ("b", "ab"), ("c", "c"), ("d", "d")] {
                agg.election1.insert(raw.into(), to.into());
            }
            for (raw, to) in [("x", "x"), ("y", "yz"), ("z", "yz")] {
                agg.election2.insert(raw.into(), to.into());
            }
            let merged = aggregate_parties(&data, &agg).unwrap();
            let after = zone_sums(&merged);
            let before = zone_sums(&data);
            for (zone, (m1, m2)) in before {
                let (a1, a2) = &after[&zone];
                prop_assert_eq!(a1.clone(), vec![m1[0] + m1[1], m1[2], m1[3]]);
                prop_assert_eq!(a2.clone(), vec![m2[0], m2[1] + m2[2]]);
            }
        }

        #[test]
        fn round_trip_is_bit_identical(data in arb_data()) {
            let mut first = Vec::new();
            write_stations(&mut first, &data, &CsvSchema::default()).unwrap();
            let back = read_stations(first.as_slice(), &CsvSchema::default()).unwrap();
            let mut second = Vec::new();
            write_stations(&mut second, &back, &CsvSchema::default()).unwrap();
            prop_assert_eq!(first, second);
            prop_assert_eq!(back, data);
        }

        #[test]
        fn reconcile_stays_within_one_vote(
            counts in proptest::collection::vec(0u64..2000, 2..7),
            e2 in 1u64..20000,
        ) {
            let e1: u64 = counts.iter().sum::<u64>().max(1);
            let scaled = largest_remainder_scale(&counts, e2, e1);
            prop_assert_eq!(scaled.iter().sum::<u64>(), if counts.iter().sum::<u64>() == 0 { 0 } else { e2 });
            for (&c, &s) in counts.iter().zip(&scaled) {
                let exact = c as f64 * e2 as f64 / e1 as f64;
                prop_assert!((s as f64 - exact).abs() < 1.0);
            }
        }
    }
}
