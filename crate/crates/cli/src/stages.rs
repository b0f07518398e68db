use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use flowcast::covariate_lab::{apply_recipe, correlation_report, load_covariates, CovariateMatrix, Transform};
use flowcast::data_model::{
    aggregate_parties, group_zones, load_stations_with_layout, reconcile_electorates, ElectorateWarning,
    PartyAggregation, ZoneTable,
};
use flowcast::ei_estimator::{fit_zone, flow_counts, TransitionEstimate};
use flowcast::synth_oracle::{generate, write_outputs};
use flowcast::transition_mnl::{
    add_zone_dummies, build_panel_with_se, model_report, render_table3, render_table_c1, stepwise_select,
    Direction, MnlConfig, ModelReport,
};
use flowcast::volatility::{
    aggregate_region, flow_heatmap_svg, render_transition_table, volatility_bars_svg, volatility_indexes_with_omitted,
    write_volatility_csv, LoyaltyRule, VolatilityRecord,
};
use flowcast::FlowTable;
use indexmap::IndexMap;
use log::{info, warn};
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::Serialize;

use crate::config::{slug, LoadedConfig, ModelSpec};
use crate::error::CliError;
use crate::manifest::Failure;

pub const ESTIMATES_DIR: &str = "estimates";
pub const MODELS_DIR: &str = "models";
pub const HEATMAPS_DIR: &str = "heatmaps";
pub const FLOWS_CSV: &str = "flows.csv";
pub const VOLATILITY_CSV: &str = "volatility.csv";
pub const VOLATILITY_JSON: &str = "volatility.json";
pub const VOLATILITY_SVG: &str = "volatility.svg";
pub const ELECTORATE_WARNINGS_JSON: &str = "electorate_warnings.json";
pub const COVARIATES_CSV: &str = "covariates.out.csv";
pub const TRANSFORMS_JSON: &str = "transforms.json";
pub const CORRELATIONS_JSON: &str = "covariate_correlations.json";
pub const TABLE1_CSV: &str = "table1.csv";
pub const TABLE3_CSV: &str = "table3.csv";
pub const TABLEC1_CSV: &str = "tableC1.csv";
pub const OUTLIERS_CSV: &str = "outliers.csv";

pub struct Context<'a> {
    pub cfg: &'a LoadedConfig,
    pub out: PathBuf,
    pub pool: ThreadPool,
}

/// What a stage reports back besides its files.
#[derive(Debug, Default)]
pub struct StageReport {
    pub messages: Vec<String>,
    pub failures: Vec<Failure>,
}

impl StageReport {
    fn fail(&mut self, stage: &str, context: String, err: CliError) {
        warn!("{stage}: {err}");
        self.failures.push(Failure {
            stage: stage.into(),
            context,
            exit_code: err.exit_code(),
            error: err.to_string(),
        });
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| missing(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn missing(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::Validation(format!("`{}` not found; run the earlier stage first", path.display()))
    } else {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

fn reset_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn ctx_err(context: &str) -> impl Fn(flowcast::Error) -> CliError + '_ {
    move |e| CliError::with_context(context, e)
}

pub struct PreparedData {
    pub zones: Vec<ZoneTable>,
    pub warnings: Vec<ElectorateWarning>,
    pub loyalty: LoyaltyRule,
}

/// Reads stations, applies the party aggregation, groups zones and reconciles electorates.
pub fn load_zones(cfg: &LoadedConfig) -> Result<PreparedData, CliError> {
    cfg.check_inputs_exist()?;
    let c = &cfg.config;
    let mut data = load_stations_with_layout(cfg.resolve(&c.stations), &c.schema, c.layout)
        .map_err(ctx_err(&c.stations))?;
    let aggregation = match &c.aggregation {
        Some(rel) => Some(PartyAggregation::from_json_file(cfg.resolve(rel)).map_err(ctx_err(rel))?),
        None => None,
    };
    if let Some(agg) = &aggregation {
        data = aggregate_parties(&data, agg).map_err(ctx_err("aggregation"))?;
    }
    let grouped = group_zones(&data, c.min_stations)?;
    let mut zones = Vec::with_capacity(grouped.len());
    let mut warnings = Vec::new();
    for z in &grouped {
        let (table, w) = reconcile_electorates(z, c.electorate_mode).map_err(ctx_err(&format!("zone {}", z.zone_id)))?;
        zones.push(table);
        warnings.extend(w);
    }
    let loyalty = cfg.loyalty_rule(aggregation.as_ref().map(|a| &a.loyalty));
    Ok(PreparedData {
        zones,
        warnings,
        loyalty,
    })
}

fn load_covariate_matrix(cfg: &LoadedConfig) -> Result<CovariateMatrix, CliError> {
    let c = &cfg.config;
    let raw = load_covariates(cfg.resolve(&c.covariates)).map_err(ctx_err(&c.covariates))?;
    Ok(apply_recipe(&raw, &c.covariate_recipe, &c.model_covariates).map_err(ctx_err("covariate recipe"))?)
}

fn check_schedule(schedule: &[f64]) -> Result<(), CliError> {
    let ok = !schedule.is_empty()
        && schedule.iter().all(|t| t.is_finite() && *t >= 0.0)
        && schedule.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "stepwise_schedule {schedule:?} must be non-empty, non-negative and increasing"
        )))
    }
}

fn check_model(spec: &ModelSpec, origins: &[String], destinations: &[String], zones: &[String]) -> Result<(), CliError> {
    let context = format!("model {} ({:?})", spec.anchor, spec.direction);
    let bad = |msg: String| Err(CliError::Validation(format!("{context}: {msg}")));
    let (anchors, options) = match spec.direction {
        Direction::Outgoing => (origins, destinations),
        Direction::Incoming => (destinations, origins),
    };
    if !anchors.contains(&spec.anchor) {
        return bad(format!("anchor `{}` is not an option", spec.anchor));
    }
    let mut merged: Vec<String> = Vec::new();
    let mut grouped: Vec<&String> = Vec::new();
    for o in options {
        match spec.groups.iter().find(|(_, members)| members.contains(o)) {
            Some((name, _)) => {
                if !merged.contains(name) {
                    merged.push(name.clone());
                }
                grouped.push(o);
            }
            None => merged.push(o.clone()),
        }
    }
    for members in spec.groups.values() {
        for m in members {
            if !options.contains(m) {
                return bad(format!("group member `{m}` is not an option"));
            }
        }
    }
    if let Some(r) = &spec.reference {
        if !merged.contains(r) {
            return bad(format!("reference `{r}` is not among {merged:?}"));
        }
    }
    for z in &spec.dummies {
        if !zones.contains(z) {
            return bad(format!("dummy zone `{z}` is unknown"));
        }
    }
    Ok(())
}

/// Checks the config and every input without writing anything.
pub fn validate(cfg: &LoadedConfig) -> Result<StageReport, CliError> {
    let c = &cfg.config;
    cfg.check_settings()?;
    check_schedule(&c.stepwise_schedule)?;
    let data = load_zones(cfg)?;
    let first = data
        .zones
        .first()
        .ok_or_else(|| CliError::Validation("no stations in the input".into()))?;
    let origins = first.options1.labels().to_vec();
    let destinations = first.options2.labels().to_vec();
    if !origins.contains(&c.abstention_label) || !destinations.contains(&c.abstention_label) {
        return Err(CliError::Validation(format!(
            "abstention option `{}` missing from one of the elections",
            c.abstention_label
        )));
    }
    let zone_ids: Vec<String> = data.zones.iter().map(|z| z.zone_id.clone()).collect();
    let x = load_covariate_matrix(cfg)?;
    x.align_to(&zone_ids).map_err(ctx_err(&c.covariates))?;
    for spec in &c.models {
        check_model(spec, &origins, &destinations, &zone_ids)?;
    }
    let n_stations: usize = data.zones.iter().map(|z| z.n_stations()).sum();
    Ok(StageReport {
        messages: vec![format!(
            "ok: {} zones, {n_stations} stations, {} x {} options, {} covariates, {} models",
            data.zones.len(),
            origins.len(),
            destinations.len(),
            x.n_covariates(),
            c.models.len()
        )],
        failures: Vec::new(),
    })
}

fn zone_file(zone_id: &str) -> String {
    format!("{}.json", slug(zone_id))
}

fn write_flows_csv(path: &Path, flows: &[FlowTable]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["zone_id", "origin", "destination", "count"])?;
    for f in flows {
        for (o, row) in f.origins.iter().zip(&f.counts) {
            for (d, v) in f.destinations.iter().zip(row) {
                w.write_record([f.zone_id.as_str(), o, d, &v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads flows.csv back into one table per zone, in file order.
pub fn read_flows_csv(path: &Path) -> Result<Vec<FlowTable>, CliError> {
    let file = File::open(path).map_err(|e| missing(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut zones: IndexMap<String, Vec<(String, String, f64)>> = IndexMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or_default().to_string();
        let value: f64 = get(3)
            .parse()
            .map_err(|_| CliError::Validation(format!("{}: bad count `{}`", path.display(), get(3))))?;
        zones.entry(get(0)).or_default().push((get(1), get(2), value));
    }
    let mut out = Vec::with_capacity(zones.len());
    for (zone_id, cells) in zones {
        let mut origins: Vec<String> = Vec::new();
        let mut destinations: Vec<String> = Vec::new();
        for (o, d, _) in &cells {
            if !origins.contains(o) {
                origins.push(o.clone());
            }
            if !destinations.contains(d) {
                destinations.push(d.clone());
            }
        }
        let mut counts = vec![vec![0.0; destinations.len()]; origins.len()];
        for (o, d, v) in cells {
            let i = origins.iter().position(|x| *x == o).unwrap();
            let j = destinations.iter().position(|x| *x == d).unwrap();
            counts[i][j] = v;
        }
        out.push(FlowTable::from_counts(zone_id.clone(), origins, destinations, counts).map_err(ctx_err(&zone_id))?);
    }
    Ok(out)
}

/// EI fit per zone, flow tables, and volatility indexes per zone and region.
pub fn estimate(ctx: &Context) -> Result<StageReport, CliError> {
    let cfg = ctx.cfg;
    let c = &cfg.config;
    let data = load_zones(cfg)?;
    let est_dir = ctx.out.join(ESTIMATES_DIR);
    reset_dir(&est_dir)?;

    let results: Vec<Result<(TransitionEstimate, FlowTable), CliError>> = ctx.pool.install(|| {
        data.zones
            .par_iter()
            .map(|zone| {
                let context = format!("zone {}", zone.zone_id);
                let est = fit_zone(zone, &c.estimator).map_err(ctx_err(&context))?;
                let flows = flow_counts(&est, zone, &c.estimator).map_err(ctx_err(&context))?;
                write_json(&est_dir.join(zone_file(&zone.zone_id)), &est)?;
                info!("{context}: {} iterations, phi {:.3}", est.iterations, est.phi);
                Ok((est, flows))
            })
            .collect()
    });

    let mut report = StageReport::default();
    let mut flows = Vec::new();
    for (zone, r) in data.zones.iter().zip(results) {
        match r {
            Ok((_, f)) => flows.push(f),
            Err(e) => report.fail("estimate", format!("zone {}", zone.zone_id), e),
        }
    }
    write_flows_csv(&ctx.out.join(FLOWS_CSV), &flows)?;

    let mut records: Vec<VolatilityRecord> = Vec::new();
    let mut tables: Vec<&FlowTable> = flows.iter().collect();
    let region = if flows.is_empty() {
        None
    } else {
        Some(aggregate_region(&flows).map_err(ctx_err("region"))?)
    };
    tables.extend(region.as_ref());
    for f in tables {
        match volatility_indexes_with_omitted(f, &c.abstention_label, &data.loyalty, &c.omitted_origins) {
            Ok(r) => records.push(r),
            Err(e) => report.fail("estimate", format!("volatility {}", f.zone_id), CliError::with_context("", e)),
        }
    }
    let mut w = BufWriter::new(File::create(ctx.out.join(VOLATILITY_CSV))?);
    write_volatility_csv(&mut w, &records)?;
    drop(w);
    write_json(&ctx.out.join(VOLATILITY_JSON), &records)?;
    write_json(&ctx.out.join(ELECTORATE_WARNINGS_JSON), &data.warnings)?;
    report.messages.push(format!(
        "estimated {} of {} zones; {} electorate warnings",
        flows.len(),
        data.zones.len(),
        data.warnings.len()
    ));
    Ok(report)
}

/// Covariate recipe, correlation screen, and the design matrix for the models.
pub fn covariates(ctx: &Context) -> Result<StageReport, CliError> {
    let c = &ctx.cfg.config;
    if !ctx.cfg.resolve(&c.covariates).is_file() {
        return Err(CliError::Validation(format!("covariates file `{}` not found", c.covariates)));
    }
    let x = load_covariate_matrix(ctx.cfg)?;
    let corr = correlation_report(&x, c.correlation_threshold).map_err(ctx_err("correlations"))?;
    for (a, b, r) in &corr.flagged {
        warn!("covariates `{a}` and `{b}` correlate at {r:.2}");
    }
    fs::create_dir_all(&ctx.out)?;
    x.write_csv(BufWriter::new(File::create(ctx.out.join(COVARIATES_CSV))?))?;
    write_json(&ctx.out.join(TRANSFORMS_JSON), &x.transforms())?;
    write_json(&ctx.out.join(CORRELATIONS_JSON), &corr)?;
    Ok(StageReport {
        messages: vec![format!(
            "{} covariates over {} zones; {} correlated pairs flagged",
            x.n_covariates(),
            x.n_zones(),
            corr.flagged.len()
        )],
        failures: Vec::new(),
    })
}

fn fit_model(
    spec: &ModelSpec,
    flows: &[FlowTable],
    se: &[Vec<Vec<f64>>],
    x: &CovariateMatrix,
    cfg: &LoadedConfig,
) -> Result<ModelReport, CliError> {
    let c = &cfg.config;
    let context = format!("model {} ({:?})", spec.anchor, spec.direction);
    let e = ctx_err(&context);
    let mut panel = build_panel_with_se(flows, se, &spec.anchor, spec.direction).map_err(&e)?;
    if !spec.groups.is_empty() {
        panel = panel.merge_options(&spec.groups).map_err(&e)?;
    }
    let reference = match &spec.reference {
        Some(r) => Some(
            panel
                .options
                .iter()
                .position(|o| o == r)
                .ok_or_else(|| CliError::Validation(format!("{context}: unknown reference `{r}`")))?,
        ),
        None => None,
    };
    let design = if spec.dummies.is_empty() {
        x.clone()
    } else {
        add_zone_dummies(x, &spec.dummies).map_err(&e)?
    };
    let mnl = MnlConfig {
        reference,
        ..MnlConfig::default()
    };
    let model = stepwise_select(&panel, &design, &c.stepwise_schedule, &mnl).map_err(&e)?;
    model_report(model, &panel, c.marginal_step, c.significance).map_err(&e)
}

/// Multinomial model per anchor on the estimated flows.
pub fn model(ctx: &Context) -> Result<StageReport, CliError> {
    let cfg = ctx.cfg;
    let c = &cfg.config;
    check_schedule(&c.stepwise_schedule)?;
    let flows = read_flows_csv(&ctx.out.join(FLOWS_CSV))?;
    let zone_ids: Vec<String> = flows.iter().map(|f| f.zone_id.clone()).collect();
    let mut se = Vec::with_capacity(flows.len());
    for z in &zone_ids {
        let est: TransitionEstimate = read_json(&ctx.out.join(ESTIMATES_DIR).join(zone_file(z)))?;
        se.push(est.se_p);
    }
    let transforms: IndexMap<String, Transform> = read_json(&ctx.out.join(TRANSFORMS_JSON))?;
    let path = ctx.out.join(COVARIATES_CSV);
    let x = CovariateMatrix::read_csv(File::open(&path).map_err(|e| missing(&path, e))?, &transforms)
        .map_err(ctx_err(COVARIATES_CSV))?
        .align_to(&zone_ids)
        .map_err(ctx_err(COVARIATES_CSV))?;

    let models_dir = ctx.out.join(MODELS_DIR);
    reset_dir(&models_dir)?;
    let results: Vec<Result<ModelReport, CliError>> = ctx.pool.install(|| {
        c.models
            .par_iter()
            .map(|spec| {
                let report = fit_model(spec, &flows, &se, &x, cfg)?;
                write_json(&models_dir.join(format!("{}.json", spec.file_stem())), &report)?;
                Ok(report)
            })
            .collect()
    });
    let mut report = StageReport::default();
    for (spec, r) in c.models.iter().zip(results) {
        match r {
            Ok(m) => report.messages.push(format!(
                "{}: {} options, {:.1}% deviance explained, {} outliers",
                spec.file_stem(),
                m.model.options.len(),
                m.model.pct_deviance_explained,
                m.residuals.outliers.len()
            )),
            Err(e) => report.fail("model", format!("model {} ({:?})", spec.anchor, spec.direction), e),
        }
    }
    Ok(report)
}

fn write_outliers_csv(path: &Path, reports: &[(String, ModelReport)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["model", "zone_id", "option", "std_residual"])?;
    for (stem, r) in reports {
        for o in &r.residuals.outliers {
            w.write_record([stem.as_str(), &o.zone_id, &o.option, &format!("{:.4}", o.std_residual)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Regional table, model tables, outlier list and SVG charts.
pub fn report(ctx: &Context) -> Result<StageReport, CliError> {
    let c = &ctx.cfg.config;
    let flows = read_flows_csv(&ctx.out.join(FLOWS_CSV))?;
    if flows.is_empty() {
        return Err(CliError::Validation("flows.csv holds no zones".into()));
    }
    let region = aggregate_region(&flows).map_err(ctx_err("region"))?;
    write_text(
        &ctx.out.join(TABLE1_CSV),
        &render_transition_table(&region, &c.first_election_label).map_err(ctx_err("table1"))?,
    )?;

    let heat_dir = ctx.out.join(HEATMAPS_DIR);
    reset_dir(&heat_dir)?;
    let mut report = StageReport::default();
    for f in std::iter::once(&region).chain(&flows) {
        match flow_heatmap_svg(f) {
            Ok(svg) => write_text(&heat_dir.join(format!("{}.svg", slug(&f.zone_id))), &svg)?,
            Err(e) => report.fail("report", format!("heatmap {}", f.zone_id), CliError::with_context("", e)),
        }
    }
    let records: Vec<VolatilityRecord> = read_json(&ctx.out.join(VOLATILITY_JSON))?;
    write_text(&ctx.out.join(VOLATILITY_SVG), &volatility_bars_svg(&records))?;

    let mut reports: Vec<(String, ModelReport)> = Vec::new();
    for spec in &c.models {
        let path = ctx.out.join(MODELS_DIR).join(format!("{}.json", spec.file_stem()));
        if path.is_file() {
            reports.push((spec.file_stem(), read_json(&path)?));
        }
    }
    let models: Vec<ModelReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    let destinations = if c.table3_destinations.is_empty() {
        vec![c.abstention_label.clone()]
    } else {
        c.table3_destinations.clone()
    };
    write_text(
        &ctx.out.join(TABLE3_CSV),
        &render_table3(&models, &destinations).map_err(ctx_err("table3"))?,
    )?;
    write_text(&ctx.out.join(TABLEC1_CSV), &render_table_c1(&models).map_err(ctx_err("tableC1"))?)?;
    write_outliers_csv(&ctx.out.join(OUTLIERS_CSV), &reports)?;
    report.messages.push(format!(
        "rendered tables for {} zones and {} models",
        flows.len(),
        models.len()
    ));
    Ok(report)
}

/// Writes a synthetic dataset from the config's `simulate` section.
pub fn simulate(cfg: &LoadedConfig, out: Option<&Path>) -> Result<StageReport, CliError> {
    let sim = cfg
        .config
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::Validation("config has no `simulate` section".into()))?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.resolve(&sim.out_dir));
    let output = generate(&sim.spec).map_err(ctx_err("simulate"))?;
    let paths = write_outputs(&output, &dir).map_err(ctx_err("simulate"))?;
    Ok(StageReport {
        messages: paths.iter().map(|p| format!("wrote {}", p.display())).collect(),
        failures: Vec::new(),
    })
}
