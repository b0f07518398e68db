use flowcast::data_model::{aggregate_parties, group_zones, OptionSet, StationRecord, ZoneTable, NO_VOTE};
use flowcast::ei_estimator::*;
use flowcast::synth_oracle::{generate, SynthOutput, SynthSpec};
use flowcast::volatility::{aggregate_region, render_transition_table, volatility_correlation, volatility_indexes, LoyaltyRule};
use flowcast::FlowTable;
use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64, zones: usize, stations: usize) -> SynthSpec {
    let labels: Vec<String> = ["A", "B", NO_VOTE].map(String::from).to_vec();
    SynthSpec {
        seed,
        zones,
        stations_per_zone: stations,
        origins: labels.clone(),
        destinations: labels,
        origin_shares: vec![0.4, 0.3, 0.3],
        base_p: vec![vec![0.7, 0.1, 0.2], vec![0.15, 0.6, 0.25], vec![0.1, 0.1, 0.8]],
        effects: vec![],
        volatility_amplitude: 0.0,
        destination_split: IndexMap::new(),
        ..SynthSpec::default()
    }
}

fn zones_of(out: &SynthOutput) -> Vec<ZoneTable> {
    let data = aggregate_parties(&out.data, &out.aggregation).unwrap();
    group_zones(&data, 2).unwrap()
}

fn max_error(est: &TransitionEstimate, truth: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (r, t) in est.p.iter().zip(truth) {
        for (a, b) in r.iter().zip(t) {
            m = m.max((a - b).abs());
        }
    }
    m
}

#[test]
fn analytic_score_matches_central_differences() {
    let out = generate(&SynthSpec {
        zones: 3,
        stations_per_zone: 30,
        ..SynthSpec::default()
    })
    .unwrap();
    let zone = PreparedZone::from_zone(&zones_of(&out)[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let theta: Vec<f64> = (0..zone.n_params()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grad = asymptotic_score(&zone, &theta).unwrap();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..theta.len())
            .map(|k| {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[k] += h;
                dn[k] -= h;
                (asymptotic_loglik(&zone, &up).unwrap() - asymptotic_loglik(&zone, &dn).unwrap()) / (2.0 * h)
            })
            .collect();
        let diff: f64 = grad.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-6, "relative error {}", diff / norm);
    }
}

#[test]
fn small_synthetic_zone_is_recovered() {
    let out = generate(&small_spec(5, 10, 50)).unwrap();
    let cfg = EstimatorConfig::default();
    let mut within = 0;
    for z in zones_of(&out) {
        let est = fit_zone(&z, &cfg).unwrap();
        for row in &est.p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        if max_error(&est, out.truth.p_of(&z.zone_id).unwrap()) <= 0.03 {
            within += 1;
        }
    }
    assert!(within >= 9, "{within}/10 zones within 0.03");
}

#[test]
fn prediction_matches_naive_loop() {
    let out = generate(&small_spec(2, 3, 20)).unwrap();
    let z = &zones_of(&out)[1];
    let est = fit_zone(z, &EstimatorConfig::default()).unwrap();
    for s in &z.stations {
        let fast = predict_station(&est, s).unwrap();
        for (j, v) in fast.iter().enumerate() {
            let mut naive = 0.0;
            for i in 0..s.counts1.len() {
                naive += s.counts1[i] as f64 * est.p[i][j];
            }
            assert!((naive - v).abs() < 1e-9);
        }
        assert!((fast.iter().sum::<f64>() - s.total1() as f64).abs() < 1e-9);
    }
}

#[test]
fn permuting_destinations_permutes_estimates() {
    let out = generate(&small_spec(8, 3, 40)).unwrap();
    let zone = &zones_of(&out)[0];
    let cfg = EstimatorConfig::default();
    let est = fit_zone(zone, &cfg).unwrap();
    let perm = [2usize, 0, 1];
    let labels: Vec<String> = perm.iter().map(|&j| zone.options2.labels()[j].clone()).collect();
    let stations: Vec<StationRecord> = zone
        .stations
        .iter()
        .map(|s| StationRecord {
            counts2: perm.iter().map(|&j| s.counts2[j]).collect(),
            ..s.clone()
        })
        .collect();
    let permuted = ZoneTable::new(zone.zone_id.clone(), zone.options1.clone(), OptionSet::from_labels(labels).unwrap(), stations).unwrap();
    let est2 = fit_zone(&permuted, &cfg).unwrap();
    for i in 0..3 {
        for (k, &j) in perm.iter().enumerate() {
            assert!((est2.p[i][k] - est.p[i][j]).abs() < 1e-5, "cell {i},{j}");
        }
    }
}

#[test]
fn error_shrinks_with_more_stations() {
    let cfg = EstimatorConfig::default();
    let mean_error = |stations: usize| {
        let mut total = 0.0;
        let mut n = 0.0;
        for seed in 0..4 {
            let out = generate(&small_spec(100 + seed, 5, stations)).unwrap();
            for z in zones_of(&out) {
                let est = fit_zone(&z, &cfg).unwrap();
                let truth = out.truth.p_of(&z.zone_id).unwrap();
                for (r, t) in est.p.iter().zip(truth) {
                    for (a, b) in r.iter().zip(t) {
                        total += (a - b).abs();
                        n += 1.0;
                    }
                }
            }
        }
        total / n
    };
    let (e50, e100) = (mean_error(50), mean_error(100));
    assert!(e100 < e50, "{e100} !< {e50}");
}

#[test]
fn pearson_chi_square_is_calibrated_without_overdispersion() {
    let cfg = EstimatorConfig::default();
    let (mut chi, mut df) = (0.0, 0.0);
    for seed in 0..10 {
        let out = generate(&small_spec(300 + seed, 20, 40)).unwrap();
        for z in zones_of(&out) {
            let est = fit_zone(&z, &cfg).unwrap();
            let report = goodness_of_fit(&est, &z);
            for s in &report.stations {
                // unscale the φ adjustment so the statistic is at φ = 1
                chi += s.chi_square * est.phi;
                df += s.df as f64;
            }
        }
    }
    let ratio = chi / df;
    assert!((ratio - 1.0).abs() < 0.15, "chi2/df = {ratio}");
}

#[test]
fn shuffled_destinations_lower_pseudo_r2() {
    let cfg = EstimatorConfig::default();
    let mut lower = 0;
    let reps = 100;
    for seed in 0..reps {
        let out = generate(&small_spec(1000 + seed, 3, 30)).unwrap();
        let zone = &zones_of(&out)[0];
        let r2 = fit_zone(zone, &cfg).unwrap().fit.pseudo_r2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<u64>> = zone.stations.iter().map(|s| s.counts2.clone()).collect();
        for k in (1..rows.len()).rev() {
            rows.swap(k, rng.random_range(0..=k));
        }
        let stations: Vec<StationRecord> = zone
            .stations
            .iter()
            .zip(rows)
            .map(|(s, c2)| {
                let total: u64 = c2.iter().sum();
                StationRecord {
                    counts2: c2,
                    electorate2: total,
                    ..s.clone()
                }
            })
            .collect();
        let shuffled = ZoneTable::new(zone.zone_id.clone(), zone.options1.clone(), zone.options2.clone(), stations).unwrap();
        match fit_zone(&shuffled, &cfg) {
            Ok(est) if est.fit.pseudo_r2 >= r2 => {}
            _ => lower += 1,
        }
    }
    assert!(lower as f64 >= 0.95 * reps as f64, "{lower}/{reps}");
}

#[test]
fn delta_method_matches_numerical_propagation() {
    let out = generate(&small_spec(9, 3, 40)).unwrap();
    let zone = &zones_of(&out)[2];
    let est = fit_zone(zone, &EstimatorConfig::default()).unwrap();
    let se = standard_errors(&est).unwrap();
    let theta = est.theta_vec();
    let (i_n, j_n) = (est.origins.len(), est.destinations.len());
    let h = 1e-5;
    let mut jac = DMatrix::zeros(i_n * j_n, theta.len());
    for k in 0..theta.len() {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[k] += h;
        dn[k] -= h;
        let pu = probabilities_from_theta(&up, i_n, j_n);
        let pd = probabilities_from_theta(&dn, i_n, j_n);
        for i in 0..i_n {
            for j in 0..j_n {
                jac[(i * j_n + j, k)] = (pu[(i, j)] - pd[(i, j)]) / (2.0 * h);
            }
        }
    }
    let cov = jac.clone() * est.cov_matrix() * jac.transpose();
    for i in 0..i_n {
        for j in 0..j_n {
            let numeric = cov[(i * j_n + j, i * j_n + j)].max(0.0).sqrt();
            let analytic = se[(i, j)];
            assert!((numeric - analytic).abs() <= 0.10 * analytic.max(1e-12), "cell {i},{j}: {numeric} vs {analytic}");
            assert!((analytic - est.se_p[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn regional_flows_match_observed_totals() {
    let out = generate(&SynthSpec {
        zones: 19,
        stations_per_zone: 20,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = EstimatorConfig::default();
    let zones = zones_of(&out);
    let tables: Vec<FlowTable> = zones
        .iter()
        .map(|z| flow_counts(&fit_zone(z, &cfg).unwrap(), z, &cfg).unwrap())
        .collect();
    let region = aggregate_region(&tables).unwrap();
    let mut rows = vec![0.0; region.origins.len()];
    let mut cols = vec![0.0; region.destinations.len()];
    for z in &zones {
        z.margins1.iter().zip(rows.iter_mut()).for_each(|(m, r)| *r += *m as f64);
        z.margins2.iter().zip(cols.iter_mut()).for_each(|(m, c)| *c += *m as f64);
    }
    for (a, b) in region.row_sums().iter().zip(&rows) {
        assert!((a - b).abs() <= 1e-6 * b);
    }
    for (a, b) in region.col_sums().iter().zip(&cols) {
        assert!((a - b).abs() <= 1e-6 * b);
    }
    for t in &tables {
        assert!(t.counts.iter().flatten().all(|v| *v >= 0.0));
    }
    let layout = render_transition_table(&region, "2018").unwrap();
    let lines: Vec<&str> = layout.lines().collect();
    assert_eq!(lines[0], "2018,M5S-OL,PD,OCL,FdI,Lega-FI-OCR,No vote,Total");
    assert_eq!(lines[1].split(',').next(), Some("Numbers of vote (thousands)"));
    assert_eq!(lines[7].split(',').next(), Some("Percentages on row totals"));
    assert_eq!(lines.len(), 13);
}

#[test]
fn realized_flows_converge_to_truth_with_large_stations() {
    let out = generate(&SynthSpec {
        zones: 3,
        stations_per_zone: 53,
        voters_per_station: 7000.0,
        ..SynthSpec::default()
    })
    .unwrap();
    for z in &out.truth.zones {
        for (row, p) in z.flows.iter().zip(&z.p) {
            let total: u64 = row.iter().sum();
            for (c, pj) in row.iter().zip(p) {
                assert!((*c as f64 / total as f64 - pj).abs() < 0.01);
            }
        }
    }
}

#[test]
fn planted_volatility_correlation_is_recovered() {
    let spec = SynthSpec {
        zones: 400,
        stations_per_zone: 2,
        effects: vec![],
        zone_share_spread: 0.0,
        volatility_amplitude: 0.15,
        ..SynthSpec::default()
    };
    let (matrices, _) = flowcast::synth_oracle::true_transition_matrices(&spec).unwrap();
    let records: Vec<_> = matrices
        .iter()
        .enumerate()
        .map(|(z, p)| {
            let counts = p
                .iter()
                .zip(&spec.origin_shares)
                .map(|(row, s)| row.iter().map(|v| v * s).collect())
                .collect();
            let table = FlowTable::from_counts(format!("{z}"), spec.origins.clone(), spec.destinations.clone(), counts).unwrap();
            volatility_indexes(&table, NO_VOTE, &LoyaltyRule::Containment).unwrap()
        })
        .collect();
    let r = volatility_correlation(&records).unwrap();
    assert!((r - spec.volatility_correlation).abs() < 0.1, "r = {r}");
}
