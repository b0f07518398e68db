"""Smoke test of the Python bindings.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml
    pip install --force-reinstall target/wheels/flowcast-*.whl
"""

import json
import math

import flowcast


def close(a, b, tol):
    return abs(a - b) <= tol


def test_regional_table():
    table = flowcast.FlowTable.regional()
    pct = table.row_percentages()
    assert close(pct[1][1], 58.1, 0.1)
    vol = table.volatility(loyalty="positional")
    assert close(vol["party_switch_pct"], 32.4, 0.1)
    assert close(vol["to_abstention_pct"], 21.2, 0.1)
    assert "PD" in table.render("2018")


def test_small_zone_fit():
    spec = flowcast.SynthSpec(seed=7, zones=3, stations_per_zone=40)
    election = flowcast.SyntheticElection(spec)
    zones = election.zones(min_stations=10)
    assert len(zones) == 3
    zone = zones[0]
    est = flowcast.fit_zone(zone)
    truth = election.true_p(zone.zone_id)
    rows = [truth[election.origins.index(o)] for o in est.origins]
    for r, t in zip(est.p, rows):
        assert close(sum(r), 1.0, 1e-9)
        dest_index = [election.destinations.index(d) for d in est.destinations]
        assert max(abs(p - t[j]) for p, j in zip(r, dest_index)) < 0.15
    flows = flowcast.flow_counts(est, zone)
    for row, margin in zip(flows.counts, flows.row_margins):
        assert min(row) >= 0.0
        assert close(sum(row), margin, 1e-5 * margin)
    assert json.loads(est.to_json())["zone_id"] == zone.zone_id


def test_mnl_model():
    zones = ["Z%02d" % z for z in range(1, 9)]
    x = [(-1.5 + 3 * z / 7) for z in range(8)]
    counts = []
    for v in x:
        eta = [0.5 * v, 0.0]
        e = [math.exp(t) for t in eta]
        counts.append([1000 * q / sum(e) for q in e])
    panel = flowcast.TransitionPanel("anchor", zones, ["yes", "no"], counts)
    covs = flowcast.CovariateMatrix(zones, {"x": x})
    model = flowcast.MnlModel.fit(panel, covs, reference="no")
    assert close(model.beta[0][0], 0.5, 1e-6)
    me = model.marginal_effects()
    assert close(me[0][0] + me[1][0], 0.0, 1e-8)
    res = model.residuals(panel)
    assert max(abs(r) for row in res["residuals"] for r in row) < 1e-6


def test_raking():
    table = flowcast.rake_to_margins([[1.0, 2.0], [3.0, 4.0]], [5.0, 5.0], [4.0, 6.0])
    assert close(sum(table[0]), 5.0, 1e-9)
    assert close(table[0][0] + table[1][0], 4.0, 1e-9)


def test_errors():
    try:
        flowcast.FlowTable("Z", ["a"], ["b", "c"], [[1.0]])
    except flowcast.FlowcastError:
        pass
    else:
        raise AssertionError("dimension mismatch accepted")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
