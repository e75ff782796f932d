import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridval.case_io import (
    CASE33BW,
    BranchRow,
    CaseParseError,
    CaseStructureError,
    ConfigurationError,
    NotRadialError,
    RawCase,
    build_network,
    format_matpower_case,
    load_scenario_config,
    parse_matpower_case,
    read_case,
    synthetic_case,
)

TWO_BUS = """function mpc = two
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 12.66 1 1.1 0.9;  % slack
  2 1 0.1 0.05 0 0 1 1 0 12.66 1 1.1 0.9;
];
mpc.branch = [
  1 2 0.1 0.2 0 0 0 0 0 0 1 0 0;
];
"""


def test_case33_counts(net33):
    raw = read_case()
    assert len(raw.bus_rows) == 33
    assert sum(br.status for br in raw.branch_rows) == 32
    assert net33.n_nodes == 32 and len(net33.branches) == 32 and net33.slack == 1


def test_two_bus_per_unit():
    raw = parse_matpower_case(TWO_BUS)
    assert len(raw.bus_rows) == 2 and len(raw.branch_rows) == 1
    net = build_network(raw)
    br = net.branches[0]
    assert br.r_pu == pytest.approx(0.1 * 100 / 12.66**2, rel=1e-12)
    assert br.r_pu == pytest.approx(0.0624, abs=1e-4)
    assert br.x_pu == pytest.approx(2 * br.r_pu)
    assert net.load_kw[0] == pytest.approx(100.0)


def test_per_unit_linear_in_base():
    raw = parse_matpower_case(TWO_BUS)
    doubled = RawCase(2 * raw.base_mva, raw.bus_rows, raw.branch_rows)
    a, b = build_network(raw).branches[0], build_network(doubled).branches[0]
    assert b.r_pu == pytest.approx(2 * a.r_pu) and b.x_pu == pytest.approx(2 * a.x_pu)


def test_undeclared_bus():
    with pytest.raises(CaseStructureError):
        parse_matpower_case(TWO_BUS.replace("1 2 0.1 0.2", "1 99 0.1 0.2"))


def test_missing_block():
    text = TWO_BUS.split("mpc.branch")[0]
    with pytest.raises(CaseStructureError):
        parse_matpower_case(text)


def test_malformed_row_reports_line():
    with pytest.raises(CaseParseError) as err:
        parse_matpower_case(TWO_BUS.replace("2 1 0.1 0.05", "2 1 0.1 abc"))
    assert err.value.lineno == 5


def test_duplicate_branch_not_radial():
    raw = read_case()
    extra = raw.branch_rows + (BranchRow(2, 3, 0.1, 0.1, 1),)
    with pytest.raises(NotRadialError):
        build_network(RawCase(raw.base_mva, raw.bus_rows, extra))


def test_slack_count():
    raw = parse_matpower_case(TWO_BUS)
    two_slack = tuple(type(b)(b.bus_id, 3, b.pd, b.qd, b.base_kv, b.vmax, b.vmin) for b in raw.bus_rows)
    with pytest.raises(ConfigurationError):
        build_network(RawCase(raw.base_mva, two_slack, raw.branch_rows))


def test_disconnected_not_radial():
    raw = synthetic_case([1, 2, 3])
    # same branch count, but bus 4 cut off and a cycle 1-2-3
    br = (raw.branch_rows[0], raw.branch_rows[1], BranchRow(1, 3, 0.1, 0.1, 1))
    with pytest.raises(NotRadialError):
        build_network(RawCase(raw.base_mva, raw.bus_rows, br))


def test_roundtrip_case33():
    raw = read_case()
    again = parse_matpower_case(format_matpower_case(raw))
    assert again == raw


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=1, max_size=12), st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_random_tree_roundtrip(parent_seeds, r, x):
    parents = [1 + (s % (k + 1)) for k, s in enumerate(parent_seeds)]
    raw = synthetic_case(parents, r, x)
    assert parse_matpower_case(format_matpower_case(raw)) == raw
    net = build_network(raw)
    assert len(net.branches) == len(raw.bus_rows) - 1
    # every node reaches the slack through the parent map
    for b in net.node_order:
        seen = 0
        while b != net.slack:
            b = net.parent[b]
            seen += 1
            assert seen <= net.n_nodes


def test_bfs_order(net33):
    assert net33.node_order[:4] == (2, 3, 19, 4)
    depth = {net33.slack: 0}
    for b in net33.node_order:
        depth[b] = depth[net33.parent[b]] + 1
    d = [depth[b] for b in net33.node_order]
    assert d == sorted(d)


def test_scenario_defaults(net33):
    high = load_scenario_config({"pv": {"case": "high"}}, net33)
    assert len(high.pv_kw) == 19 and high.pv_kw[12] == 800
    assert high.der[20].p_max == 22 and high.der[20].q_min == high.der[20].q_max == 0
    p = high.arrays(net33)
    assert np.all(p["c"] == 10) and np.all(p["d"] == 3) and np.all(p["e"] == 3) and np.all(p["h"] == 6)
    assert (high.v_min, high.v_max) == (0.9, 1.1)
    empty = load_scenario_config({}, net33)
    assert empty.cost(7).c == 10
    low = load_scenario_config({"pv": {"case": "low"}}, net33)
    assert set(low.pv_kw) == {3, 5, 6, 8, 11, 12, 14, 21, 29, 33}


def test_scenario_overrides(net33):
    doc = {"cost": {"c": 12, "nodes": {"5": {"h": 1}}}, "risk": {"eta_vol": 0.1}, "der": {"7": {"p_max": 10}}}
    t = load_scenario_config(doc, net33)
    assert t.cost(5).c == 12 and t.cost(5).h == 1 and t.cost(6).h == 6
    assert t.eta_vol == 0.1 and t.der[7].p_min == -10


@pytest.mark.parametrize("doc", [{"pv": {"ratings_kw": {"99": 10}}}, {"der": {"77": {"p_max": 1}}}])
def test_scenario_unknown_node(net33, doc):
    with pytest.raises(ConfigurationError):
        load_scenario_config(doc, net33)


@pytest.mark.parametrize("doc", [{"risk": {"eta_vol": 0}}, {"voltage_limits": {"v_min": 1.2}}, {"der": {"20": {"p_max": 1, "p_min": 2}}}])
def test_scenario_invalid(doc):
    with pytest.raises(ConfigurationError):
        load_scenario_config(doc)


def test_bundled_file_exists():
    assert CASE33BW.exists()
