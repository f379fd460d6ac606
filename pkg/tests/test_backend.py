import numpy as np
import pytest

from tracesynth import backend as bk
from tracesynth import querygraph as qg
from tracesynth import translator as tl


def scan_graph(cols=("o_custkey", "o_date", "o_id")):
    return qg.QueryGraph([qg.scan_node(0, "orders", cols)], [], 0)


def join_graph():
    nodes = [
        qg.scan_node(0, "orders", ["o_custkey", "o_total"]),
        qg.scan_node(1, "customer", ["c_id", "c_region"]),
        qg.join_node(2, "orders.o_custkey", "customer.c_id"),
    ]
    return qg.QueryGraph(nodes, [(2, 0), (2, 1)], 2)


def test_demo_scan_cost(demo_backend):
    profile = demo_backend.execute(scan_graph())
    assert profile.scanned_bytes == 20000
    assert profile.cpu_time_ms == pytest.approx(10.0)


def test_empty_filter_zeroes_downstream(demo_backend, demo_catalog):
    min_total = demo_catalog.table("orders").column("o_total").min_value
    nodes = [
        qg.scan_node(0, "orders", ["o_total", "o_custkey"]),
        qg.filter_node(1, [("orders.o_total", "<=", min_total - 1)]),
        qg.aggregate_node(2, ("orders.o_custkey",), [("count", "*")]),
        qg.sort_node(3, ("orders.o_custkey",)),
    ]
    g = qg.QueryGraph(nodes, [(1, 0), (2, 1), (3, 2)], 3)
    profile = demo_backend.execute(g)
    assert profile.operator(1).output_card == 0
    assert profile.operator(2).cpu_time_ms == 0.0
    assert profile.operator(3).cpu_time_ms == 0.0


def test_join_builds_on_smaller_input(demo_backend):
    profile = demo_backend.execute(join_graph())
    row = profile.operator(2)
    assert row.input_cards == (100, 1000)
    assert row.output_card == 1000  # FK join preserves fact rows


def test_execute_deterministic(demo_backend):
    g = join_graph()
    p1, p2 = demo_backend.execute(g), demo_backend.execute(g)
    assert p1 == p2


def test_cpu_additivity(demo_backend, demo_catalog):
    rng = np.random.default_rng(8)
    for _ in range(20):
        g = qg.sample_random_graph(demo_catalog, {"max_joins": 1, "max_aggs": 2,
                                                  "max_sorts": 1}, rng=rng)
        profile = demo_backend.execute(g)
        assert profile.cpu_time_ms == sum(r.cpu_time_ms for r in profile.per_operator)


def test_filter_tightening_monotone(demo_backend, demo_catalog):
    stats = demo_catalog.table("orders").column("o_total")
    loose, tight = stats.max_value * 0.8, stats.max_value * 0.4
    def with_bound(p):
        nodes = [
            qg.scan_node(0, "orders", ["o_custkey", "o_total"]),
            qg.filter_node(1, [("orders.o_total", "<=", p)]),
            qg.scan_node(2, "customer", ["c_id"]),
            qg.join_node(3, "orders.o_custkey", "customer.c_id"),
        ]
        return qg.QueryGraph(nodes, [(1, 0), (3, 1), (3, 2)], 3)
    p_loose = demo_backend.execute(with_bound(loose))
    p_tight = demo_backend.execute(with_bound(tight))
    for nid in (1, 3):
        assert p_tight.operator(nid).output_card <= p_loose.operator(nid).output_card


def test_probe_matches_execute(fresh_backend):
    g = join_graph()
    profile = fresh_backend.execute(g)
    cards = fresh_backend.probe_cardinalities(g)
    for row in profile.per_operator:
        assert cards.of(row.node_id) == row.output_card


def test_probe_accounting_separate(fresh_backend):
    g = scan_graph()
    fresh_backend.probe_cardinalities(g)
    assert fresh_backend.probes == 1
    assert fresh_backend.executions == 0
    assert fresh_backend.probe_cpu_ms > 0
    assert fresh_backend.execution_cpu_ms == 0.0
    fresh_backend.execute(g)
    assert fresh_backend.executions == 1


def test_invalid_graph_rejected(demo_backend):
    g = qg.QueryGraph([qg.scan_node(0, "orders", ["missing_col"])], [], 0)
    with pytest.raises(bk.BackendError):
        demo_backend.execute(g)


def test_config_validation():
    with pytest.raises(ValueError):
        bk.BackendConfig(parallel_tasks=0)
    with pytest.raises(ValueError):
        bk.BackendConfig(costs=bk.CostConstants(scan_per_byte=-1.0))


def test_parallel_tasks_term(demo):
    catalog, dataset = demo
    be2 = bk.SimulatedBackend(catalog, dataset, bk.BackendConfig(parallel_tasks=8))
    be4 = bk.SimulatedBackend(catalog, dataset, bk.BackendConfig(parallel_tasks=4))
    g = join_graph()
    delta = be2.execute(g).cpu_time_ms - be4.execute(g).cpu_time_ms
    assert delta == pytest.approx(0.05 * 4)


# -- adapter contract --------------------------------------------------------

def test_mock_adapter_round_trip(demo_backend, tmp_path):
    g = scan_graph()
    profile = demo_backend.execute(g)
    bk.write_mock_profile(profile, g, tmp_path)
    adapter = bk.MockAdapter(tmp_path)
    got = adapter.submit_sql(tl.to_sql(g))
    assert got.cpu_time_ms == profile.cpu_time_ms
    assert got.scanned_bytes == profile.scanned_bytes
    assert got.structural == profile.structural


def test_mock_adapter_missing_profile(tmp_path):
    adapter = bk.MockAdapter(tmp_path)
    with pytest.raises(bk.ProfileParseError) as exc:
        adapter.submit_sql("SELECT c_id FROM customer")
    assert not exc.value.retryable


def test_mock_adapter_timeout_is_retryable(demo_backend, tmp_path):
    g = scan_graph()
    path = bk.write_mock_profile(demo_backend.execute(g), g, tmp_path)
    path.write_text("error=timeout\n")
    adapter = bk.MockAdapter(tmp_path)
    with pytest.raises(bk.AdapterTimeout) as exc:
        adapter.submit_sql(tl.to_sql(g))
    assert exc.value.retryable


def test_mock_adapter_malformed_profile(demo_backend, tmp_path):
    g = scan_graph()
    path = bk.write_mock_profile(demo_backend.execute(g), g, tmp_path)
    path.write_text("cpu_time_ms=not_a_number\n")
    adapter = bk.MockAdapter(tmp_path)
    with pytest.raises(bk.ProfileParseError) as exc:
        adapter.submit_sql(tl.to_sql(g))
    assert not exc.value.retryable


def test_adapter_backend_delegates(demo, demo_backend, tmp_path):
    catalog, dataset = demo
    g = scan_graph()
    profile = demo_backend.execute(g)
    bk.write_mock_profile(profile, g, tmp_path)
    estimator = bk.SimulatedBackend(catalog, dataset)
    ab = bk.AdapterBackend(bk.MockAdapter(tmp_path), estimator)
    got = ab.execute(g)
    assert got.cpu_time_ms == profile.cpu_time_ms
    assert ab.executions == 1
    cards = ab.probe_cardinalities(g)
    assert cards.of(0) == 1000


def test_adapter_backend_retries_then_raises(demo, demo_backend, tmp_path):
    catalog, dataset = demo
    g = scan_graph()
    path = bk.write_mock_profile(demo_backend.execute(g), g, tmp_path)
    path.write_text("error=connection\n")
    ab = bk.AdapterBackend(bk.MockAdapter(tmp_path),
                           bk.SimulatedBackend(catalog, dataset), max_retries=2)
    with pytest.raises(bk.AdapterConnectionError):
        ab.execute(g)
    assert ab.executions == 0
