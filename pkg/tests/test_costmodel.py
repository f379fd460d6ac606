import math

import numpy as np
import pytest

from tracesynth import backend as bk
from tracesynth import costmodel as cm
from tracesynth import querygraph as qg


def linear_samples(kind, alpha, beta, rows):
    return [
        cm.ProfileSample(kind, {"input_rows": r, "applications": 1.0,
                                "predicates": 1.0},
                         alpha * r + beta)
        for r in rows
    ]


def test_collect_single_query_kinds(demo, fresh_backend):
    catalog, _ = demo
    samples = cm.collect_profiles(catalog, fresh_backend, 1, seed=0,
                                  bounds={"max_joins": 0, "max_aggs": 0,
                                          "max_sorts": 0, "eval_prob": 0.0})
    kinds = [s.kind for s in samples]
    assert kinds.count("scan") == 1
    assert set(kinds) <= {"scan", "filter"}


def test_collect_covers_all_kinds(demo, fresh_backend):
    catalog, _ = demo
    samples = cm.collect_profiles(catalog, fresh_backend, 200, seed=11)
    kinds = {s.kind for s in samples}
    assert {"scan", "filter", "join", "sort", "aggregate"} <= kinds
    assert any(k.startswith("evalscalar_") for k in kinds)


def test_samples_pass_through_measured_cpu(demo, fresh_backend):
    catalog, _ = demo
    g = qg.QueryGraph([qg.scan_node(0, "orders", ["o_id"])], [], 0)
    profile = fresh_backend.execute(g)
    cards = bk.CardinalityEstimate({0: 1000})
    kind, feats = cm.node_kind_and_features(g, 0, cards, catalog, 4.0)
    assert kind == "scan"
    assert feats["weighted_bytes"] == 8000
    assert profile.operator(0).cpu_time_ms == pytest.approx(8000 * 0.0005)


def test_fit_recovers_linear_exactly():
    model = cm.fit(linear_samples("filter", 0.001, 5.0, [10, 100, 1000, 5000]))
    coef = model.coefficients.get("filter")
    assert coef[0] == pytest.approx(0.001, rel=1e-9)
    assert coef[1] == pytest.approx(5.0, rel=1e-9)


def test_fit_recovers_sort_exactly():
    rows = [16, 64, 256, 1024, 4096]
    samples = [
        cm.ProfileSample("sort", {"input_rows": r, "output_width": w},
                         0.01 * r * math.log2(r))
        for r, w in zip(rows, [2, 5, 3, 7, 4])
    ]
    model = cm.fit(samples)
    alpha, beta, gamma = model.coefficients.get("sort")
    assert alpha == pytest.approx(0.01, rel=1e-6)
    assert abs(beta) < 1e-9
    assert abs(gamma) < 1e-9


def test_fit_recovers_join_exactly():
    rng = np.random.default_rng(0)
    samples = []
    for _ in range(40):
        b, p = int(rng.integers(10, 5000)), int(rng.integers(10, 5000))
        out, w = int(rng.integers(0, 5000)), int(rng.integers(1, 10))
        tasks = int(rng.integers(1, 9))
        cpu = 0.0008 * b + 0.0005 * p + 0.05 * tasks + 0.0003 * out * w
        samples.append(cm.ProfileSample("join", {
            "build_rows": b, "probe_rows": p, "build_keys": 1.0,
            "probe_keys": 1.0, "tasks": tasks, "output_rows": out,
            "output_width": w,
        }, cpu))
    model = cm.fit(samples)
    coef = model.coefficients.get("join")
    for got, want in zip(coef, (0.0008, 0.0005, 0.05, 0.0003)):
        assert got == pytest.approx(want, rel=1e-6)


def test_fit_recovers_aggregate_exactly():
    rng = np.random.default_rng(1)
    samples = []
    for _ in range(30):
        rin, rout, k = (int(rng.integers(1, 5000)), int(rng.integers(1, 500)),
                        int(rng.integers(1, 4)))
        samples.append(cm.ProfileSample("aggregate", {
            "input_rows": rin, "output_rows": rout, "group_keys": k,
        }, 0.0006 * rin + 0.0003 * rout * k))
    model = cm.fit(samples)
    alpha, beta, gamma = model.coefficients.get("aggregate")
    assert alpha == pytest.approx(0.0006, rel=1e-6)
    assert beta == pytest.approx(0.0003, rel=1e-6)
    assert abs(gamma) < 1e-7


def test_negative_coefficients_clamped():
    rng = np.random.default_rng(2)
    samples = []
    for _ in range(50):
        r, w = int(rng.integers(10, 2000)), int(rng.integers(1, 8))
        cpu = max(0.002 * r * math.log2(max(r, 2)) - 0.0001 * r * w, 0.0)
        samples.append(cm.ProfileSample("sort", {"input_rows": r,
                                                 "output_width": w}, cpu))
    model = cm.fit(samples)
    alpha, beta, _ = model.coefficients.get("sort")
    assert alpha >= 0 and beta >= 0


def test_insufficient_samples_rejected():
    with pytest.raises(cm.FitError, match="2 samples"):
        cm.fit(linear_samples("filter", 0.001, 5.0, [10]))


def test_degenerate_design_rejected():
    with pytest.raises(cm.FitError, match="degenerate"):
        cm.fit(linear_samples("filter", 0.001, 5.0, [100, 100, 100]))


def test_predict_operator_examples():
    model = cm.LocalModel(coefficients=cm.OperatorCoefficients(by_kind={
        "filter": np.array([0.001, 5.0]),
        "sort": np.array([0.01, 0.0, 0.0]),
        "join": np.array([0.0008, 0.0005, 0.05, 0.0003]),
    }))
    assert cm.predict_operator(model, "filter",
                               {"input_rows": 1000, "applications": 1.0}) \
        == pytest.approx(6.0)
    assert cm.predict_operator(model, "sort",
                               {"input_rows": 1024, "output_width": 3}) \
        == pytest.approx(102.4)
    match_only = cm.predict_operator(model, "join", {
        "build_rows": 100, "probe_rows": 1000, "tasks": 4,
        "output_rows": 0, "output_width": 7,
    })
    assert match_only == pytest.approx(0.0008 * 100 + 0.0005 * 1000 + 0.2)


def test_predict_unknown_kind():
    model = cm.LocalModel(coefficients=cm.OperatorCoefficients())
    with pytest.raises(ValueError, match="unknown operator kind"):
        cm.predict_operator(model, "window", {})


def test_predict_query_additivity(demo, demo_backend, demo_model):
    catalog, _ = demo
    rng = np.random.default_rng(4)
    for _ in range(10):
        g = qg.sample_random_graph(catalog, {"max_joins": 1, "max_aggs": 2,
                                             "max_sorts": 1}, rng=rng)
        cards = demo_backend.probe_cardinalities(g)
        total = cm.predict_query(demo_model, g, cards, catalog)
        parts = 0.0
        for nid in g.topological():
            kind, feats = cm.node_kind_and_features(g, nid, cards, catalog,
                                                    demo_model.tasks)
            parts += cm.predict_operator(demo_model, kind, feats)
        assert total == parts


def test_in_sample_error_small(demo_model):
    errors = demo_model.metadata["in_sample_median_rel_error"]
    assert errors and max(errors.values()) <= 0.10


def test_parametric_monotonicity(demo_model):
    base = {"build_rows": 100, "probe_rows": 1000, "tasks": 4,
            "output_rows": 500, "output_width": 5}
    p0 = cm.predict_operator(demo_model, "join", base)
    for key in ("build_rows", "probe_rows", "output_rows"):
        bigger = dict(base)
        bigger[key] = base[key] * 2
        assert cm.predict_operator(demo_model, "join", bigger) >= p0


def test_model_file_round_trip(demo, demo_backend, demo_model, tmp_path):
    catalog, _ = demo
    path = tmp_path / "model.txt"
    cm.save_model(demo_model, path)
    loaded = cm.load_model(path)
    rng = np.random.default_rng(6)
    for _ in range(10):
        g = qg.sample_random_graph(catalog, {"max_joins": 1, "max_aggs": 1,
                                             "max_sorts": 1}, rng=rng)
        cards = demo_backend.probe_cardinalities(g)
        assert cm.predict_query(loaded, g, cards, catalog) \
            == cm.predict_query(demo_model, g, cards, catalog)


def test_tree_ensemble_fit_and_reload(demo, demo_backend, tmp_path):
    catalog, _ = demo
    samples = cm.collect_profiles(catalog, demo_backend, 150, seed=13)
    model = cm.fit(samples, join_regressor="tree_ensemble")
    assert model.join_trees is not None
    assert len(model.join_trees.trees) >= 100
    path = tmp_path / "tree_model.txt"
    cm.save_model(model, path)
    loaded = cm.load_model(path)
    rng = np.random.default_rng(7)
    for _ in range(20):
        feats = {
            "build_rows": int(rng.integers(1, 2000)),
            "probe_rows": int(rng.integers(1, 2000)),
            "tasks": 4.0,
            "output_rows": int(rng.integers(0, 2000)),
            "output_width": int(rng.integers(1, 9)),
        }
        assert cm.predict_operator(loaded, "join", feats) \
            == cm.predict_operator(model, "join", feats)


def test_tree_ensemble_learns_join_shape(demo, demo_backend):
    catalog, _ = demo
    samples = cm.collect_profiles(catalog, demo_backend, 200, seed=11)
    model = cm.fit(samples, join_regressor="tree_ensemble")
    joins = [s for s in samples if s.kind == "join"]
    rel_errors = []
    for s in joins:
        pred = cm.predict_operator(model, "join", s.features)
        rel_errors.append(abs(pred - s.cpu_time_ms) / max(s.cpu_time_ms, 1e-6))
    assert float(np.median(rel_errors)) <= 0.25
