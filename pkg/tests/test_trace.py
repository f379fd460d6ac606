import pytest
from hypothesis import given, strategies as st

from tracesynth import querygraph as qg
from tracesynth import trace as tr
from tracesynth.backend import ExecutionProfile
from tracesynth.querygraph import StructuralCounts


def make_record(i=0, cpu=10.0, scanned=1000, joins=1, ts=None, qh="aa", ph="bb"):
    return tr.TraceRecord(
        record_id=f"r{i:04d}",
        timestamp_ms=ts if ts is not None else 1000 + i,
        targets=tr.TargetProfile(cpu_time_ms=cpu, scanned_bytes=scanned),
        structure=tr.StructuralProfile((
            tr.Constraint("join", "exact_count", joins),
            tr.Constraint("aggregate", "exact_count", 0),
            tr.Constraint("sort", "exact_count", 0),
        )),
        query_hash=qh,
        param_hash=ph,
    )


def profile_of(cpu, scanned, joins=0, aggs=0, sorts=0, tables=1):
    return ExecutionProfile(
        cpu_time_ms=cpu, scanned_bytes=scanned,
        structural=StructuralCounts(joins, aggs, sorts, tables),
    )


def test_round_trip_and_stable_order(tmp_path):
    records = [make_record(i, ts=5000) for i in range(3)]
    path = tmp_path / "t.csv"
    tr.write_trace(records, path)
    loaded = tr.load_trace(path)
    assert [r.record_id for r in loaded] == ["r0000", "r0001", "r0002"]
    assert all(r.timestamp_ms == 5000 for r in loaded)


def test_negative_cpu_rejected(tmp_path):
    path = tmp_path / "t.csv"
    tr.write_trace([make_record(0)], path)
    path.write_text(path.read_text().replace("10.0", "-10.0"))
    with pytest.raises(tr.TraceFormatError):
        tr.load_trace(path)


def test_missing_param_hash_becomes_none(tmp_path):
    record = make_record(0, ph=None)
    path = tmp_path / "t.csv"
    tr.write_trace([record], path)
    loaded = tr.load_trace(path)
    assert loaded[0].param_hash is None
    assert loaded[0].query_hash == "aa"


def test_decreasing_timestamps_rejected(tmp_path):
    path = tmp_path / "t.csv"
    tr.write_trace([make_record(0, ts=2000), make_record(1, ts=1000)], path)
    with pytest.raises(tr.TraceFormatError, match="decrease"):
        tr.load_trace(path)


def test_presence_mode_round_trip(tmp_path):
    record = tr.TraceRecord(
        record_id="r0", timestamp_ms=1,
        targets=tr.TargetProfile(5.0, 100),
        structure=tr.StructuralProfile((
            tr.Constraint("join", "presence", 1),
            tr.Constraint("sort", "presence", 0),
        )),
    )
    path = tmp_path / "p.csv"
    tr.write_trace([record], path, presence=True)
    assert path.read_text().startswith("# mode=presence")
    loaded = tr.load_trace(path)
    join = loaded[0].structure.get("join")
    assert join.mode == "presence" and join.value == 1
    assert loaded[0].structure.get("aggregate") is None


def test_structural_profile_one_constraint_per_kind():
    with pytest.raises(ValueError):
        tr.StructuralProfile((
            tr.Constraint("join", "exact_count", 1),
            tr.Constraint("join", "exact_count", 2),
        ))


def test_mismatch_zero_on_exact():
    t = tr.TargetProfile(cpu_time_ms=100.0, scanned_bytes=5000)
    assert tr.compute_mismatch(profile_of(100.0, 5000), t) == 0.0


def test_mismatch_single_metric():
    t = tr.TargetProfile(cpu_time_ms=100.0, scanned_bytes=0,
                         weights={"cpu_time_ms": 1.0, "scanned_bytes": 0.0})
    assert tr.compute_mismatch(profile_of(150.0, 12345), t) == pytest.approx(0.5)


def test_mismatch_eta_floor():
    t = tr.TargetProfile(cpu_time_ms=0.0, scanned_bytes=0.0)
    assert tr.compute_mismatch(profile_of(2.0, 0), t) == pytest.approx(2.0)


def test_qerror_examples():
    assert tr.qerror(1.5, 1.5) == 1.0
    assert tr.qerror(2.0, 1.0) == 2.0
    assert tr.qerror(1.0, 2.0) == 2.0


@given(st.floats(min_value=1e-3, max_value=1e12),
       st.floats(min_value=1e-3, max_value=1e12))
def test_qerror_symmetry(a, b):
    assert tr.qerror(a, b) == tr.qerror(b, a)
    assert tr.qerror(a, b) >= 1.0


def test_gen_synthetic_trace_targets_match_backend(demo, fresh_backend):
    catalog, _ = demo
    records, key = tr.gen_synthetic_trace(catalog, fresh_backend, 5, seed=3)
    for record in records:
        profile = fresh_backend.execute(key[record.record_id])
        assert profile.cpu_time_ms == record.targets.cpu_time_ms
        assert profile.scanned_bytes == record.targets.scanned_bytes
        s = profile.structural
        assert record.structure.get("join").value == s.joins
        assert record.structure.get("aggregate").value == s.aggregates
        assert record.structure.get("sort").value == s.sorts


def test_duplication_knob(demo, fresh_backend, tmp_path):
    catalog, _ = demo
    records, _ = tr.gen_synthetic_trace(catalog, fresh_backend, 50, seed=3,
                                        dup_rate=0.4)
    hashes = [r.query_hash for r in records]
    n_repeats = len(hashes) - len(set(hashes))
    assert n_repeats == 20


def test_trace_determinism(demo, tmp_path):
    from tracesynth.backend import SimulatedBackend

    catalog, dataset = demo
    paths = []
    for run in range(2):
        backend = SimulatedBackend(catalog, dataset)
        records, _ = tr.gen_synthetic_trace(catalog, backend, 10, seed=9,
                                            dup_rate=0.2)
        path = tmp_path / f"t{run}.csv"
        tr.write_trace(records, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_answer_key_round_trip(demo, fresh_backend, tmp_path):
    catalog, _ = demo
    records, key = tr.gen_synthetic_trace(catalog, fresh_backend, 4, seed=5)
    path = tmp_path / "key.txt"
    tr.write_answer_key(key, path)
    loaded = tr.load_answer_key(path)
    assert set(loaded) == set(key)
    for rid, g in key.items():
        assert qg.canonical_form(loaded[rid]) == qg.canonical_form(g)
