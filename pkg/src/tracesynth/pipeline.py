"""End-to-end orchestration: per-record synthesis (pool lookup, Phase I
bounding, Phase II predicate tuning, translation, final measurement),
report generation, and run configuration.

Records are processed strictly in trace order so later records can reuse
earlier results; per-record failures are recorded and skipped, never fatal.
All randomness derives from (config seed, record index), making a full run
byte-reproducible. Report latency is the simulated backend time consumed
on behalf of the record, which keeps report files deterministic.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import bounding, costmodel as cm, predsearch as ps, querygraph as qg
from .backend import ExecutionBackend
from .catalog import Catalog
from .pool import PoolEntry, QueryPool
from .trace import TraceRecord, compute_mismatch, qerror
from .translator import to_sql


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    max_dims: int = 2
    max_executions: int = 40      # per-record backend execution budget
    max_repeat: int = 10_000      # compensation application cap
    proxy_tau: float = 0.5
    tolerance: float = 0.2
    eta: float = 1.0
    weight_cpu: float = 1.0
    weight_bytes: float = 1.0
    backend: str = "simulated"    # simulated | mock-adapter
    mock_profile_dir: str = ""
    n_rand: int = 8
    n_calls: int = 24
    window_low: float = 0.5
    window_high: float = 2.0
    shrink_fraction: float = 0.1
    bucket_cap: int = 256
    always_execute: bool = False  # ablation: disable hybrid scoring

    def search_config(self) -> ps.SearchConfig:
        if self.always_execute:
            low, high = 1e-12, math.inf
        else:
            low, high = self.window_low, self.window_high
        return ps.SearchConfig(
            n_rand=self.n_rand, n_calls=self.n_calls,
            window_low=low, window_high=high,
            shrink_fraction=self.shrink_fraction, bucket_cap=self.bucket_cap,
            seed=self.seed,
        )


_BOOL_KEYS = {"always_execute"}


def load_config(path=None, overrides: Optional[dict] = None) -> PipelineConfig:
    """key=value lines with '#' comments; overrides win over the file."""
    values: dict = {}
    if path is not None:
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    kwargs = {}
    by_name = {f.name: f for f in fields(PipelineConfig)}
    for key, raw in values.items():
        if key not in by_name:
            raise ValueError(f"unknown config key: {key}")
        if isinstance(raw, str):
            if key in _BOOL_KEYS:
                kwargs[key] = raw.lower() in ("1", "true", "yes")
            else:
                kwargs[key] = type(by_name[key].default)(raw)
        else:
            kwargs[key] = raw
    return PipelineConfig(**kwargs)


@dataclass
class RecordOutcome:
    record: TraceRecord
    reuse: str = "miss"           # exact | template | proxy | miss | failed
    sql: Optional[str] = None
    exact_hash: Optional[int] = None
    achieved_cpu: Optional[float] = None
    achieved_bytes: Optional[float] = None
    cpu_qerror: Optional[float] = None
    bytes_qerror: Optional[float] = None
    join_err: Optional[int] = None
    agg_err: Optional[int] = None
    sort_err: Optional[int] = None
    executions: int = 0
    flag: str = ""
    latency_ms: float = 0.0


@dataclass
class RunResult:
    outcomes: list
    pool: QueryPool
    cache: bounding.BoundingCache
    total_executions: int = 0

    def reuse_histogram(self) -> dict:
        hist: dict[str, int] = {}
        for o in self.outcomes:
            hist[o.reuse] = hist.get(o.reuse, 0) + 1
        return hist


def _backend_ms(backend: ExecutionBackend) -> float:
    return (getattr(backend, "execution_cpu_ms", 0.0)
            + getattr(backend, "probe_cpu_ms", 0.0))


def _fill_metrics(outcome: RecordOutcome, profile, record: TraceRecord,
                  config: PipelineConfig) -> None:
    t = record.targets
    outcome.achieved_cpu = profile.cpu_time_ms
    outcome.achieved_bytes = float(profile.scanned_bytes)
    outcome.cpu_qerror = qerror(profile.cpu_time_ms, t.cpu_time_ms, t.eta)
    outcome.bytes_qerror = qerror(float(profile.scanned_bytes), t.scanned_bytes, t.eta)
    errs = {}
    for kind in ("join", "aggregate", "sort"):
        c = record.structure.get(kind)
        if c is None:
            errs[kind] = None
        elif c.mode == "presence":
            errs[kind] = abs(int(profile.structural.get(kind) > 0) - int(bool(c.value)))
        else:
            errs[kind] = abs(profile.structural.get(kind) - c.value)
    outcome.join_err, outcome.agg_err, outcome.sort_err = (
        errs["join"], errs["aggregate"], errs["sort"])
    if not outcome.flag:
        within = all(
            abs(getattr(profile, m_attr) - t.value(metric)) <= t.tolerances[metric]
            * max(t.value(metric), t.eta)
            for metric, m_attr in (("cpu_time_ms", "cpu_time_ms"),
                                   ("scanned_bytes", "scanned_bytes"))
        )
        if not within:
            outcome.flag = "tolerance_missed"


def synthesize_workload(records, catalog: Catalog, backend: ExecutionBackend,
                        model: cm.LocalModel, config: PipelineConfig,
                        pool: Optional[QueryPool] = None) -> RunResult:
    pool = pool if pool is not None else QueryPool(tau=config.proxy_tau)
    cache = bounding.BoundingCache()
    outcomes: list[RecordOutcome] = []
    total_executions = 0
    for index, record in enumerate(records):
        ms_before = _backend_ms(backend)
        execs_before = getattr(backend, "executions", 0)
        outcome = RecordOutcome(record=record)
        try:
            _synthesize_record(index, record, outcome, catalog, backend,
                               model, config, pool, cache)
        except (bounding.BoundingError, ps.PredicateSearchError) as exc:
            outcome.reuse = "failed"
            outcome.flag = getattr(exc, "reason", None) or _failure_code(exc)
        outcome.latency_ms = _backend_ms(backend) - ms_before
        outcome.executions = getattr(backend, "executions", 0) - execs_before
        total_executions += outcome.executions
        outcomes.append(outcome)
    return RunResult(outcomes=outcomes, pool=pool, cache=cache,
                     total_executions=total_executions)


def _failure_code(exc: Exception) -> str:
    if isinstance(exc, bounding.NoConnectedSetError):
        return "no_connected_set"
    if isinstance(exc, ps.NoTunablePredicatesError):
        return "no_tunable_predicates"
    return "error"


def _synthesize_record(index: int, record: TraceRecord, outcome: RecordOutcome,
                       catalog: Catalog, backend: ExecutionBackend,
                       model: cm.LocalModel, config: PipelineConfig,
                       pool: QueryPool, cache: bounding.BoundingCache) -> None:
    hit = pool.lookup(record)
    if hit.kind in ("exact", "proxy"):
        entry = hit.entry
        outcome.reuse = hit.kind
        outcome.sql = to_sql(entry.graph)
        outcome.exact_hash = entry.exact_hash
        pool.bind_vendor(record, entry)
        _fill_metrics(outcome, entry.profile, record, config)
        return

    if hit.kind == "template":
        outcome.reuse = "template"
        template = ps.strip_predicates(hit.entry.graph)
    else:
        outcome.reuse = "miss"
        y_scan = max(record.targets.scanned_bytes, record.targets.eta)
        candidates = bounding.choose_base_graphs(catalog, record.structure,
                                                 y_scan, cache)
        base = candidates[0]
        if base.under_target:
            outcome.flag = "under_target_scan"
        injected = bounding.inject_structure(base, record.structure, catalog)
        comp = bounding.feasibility_and_compensation(
            injected, record.targets.cpu_time_ms, model, backend, catalog,
            max_repeat=config.max_repeat, measure=config.always_execute,
        )
        if comp.infeasible and not outcome.flag:
            outcome.flag = comp.reason or "compensation_cap"
        template = comp.graph

    try:
        space = ps.select_predicate_columns(template, catalog, config.max_dims)
    except ps.NoTunablePredicatesError:
        space = ps.PredicateSpace(dims=())
    ctx = ps.TuneContext(
        template=template,
        space=space,
        y_cpu=record.targets.cpu_time_ms,
        model=model,
        backend=backend,
        catalog=catalog,
        config=config.search_config(),
        rng=np.random.default_rng(np.random.SeedSequence([config.seed, index])),
        max_executions=config.max_executions,
        cpu_tolerance=record.targets.tolerances.get("cpu_time_ms", config.tolerance),
        eta=record.targets.eta,
    )
    result = ps.tune(template, record.targets.cpu_time_ms, space, ctx)
    outcome.sql = to_sql(result.graph)
    exact = qg.graph_hash(result.graph, parameterized=False)
    outcome.exact_hash = exact
    entry = PoolEntry(
        exact_hash=exact,
        param_hash=qg.graph_hash(result.graph, parameterized=True),
        graph=result.graph,
        profile=result.profile,
        record_id=record.record_id,
        mismatch=compute_mismatch(result.profile, record.targets),
        seq=0,
    )
    pool.insert(entry)
    pool.bind_vendor(record, entry)
    _fill_metrics(outcome, result.profile, record, config)


# ---------------------------------------------------------------------------
# Output files.

def write_workload(result: RunResult, path) -> None:
    """One statement per line, each preceded by a provenance comment."""
    lines = []
    for o in result.outcomes:
        if o.sql is None:
            continue
        token = qg.hash_token(o.exact_hash) if o.exact_hash is not None else "-"
        lines.append(f"-- record_id={o.record.record_id} hash={token}")
        lines.append(o.sql + ";")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


REPORT_HEADER = [
    "record_id", "timestamp_ms", "cpu_target_ms", "bytes_target",
    "cpu_achieved_ms", "bytes_achieved", "cpu_qerror", "bytes_qerror",
    "join_abs_err", "agg_abs_err", "sort_abs_err", "executions", "reuse",
    "flag", "latency_ms",
]


def nearest_rank_percentile(values, q: float) -> float:
    """Nearest-rank percentile over a nonempty list."""
    ordered = sorted(values)
    k = max(int(math.ceil(q / 100.0 * len(ordered))), 1) - 1
    return ordered[k]


def aggregate_metrics(outcomes) -> dict:
    cpu_q = [o.cpu_qerror for o in outcomes if o.cpu_qerror is not None]
    bytes_q = [o.bytes_qerror for o in outcomes if o.bytes_qerror is not None]
    agg: dict[str, float] = {}
    for name, vals in (("cpu_qerror", cpu_q), ("bytes_qerror", bytes_q)):
        for label, q in (("median", 50.0), ("p90", 90.0), ("p99", 99.0)):
            if vals:
                agg[f"{label}_{name}"] = nearest_rank_percentile(vals, q)
    for name, attr in (("join_mae", "join_err"), ("agg_mae", "agg_err"),
                       ("sort_mae", "sort_err")):
        errs = [getattr(o, attr) for o in outcomes if getattr(o, attr) is not None]
        if errs:
            agg[name] = sum(errs) / len(errs)
    agg["total_executions"] = sum(o.executions for o in outcomes)
    agg["total_latency_ms"] = sum(o.latency_ms for o in outcomes)
    return agg


def write_report(result: RunResult, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)

    def cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    for o in result.outcomes:
        writer.writerow([
            o.record.record_id, str(o.record.timestamp_ms),
            repr(float(o.record.targets.cpu_time_ms)),
            repr(float(o.record.targets.scanned_bytes)),
            cell(o.achieved_cpu), cell(o.achieved_bytes),
            cell(o.cpu_qerror), cell(o.bytes_qerror),
            cell(o.join_err), cell(o.agg_err), cell(o.sort_err),
            str(o.executions), o.reuse, o.flag, repr(float(o.latency_ms)),
        ])
    for key, value in sorted(aggregate_metrics(result.outcomes).items()):
        buf.write(f"# {key}={value!r}\n")
    for kind, count in sorted(result.reuse_histogram().items()):
        buf.write(f"# reuse_{kind}={count}\n")
    Path(path).write_text(buf.getvalue())


def read_report(path) -> tuple[list[dict], dict]:
    """Parse a report file back into per-record rows and aggregate values."""
    rows: list[dict] = []
    aggregates: dict = {}
    lines = Path(path).read_text().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    for comment in (ln for ln in lines if ln.startswith("#")):
        key, _, value = comment[1:].strip().partition("=")
        try:
            aggregates[key] = float(value)
        except ValueError:
            aggregates[key] = value
    reader = csv.reader(io.StringIO("\n".join(body)))
    header = next(reader, None)
    if header != REPORT_HEADER:
        raise ValueError(f"bad report header: {header}")
    for raw in reader:
        if not raw:
            continue
        rows.append(dict(zip(REPORT_HEADER, raw)))
    return rows, aggregates
