"""Execution backends: a deterministic simulated engine plus the adapter
contract for external engines.

The simulated engine evaluates a query graph over materialized catalog data
to obtain true per-operator cardinalities, then charges CPU with fixed
per-operator cost functions. Constants live in CostConstants; any positive
values work, these put demo queries in the 1-500 ms range.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import querygraph as qg
from .catalog import Catalog, Dataset
from .values import date_to_days


class BackendError(Exception):
    pass


class AdapterError(Exception):
    """Base for external-adapter failures; retryable marks transient ones."""

    retryable = False


class AdapterConnectionError(AdapterError):
    retryable = True


class AdapterTimeout(AdapterError):
    retryable = True


class AdapterAuthError(AdapterError):
    retryable = False


class ProfileParseError(AdapterError):
    retryable = False


@dataclass(frozen=True)
class CostConstants:
    scan_per_byte: float = 0.0005      # ms per byte-row
    arith_per_row: float = 0.0004      # ms per row per application
    string_per_row: float = 0.0012
    date_per_row: float = 0.0006
    sort_nlogn: float = 0.001
    sort_width: float = 0.0002
    join_build: float = 0.0008
    join_probe: float = 0.0005
    join_task: float = 0.05            # orchestration overhead per task
    join_materialize: float = 0.0003
    agg_input: float = 0.0006
    agg_group: float = 0.0003

    def expr_rate(self, expr_kind: str) -> float:
        return {"arith": self.arith_per_row, "string": self.string_per_row,
                "date": self.date_per_row}[expr_kind]


@dataclass(frozen=True)
class BackendConfig:
    parallel_tasks: int = 4
    costs: CostConstants = field(default_factory=CostConstants)

    def __post_init__(self):
        if self.parallel_tasks < 1:
            raise ValueError("parallel_tasks must be >= 1")
        for name, value in vars(self.costs).items():
            if value <= 0:
                raise ValueError(f"cost constant {name} must be > 0")


@dataclass(frozen=True)
class OperatorProfile:
    node_id: int
    kind: str
    input_cards: tuple[int, ...]
    output_card: int
    output_width: int
    cpu_time_ms: float


@dataclass(frozen=True)
class ExecutionProfile:
    cpu_time_ms: float
    scanned_bytes: int
    structural: qg.StructuralCounts
    per_operator: tuple[OperatorProfile, ...] = ()

    def operator(self, node_id: int) -> OperatorProfile:
        for row in self.per_operator:
            if row.node_id == node_id:
                return row
        raise KeyError(node_id)


@dataclass(frozen=True)
class CardinalityEstimate:
    rows: dict  # node id -> output row count

    def of(self, node_id: int) -> int:
        return self.rows[node_id]


class ExecutionBackend(ABC):
    """Graph-level execution contract used throughout the pipeline."""

    @abstractmethod
    def execute(self, g: qg.QueryGraph) -> ExecutionProfile:
        ...

    @abstractmethod
    def probe_cardinalities(self, g: qg.QueryGraph) -> CardinalityEstimate:
        ...


class _Relation:
    """Intermediate result: real column arrays plus phantom computed width.

    EvalScalar and aggregate outputs contribute width (they cost CPU to
    materialize) without their values ever being observable, so they are
    tracked as extra_width instead of materialized arrays.
    """

    __slots__ = ("columns", "nrows", "extra_width")

    def __init__(self, columns: dict, nrows: int, extra_width: int = 0):
        self.columns = columns
        self.nrows = nrows
        self.extra_width = extra_width

    @property
    def width(self) -> int:
        return len(self.columns) + self.extra_width


def _match_pairs(left: np.ndarray, right: np.ndarray):
    """Row-index pairs (i, j) with left[i] == right[j], vectorized."""
    order = np.argsort(right, kind="stable")
    rs = right[order]
    lo = np.searchsorted(rs, left, side="left")
    hi = np.searchsorted(rs, left, side="right")
    counts = hi - lo
    total = int(counts.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    idx_left = np.repeat(np.arange(left.size), counts)
    starts = np.repeat(lo, counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    idx_right = order[starts + within]
    return idx_left, idx_right


def _group_codes(arrays: list[np.ndarray]) -> np.ndarray:
    codes = np.zeros(arrays[0].size, dtype=np.int64)
    for arr in arrays:
        _, inv = np.unique(arr, return_inverse=True)
        codes = codes * (int(inv.max()) + 1 if inv.size else 1) + inv
    return codes


class SimulatedBackend(ExecutionBackend):
    """Deterministic reference engine over in-memory catalog data."""

    def __init__(self, catalog: Catalog, dataset: Dataset,
                 config: Optional[BackendConfig] = None):
        self.catalog = catalog
        self.dataset = dataset
        self.config = config or BackendConfig()
        # Workload vs probe accounting are kept apart: probes never count
        # toward the synthesized workload's metrics.
        self.executions = 0
        self.execution_cpu_ms = 0.0
        self.probes = 0
        self.probe_cpu_ms = 0.0

    # -- public API ---------------------------------------------------------

    def execute(self, g: qg.QueryGraph) -> ExecutionProfile:
        profile = self._run(g)
        self.executions += 1
        self.execution_cpu_ms += profile.cpu_time_ms
        return profile

    def probe_cardinalities(self, g: qg.QueryGraph) -> CardinalityEstimate:
        profile = self._run(g)
        self.probes += 1
        self.probe_cpu_ms += profile.cpu_time_ms
        return CardinalityEstimate(
            rows={row.node_id: row.output_card for row in profile.per_operator}
        )

    # -- evaluation ---------------------------------------------------------

    def _run(self, g: qg.QueryGraph) -> ExecutionProfile:
        violations = qg.validate(g, self.catalog)
        if violations:
            raise BackendError(f"invalid graph: {violations[0]}")
        costs = self.config.costs
        rels: dict[int, _Relation] = {}
        rows: list[OperatorProfile] = []
        scanned_bytes = 0
        for nid in g.topological():
            node = g.node(nid)
            kids = g.children(nid)
            if node.kind == qg.SCAN:
                table = self.catalog.table(node.attr("table"))
                data = self.dataset[table.name]
                cols = {
                    qg.colref(table.name, c): data[c] for c in node.attr("columns")
                }
                rel = _Relation(cols, table.row_count)
                bytes_per_row = sum(
                    table.column(c).bytes_per_value for c in node.attr("columns")
                )
                scanned_bytes += table.row_count * bytes_per_row
                cpu = table.row_count * bytes_per_row * costs.scan_per_byte
                in_cards: tuple[int, ...] = ()
            elif node.kind == qg.FILTER:
                child = rels[kids[0]]
                preds = node.attr("predicates")
                mask = np.ones(child.nrows, dtype=bool)
                for ref, _, lit in preds:
                    arr = child.columns[ref]
                    bound = date_to_days(lit) if hasattr(lit, "isoformat") else lit
                    mask &= arr <= bound
                rel = _Relation({k: v[mask] for k, v in child.columns.items()},
                                int(mask.sum()), child.extra_width)
                cpu = child.nrows * costs.arith_per_row * len(preds)
                in_cards = (child.nrows,)
            elif node.kind == qg.JOIN:
                a, b = rels[kids[0]], rels[kids[1]]
                idx_a, idx_b = _match_pairs(
                    a.columns[node.attr("left_key")],
                    b.columns[node.attr("right_key")],
                )
                merged = {k: v[idx_a] for k, v in a.columns.items()}
                merged.update({k: v[idx_b] for k, v in b.columns.items()})
                rel = _Relation(merged, idx_a.size, a.extra_width + b.extra_width)
                # Build on the smaller input by true cardinality, ties left.
                if b.nrows < a.nrows:
                    build, probe = b.nrows, a.nrows
                else:
                    build, probe = a.nrows, b.nrows
                cpu = (
                    costs.join_build * build
                    + costs.join_probe * probe
                    + costs.join_task * self.config.parallel_tasks
                    + costs.join_materialize * rel.nrows * rel.width
                )
                in_cards = (build, probe)
            elif node.kind == qg.AGGREGATE:
                child = rels[kids[0]]
                group = node.attr("group_by")
                if group:
                    try:
                        arrays = [child.columns[c] for c in group]
                    except KeyError as exc:
                        raise BackendError(f"aggregate group column {exc} has no "
                                           "materialized values") from exc
                    codes = _group_codes(arrays)
                    _, first_idx = np.unique(codes, return_index=True)
                    first_idx.sort()
                    out_cols = {c: child.columns[c][first_idx] for c in group}
                    n_out = first_idx.size
                else:
                    out_cols = {}
                    n_out = 1
                rel = _Relation(out_cols, n_out, len(node.attr("aggs")))
                cpu = (costs.agg_input * child.nrows
                       + costs.agg_group * n_out * len(group))
                in_cards = (child.nrows,)
            elif node.kind == qg.SORT:
                child = rels[kids[0]]
                rel = child
                n = child.nrows
                cpu = (costs.sort_nlogn * n * math.log2(max(n, 2))
                       + costs.sort_width * n * child.width)
                in_cards = (n,)
            elif node.kind == qg.EVALSCALAR:
                child = rels[kids[0]]
                repeat = node.attr("repeat_count")
                rel = _Relation(child.columns, child.nrows,
                                child.extra_width + repeat)
                cpu = child.nrows * costs.expr_rate(node.attr("expr_kind")) * repeat
                in_cards = (child.nrows,)
            else:
                raise BackendError(f"unknown node kind {node.kind}")
            rels[nid] = rel
            rows.append(OperatorProfile(nid, node.kind, in_cards, rel.nrows,
                                        rel.width, cpu))
        total = sum(row.cpu_time_ms for row in rows)
        return ExecutionProfile(
            cpu_time_ms=total,
            scanned_bytes=scanned_bytes,
            structural=qg.structural_counts(g),
            per_operator=tuple(rows),
        )


# ---------------------------------------------------------------------------
# External engine adapters: SQL in, profile out. No real warehouse client is
# shipped; MockAdapter serves canned profiles so the pipeline can be driven
# end-to-end through the adapter surface.

class EngineAdapter(ABC):
    @abstractmethod
    def submit_sql(self, sql: str) -> ExecutionProfile:
        ...


class MockAdapter(EngineAdapter):
    """Serves profiles from a directory of files keyed by exact query hash.

    File format: key=value lines with cpu_time_ms, scanned_bytes, joins,
    aggregates, sorts, tables. A line ``error=timeout`` or
    ``error=connection`` simulates the corresponding transient failure.
    """

    def __init__(self, profile_dir):
        self.profile_dir = Path(profile_dir)

    def submit_sql(self, sql: str) -> ExecutionProfile:
        from .translator import SqlSubsetError, parse_sql

        try:
            g = parse_sql(sql)
        except SqlSubsetError as exc:
            raise ProfileParseError(f"cannot key profile: {exc}") from exc
        token = qg.hash_token(qg.graph_hash(g, parameterized=False))
        path = self.profile_dir / f"{token}.profile"
        if not path.exists():
            raise ProfileParseError(f"no canned profile for hash {token}")
        fields = {}
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        if fields.get("error") == "timeout":
            raise AdapterTimeout(f"simulated timeout for {token}")
        if fields.get("error") == "connection":
            raise AdapterConnectionError(f"simulated connection failure for {token}")
        if fields.get("error") == "auth":
            raise AdapterAuthError("simulated auth failure")
        try:
            return ExecutionProfile(
                cpu_time_ms=float(fields["cpu_time_ms"]),
                scanned_bytes=int(fields["scanned_bytes"]),
                structural=qg.StructuralCounts(
                    joins=int(fields["joins"]),
                    aggregates=int(fields["aggregates"]),
                    sorts=int(fields["sorts"]),
                    tables=int(fields["tables"]),
                ),
            )
        except (KeyError, ValueError) as exc:
            raise ProfileParseError(f"malformed profile {path}: {exc}") from exc


class AdapterBackend(ExecutionBackend):
    """Drives an EngineAdapter through the graph-level backend contract.

    Metrics come from the adapter; cardinality probes are delegated to an
    estimator backend over the same proxy dataset (the adapter surface has
    no probe facility). Retryable adapter failures are retried a bounded
    number of times before propagating.
    """

    def __init__(self, adapter: EngineAdapter, estimator: ExecutionBackend,
                 max_retries: int = 2):
        self.adapter = adapter
        self.estimator = estimator
        self.max_retries = max_retries
        self.executions = 0
        self.execution_cpu_ms = 0.0

    @property
    def probes(self) -> int:
        return getattr(self.estimator, "probes", 0)

    @property
    def probe_cpu_ms(self) -> float:
        return getattr(self.estimator, "probe_cpu_ms", 0.0)

    def execute(self, g: qg.QueryGraph) -> ExecutionProfile:
        from .translator import to_sql

        sql = to_sql(g)
        attempts = 0
        while True:
            try:
                profile = self.adapter.submit_sql(sql)
                break
            except AdapterError as exc:
                attempts += 1
                if not exc.retryable or attempts > self.max_retries:
                    raise
        self.executions += 1
        self.execution_cpu_ms += profile.cpu_time_ms
        return profile

    def probe_cardinalities(self, g: qg.QueryGraph) -> CardinalityEstimate:
        return self.estimator.probe_cardinalities(g)


def write_mock_profile(profile: ExecutionProfile, g: qg.QueryGraph, profile_dir) -> Path:
    """Persist a canned profile for MockAdapter, keyed by the graph's hash."""
    token = qg.hash_token(qg.graph_hash(g, parameterized=False))
    path = Path(profile_dir) / f"{token}.profile"
    path.parent.mkdir(parents=True, exist_ok=True)
    s = profile.structural
    path.write_text(
        "\n".join([
            f"cpu_time_ms={profile.cpu_time_ms!r}",
            f"scanned_bytes={profile.scanned_bytes}",
            f"joins={s.joins}",
            f"aggregates={s.aggregates}",
            f"sorts={s.sorts}",
            f"tables={s.tables}",
        ]) + "\n"
    )
    return path
