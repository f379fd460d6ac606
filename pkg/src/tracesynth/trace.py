"""Anonymized workload traces: per-record execution targets and structural
constraints, plus a synthetic trace generator with a hidden answer key.

Trace files are delimited text with the columns
``record_id,timestamp_ms,cpu_time_ms,scanned_bytes,num_joins,num_aggs,
num_sorts,query_hash,param_hash``. Empty cells mean absent; a leading
``# mode=presence`` comment switches the count columns to 0/1 presence bits.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import querygraph as qg
from .backend import ExecutionBackend, ExecutionProfile
from .catalog import Catalog

TRACE_HEADER = [
    "record_id", "timestamp_ms", "cpu_time_ms", "scanned_bytes",
    "num_joins", "num_aggs", "num_sorts", "query_hash", "param_hash",
]

DEFAULT_TOLERANCE = 0.2   # relative, both metrics
DEFAULT_ETA = 1.0         # 1 ms / 1 byte floor
METRICS = ("cpu_time_ms", "scanned_bytes")

_SYNTH_EPOCH_MS = 1_600_000_000_000


class TraceFormatError(Exception):
    pass


@dataclass(frozen=True)
class TargetProfile:
    cpu_time_ms: float
    scanned_bytes: float
    tolerances: dict = field(default_factory=lambda: dict.fromkeys(METRICS, DEFAULT_TOLERANCE))
    weights: dict = field(default_factory=lambda: dict.fromkeys(METRICS, 1.0))
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if all(w == 0 for w in self.weights.values()):
            raise ValueError("weights must not all be zero")
        if any(t < 0 for t in self.tolerances.values()):
            raise ValueError("tolerances must be >= 0")

    def value(self, metric: str) -> float:
        return {"cpu_time_ms": self.cpu_time_ms, "scanned_bytes": self.scanned_bytes}[metric]


@dataclass(frozen=True)
class Constraint:
    kind: str                 # join | aggregate | sort
    mode: str = "exact_count"  # exact_count | presence
    value: int = 0            # count, or 0/1 presence bit
    tolerance: int = 0        # allowed absolute count deviation

    def satisfied_by(self, count: int) -> bool:
        if self.mode == "presence":
            return (count > 0) == bool(self.value)
        return abs(count - self.value) <= self.tolerance


@dataclass(frozen=True)
class StructuralProfile:
    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self):
        kinds = [c.kind for c in self.constraints]
        if len(kinds) != len(set(kinds)):
            raise ValueError("at most one constraint per operator kind")
        for c in self.constraints:
            if c.mode == "exact_count" and c.value < 0:
                raise ValueError(f"{c.kind}: exact count must be >= 0")

    def get(self, kind: str) -> Optional[Constraint]:
        for c in self.constraints:
            if c.kind == kind:
                return c
        return None

    def satisfied_by(self, counts: qg.StructuralCounts) -> bool:
        return all(c.satisfied_by(counts.get(c.kind)) for c in self.constraints)


@dataclass(frozen=True)
class TraceRecord:
    record_id: str
    timestamp_ms: int
    targets: TargetProfile
    structure: StructuralProfile
    query_hash: Optional[str] = None
    param_hash: Optional[str] = None


# ---------------------------------------------------------------------------
# File I/O.

_COUNT_COLS = {"num_joins": "join", "num_aggs": "aggregate", "num_sorts": "sort"}


def load_trace(path, tolerance: float = DEFAULT_TOLERANCE,
               eta: float = DEFAULT_ETA,
               weights: Optional[dict] = None) -> list[TraceRecord]:
    text = Path(path).read_text()
    presence = False
    if text.startswith("#"):
        first, _, rest = text.partition("\n")
        if "mode=presence" in first:
            presence = True
        text = rest
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise TraceFormatError("empty trace file") from None
    if header != TRACE_HEADER:
        raise TraceFormatError(f"bad trace header: {header}")
    records: list[TraceRecord] = []
    previous_ts = None
    seen_ids = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(TRACE_HEADER):
            raise TraceFormatError(f"line {lineno}: expected {len(TRACE_HEADER)} cells")
        cells = dict(zip(TRACE_HEADER, row))
        try:
            cpu = float(cells["cpu_time_ms"])
            scanned = float(cells["scanned_bytes"])
            ts = int(cells["timestamp_ms"])
        except ValueError as exc:
            raise TraceFormatError(f"line {lineno}: {exc}") from exc
        if cpu < 0 or scanned < 0:
            raise TraceFormatError(f"line {lineno}: negative execution target")
        if cells["record_id"] in seen_ids:
            raise TraceFormatError(f"line {lineno}: duplicate record_id")
        seen_ids.add(cells["record_id"])
        if previous_ts is not None and ts < previous_ts:
            raise TraceFormatError(f"line {lineno}: timestamps decrease")
        previous_ts = ts
        constraints = []
        for col, kind in _COUNT_COLS.items():
            cell = cells[col]
            if cell == "":
                continue
            try:
                value = int(cell)
            except ValueError as exc:
                raise TraceFormatError(f"line {lineno}: {exc}") from exc
            if value < 0:
                raise TraceFormatError(f"line {lineno}: negative operator count")
            mode = "presence" if presence else "exact_count"
            if presence and value not in (0, 1):
                raise TraceFormatError(f"line {lineno}: presence bit must be 0/1")
            constraints.append(Constraint(kind=kind, mode=mode, value=value))
        records.append(TraceRecord(
            record_id=cells["record_id"],
            timestamp_ms=ts,
            targets=TargetProfile(
                cpu_time_ms=cpu,
                scanned_bytes=scanned,
                tolerances=dict.fromkeys(METRICS, tolerance),
                weights=dict(weights) if weights else dict.fromkeys(METRICS, 1.0),
                eta=eta,
            ),
            structure=StructuralProfile(tuple(constraints)),
            query_hash=cells["query_hash"] or None,
            param_hash=cells["param_hash"] or None,
        ))
    return records


def write_trace(records, path, presence: bool = False) -> None:
    buf = io.StringIO()
    if presence:
        buf.write("# mode=presence\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for r in records:
        cols = {}
        for col, kind in _COUNT_COLS.items():
            c = r.structure.get(kind)
            if c is None:
                cols[col] = ""
            elif presence or c.mode == "presence":
                cols[col] = str(int(bool(c.value)))
            else:
                cols[col] = str(c.value)
        writer.writerow([
            r.record_id,
            str(r.timestamp_ms),
            repr(float(r.targets.cpu_time_ms)),
            str(int(r.targets.scanned_bytes)),
            cols["num_joins"], cols["num_aggs"], cols["num_sorts"],
            r.query_hash or "",
            r.param_hash or "",
        ])
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# Metrics.

def compute_mismatch(profile: ExecutionProfile, targets: TargetProfile) -> float:
    """Weighted normalized absolute mismatch over the target metrics."""
    achieved = {"cpu_time_ms": profile.cpu_time_ms,
                "scanned_bytes": float(profile.scanned_bytes)}
    score = 0.0
    for metric in METRICS:
        w = targets.weights.get(metric, 0.0)
        if w == 0.0:
            continue
        y = targets.value(metric)
        score += w * abs(achieved[metric] - y) / max(y, targets.eta)
    return score


def qerror(measured: float, target: float, eta: float = DEFAULT_ETA) -> float:
    """max(measured/target, target/measured) with both sides floored at eta."""
    m = max(float(measured), eta)
    t = max(float(target), eta)
    return max(m / t, t / m)


# ---------------------------------------------------------------------------
# Synthetic traces with a hidden answer key. Every record is feasible by
# construction: targets are the measured profiles of real sampled queries.

def gen_synthetic_trace(catalog: Catalog, backend: ExecutionBackend, n: int,
                        seed: int = 0, dup_rate: float = 0.0,
                        bounds: Optional[dict] = None
                        ) -> tuple[list[TraceRecord], dict]:
    """Sample n random queries, execute them, and emit a verifiable trace.

    dup_rate sets the fraction of records that literally repeat an earlier
    query (same query_hash, same targets). Returns (records, answer_key)
    where answer_key maps record_id to the generating QueryGraph.
    """
    if not 0.0 <= dup_rate < 1.0:
        raise ValueError("dup_rate must be in [0, 1)")
    rng = np.random.default_rng(seed)
    bounds = bounds or qg.default_sample_bounds(catalog)
    n_dup = min(int(round(n * dup_rate)), max(n - 1, 0))
    dup_positions = set()
    if n_dup:
        dup_positions = set(
            rng.choice(np.arange(1, n), size=n_dup, replace=False).tolist()
        )
    records: list[TraceRecord] = []
    graphs: list[qg.QueryGraph] = []
    profiles: list[ExecutionProfile] = []
    seen_hashes: set[int] = set()
    answer_key: dict[str, qg.QueryGraph] = {}
    for i in range(n):
        if i in dup_positions:
            j = int(rng.integers(0, i))
            g, profile = graphs[j], profiles[j]
            exact = qg.graph_hash(g, parameterized=False)
        else:
            while True:
                g = qg.sample_random_graph(catalog, bounds, rng=rng)
                exact = qg.graph_hash(g, parameterized=False)
                if exact not in seen_hashes:
                    break
            seen_hashes.add(exact)
            profile = backend.execute(g)
        record_id = f"r{i:04d}"
        s = profile.structural
        records.append(TraceRecord(
            record_id=record_id,
            timestamp_ms=_SYNTH_EPOCH_MS + i * 1000,
            targets=TargetProfile(cpu_time_ms=profile.cpu_time_ms,
                                  scanned_bytes=float(profile.scanned_bytes)),
            structure=StructuralProfile((
                Constraint("join", "exact_count", s.joins),
                Constraint("aggregate", "exact_count", s.aggregates),
                Constraint("sort", "exact_count", s.sorts),
            )),
            query_hash=qg.hash_token(exact),
            param_hash=qg.hash_token(qg.graph_hash(g, parameterized=True)),
        ))
        graphs.append(g)
        profiles.append(profile)
        answer_key[record_id] = g
    return records, answer_key


def write_answer_key(answer_key: dict, path) -> None:
    blocks = []
    for record_id in sorted(answer_key):
        blocks.append(f"[record {record_id}]\n"
                      + qg.canonical_form(answer_key[record_id]))
    Path(path).write_text("\n".join(blocks))


def load_answer_key(path) -> dict:
    text = Path(path).read_text()
    key: dict[str, qg.QueryGraph] = {}
    current_id = None
    current_lines: list[str] = []
    for line in text.splitlines():
        if line.startswith("[record "):
            if current_id is not None:
                key[current_id] = qg.parse_canonical("\n".join(current_lines))
            current_id = line[len("[record "):-1]
            current_lines = []
        elif line.strip():
            current_lines.append(line)
    if current_id is not None:
        key[current_id] = qg.parse_canonical("\n".join(current_lines))
    return key
