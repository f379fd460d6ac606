"""Query pool: exact-hash, parameterized-hash, and proxy-signature reuse.

Vendor trace hashes are opaque tokens; the pool binds each token to the
generated graph's own hashes the first time it appears. Hash-free records
fall back to nearest-neighbor retrieval over a z-score-normalized feature
signature built from targets and structural constraints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import querygraph as qg
from .backend import ExecutionProfile, OperatorProfile
from .trace import TraceRecord

DEFAULT_PROXY_TAU = 0.5


class PoolError(Exception):
    pass


@dataclass(frozen=True)
class PoolEntry:
    exact_hash: int
    param_hash: int
    graph: qg.QueryGraph
    profile: ExecutionProfile
    record_id: str
    mismatch: float
    seq: int  # insertion order, stands in for wall-clock time

    def validate(self) -> None:
        if qg.graph_hash(self.graph, parameterized=False) != self.exact_hash:
            raise PoolError("exact hash does not match graph")
        if qg.graph_hash(self.graph, parameterized=True) != self.param_hash:
            raise PoolError("parameterized hash does not match graph")


def record_signature(record: TraceRecord) -> np.ndarray:
    """[log1p(cpu), log1p(bytes), joins, aggs, sorts]; presence constraints
    contribute their 0/1 bit, absent constraints contribute 0."""
    parts = [
        math.log1p(max(record.targets.cpu_time_ms, 0.0)),
        math.log1p(max(record.targets.scanned_bytes, 0.0)),
    ]
    for kind in ("join", "aggregate", "sort"):
        c = record.structure.get(kind)
        parts.append(float(c.value) if c is not None else 0.0)
    return np.array(parts)


def entry_signature(entry: PoolEntry) -> np.ndarray:
    s = entry.profile.structural
    return np.array([
        math.log1p(max(entry.profile.cpu_time_ms, 0.0)),
        math.log1p(max(float(entry.profile.scanned_bytes), 0.0)),
        float(s.joins), float(s.aggregates), float(s.sorts),
    ])


@dataclass(frozen=True)
class LookupResult:
    kind: str   # exact | template | proxy | miss
    entry: Optional[PoolEntry] = None
    distance: Optional[float] = None


class QueryPool:
    def __init__(self, tau: float = DEFAULT_PROXY_TAU):
        self.tau = tau
        self.entries: dict[int, PoolEntry] = {}          # exact hash -> entry
        self.param_index: dict[int, int] = {}            # param hash -> exact hash
        self.vendor_exact: dict[str, int] = {}           # trace token -> exact hash
        self.vendor_param: dict[str, int] = {}
        self.next_seq = 0

    # -- retrieval ----------------------------------------------------------

    def lookup(self, record: TraceRecord) -> LookupResult:
        if record.query_hash is not None:
            exact = self.vendor_exact.get(record.query_hash)
            if exact is not None and exact in self.entries:
                return LookupResult("exact", self.entries[exact])
        if record.param_hash is not None:
            exact = self.vendor_param.get(record.param_hash)
            if exact is not None and exact in self.entries:
                return LookupResult("template", self.entries[exact])
        if record.query_hash is None and record.param_hash is None and self.entries:
            return self._proxy_lookup(record)
        return LookupResult("miss")

    def _proxy_lookup(self, record: TraceRecord) -> LookupResult:
        ordered = sorted(self.entries.values(), key=lambda e: e.seq)
        sigs = np.array([entry_signature(e) for e in ordered])
        mean = sigs.mean(axis=0)
        std = sigs.std(axis=0)
        std[std == 0.0] = 1.0
        target = (record_signature(record) - mean) / std
        dists = np.sqrt((((sigs - mean) / std - target) ** 2).sum(axis=1))
        best = int(np.argmin(dists))
        if float(dists[best]) <= self.tau:
            return LookupResult("proxy", ordered[best], float(dists[best]))
        return LookupResult("miss", distance=float(dists[best]))

    # -- insertion ----------------------------------------------------------

    def insert(self, entry: PoolEntry) -> None:
        """Idempotent on exact hash; on a repeat the lower-mismatch entry
        wins (ties keep the original)."""
        entry.validate()
        current = self.entries.get(entry.exact_hash)
        if current is None or entry.mismatch < current.mismatch:
            if current is not None:
                entry = PoolEntry(**{**vars(entry), "seq": current.seq})
            else:
                entry = PoolEntry(**{**vars(entry), "seq": self.next_seq})
                self.next_seq += 1
            self.entries[entry.exact_hash] = entry
        best_for_param = self.param_index.get(entry.param_hash)
        if (best_for_param is None or best_for_param not in self.entries
                or self.entries[best_for_param].mismatch
                > self.entries[entry.exact_hash].mismatch):
            self.param_index[entry.param_hash] = entry.exact_hash

    def bind_vendor(self, record: TraceRecord, entry: PoolEntry) -> None:
        """First occurrence of a vendor token binds it to a pool entry."""
        if record.query_hash is not None:
            self.vendor_exact.setdefault(record.query_hash, entry.exact_hash)
        if record.param_hash is not None:
            self.vendor_param.setdefault(record.param_hash, entry.exact_hash)

    # -- persistence ---------------------------------------------------------

    def save(self, pool_dir) -> None:
        root = Path(pool_dir)
        graphs = root / "graphs"
        graphs.mkdir(parents=True, exist_ok=True)
        lines = [f"tau={self.tau!r}", f"next_seq={self.next_seq}"]
        for exact in sorted(self.entries):
            e = self.entries[exact]
            token = qg.hash_token(exact)
            (graphs / f"{token}.graph").write_text(qg.canonical_form(e.graph))
            s = e.profile.structural
            lines.append(
                f"entry exact={token} param={qg.hash_token(e.param_hash)} "
                f"record={e.record_id} seq={e.seq} mismatch={e.mismatch!r} "
                f"cpu={e.profile.cpu_time_ms!r} bytes={e.profile.scanned_bytes} "
                f"joins={s.joins} aggs={s.aggregates} sorts={s.sorts} "
                f"tables={s.tables}"
            )
            for row in e.profile.per_operator:
                cards = ",".join(str(c) for c in row.input_cards)
                lines.append(
                    f"op entry={token} node={row.node_id} kind={row.kind} "
                    f"in={cards} out={row.output_card} width={row.output_width} "
                    f"cpu={row.cpu_time_ms!r}"
                )
        for token in sorted(self.param_index):
            lines.append(
                f"param {qg.hash_token(token)} {qg.hash_token(self.param_index[token])}"
            )
        for token in sorted(self.vendor_exact):
            lines.append(f"vendor_exact {token} {qg.hash_token(self.vendor_exact[token])}")
        for token in sorted(self.vendor_param):
            lines.append(f"vendor_param {token} {qg.hash_token(self.vendor_param[token])}")
        (root / "index.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, pool_dir) -> "QueryPool":
        root = Path(pool_dir)
        pool = cls()
        ops: dict[str, list[OperatorProfile]] = {}
        entry_fields: list[dict] = []
        for line in (root / "index.txt").read_text().splitlines():
            if not line.strip():
                continue
            if line.startswith("tau="):
                pool.tau = float(line.split("=", 1)[1])
            elif line.startswith("next_seq="):
                pool.next_seq = int(line.split("=", 1)[1])
            elif line.startswith("entry "):
                entry_fields.append(dict(p.split("=", 1) for p in line[6:].split()))
            elif line.startswith("op "):
                f = dict(p.split("=", 1) for p in line[3:].split())
                cards = tuple(int(c) for c in f["in"].split(",") if c)
                ops.setdefault(f["entry"], []).append(OperatorProfile(
                    node_id=int(f["node"]), kind=f["kind"], input_cards=cards,
                    output_card=int(f["out"]), output_width=int(f["width"]),
                    cpu_time_ms=float(f["cpu"]),
                ))
            elif line.startswith("param "):
                _, p, e = line.split()
                pool.param_index[int(p, 16)] = int(e, 16)
            elif line.startswith("vendor_exact "):
                _, token, e = line.split()
                pool.vendor_exact[token] = int(e, 16)
            elif line.startswith("vendor_param "):
                _, token, e = line.split()
                pool.vendor_param[token] = int(e, 16)
        for f in entry_fields:
            token = f["exact"]
            graph = qg.parse_canonical((root / "graphs" / f"{token}.graph").read_text())
            profile = ExecutionProfile(
                cpu_time_ms=float(f["cpu"]),
                scanned_bytes=int(f["bytes"]),
                structural=qg.StructuralCounts(
                    joins=int(f["joins"]), aggregates=int(f["aggs"]),
                    sorts=int(f["sorts"]), tables=int(f["tables"]),
                ),
                per_operator=tuple(ops.get(token, [])),
            )
            entry = PoolEntry(
                exact_hash=int(token, 16),
                param_hash=int(f["param"], 16),
                graph=graph,
                profile=profile,
                record_id=f["record"],
                mismatch=float(f["mismatch"]),
                seq=int(f["seq"]),
            )
            entry.validate()
            pool.entries[entry.exact_hash] = entry
        return pool
