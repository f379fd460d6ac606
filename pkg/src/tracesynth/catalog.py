"""Proxy-dataset metadata: tables, per-column statistics, schema join graph.

Also generates small synthetic star-schema datasets for the simulated
backend, so every statistic can be checked against real rows.
"""

from __future__ import annotations

import datetime
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .values import KIND_BYTES, date_to_days, days_to_date, format_value, parse_value


class CatalogError(Exception):
    pass


class CatalogFormatError(CatalogError):
    """Malformed catalog or data file."""


class CatalogValidationError(CatalogError):
    """Structurally well-formed catalog violating an invariant."""


@dataclass(frozen=True)
class ColumnStats:
    name: str
    table: str
    value_kind: str  # integer | decimal | date | text
    bytes_per_value: int
    scan_weight: int  # row_count(table) * bytes_per_value
    min_value: object = None  # absent for text
    max_value: object = None
    distinct_count: int = 1


@dataclass(frozen=True)
class TableStats:
    name: str
    row_count: int
    columns: tuple[ColumnStats, ...]

    def column(self, name: str) -> ColumnStats:
        for col in self.columns:
            if col.name == name:
                return col
        raise KeyError(f"{self.name}.{name}")


@dataclass(frozen=True)
class JoinEdge:
    table_a: str
    column_a: str
    table_b: str
    column_b: str

    def key(self) -> tuple:
        # Undirected: orient so the smaller endpoint comes first.
        a = (self.table_a, self.column_a)
        b = (self.table_b, self.column_b)
        return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class SchemaJoinGraph:
    nodes: tuple[str, ...]
    edges: tuple[JoinEdge, ...]

    def neighbors(self, table: str) -> list[str]:
        out = []
        for e in self.edges:
            if e.table_a == table:
                out.append(e.table_b)
            elif e.table_b == table:
                out.append(e.table_a)
        return out

    def edges_between(self, tables) -> list[JoinEdge]:
        ts = set(tables)
        return [e for e in self.edges if e.table_a in ts and e.table_b in ts]


@dataclass(frozen=True)
class Catalog:
    tables: tuple[TableStats, ...]
    join_graph: SchemaJoinGraph
    dataset_id: str = "dataset"

    def table(self, name: str) -> TableStats:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    def table_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tables)

    def has_column(self, table: str, column: str) -> bool:
        try:
            self.table(table).column(column)
            return True
        except KeyError:
            return False


# Materialized rows for the simulated backend: table -> column -> array.
# integer/decimal are int64/float64; date is int64 epoch days; text is
# a fixed-width unicode array.
Dataset = dict


def validate_catalog(catalog: Catalog) -> None:
    """Raise CatalogValidationError on the first violated invariant."""
    seen_tables = set()
    for t in catalog.tables:
        if t.name in seen_tables:
            raise CatalogValidationError(f"duplicate table {t.name}")
        seen_tables.add(t.name)
        if t.row_count < 1:
            raise CatalogValidationError(f"{t.name}: row_count must be >= 1")
        seen_cols = set()
        for c in t.columns:
            if c.name in seen_cols:
                raise CatalogValidationError(f"duplicate column {t.name}.{c.name}")
            seen_cols.add(c.name)
            if c.table != t.name:
                raise CatalogValidationError(f"{t.name}.{c.name}: table field mismatch")
            if c.bytes_per_value <= 0 or c.scan_weight < 0:
                raise CatalogValidationError(f"{t.name}.{c.name}: negative weight")
            if c.scan_weight != t.row_count * c.bytes_per_value:
                raise CatalogValidationError(
                    f"{t.name}.{c.name}: scan_weight != row_count * bytes_per_value"
                )
            if c.distinct_count < 1:
                raise CatalogValidationError(f"{t.name}.{c.name}: distinct_count < 1")
            if c.value_kind == "text":
                if c.min_value is not None or c.max_value is not None:
                    raise CatalogValidationError(
                        f"{t.name}.{c.name}: text columns carry no min/max"
                    )
            elif c.min_value is not None and c.max_value is not None:
                if c.min_value > c.max_value:
                    raise CatalogValidationError(f"{t.name}.{c.name}: min > max")
    for e in catalog.join_graph.edges:
        for table, column in ((e.table_a, e.column_a), (e.table_b, e.column_b)):
            if table not in seen_tables:
                raise CatalogValidationError(f"join edge references missing table {table}")
            if not catalog.has_column(table, column):
                raise CatalogValidationError(
                    f"join edge references missing column {table}.{column}"
                )
        ka = catalog.table(e.table_a).column(e.column_a).value_kind
        kb = catalog.table(e.table_b).column(e.column_b).value_kind
        if ka != kb:
            raise CatalogValidationError(
                f"join edge {e.table_a}.{e.column_a}~{e.table_b}.{e.column_b}: kind mismatch"
            )
    for n in catalog.join_graph.nodes:
        if n not in seen_tables:
            raise CatalogValidationError(f"join graph node {n} not a catalog table")


# ---------------------------------------------------------------------------
# Catalog file format: one JSON document with sections tables / columns /
# join_edges; field names match the stat types. Serialization is canonical
# (fixed key order, indent 2) so save -> load -> save is byte-identical.

def _column_to_obj(c: ColumnStats) -> dict:
    obj = {
        "table": c.table,
        "name": c.name,
        "value_kind": c.value_kind,
        "bytes_per_value": c.bytes_per_value,
        "scan_weight": c.scan_weight,
        "distinct_count": c.distinct_count,
    }
    if c.value_kind != "text":
        obj["min_value"] = format_value(c.min_value, c.value_kind)
        obj["max_value"] = format_value(c.max_value, c.value_kind)
    return obj


def save_catalog(catalog: Catalog, path) -> None:
    obj = {
        "dataset_id": catalog.dataset_id,
        "tables": [{"name": t.name, "row_count": t.row_count} for t in catalog.tables],
        "columns": [_column_to_obj(c) for t in catalog.tables for c in t.columns],
        "join_edges": [
            {
                "table_a": e.table_a,
                "column_a": e.column_a,
                "table_b": e.table_b,
                "column_b": e.column_b,
            }
            for e in catalog.join_graph.edges
        ],
    }
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def load_catalog(path) -> Catalog:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CatalogFormatError(f"cannot parse catalog file {path}: {exc}") from exc
    try:
        cols_by_table: dict[str, list[ColumnStats]] = {}
        for c in obj["columns"]:
            kind = c["value_kind"]
            stats = ColumnStats(
                name=c["name"],
                table=c["table"],
                value_kind=kind,
                bytes_per_value=int(c["bytes_per_value"]),
                scan_weight=int(c["scan_weight"]),
                min_value=parse_value(c["min_value"], kind) if "min_value" in c else None,
                max_value=parse_value(c["max_value"], kind) if "max_value" in c else None,
                distinct_count=int(c["distinct_count"]),
            )
            cols_by_table.setdefault(c["table"], []).append(stats)
        tables = tuple(
            TableStats(
                name=t["name"],
                row_count=int(t["row_count"]),
                columns=tuple(cols_by_table.get(t["name"], ())),
            )
            for t in obj["tables"]
        )
        edges = tuple(
            JoinEdge(e["table_a"], e["column_a"], e["table_b"], e["column_b"])
            for e in obj["join_edges"]
        )
        catalog = Catalog(
            tables=tables,
            join_graph=SchemaJoinGraph(
                nodes=tuple(t.name for t in tables), edges=edges
            ),
            dataset_id=obj["dataset_id"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CatalogFormatError(f"malformed catalog file {path}: {exc}") from exc
    validate_catalog(catalog)
    return catalog


# ---------------------------------------------------------------------------
# Materialized table files: column-major text, one file per table. Line 1
# names columns and kinds; each following line holds one column's values.

def save_table_data(table: TableStats, data: dict, path) -> None:
    header = " ".join(f"{c.name}:{c.value_kind}" for c in table.columns)
    lines = [header]
    for c in table.columns:
        arr = data[c.name]
        lines.append(" ".join(format_value(v, c.value_kind) for v in arr.tolist()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_table_data(path) -> tuple[list[tuple[str, str]], dict]:
    """Return ([(column, kind), ...], column -> array)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise CatalogFormatError(f"empty data file {path}")
    schema = []
    for part in lines[0].split():
        name, _, kind = part.partition(":")
        if not kind:
            raise CatalogFormatError(f"bad data header in {path}: {part!r}")
        schema.append((name, kind))
    if len(lines) != len(schema) + 1:
        raise CatalogFormatError(f"{path}: expected {len(schema)} column lines")
    data = {}
    for (name, kind), line in zip(schema, lines[1:]):
        cells = line.split() if line else []
        if kind == "integer":
            data[name] = np.array([int(v) for v in cells], dtype=np.int64)
        elif kind == "decimal":
            data[name] = np.array([float(v) for v in cells], dtype=np.float64)
        elif kind == "date":
            data[name] = np.array(
                [date_to_days(datetime.date.fromisoformat(v)) for v in cells],
                dtype=np.int64,
            )
        elif kind == "text":
            data[name] = np.array(cells, dtype=np.str_)
        else:
            raise CatalogFormatError(f"{path}: unknown kind {kind}")
    return schema, data


def save_dataset(catalog: Catalog, dataset: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_catalog(catalog, out / "catalog.json")
    for t in catalog.tables:
        save_table_data(t, dataset[t.name], out / f"{t.name}.col")


def load_dataset(in_dir) -> tuple[Catalog, Dataset]:
    src = Path(in_dir)
    catalog = load_catalog(src / "catalog.json")
    dataset = {}
    for t in catalog.tables:
        _, data = load_table_data(src / f"{t.name}.col")
        dataset[t.name] = data
    return catalog, dataset


# ---------------------------------------------------------------------------
# Synthetic star-schema generation.

_TEXT_ALPHABET = np.array(list("abcdefghijklmnopqrstuvwxyz0123456789"))

DATE_LO = datetime.date(1992, 1, 1)
DATE_HI = datetime.date(1998, 12, 31)


def _random_text(rng: np.random.Generator, n: int, width: int) -> np.ndarray:
    idx = rng.integers(0, len(_TEXT_ALPHABET), size=(n, width))
    return np.array(["".join(row) for row in _TEXT_ALPHABET[idx]], dtype=np.str_)


def _column_stats_from_data(table: str, name: str, kind: str, width: int,
                            row_count: int, arr: np.ndarray) -> ColumnStats:
    if kind == "text":
        mn = mx = None
    elif kind == "date":
        mn = days_to_date(int(arr.min()))
        mx = days_to_date(int(arr.max()))
    elif kind == "integer":
        mn, mx = int(arr.min()), int(arr.max())
    else:
        mn, mx = float(arr.min()), float(arr.max())
    return ColumnStats(
        name=name,
        table=table,
        value_kind=kind,
        bytes_per_value=width,
        scan_weight=row_count * width,
        min_value=mn,
        max_value=mx,
        distinct_count=int(np.unique(arr).size),
    )


def gen_synthetic_catalog(n_tables: int, rows_per_table: int = 1000,
                          seed: int = 0) -> tuple[Catalog, Dataset]:
    """Build a star schema: one fact table plus n_tables-1 dimensions.

    Two tables with default rows reproduce the fixed demo dataset (fact
    ``orders``, dimension ``customer``). Dimensions hold one tenth of the
    fact row count. Emitted stats are recomputed from the generated rows,
    so they match the data exactly.
    """
    if n_tables < 1:
        raise ValueError("n_tables must be >= 1")
    if rows_per_table < 1:
        raise ValueError("rows_per_table must be >= 1")
    rng = np.random.default_rng(seed)
    fact_rows = rows_per_table
    dim_rows = max(rows_per_table // 10, 1)
    day_lo, day_hi = date_to_days(DATE_LO), date_to_days(DATE_HI)

    dataset: Dataset = {}
    tables: list[TableStats] = []
    edges: list[JoinEdge] = []

    # Fact column layout: id, customer FK, amount, date, comment, plus one
    # FK per extra dimension.
    fact = "orders"
    fact_cols: list[tuple[str, str, int]] = [
        ("o_id", "integer", 8),
        ("o_custkey", "integer", 8),
        ("o_total", "decimal", 8),
        ("o_date", "date", 4),
        ("o_comment", "text", 40),
    ]
    if n_tables >= 3:
        # Narrow filler columns densify the achievable scan-byte sums so
        # byte targets can be matched closely on larger schemas. The
        # two-table layout stays exactly the fixed demo dataset.
        fact_cols += [("o_tag", "text", 6), ("o_code", "text", 2),
                      ("o_flag", "text", 1), ("o_cat", "text", 3)]
    for k in range(2, n_tables):
        fact_cols.append((f"o_dim{k}key", "integer", 8))

    fact_data = {}
    if n_tables >= 2:
        fact_data["o_custkey"] = rng.integers(1, dim_rows + 1, size=fact_rows)
    else:
        fact_data["o_custkey"] = rng.integers(1, 101, size=fact_rows)
    fact_data["o_id"] = np.arange(1, fact_rows + 1, dtype=np.int64)
    fact_data["o_total"] = rng.integers(100, 5_000_001, size=fact_rows) / 100.0
    fact_data["o_date"] = rng.integers(day_lo, day_hi + 1, size=fact_rows)
    fact_data["o_comment"] = _random_text(rng, fact_rows, 40)
    if n_tables >= 3:
        fact_data["o_tag"] = _random_text(rng, fact_rows, 6)
        fact_data["o_code"] = _random_text(rng, fact_rows, 2)
        fact_data["o_flag"] = _random_text(rng, fact_rows, 1)
        fact_data["o_cat"] = _random_text(rng, fact_rows, 3)
    for k in range(2, n_tables):
        fact_data[f"o_dim{k}key"] = rng.integers(1, dim_rows + 1, size=fact_rows)

    dataset[fact] = fact_data
    tables.append(
        TableStats(
            name=fact,
            row_count=fact_rows,
            columns=tuple(
                _column_stats_from_data(fact, n, k, w, fact_rows, fact_data[n])
                for n, k, w in fact_cols
            ),
        )
    )

    if n_tables >= 2:
        cust_data = {
            "c_id": np.arange(1, dim_rows + 1, dtype=np.int64),
            "c_name": _random_text(rng, dim_rows, 20),
            "c_region": _random_text(rng, dim_rows, 4),
        }
        dataset["customer"] = cust_data
        cust_cols = [("c_id", "integer", 8), ("c_name", "text", 20), ("c_region", "text", 4)]
        tables.append(
            TableStats(
                name="customer",
                row_count=dim_rows,
                columns=tuple(
                    _column_stats_from_data("customer", n, k, w, dim_rows, cust_data[n])
                    for n, k, w in cust_cols
                ),
            )
        )
        edges.append(JoinEdge("orders", "o_custkey", "customer", "c_id"))

    for k in range(2, n_tables):
        name = f"dim{k}"
        d = {
            f"d{k}_id": np.arange(1, dim_rows + 1, dtype=np.int64),
            f"d{k}_val": rng.integers(100, 1_000_001, size=dim_rows) / 100.0,
            f"d{k}_date": rng.integers(day_lo, day_hi + 1, size=dim_rows),
            f"d{k}_tag": _random_text(rng, dim_rows, 3),
            f"d{k}_name": _random_text(rng, dim_rows, 12),
        }
        dataset[name] = d
        cols = [(f"d{k}_id", "integer", 8), (f"d{k}_val", "decimal", 8),
                (f"d{k}_date", "date", 4), (f"d{k}_tag", "text", 3),
                (f"d{k}_name", "text", 12)]
        tables.append(
            TableStats(
                name=name,
                row_count=dim_rows,
                columns=tuple(
                    _column_stats_from_data(name, n, kd, w, dim_rows, d[n])
                    for n, kd, w in cols
                ),
            )
        )
        edges.append(JoinEdge("orders", f"o_dim{k}key", name, f"d{k}_id"))

    catalog = Catalog(
        tables=tuple(tables),
        join_graph=SchemaJoinGraph(
            nodes=tuple(t.name for t in tables), edges=tuple(edges)
        ),
        dataset_id=f"synthetic-{n_tables}x{rows_per_table}-s{seed}",
    )
    validate_catalog(catalog)
    return catalog, dataset


# ---------------------------------------------------------------------------
# Schema join-graph queries.

def connected_table_subsets(catalog: Catalog, k: int) -> list[tuple[str, ...]]:
    """All size-k table sets that are connected in the schema join graph.

    Exhaustive and deterministically ordered (lexicographic over sorted
    table-name tuples).
    """
    names = sorted(catalog.table_names())
    if not 1 <= k <= len(names):
        raise ValueError(f"k={k} out of range 1..{len(names)}")
    out = []
    for combo in itertools.combinations(names, k):
        if _is_connected(catalog.join_graph, combo):
            out.append(combo)
    return out


def _is_connected(graph: SchemaJoinGraph, tables) -> bool:
    ts = set(tables)
    if len(ts) <= 1:
        return True
    start = next(iter(sorted(ts)))
    seen = {start}
    frontier = [start]
    while frontier:
        cur = frontier.pop()
        for nb in graph.neighbors(cur):
            if nb in ts and nb not in seen:
                seen.add(nb)
                frontier.append(nb)
    return seen == ts


def spanning_join_tree(catalog: Catalog, tables) -> list[JoinEdge]:
    """Deterministic spanning tree over the induced schema subgraph.

    Kruskal over edges sorted by endpoint names; the returned edges carry
    the join keys a query over ``tables`` must include.
    """
    ts = sorted(set(tables))
    if len(ts) == 1:
        return []
    parent = {t: t for t in ts}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    chosen = []
    for e in sorted(catalog.join_graph.edges_between(ts), key=lambda e: e.key()):
        ra, rb = find(e.table_a), find(e.table_b)
        if ra != rb:
            parent[ra] = rb
            chosen.append(e)
    if len(chosen) != len(ts) - 1:
        raise CatalogValidationError(f"table set {ts} is not connected")
    return chosen
