"""Phase I: data-aware scan-bytes bounding, structural operator injection,
CPU feasibility checking, and scalar-expression cost compensation.

Column selection is greedy and data-aware: mandatory join keys first, one
nearest-weight column per empty table, then remaining candidates in
ascending weight until the scanned-bytes target is reached. Graphs that
cannot reach their targets are flagged before any predicate optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from . import costmodel as cm
from . import querygraph as qg
from .backend import ExecutionBackend
from .catalog import Catalog, JoinEdge, connected_table_subsets, spanning_join_tree
from .trace import StructuralProfile


class BoundingError(Exception):
    pass


class NoConnectedSetError(BoundingError):
    """No connected table set of the size the join constraint requires."""


class UnreachableStructureError(BoundingError):
    pass


@dataclass(frozen=True)
class ColumnSelection:
    selected: dict      # table -> ordered tuple of column names
    mandatory: dict     # table -> tuple of join-key column names
    achieved_bytes: int
    under_target: bool
    last_added_weight: Optional[int] = None


@dataclass
class BoundedBaseGraph:
    graph: qg.QueryGraph
    table_set: tuple[str, ...]
    selection: ColumnSelection
    join_edges: tuple[JoinEdge, ...]
    scan_bytes: int
    under_target: bool


@dataclass
class CompensationResult:
    graph: qg.QueryGraph
    predicted_max_cpu: float
    applications: int
    infeasible: bool = False
    reason: Optional[str] = None


class BoundingCache:
    """(table set, scanned-bytes bucket) -> column selection, plus call
    telemetry. Bucket granularity is powers of two of the target."""

    def __init__(self):
        self.entries: dict = {}
        self.greedy_calls = 0
        self.hits = 0

    @staticmethod
    def bucket(y_scan: float) -> int:
        return int(math.floor(math.log2(max(y_scan, 1.0))))


def greedy_column_selection(catalog: Catalog, table_set, y_scan: float) -> ColumnSelection:
    """Pick per-table column subsets whose total weight reaches y_scan.

    Join keys of the grounded join tree are always included; every table
    contributes at least one column; completion adds candidates in
    ascending (weight, table, column) order and stops at the target. When
    even all columns fall short the under_target flag is set.
    """
    if y_scan <= 0:
        raise ValueError("y_scan must be > 0")
    tables = sorted(set(table_set))
    tree_edges = spanning_join_tree(catalog, tables)

    mandatory: dict[str, list[str]] = {t: [] for t in tables}
    for e in tree_edges:
        if e.column_a not in mandatory[e.table_a]:
            mandatory[e.table_a].append(e.column_a)
        if e.column_b not in mandatory[e.table_b]:
            mandatory[e.table_b].append(e.column_b)
    selected: dict[str, list[str]] = {t: sorted(mandatory[t]) for t in tables}

    def weight(t: str, c: str) -> int:
        return catalog.table(t).column(c).scan_weight

    achieved = sum(weight(t, c) for t in tables for c in selected[t])

    # Per-table initialization: empty tables take the column nearest the
    # per-table share of the target.
    share = y_scan / len(tables)
    for t in tables:
        if selected[t]:
            continue
        cols = sorted(catalog.table(t).columns, key=lambda c: (abs(c.scan_weight - share), c.name))
        pick = cols[0]
        selected[t].append(pick.name)
        achieved += pick.scan_weight

    # Global greedy completion in ascending weight.
    candidates = sorted(
        (weight(t, c.name), t, c.name)
        for t in tables
        for c in catalog.table(t).columns
        if c.name not in selected[t]
    )
    last_added = None
    for w, t, c in candidates:
        if achieved >= y_scan:
            break
        selected[t].append(c)
        achieved += w
        last_added = w
    return ColumnSelection(
        selected={t: tuple(cols) for t, cols in selected.items()},
        mandatory={t: tuple(sorted(cols)) for t, cols in mandatory.items()},
        achieved_bytes=achieved,
        under_target=achieved < y_scan,
        last_added_weight=last_added,
    )


def build_base_graph(catalog: Catalog, selection: ColumnSelection,
                     tree_edges) -> qg.QueryGraph:
    """Scans plus the join tree, nothing else."""
    nodes: list[qg.OperatorNode] = []
    edges: list[tuple[int, int]] = []
    next_id = 0
    top: dict[str, int] = {}
    comp = {t: t for t in selection.selected}

    def rep(t: str) -> str:
        while comp[t] != t:
            comp[t] = comp[comp[t]]
            t = comp[t]
        return t

    for t in sorted(selection.selected):
        nodes.append(qg.scan_node(next_id, t, selection.selected[t]))
        top[t] = next_id
        next_id += 1
    root = top[sorted(selection.selected)[0]]
    for e in tree_edges:
        ra, rb = rep(e.table_a), rep(e.table_b)
        nodes.append(qg.join_node(
            next_id, qg.colref(e.table_a, e.column_a), qg.colref(e.table_b, e.column_b)
        ))
        edges.append((next_id, top[ra]))
        edges.append((next_id, top[rb]))
        comp[ra] = rb
        top[rb] = next_id
        root = next_id
        next_id += 1
    return qg.QueryGraph(nodes, edges, root)


def required_table_count(structure: StructuralProfile) -> int:
    join = structure.get("join")
    if join is None:
        return 1
    if join.mode == "presence":
        return 2 if join.value else 1
    return join.value + 1


def choose_base_graphs(catalog: Catalog, structure: StructuralProfile,
                       y_scan: float,
                       cache: Optional[BoundingCache] = None) -> list[BoundedBaseGraph]:
    """Enumerate connected table sets of the required size, bound each with
    greedy column selection, and rank by closeness to the scan target."""
    n_tables = required_table_count(structure)
    if n_tables > len(catalog.tables):
        raise NoConnectedSetError(
            f"structure needs {n_tables} tables, catalog has {len(catalog.tables)}"
        )
    table_sets = connected_table_subsets(catalog, n_tables)
    if not table_sets:
        raise NoConnectedSetError(f"no connected table set of size {n_tables}")
    candidates: list[BoundedBaseGraph] = []
    for table_set in table_sets:
        selection = None
        if cache is not None:
            key = (table_set, BoundingCache.bucket(y_scan))
            selection = cache.entries.get(key)
            if selection is not None:
                cache.hits += 1
        if selection is None:
            selection = greedy_column_selection(catalog, table_set, y_scan)
            if cache is not None:
                cache.greedy_calls += 1
                cache.entries[(table_set, BoundingCache.bucket(y_scan))] = selection
        tree_edges = tuple(spanning_join_tree(catalog, table_set))
        candidates.append(BoundedBaseGraph(
            graph=build_base_graph(catalog, selection, tree_edges),
            table_set=table_set,
            selection=selection,
            join_edges=tree_edges,
            scan_bytes=selection.achieved_bytes,
            under_target=selection.under_target,
        ))
    if any(not c.under_target for c in candidates):
        candidates = [c for c in candidates if not c.under_target]
    candidates.sort(key=lambda c: (abs(c.scan_bytes - y_scan), c.table_set))
    return candidates


# ---------------------------------------------------------------------------
# Structural operator injection.

def _default_aggs(avail, catalog: Catalog) -> list[tuple[str, str]]:
    aggs = [("count", "*")]
    numeric = sorted(
        ref for ref in avail
        if "." in ref
        and catalog.table(qg.split_colref(ref)[0]).column(qg.split_colref(ref)[1]).value_kind
        in ("integer", "decimal")
    )
    if numeric:
        aggs.append(("sum", numeric[0]))
    return aggs


def _constraint_count(structure: StructuralProfile, kind: str) -> int:
    c = structure.get(kind)
    if c is None:
        return 0
    if c.mode == "presence":
        return 1 if c.value else 0
    return c.value


def inject_structure(base: BoundedBaseGraph, structure: StructuralProfile,
                     catalog: Catalog) -> qg.QueryGraph:
    """Stack the required Aggregate and Sort operators atop the join tree."""
    g = base.graph
    join_constraint = structure.get("join")
    counts = qg.structural_counts(g)
    if join_constraint is not None and not join_constraint.satisfied_by(counts.joins):
        raise UnreachableStructureError(
            f"base graph has {counts.joins} joins, constraint wants "
            f"{join_constraint.value} ({join_constraint.mode})"
        )
    n_aggs = _constraint_count(structure, "aggregate")
    n_sorts = _constraint_count(structure, "sort")

    nodes = list(g.nodes)
    edges = list(g.edges)
    top = g.root
    next_id = max(n.id for n in nodes) + 1

    if n_aggs:
        avail = sorted(
            a for a in qg.available_columns(g, top) if "." in a
        )
        width = max(1, min(len(avail), n_aggs))
        group = avail[:width]
        for level in range(n_aggs):
            level_group = group[: max(1, width - level)]
            aggs = _default_aggs(level_group if level else avail, catalog)
            nodes.append(qg.aggregate_node(next_id, tuple(level_group), aggs))
            edges.append((next_id, top))
            top = next_id
            next_id += 1
            group = level_group

    sort_pool = sorted(qg.available_columns(qg.QueryGraph(nodes, edges, top), top))
    for i in range(n_sorts):
        key = sort_pool[i % len(sort_pool)]
        nodes.append(qg.sort_node(next_id, (key,), "asc"))
        edges.append((next_id, top))
        top = next_id
        next_id += 1

    out = qg.QueryGraph(nodes, edges, top)
    achieved = qg.structural_counts(out)
    if not structure.satisfied_by(achieved):
        raise UnreachableStructureError(
            f"injected structure {achieved} does not satisfy the profile"
        )
    return out


# ---------------------------------------------------------------------------
# CPU feasibility and compensation.

_EXPR_FOR_VALUE_KIND = {"integer": "arith", "decimal": "arith",
                        "date": "date", "text": "string"}


def find_base_top(g: qg.QueryGraph) -> tuple[int, Optional[int]]:
    """Top node of the scan/join/eval section and its structural parent."""
    nid = g.root
    parent = None
    while g.node(nid).kind in (qg.SORT, qg.AGGREGATE):
        parent = nid
        nid = g.children(nid)[0]
    return nid, parent


def feasibility_and_compensation(g: qg.QueryGraph, y_cpu: float,
                                 model: cm.LocalModel, backend: ExecutionBackend,
                                 catalog: Catalog,
                                 max_repeat: int = 10_000,
                                 measure: bool = False) -> CompensationResult:
    """Predict CPU at maximal predicate openness; append scalar-expression
    operators (cheapest per-application kind first) until the prediction
    reaches the target or the application cap is hit.

    With measure=True every feasibility estimate is a real execution
    instead of a model prediction (the no-local-model ablation mode).
    """
    cards = backend.probe_cardinalities(g)
    if measure:
        predicted = backend.execute(g).cpu_time_ms
    else:
        predicted = cm.predict_query(model, g, cards, catalog)
    applications = 0
    infeasible = False
    for _ in range(8):
        gap = y_cpu - predicted
        if gap <= 0 or infeasible:
            break
        base_top, parent = find_base_top(g)
        rows = cards.of(base_top)
        avail = sorted(a for a in qg.available_columns(g, base_top) if "." in a)
        per_kind_input: dict[str, str] = {}
        for ref in avail:
            t, c = qg.split_colref(ref)
            expr = _EXPR_FOR_VALUE_KIND[catalog.table(t).column(c).value_kind]
            per_kind_input.setdefault(expr, ref)
        choices = []
        for expr, ref in sorted(per_kind_input.items()):
            coef = model.coefficients.get(f"evalscalar_{expr}")
            if coef is None:
                continue
            unit = float(coef[0]) * rows
            if unit > 0:
                choices.append((unit, expr, ref))
        if not choices:
            infeasible = True
            break
        unit, expr, ref = min(choices)
        k = max(int(math.ceil(gap / unit)), 1)
        if applications + k > max_repeat:
            k = max_repeat - applications
            infeasible = True
            if k <= 0:
                break
        new_id = max(n.id for n in g.nodes) + 1
        nodes = list(g.nodes) + [qg.evalscalar_node(new_id, expr, ref, k)]
        edges = [(p, c) for p, c in g.edges if not (p == parent and c == base_top)]
        edges.append((new_id, base_top))
        if parent is None:
            root = new_id
        else:
            edges.append((parent, new_id))
            root = g.root
        g = qg.QueryGraph(nodes, edges, root)
        cards.rows[new_id] = rows
        applications += k
        if measure:
            predicted = backend.execute(g).cpu_time_ms
        else:
            predicted = cm.predict_query(model, g, cards, catalog)
    return CompensationResult(
        graph=g,
        predicted_max_cpu=predicted,
        applications=applications,
        infeasible=infeasible,
        reason="compensation_cap" if infeasible else None,
    )
