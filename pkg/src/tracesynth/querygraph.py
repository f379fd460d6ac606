"""Operator-DAG intermediate representation for generated queries.

Nodes are relational operators (Scan, Filter, Join, Aggregate, Sort,
EvalScalar); edges point from a consumer to its inputs. The canonical text
form doubles as the on-disk persistence format and feeds the 64-bit
exact/parameterized hashes used for repetition detection.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .catalog import Catalog, connected_table_subsets, spanning_join_tree
from .values import fnv1a64, infer_literal

SCAN = "Scan"
FILTER = "Filter"
JOIN = "Join"
AGGREGATE = "Aggregate"
SORT = "Sort"
EVALSCALAR = "EvalScalar"

OPERATOR_KINDS = (SCAN, FILTER, JOIN, AGGREGATE, SORT, EVALSCALAR)

EXPR_KINDS = ("arith", "string", "date")

# Column references are "table.column" strings; Aggregate output aliases
# ("agg_0", ...) are bare names.
ColRef = str


def colref(table: str, column: str) -> ColRef:
    return f"{table}.{column}"


def split_colref(ref: ColRef) -> tuple[str, str]:
    table, _, column = ref.partition(".")
    return table, column


def format_literal(value) -> str:
    if isinstance(value, bool):
        raise TypeError("boolean literals are not supported")
    if isinstance(value, datetime.date):
        return value.isoformat()
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    raise TypeError(f"unsupported literal {value!r}")


@dataclass(frozen=True)
class OperatorNode:
    id: int
    kind: str
    attrs: dict

    def attr(self, name: str):
        return self.attrs[name]


@dataclass(frozen=True)
class StructuralCounts:
    joins: int
    aggregates: int
    sorts: int
    tables: int

    def get(self, kind: str) -> int:
        return {"join": self.joins, "aggregate": self.aggregates, "sort": self.sorts,
                "tables": self.tables}[kind]


class QueryGraph:
    """Immutable after construction; node ids are arbitrary ints."""

    def __init__(self, nodes, edges, root: int):
        self.nodes: tuple[OperatorNode, ...] = tuple(nodes)
        self.edges: tuple[tuple[int, int], ...] = tuple(edges)
        self.root = root
        self._by_id = {n.id: n for n in self.nodes}
        self._children: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for parent, child in self.edges:
            if parent in self._children:
                self._children[parent].append(child)

    def node(self, node_id: int) -> OperatorNode:
        return self._by_id[node_id]

    def children(self, node_id: int) -> list[int]:
        return list(self._children.get(node_id, []))

    def topological(self) -> list[int]:
        """Node ids, children before parents (post-order from root)."""
        out: list[int] = []
        seen: set[int] = set()

        def walk(nid: int):
            if nid in seen:
                return
            seen.add(nid)
            for c in self._children.get(nid, []):
                walk(c)
            out.append(nid)

        walk(self.root)
        return out

    def scans(self) -> list[OperatorNode]:
        return [n for n in self.nodes if n.kind == SCAN]


# Node builders keep attr layouts in one place.

def scan_node(node_id: int, table: str, columns) -> OperatorNode:
    return OperatorNode(node_id, SCAN, {"table": table, "columns": tuple(sorted(columns))})


def filter_node(node_id: int, predicates) -> OperatorNode:
    preds = tuple((ref, "<=", lit) for ref, _, lit in predicates)
    return OperatorNode(node_id, FILTER, {"predicates": preds})


def join_node(node_id: int, left_key: ColRef, right_key: ColRef) -> OperatorNode:
    return OperatorNode(node_id, JOIN, {"left_key": left_key, "right_key": right_key,
                                        "join_type": "inner"})


def aggregate_node(node_id: int, group_by, aggs) -> OperatorNode:
    return OperatorNode(node_id, AGGREGATE, {"group_by": tuple(group_by),
                                             "aggs": tuple(tuple(a) for a in aggs)})


def sort_node(node_id: int, keys, direction: str = "asc") -> OperatorNode:
    return OperatorNode(node_id, SORT, {"keys": tuple(keys), "direction": direction})


def evalscalar_node(node_id: int, expr_kind: str, input_ref: ColRef,
                    repeat_count: int) -> OperatorNode:
    return OperatorNode(node_id, EVALSCALAR, {"expr_kind": expr_kind, "input": input_ref,
                                              "repeat_count": int(repeat_count)})


# ---------------------------------------------------------------------------
# Validation.

def available_columns(g: QueryGraph, node_id: int) -> set:
    """Column refs visible in the output of a node (plus aggregate aliases)."""
    node = g.node(node_id)
    if node.kind == SCAN:
        return {colref(node.attr("table"), c) for c in node.attr("columns")}
    kids = g.children(node_id)
    if node.kind == JOIN:
        out = set()
        for k in kids:
            out |= available_columns(g, k)
        return out
    if node.kind == AGGREGATE:
        out = set(node.attr("group_by"))
        out |= {f"agg_{i}" for i in range(len(node.attr("aggs")))}
        return out
    return available_columns(g, kids[0]) if kids else set()


def output_width(g: QueryGraph, node_id: int) -> int:
    """Number of output columns (materialized width) of a node."""
    node = g.node(node_id)
    if node.kind == SCAN:
        return len(node.attr("columns"))
    kids = g.children(node_id)
    if node.kind == JOIN:
        return sum(output_width(g, k) for k in kids)
    if node.kind == AGGREGATE:
        return len(node.attr("group_by")) + len(node.attr("aggs"))
    if node.kind == EVALSCALAR:
        return output_width(g, kids[0]) + node.attr("repeat_count")
    return output_width(g, kids[0]) if kids else 0


_ARITY = {SCAN: 0, JOIN: 2, FILTER: 1, AGGREGATE: 1, SORT: 1, EVALSCALAR: 1}


def validate(g: QueryGraph, catalog: Catalog) -> list[str]:
    """Return all invariant violations; an empty list means the graph is ok."""
    violations: list[str] = []
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        violations.append("duplicate node ids")
        return violations
    id_set = set(ids)
    if g.root not in id_set:
        violations.append("root id missing from nodes")
        return violations
    for parent, child in g.edges:
        if parent not in id_set or child not in id_set:
            violations.append(f"edge ({parent},{child}) references unknown node")
            return violations

    # Acyclicity via iterative DFS with colors.
    color = {i: 0 for i in ids}
    acyclic = True
    for start in ids:
        if color[start]:
            continue
        stack = [(start, iter(g.children(start)))]
        color[start] = 1
        while stack:
            nid, it = stack[-1]
            advanced = False
            for c in it:
                if color[c] == 1:
                    acyclic = False
                    break
                if color[c] == 0:
                    color[c] = 1
                    stack.append((c, iter(g.children(c))))
                    advanced = True
                    break
            else:
                color[nid] = 2
                stack.pop()
                continue
            if not acyclic:
                break
            if not advanced:
                color[nid] = 2
                stack.pop()
        if not acyclic:
            break
    if not acyclic:
        violations.append("not acyclic")
        return violations

    parents: dict[int, int] = {}
    for parent, child in g.edges:
        parents[child] = parents.get(child, 0) + 1
    roots = [i for i in ids if i not in parents]
    if roots != [g.root] and set(roots) != {g.root}:
        violations.append(f"expected exactly one root, found {sorted(roots)}")

    reachable = set()
    frontier = [g.root]
    while frontier:
        cur = frontier.pop()
        if cur in reachable:
            continue
        reachable.add(cur)
        frontier.extend(g.children(cur))
    if reachable != id_set:
        violations.append("unreachable nodes present")

    for n in g.nodes:
        kids = g.children(n.id)
        want = _ARITY.get(n.kind)
        if want is None:
            violations.append(f"node {n.id}: unknown kind {n.kind}")
            continue
        if len(kids) != want:
            violations.append(f"node {n.id}: {n.kind.lower()} arity {len(kids)} != {want}")
            continue
        if n.kind == SCAN:
            table = n.attr("table")
            cols = n.attr("columns")
            if not cols:
                violations.append(f"node {n.id}: scan selects no columns")
            try:
                ts = catalog.table(table)
            except KeyError:
                violations.append(f"node {n.id}: unknown table {table}")
                continue
            for c in cols:
                try:
                    ts.column(c)
                except KeyError:
                    violations.append(f"node {n.id}: unknown column {table}.{c}")
        elif n.kind == FILTER:
            avail = available_columns(g, kids[0])
            for ref, op, lit in n.attr("predicates"):
                if op != "<=":
                    violations.append(f"node {n.id}: predicate op {op} not single-sided <=")
                if ref not in avail:
                    violations.append(f"node {n.id}: predicate column {ref} not available")
            if not n.attr("predicates"):
                violations.append(f"node {n.id}: filter carries no predicates")
        elif n.kind == JOIN:
            left_avail = available_columns(g, kids[0])
            right_avail = available_columns(g, kids[1])
            if n.attr("left_key") not in left_avail:
                violations.append(f"node {n.id}: left key {n.attr('left_key')} not available")
            if n.attr("right_key") not in right_avail:
                violations.append(f"node {n.id}: right key {n.attr('right_key')} not available")
            if n.attr("join_type") != "inner":
                violations.append(f"node {n.id}: only inner joins supported")
        elif n.kind == AGGREGATE:
            avail = available_columns(g, kids[0])
            for c in n.attr("group_by"):
                if c not in avail:
                    violations.append(f"node {n.id}: group-by column {c} not available")
            for func, arg in n.attr("aggs"):
                if func not in ("count", "sum"):
                    violations.append(f"node {n.id}: unsupported aggregate {func}")
                if arg != "*" and arg not in avail:
                    violations.append(f"node {n.id}: aggregate input {arg} not available")
        elif n.kind == SORT:
            avail = available_columns(g, kids[0])
            for c in n.attr("keys"):
                if c not in avail:
                    violations.append(f"node {n.id}: sort key {c} not available")
            if n.attr("direction") not in ("asc", "desc"):
                violations.append(f"node {n.id}: bad sort direction")
        elif n.kind == EVALSCALAR:
            avail = available_columns(g, kids[0])
            if n.attr("input") not in avail:
                violations.append(f"node {n.id}: eval input {n.attr('input')} not available")
            if n.attr("expr_kind") not in EXPR_KINDS:
                violations.append(f"node {n.id}: bad expression kind")
            if n.attr("repeat_count") < 1:
                violations.append(f"node {n.id}: repeat_count must be >= 1")
    return violations


def structural_counts(g: QueryGraph) -> StructuralCounts:
    joins = aggs = sorts = tables = 0
    for n in g.nodes:
        if n.kind == JOIN:
            joins += 1
        elif n.kind == AGGREGATE:
            aggs += 1
        elif n.kind == SORT:
            sorts += 1
        elif n.kind == SCAN:
            tables += 1
    return StructuralCounts(joins=joins, aggregates=aggs, sorts=sorts, tables=tables)


# ---------------------------------------------------------------------------
# Canonical form. Node ids are renumbered in pre-order from the root with a
# join's children ordered smaller-canonical-text-first (keys swapped along),
# so graphs equal up to id renaming or commutative join flips serialize
# identically. parameterized=True masks every filter literal with '?'.

def _attr_text(node: OperatorNode, child_keys: list[str], parameterized: bool) -> tuple[str, bool]:
    """Render attrs; returns (text, swapped) where swapped marks join flips."""
    k = node.kind
    if k == SCAN:
        return f"table={node.attr('table')} columns={','.join(node.attr('columns'))}", False
    if k == FILTER:
        items = sorted(
            (ref, format_literal(lit)) for ref, _, lit in node.attr("predicates")
        )
        rendered = ";".join(
            f"{ref}<={'?' if parameterized else text}" for ref, text in items
        )
        return f"predicates={rendered}", False
    if k == JOIN:
        left, right = node.attr("left_key"), node.attr("right_key")
        # Smaller canonical child first; identical subtrees fall back to
        # key order so fully symmetric joins still normalize.
        swapped = len(child_keys) == 2 and (
            child_keys[1] < child_keys[0]
            or (child_keys[0] == child_keys[1] and right < left)
        )
        if swapped:
            left, right = right, left
        return f"left_key={left} right_key={right} join_type={node.attr('join_type')}", swapped
    if k == AGGREGATE:
        group = ",".join(sorted(node.attr("group_by")))
        aggs = ",".join(f"{f}:{a}" for f, a in node.attr("aggs"))
        return f"group_by={group} aggs={aggs}", False
    if k == SORT:
        return f"keys={','.join(node.attr('keys'))} direction={node.attr('direction')}", False
    if k == EVALSCALAR:
        return (
            f"expr_kind={node.attr('expr_kind')} input={node.attr('input')} "
            f"repeat_count={node.attr('repeat_count')}"
        ), False
    raise ValueError(f"unknown kind {k}")


def canonical_form(g: QueryGraph, parameterized: bool = False) -> str:
    memo_key: dict[int, str] = {}

    def canon_key(nid: int) -> str:
        if nid in memo_key:
            return memo_key[nid]
        node = g.node(nid)
        child_keys = [canon_key(c) for c in g.children(nid)]
        text, _ = _attr_text(node, child_keys, parameterized)
        key = f"{node.kind} {text}({','.join(sorted(child_keys))})"
        memo_key[nid] = key
        return key

    canon_key(g.root)

    lines: list[str] = []
    edge_lines: list[str] = []
    next_id = 0

    def emit(nid: int) -> int:
        nonlocal next_id
        node = g.node(nid)
        kids = g.children(nid)
        child_keys = [memo_key[c] for c in kids]
        text, swapped = _attr_text(node, child_keys, parameterized)
        my_id = next_id
        next_id += 1
        lines.append(f"node {my_id} {node.kind} {text}".rstrip())
        ordered = list(kids)
        if swapped:
            ordered = [kids[1], kids[0]]
        for c in ordered:
            child_id = emit(c)
            edge_lines.append(f"edge {my_id} {child_id}")
        return my_id

    emit(g.root)
    return "\n".join(lines + edge_lines) + "\n"


def parse_canonical(text: str) -> QueryGraph:
    """Parse the canonical/persistence format back into a graph."""
    nodes: list[OperatorNode] = []
    edges: list[tuple[int, int]] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        parts = line.split(" ")
        if parts[0] == "edge":
            edges.append((int(parts[1]), int(parts[2])))
            continue
        if parts[0] != "node":
            raise ValueError(f"bad canonical line: {raw!r}")
        nid, kind = int(parts[1]), parts[2]
        attrs = {}
        for item in parts[3:]:
            key, _, value = item.partition("=")
            attrs[key] = value
        nodes.append(_node_from_text(nid, kind, attrs))
    if not nodes:
        raise ValueError("empty canonical text")
    children = {c for _, c in edges}
    roots = [n.id for n in nodes if n.id not in children]
    if len(roots) != 1:
        raise ValueError(f"expected one root, found {roots}")
    return QueryGraph(nodes, edges, roots[0])


def _split_list(value: str) -> tuple[str, ...]:
    return tuple(v for v in value.split(",") if v) if value else ()


def _node_from_text(nid: int, kind: str, attrs: dict) -> OperatorNode:
    if kind == SCAN:
        return scan_node(nid, attrs["table"], _split_list(attrs["columns"]))
    if kind == FILTER:
        preds = []
        for item in attrs["predicates"].split(";"):
            ref, _, lit = item.partition("<=")
            if lit == "?":
                raise ValueError("parameterized canonical text cannot be re-instantiated")
            preds.append((ref, "<=", infer_literal(lit)))
        return filter_node(nid, preds)
    if kind == JOIN:
        return join_node(nid, attrs["left_key"], attrs["right_key"])
    if kind == AGGREGATE:
        aggs = []
        for item in _split_list(attrs["aggs"]):
            func, _, arg = item.partition(":")
            aggs.append((func, arg))
        return aggregate_node(nid, _split_list(attrs["group_by"]), aggs)
    if kind == SORT:
        return sort_node(nid, _split_list(attrs["keys"]), attrs["direction"])
    if kind == EVALSCALAR:
        return evalscalar_node(nid, attrs["expr_kind"], attrs["input"],
                               int(attrs["repeat_count"]))
    raise ValueError(f"unknown node kind {kind}")


def graph_hash(g: QueryGraph, parameterized: bool = False) -> int:
    return fnv1a64(canonical_form(g, parameterized).encode("utf-8"))


def hash_token(h: int) -> str:
    return f"{h:016x}"


# ---------------------------------------------------------------------------
# Random graph sampling (drives trace synthesis and model profiling).

_NUMERIC_KINDS = ("integer", "decimal", "date")
_EXPR_FOR_KIND = {"integer": "arith", "decimal": "arith", "date": "date", "text": "string"}


def default_sample_bounds(catalog: Catalog) -> dict:
    return {
        "max_joins": min(2, len(catalog.tables) - 1),
        "max_aggs": 2,
        "max_sorts": 1,
    }


def _random_bound(rng: np.random.Generator, stats):
    if stats.value_kind == "integer":
        return int(rng.integers(stats.min_value, stats.max_value + 1))
    if stats.value_kind == "decimal":
        return float(np.round(rng.uniform(stats.min_value, stats.max_value), 4))
    lo = (stats.min_value - datetime.date(1970, 1, 1)).days
    hi = (stats.max_value - datetime.date(1970, 1, 1)).days
    return datetime.date(1970, 1, 1) + datetime.timedelta(days=int(rng.integers(lo, hi + 1)))


def sample_random_graph(catalog: Catalog, bounds: dict, seed: int = 0,
                        rng: Optional[np.random.Generator] = None,
                        with_eval: bool = True) -> QueryGraph:
    """Sample a valid random graph within the given structural bounds.

    Deterministic under seed (or a caller-owned generator).
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    n_tables = len(catalog.tables)
    max_joins = min(int(bounds.get("max_joins", 0)), n_tables - 1)
    n_joins = int(rng.integers(0, max_joins + 1)) if max_joins > 0 else 0
    table_sets = connected_table_subsets(catalog, n_joins + 1)
    while not table_sets and n_joins > 0:
        n_joins -= 1
        table_sets = connected_table_subsets(catalog, n_joins + 1)
    table_set = table_sets[int(rng.integers(0, len(table_sets)))]
    tree_edges = spanning_join_tree(catalog, table_set)

    mandatory: dict[str, set] = {t: set() for t in table_set}
    for e in tree_edges:
        mandatory[e.table_a].add(e.column_a)
        mandatory[e.table_b].add(e.column_b)

    nodes: list[OperatorNode] = []
    edges: list[tuple[int, int]] = []
    next_id = 0

    def add(node: OperatorNode, children=()):
        nonlocal next_id
        nodes.append(node)
        for c in children:
            edges.append((node.id, c))
        next_id += 1
        return node.id

    top_of: dict[str, int] = {}
    for t in sorted(table_set):
        ts = catalog.table(t)
        cols = set(mandatory[t])
        for c in ts.columns:
            if c.name not in cols and rng.random() < 0.5:
                cols.add(c.name)
        if not cols:
            names = sorted(c.name for c in ts.columns)
            cols.add(names[int(rng.integers(0, len(names)))])
        sid = add(scan_node(next_id, t, cols))
        top_of[t] = sid
        eligible = sorted(
            c.name for c in ts.columns
            if c.name in cols and c.value_kind in _NUMERIC_KINDS
            and c.min_value is not None and c.min_value < c.max_value
        )
        if eligible and rng.random() < 0.7:
            n_preds = int(rng.integers(1, min(2, len(eligible)) + 1))
            picked = [eligible[i] for i in sorted(
                rng.choice(len(eligible), size=n_preds, replace=False).tolist())]
            preds = [(colref(t, c), "<=", _random_bound(rng, ts.column(c))) for c in picked]
            top_of[t] = add(filter_node(next_id, preds), [sid])

    comp: dict[str, str] = {t: t for t in table_set}  # table -> component rep

    def rep(t: str) -> str:
        while comp[t] != t:
            comp[t] = comp[comp[t]]
            t = comp[t]
        return t

    top_node: dict[str, int] = {t: top_of[t] for t in table_set}
    for e in tree_edges:
        ra, rb = rep(e.table_a), rep(e.table_b)
        jid = add(
            join_node(next_id, colref(e.table_a, e.column_a), colref(e.table_b, e.column_b)),
            [top_node[ra], top_node[rb]],
        )
        comp[ra] = rb
        top_node[rb] = jid
    top = top_node[rep(sorted(table_set)[0])]

    eval_prob = float(bounds.get("eval_prob", 0.5))
    max_eval_repeat = int(bounds.get("max_eval_repeat", 120))
    if with_eval and rng.random() < eval_prob:
        avail = sorted(available_columns(QueryGraph(nodes, edges, top), top))
        by_kind: dict[str, list[str]] = {}
        for ref in avail:
            t, c = split_colref(ref)
            by_kind.setdefault(_EXPR_FOR_KIND[catalog.table(t).column(c).value_kind],
                               []).append(ref)
        kinds = sorted(by_kind)
        kind = kinds[int(rng.integers(0, len(kinds)))]
        target = by_kind[kind][int(rng.integers(0, len(by_kind[kind])))]
        top = add(evalscalar_node(next_id, kind, target,
                                  int(rng.integers(1, max_eval_repeat + 1))), [top])

    n_aggs = int(rng.integers(0, int(bounds.get("max_aggs", 0)) + 1))
    if n_aggs:
        avail = sorted(available_columns(QueryGraph(nodes, edges, top), top))
        base = [a for a in avail if "." in a]
        width = max(1, min(len(base), n_aggs))
        picked = [base[i] for i in sorted(
            rng.choice(len(base), size=width, replace=False).tolist())]
        for level in range(n_aggs):
            group = tuple(picked[: max(1, width - level)])
            numeric = [
                c for c in group
                if catalog.table(split_colref(c)[0]).column(split_colref(c)[1]).value_kind
                in ("integer", "decimal")
            ]
            aggs = [("count", "*")]
            if numeric and level == 0:
                aggs.append(("sum", numeric[0]))
            top = add(aggregate_node(next_id, group, aggs), [top])
            picked = list(group)
            width = len(picked)

    n_sorts = int(rng.integers(0, int(bounds.get("max_sorts", 0)) + 1))
    for _ in range(n_sorts):
        avail = sorted(available_columns(QueryGraph(nodes, edges, top), top))
        key = avail[int(rng.integers(0, len(avail)))]
        direction = "asc" if rng.random() < 0.5 else "desc"
        top = add(sort_node(next_id, (key,), direction), [top])

    return QueryGraph(nodes, edges, top)
