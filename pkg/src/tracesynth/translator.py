"""Deterministic query-graph-to-SQL translation for one generic analytical
dialect, plus a parser covering exactly the emitted subset.

Emission is bottom-up: every operator becomes one SELECT layer over a
derived table (scans are plain SELECT ... FROM table), with aliases t1, t2,
... numbered in emission order. The parser is the round-trip oracle: for
any valid graph, parse_sql(to_sql(g)) canonically equals g.
"""

from __future__ import annotations

import datetime
import re

from . import querygraph as qg
from .querygraph import QueryGraph, format_literal, split_colref


class TranslationError(Exception):
    pass


class SqlSubsetError(Exception):
    """SQL outside the subset emitted by to_sql."""


def _sql_literal(value) -> str:
    if isinstance(value, datetime.date):
        return f"'{value.isoformat()}'"
    return format_literal(value)


def _bare(ref: str) -> str:
    return split_colref(ref)[1] if "." in ref else ref


_EVAL_TEMPLATES = {
    "arith": "({col} * 1.0001 + 1)",
    "string": "UPPER(LOWER({col}))",
    "date": "EXTRACT(DAY FROM {col})",
}


def to_sql(g: QueryGraph) -> str:
    """Emit a single-statement SQL string (no trailing semicolon)."""
    # Column references are emitted unqualified, which requires bare column
    # names to be unique across the scanned tables.
    seen: dict[str, str] = {}
    for scan in g.scans():
        for c in scan.attr("columns"):
            owner = seen.setdefault(c, scan.attr("table"))
            if owner != scan.attr("table"):
                raise TranslationError(
                    f"column name {c} is ambiguous across {owner} and "
                    f"{scan.attr('table')}"
                )
    counter = {"n": 0}

    def next_alias() -> str:
        counter["n"] += 1
        return f"t{counter['n']}"

    def emit(nid: int) -> str:
        node = g.node(nid)
        kids = g.children(nid)
        if node.kind == qg.SCAN:
            cols = ", ".join(node.attr("columns"))
            return f"SELECT {cols} FROM {node.attr('table')}"
        if node.kind == qg.FILTER:
            child = emit(kids[0])
            preds = sorted(node.attr("predicates"),
                           key=lambda p: (p[0], format_literal(p[2])))
            conj = " AND ".join(
                f"{_bare(ref)} <= {_sql_literal(lit)}" for ref, _, lit in preds
            )
            return f"SELECT * FROM ({child}) AS {next_alias()} WHERE {conj}"
        if node.kind == qg.JOIN:
            left = emit(kids[0])
            right = emit(kids[1])
            a1, a2 = next_alias(), next_alias()
            lk, rk = _bare(node.attr("left_key")), _bare(node.attr("right_key"))
            return (f"SELECT * FROM ({left}) AS {a1} INNER JOIN ({right}) AS {a2} "
                    f"ON {lk} = {rk}")
        if node.kind == qg.AGGREGATE:
            child = emit(kids[0])
            group = sorted(_bare(c) for c in node.attr("group_by"))
            items = list(group)
            for i, (func, arg) in enumerate(node.attr("aggs")):
                rendered = "COUNT(*)" if func == "count" else f"SUM({_bare(arg)})"
                items.append(f"{rendered} AS agg_{i}")
            select = ", ".join(items)
            sql = f"SELECT {select} FROM ({child}) AS {next_alias()}"
            if group:
                sql += f" GROUP BY {', '.join(group)}"
            return sql
        if node.kind == qg.SORT:
            child = emit(kids[0])
            direction = node.attr("direction").upper()
            keys = ", ".join(f"{_bare(k)} {direction}" for k in node.attr("keys"))
            return f"SELECT * FROM ({child}) AS {next_alias()} ORDER BY {keys}"
        if node.kind == qg.EVALSCALAR:
            child = emit(kids[0])
            template = _EVAL_TEMPLATES[node.attr("expr_kind")]
            expr = template.format(col=_bare(node.attr("input")))
            items = ", ".join(
                f"{expr} AS eval_{i}" for i in range(node.attr("repeat_count"))
            )
            return f"SELECT *, {items} FROM ({child}) AS {next_alias()}"
        raise TranslationError(f"untranslatable node kind {node.kind}")

    return emit(g.root)


# ---------------------------------------------------------------------------
# Parser for the emitted subset.

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"
    r"|(?P<str>'[^']*')"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|=|\(|\)|,|;|\*|\+))"
)

_KEYWORDS = {
    "SELECT", "FROM", "WHERE", "AND", "AS", "INNER", "JOIN", "ON",
    "GROUP", "BY", "ORDER", "ASC", "DESC", "COUNT", "SUM", "UPPER",
    "LOWER", "EXTRACT", "DAY",
}


class _Tokens:
    def __init__(self, sql: str):
        self.items: list[tuple[str, str]] = []
        pos = 0
        while pos < len(sql):
            m = _TOKEN_RE.match(sql, pos)
            if not m:
                if sql[pos:].strip():
                    raise SqlSubsetError(f"unexpected character at {sql[pos:pos+20]!r}")
                break
            pos = m.end()
            if m.lastgroup == "ident":
                text = m.group("ident")
                if text.upper() in _KEYWORDS:
                    self.items.append(("kw", text.upper()))
                else:
                    self.items.append(("ident", text))
            elif m.lastgroup == "num":
                self.items.append(("num", m.group("num")))
            elif m.lastgroup == "str":
                self.items.append(("str", m.group("str")[1:-1]))
            else:
                self.items.append(("op", m.group("op")))
        self.pos = 0

    def peek(self):
        return self.items[self.pos] if self.pos < len(self.items) else ("eof", "")

    def next(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect(self, kind: str, value=None):
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            raise SqlSubsetError(f"expected {value or kind}, got {tok}")
        return tok

    def accept(self, kind: str, value=None) -> bool:
        tok = self.peek()
        if tok[0] == kind and (value is None or tok[1] == value):
            self.pos += 1
            return True
        return False


class _Builder:
    def __init__(self):
        self.nodes: list[qg.OperatorNode] = []
        self.edges: list[tuple[int, int]] = []
        self.next_id = 0

    def add(self, make_node, children=()):
        nid = self.next_id
        self.next_id += 1
        self.nodes.append(make_node(nid))
        for c in children:
            self.edges.append((nid, c))
        return nid


def _literal_from_token(tok) -> object:
    kind, text = tok
    if kind == "num":
        return float(text) if ("." in text or "e" in text or "E" in text) else int(text)
    if kind == "str":
        try:
            return datetime.date.fromisoformat(text)
        except ValueError as exc:
            raise SqlSubsetError(f"unsupported string literal {text!r}") from exc
    raise SqlSubsetError(f"expected literal, got {tok}")


def parse_sql(sql: str) -> QueryGraph:
    """Parse SQL produced by to_sql back into a query graph."""
    sql = sql.strip()
    if sql.endswith(";"):
        sql = sql[:-1]
    tokens = _Tokens(sql)
    builder = _Builder()
    top, scan_columns = _parse_select(tokens, builder)
    if tokens.peek()[0] != "eof":
        raise SqlSubsetError(f"trailing tokens: {tokens.peek()}")
    return QueryGraph(builder.nodes, builder.edges, top)


def _qualify(name: str, scan_columns: dict) -> str:
    if name in scan_columns:
        return qg.colref(scan_columns[name], name)
    if re.fullmatch(r"agg_\d+", name):
        return name
    raise SqlSubsetError(f"unknown column {name}")


def _parse_select(tokens: _Tokens, builder: _Builder) -> tuple[int, dict]:
    """Parse one SELECT layer; returns (top node id, bare col -> table)."""
    tokens.expect("kw", "SELECT")

    star = tokens.accept("op", "*")
    eval_items: list[tuple[str, str]] = []  # (expr kind, input column)
    plain_cols: list[str] = []
    agg_items: list[tuple[str, str]] = []
    if star:
        while tokens.accept("op", ","):
            eval_items.append(_parse_eval_expr(tokens))
    else:
        while True:
            tok = tokens.peek()
            if tok == ("kw", "COUNT") or tok == ("kw", "SUM"):
                agg_items.append(_parse_agg_item(tokens))
            elif tok[0] == "ident":
                plain_cols.append(tokens.next()[1])
            else:
                raise SqlSubsetError(f"unexpected select item {tok}")
            if not tokens.accept("op", ","):
                break

    tokens.expect("kw", "FROM")

    if tokens.accept("op", "("):
        child, scan_columns = _parse_select(tokens, builder)
        tokens.expect("op", ")")
        tokens.expect("kw", "AS")
        tokens.expect("ident")
        if tokens.accept("kw", "INNER"):
            tokens.expect("kw", "JOIN")
            tokens.expect("op", "(")
            right, right_cols = _parse_select(tokens, builder)
            tokens.expect("op", ")")
            tokens.expect("kw", "AS")
            tokens.expect("ident")
            tokens.expect("kw", "ON")
            lk = tokens.expect("ident")[1]
            tokens.expect("op", "=")
            rk = tokens.expect("ident")[1]
            if not star or eval_items:
                raise SqlSubsetError("join layers must select *")
            merged = dict(scan_columns)
            merged.update(right_cols)
            try:
                left_ref = qg.colref(scan_columns[lk], lk)
                right_ref = qg.colref(right_cols[rk], rk)
            except KeyError as exc:
                raise SqlSubsetError(f"join key {exc} not visible") from exc
            top = builder.add(
                lambda nid: qg.join_node(nid, left_ref, right_ref),
                [child, right],
            )
            return top, merged
    else:
        table = tokens.expect("ident")[1]
        if not plain_cols or star or agg_items:
            raise SqlSubsetError("base table scans must list their columns")
        cols = tuple(plain_cols)
        top = builder.add(lambda nid: qg.scan_node(nid, table, cols))
        return top, {c: table for c in cols}

    # Wrapping layer over a single derived table.
    scan_cols = scan_columns
    if tokens.accept("kw", "WHERE"):
        if not star or eval_items:
            raise SqlSubsetError("filter layers must select *")
        preds = []
        while True:
            col = tokens.expect("ident")[1]
            tokens.expect("op", "<=")
            lit = _literal_from_token(tokens.next())
            preds.append((_qualify(col, scan_cols), "<=", lit))
            if not tokens.accept("kw", "AND"):
                break
        return builder.add(lambda nid: qg.filter_node(nid, preds), [child]), scan_cols

    if tokens.peek() == ("kw", "GROUP") or agg_items:
        group_refs = tuple(_qualify(c, scan_cols) for c in plain_cols)
        if tokens.accept("kw", "GROUP"):
            tokens.expect("kw", "BY")
            listed = []
            while True:
                listed.append(tokens.expect("ident")[1])
                if not tokens.accept("op", ","):
                    break
            if tuple(sorted(listed)) != tuple(sorted(plain_cols)):
                raise SqlSubsetError("GROUP BY columns must match selected columns")
        elif plain_cols:
            raise SqlSubsetError("ungrouped plain columns beside aggregates")
        aggs = [
            (func, _qualify(arg, scan_cols) if arg != "*" else "*")
            for func, arg in agg_items
        ]
        node_id = builder.add(
            lambda nid: qg.aggregate_node(nid, group_refs, aggs), [child]
        )
        visible = {c: scan_cols[c] for c in plain_cols if c in scan_cols}
        return node_id, visible

    if tokens.accept("kw", "ORDER"):
        tokens.expect("kw", "BY")
        keys = []
        direction = "asc"
        while True:
            keys.append(_qualify(tokens.expect("ident")[1], scan_cols))
            if tokens.accept("kw", "ASC"):
                direction = "asc"
            elif tokens.accept("kw", "DESC"):
                direction = "desc"
            if not tokens.accept("op", ","):
                break
        return builder.add(lambda nid: qg.sort_node(nid, keys, direction),
                           [child]), scan_cols

    if eval_items:
        kinds = {k for k, _ in eval_items}
        inputs = {c for _, c in eval_items}
        if len(kinds) != 1 or len(inputs) != 1:
            raise SqlSubsetError("mixed scalar expression items")
        kind = kinds.pop()
        ref = _qualify(inputs.pop(), scan_cols)
        repeat = len(eval_items)
        return builder.add(
            lambda nid: qg.evalscalar_node(nid, kind, ref, repeat), [child]
        ), scan_cols

    raise SqlSubsetError("bare pass-through subquery is outside the subset")


def _parse_agg_item(tokens: _Tokens) -> tuple[str, str]:
    tok = tokens.next()
    if tok == ("kw", "COUNT"):
        tokens.expect("op", "(")
        tokens.expect("op", "*")
        tokens.expect("op", ")")
        func, arg = "count", "*"
    elif tok == ("kw", "SUM"):
        tokens.expect("op", "(")
        arg = tokens.expect("ident")[1]
        tokens.expect("op", ")")
        func = "sum"
    else:
        raise SqlSubsetError(f"unsupported aggregate {tok}")
    tokens.expect("kw", "AS")
    alias = tokens.expect("ident")[1]
    if not re.fullmatch(r"agg_\d+", alias):
        raise SqlSubsetError(f"unexpected aggregate alias {alias}")
    return func, arg


def _parse_eval_expr(tokens: _Tokens) -> tuple[str, str]:
    """One scalar expression item: returns (expr kind, bare input column)."""
    tok = tokens.peek()
    if tok == ("op", "("):
        tokens.next()
        col = tokens.expect("ident")[1]
        tokens.expect("op", "*")
        tokens.expect("num", "1.0001")
        tokens.expect("op", "+")
        tokens.expect("num", "1")
        tokens.expect("op", ")")
        kind = "arith"
    elif tok == ("kw", "UPPER"):
        tokens.next()
        tokens.expect("op", "(")
        tokens.expect("kw", "LOWER")
        tokens.expect("op", "(")
        col = tokens.expect("ident")[1]
        tokens.expect("op", ")")
        tokens.expect("op", ")")
        kind = "string"
    elif tok == ("kw", "EXTRACT"):
        tokens.next()
        tokens.expect("op", "(")
        tokens.expect("kw", "DAY")
        tokens.expect("kw", "FROM")
        col = tokens.expect("ident")[1]
        tokens.expect("op", ")")
        kind = "date"
    else:
        raise SqlSubsetError(f"unsupported scalar expression near {tok}")
    tokens.expect("kw", "AS")
    alias = tokens.expect("ident")[1]
    if not re.fullmatch(r"eval_\d+", alias):
        raise SqlSubsetError(f"unexpected scalar alias {alias}")
    return kind, col
