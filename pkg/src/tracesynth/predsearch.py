"""Phase II: predicate-column selection and two-stage black-box predicate
tuning against the CPU-time target.

The search space is a box of one-sided range-predicate bounds over
execution-sensitive columns. Stage 1 explores the full box; stage 2 shrinks
it around the evaluations bracketing the target (with value bucketing for
huge integer domains) and exploits. Scoring is hybrid: candidates are
costed with the local model and only executed when the prediction lands in
a window around the target.
"""

from __future__ import annotations

import datetime
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import costmodel as cm
from . import querygraph as qg
from .backend import ExecutionBackend, ExecutionProfile
from .catalog import Catalog
from .values import date_to_days, days_to_date


class PredicateSearchError(Exception):
    pass


class NoTunablePredicatesError(PredicateSearchError):
    pass


@dataclass(frozen=True)
class PredicateDimension:
    table: str
    column: str
    ref: str            # table.column
    lower: float        # domain bounds (dates as epoch days)
    upper: float
    value_kind: str     # integer | decimal | date
    bucket_values: Optional[tuple[float, ...]] = None

    def to_literal(self, v: float):
        v = min(max(v, self.lower), self.upper)
        if self.value_kind == "integer":
            return int(round(v))
        if self.value_kind == "date":
            return days_to_date(int(round(v)))
        return float(v)


@dataclass(frozen=True)
class PredicateSpace:
    dims: tuple[PredicateDimension, ...]
    allocation: dict = field(default_factory=dict)  # table -> dimension count


PredicateVector = tuple


@dataclass(frozen=True)
class SearchConfig:
    n_rand: int = 8
    n_calls: int = 24
    window_low: float = 0.5    # execute when prediction in [a*y, b*y]
    window_high: float = 2.0
    shrink_fraction: float = 0.1
    bucket_cap: int = 256
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.window_low <= 1.0 <= self.window_high):
            raise ValueError("tolerance window must satisfy 0 < a <= 1 <= b")
        if self.n_rand < 2:
            raise ValueError("n_rand must be >= 2")


@dataclass(frozen=True)
class Evaluation:
    x: PredicateVector
    cpu: float
    score: float
    was_executed: bool


@dataclass
class SearchState:
    evaluations: list = field(default_factory=list)
    x_plus: Optional[PredicateVector] = None
    x_minus: Optional[PredicateVector] = None


@dataclass
class TuneResult:
    graph: qg.QueryGraph
    profile: ExecutionProfile
    executions: int
    best_x: Optional[PredicateVector]
    state: SearchState


# ---------------------------------------------------------------------------
# Predicate column selection.

_TUNABLE_KINDS = ("integer", "decimal", "date")


def _domain(stats) -> tuple[float, float]:
    if stats.value_kind == "date":
        return float(date_to_days(stats.min_value)), float(date_to_days(stats.max_value))
    return float(stats.min_value), float(stats.max_value)


def select_predicate_columns(g: qg.QueryGraph, catalog: Catalog,
                             max_dims: int) -> PredicateSpace:
    """Allocate dimensions to tables proportionally to row count (largest
    remainder), then rank columns within each table by domain width in
    distinct-value steps times row count."""
    scans = g.scans()
    eligible: dict[str, list] = {}
    row_counts: dict[str, int] = {}
    for scan in scans:
        table = catalog.table(scan.attr("table"))
        row_counts[table.name] = table.row_count
        cols = []
        for name in scan.attr("columns"):
            st = table.column(name)
            if (st.value_kind in _TUNABLE_KINDS and st.min_value is not None
                    and st.min_value < st.max_value):
                cols.append(st)
        eligible[table.name] = cols
    if not any(eligible.values()):
        raise NoTunablePredicatesError("no tunable predicates")

    total_rows = sum(row_counts.values())
    tables = sorted(row_counts)
    exact = {t: max_dims * row_counts[t] / total_rows for t in tables}
    quota = {t: int(math.floor(exact[t])) for t in tables}
    leftover = max_dims - sum(quota.values())
    for t in sorted(tables, key=lambda t: (-(exact[t] - quota[t]), t)):
        if leftover <= 0:
            break
        quota[t] += 1
        leftover -= 1

    dims: list[PredicateDimension] = []
    for t in tables:
        ranked = sorted(
            eligible[t],
            key=lambda st: (-(st.distinct_count - 1) * row_counts[t], st.name),
        )
        for st in ranked[: quota[t]]:
            lo, hi = _domain(st)
            dims.append(PredicateDimension(
                table=t, column=st.name, ref=qg.colref(t, st.name),
                lower=lo, upper=hi, value_kind=st.value_kind,
            ))
    if not dims:
        raise NoTunablePredicatesError("no tunable predicates")
    return PredicateSpace(dims=tuple(dims),
                          allocation={t: quota[t] for t in tables})


def instantiate_predicates(template: qg.QueryGraph, space: PredicateSpace,
                           x: PredicateVector) -> qg.QueryGraph:
    """Concrete graph: one Filter per predicated table above its Scan."""
    by_table: dict[str, list] = {}
    for dim, v in zip(space.dims, x):
        by_table.setdefault(dim.table, []).append((dim.ref, "<=", dim.to_literal(v)))
    if not by_table:
        return template
    nodes = list(template.nodes)
    edges = list(template.edges)
    root = template.root
    parent_of: dict[int, int] = {c: p for p, c in edges}
    next_id = max(n.id for n in nodes) + 1
    for scan in template.scans():
        preds = by_table.get(scan.attr("table"))
        if not preds:
            continue
        fid = next_id
        next_id += 1
        nodes.append(qg.filter_node(fid, sorted(preds, key=lambda p: p[0])))
        parent = parent_of.get(scan.id)
        # Substitute in place so a join parent keeps its child order.
        edges = [
            (p, fid) if (p == parent and c == scan.id) else (p, c)
            for p, c in edges
        ]
        edges.append((fid, scan.id))
        if parent is None:
            root = fid
    return qg.QueryGraph(nodes, edges, root)


def strip_predicates(g: qg.QueryGraph) -> qg.QueryGraph:
    """Remove all Filter nodes, splicing their children upward (the
    parameterized-template form used for reuse)."""
    filters = [n.id for n in g.nodes if n.kind == qg.FILTER]
    if not filters:
        return g
    child_of = {p: c for p, c in g.edges}
    redirect = {}
    for fid in filters:
        redirect[fid] = child_of[fid]

    def resolve(nid: int) -> int:
        while nid in redirect:
            nid = redirect[nid]
        return nid

    nodes = [n for n in g.nodes if n.kind != qg.FILTER]
    edges = [
        (p, resolve(c)) for p, c in g.edges
        if p not in redirect and resolve(c) != p
    ]
    return qg.QueryGraph(nodes, edges, resolve(g.root))


# ---------------------------------------------------------------------------
# Tuning context and hybrid scoring.

@dataclass
class TuneContext:
    template: qg.QueryGraph
    space: PredicateSpace
    y_cpu: float
    model: cm.LocalModel
    backend: ExecutionBackend
    catalog: Catalog
    config: SearchConfig
    rng: np.random.Generator
    max_executions: int = 10_000
    cpu_tolerance: float = 0.2   # searching stops once an executed
    eta: float = 1.0             # evaluation satisfies this
    executions_used: int = 0
    cache: dict = field(default_factory=dict)
    profiles: dict = field(default_factory=dict)  # measured profiles by key

    def budget_allows_execution(self) -> bool:
        # One execution is reserved for the final verification run.
        return self.executions_used < self.max_executions - 1

    def satisfied(self, ev: "Evaluation") -> bool:
        return (ev.was_executed
                and abs(ev.cpu - self.y_cpu)
                <= self.cpu_tolerance * max(self.y_cpu, self.eta))


def _cache_key(space: PredicateSpace, x: PredicateVector) -> tuple:
    return tuple(dim.to_literal(v) for dim, v in zip(space.dims, x))


def score_predicates(x: PredicateVector, ctx: TuneContext) -> Evaluation:
    """Hybrid score: -(cpu - target)^2, with cpu observed only when the
    model prediction falls inside the execute window."""
    key = _cache_key(ctx.space, x)
    hit = ctx.cache.get(key)
    if hit is not None:
        return Evaluation(x=x, cpu=hit.cpu, score=hit.score,
                          was_executed=hit.was_executed)
    g = instantiate_predicates(ctx.template, ctx.space, x)
    cards = ctx.backend.probe_cardinalities(g)
    predicted = cm.predict_query(ctx.model, g, cards, ctx.catalog)
    lo = ctx.config.window_low * ctx.y_cpu
    hi = ctx.config.window_high * ctx.y_cpu
    in_window = lo <= predicted <= hi
    if in_window and ctx.budget_allows_execution():
        profile = ctx.backend.execute(g)
        ctx.executions_used += 1
        ctx.profiles[key] = profile
        cpu = profile.cpu_time_ms
        executed = True
    else:
        cpu = predicted
        executed = False
    ev = Evaluation(x=x, cpu=cpu, score=-((cpu - ctx.y_cpu) ** 2),
                    was_executed=executed)
    ctx.cache[key] = ev
    return ev


# ---------------------------------------------------------------------------
# Ask/tell optimizer: inverse-distance-weighted surrogate over normalized
# points, candidate-set acquisition. Deterministic under the context rng.

class AskTellOptimizer:
    def __init__(self, dims, rng: np.random.Generator, n_rand: int,
                 explore_weight: float, n_candidates: int = 256):
        self.dims = dims  # (lower, upper, bucket_values or None) triples
        self.rng = rng
        self.n_rand = n_rand
        self.explore = explore_weight
        self.n_candidates = n_candidates
        self.points: list[np.ndarray] = []
        self.scores: list[float] = []
        self.seen: set = set()

    def _sample(self) -> tuple:
        out = []
        for lo, hi, buckets in self.dims:
            if buckets is not None:
                out.append(float(buckets[int(self.rng.integers(0, len(buckets)))]))
            else:
                out.append(float(lo + self.rng.random() * (hi - lo)))
        return tuple(out)

    def _corner(self, high: bool) -> tuple:
        return tuple(
            float((buckets[-1] if high else buckets[0]) if buckets is not None
                  else (hi if high else lo))
            for lo, hi, buckets in self.dims
        )

    def _normalize(self, x) -> np.ndarray:
        return np.array([
            (v - lo) / (hi - lo) if hi > lo else 0.0
            for v, (lo, hi, _) in zip(x, self.dims)
        ])

    def ask(self) -> tuple:
        # The first two inits probe the box corners (fully closed / fully
        # open predicates), bounding the reachable cost range and seeding
        # both sides of the target; the rest are random.
        if len(self.points) == 0:
            return self._corner(high=False)
        if len(self.points) == 1:
            return self._corner(high=True)
        if len(self.points) < self.n_rand:
            return self._sample()
        candidates = [self._sample() for _ in range(self.n_candidates)]
        fresh = [c for c in candidates if c not in self.seen]
        if fresh:
            candidates = fresh
        pts = np.array(self.points)
        scores = np.array(self.scores)
        spread = float(scores.max() - scores.min()) or 1.0
        cand = np.array([self._normalize(c) for c in candidates])
        d2 = ((cand[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        w = 1.0 / (d2 + 1e-12)
        mean = (w * scores[None, :]).sum(axis=1) / w.sum(axis=1)
        min_dist = np.sqrt(d2.min(axis=1))
        acq = mean + self.explore * spread * min_dist
        return candidates[int(np.argmax(acq))]

    def tell(self, x: tuple, score: float) -> None:
        self.points.append(self._normalize(x))
        self.scores.append(score)
        self.seen.add(tuple(x))


def _dim_triples(dims, shrink_center=None, fraction: float = 0.0,
                 bucket_cap: Optional[int] = None):
    triples = []
    for i, dim in enumerate(dims):
        lo, hi = dim.lower, dim.upper
        if shrink_center is not None:
            half = fraction * (dim.upper - dim.lower)
            lo = max(dim.lower, shrink_center[i] - half)
            hi = min(dim.upper, shrink_center[i] + half)
        buckets = None
        if bucket_cap is not None and dim.value_kind in ("integer", "date"):
            width = int(math.floor(hi)) - int(math.ceil(lo))
            if width + 1 > bucket_cap:
                step = math.ceil(width / (bucket_cap - 1))
            else:
                step = 1
            values = []
            v = int(math.ceil(lo))
            while v <= math.floor(hi):
                values.append(float(v))
                v += step
            if values:
                buckets = tuple(values)
        triples.append((lo, hi, buckets))
    return triples


def stage1_global(space: PredicateSpace, ctx: TuneContext) -> SearchState:
    """Global exploration over the full box; selects the seeds bracketing
    the target from the recorded evaluations."""
    state = SearchState()
    opt = AskTellOptimizer(_dim_triples(space.dims), ctx.rng,
                           n_rand=ctx.config.n_rand, explore_weight=1.0)
    for _ in range(ctx.config.n_rand + ctx.config.n_calls):
        x = opt.ask()
        ev = score_predicates(x, ctx)
        opt.tell(x, ev.score)
        state.evaluations.append(ev)
        if ctx.satisfied(ev):
            break
    above = [ev for ev in state.evaluations if ev.cpu >= ctx.y_cpu]
    below = [ev for ev in state.evaluations if ev.cpu < ctx.y_cpu]
    if above:
        state.x_plus = min(above, key=lambda ev: ev.cpu - ctx.y_cpu).x
    if below:
        state.x_minus = min(below, key=lambda ev: ctx.y_cpu - ev.cpu).x
    return state


def stage2_local(state: SearchState, space: PredicateSpace,
                 ctx: TuneContext) -> Optional[PredicateVector]:
    """Refine around each seed in a shrunk, bucketed box; the returned
    vector is the best across stage 1 history and both refinements."""
    if not any(ctx.satisfied(ev) for ev in state.evaluations):
        seeds = [s for s in (state.x_plus, state.x_minus) if s is not None]
        if seeds and len(seeds) == 2 and seeds[0] == seeds[1]:
            seeds = seeds[:1]
        for seed in seeds:
            triples = _dim_triples(space.dims, shrink_center=seed,
                                   fraction=ctx.config.shrink_fraction,
                                   bucket_cap=ctx.config.bucket_cap)
            opt = AskTellOptimizer(triples, ctx.rng, n_rand=ctx.config.n_rand,
                                   explore_weight=0.05)
            done = False
            for _ in range(ctx.config.n_rand + ctx.config.n_calls):
                x = opt.ask()
                ev = score_predicates(x, ctx)
                opt.tell(x, ev.score)
                state.evaluations.append(ev)
                if ctx.satisfied(ev):
                    done = True
                    break
            if done:
                break
    best = None
    for ev in state.evaluations:
        if best is None or ev.score > best.score:
            best = ev
    return best.x if best is not None else None


def tune(template: qg.QueryGraph, y_cpu: float, space: PredicateSpace,
         ctx: TuneContext) -> TuneResult:
    """Two-stage search plus one final verifying execution."""
    if not space.dims:
        profile = ctx.backend.execute(template)
        ctx.executions_used += 1
        return TuneResult(graph=template, profile=profile,
                          executions=ctx.executions_used, best_x=None,
                          state=SearchState())
    state = stage1_global(space, ctx)
    best_x = stage2_local(state, space, ctx)
    final = instantiate_predicates(ctx.template, space, best_x)
    # The verification run is a bit-exact repeat when the winning vector
    # was already executed during search (deterministic backend), so the
    # measured profile is reused in that case.
    profile = ctx.profiles.get(_cache_key(space, best_x))
    if profile is None:
        profile = ctx.backend.execute(final)
        ctx.executions_used += 1
    return TuneResult(graph=final, profile=profile,
                      executions=ctx.executions_used, best_x=best_x, state=state)
