"""Local performance models: per-operator CPU predictors trained from
profiling runs against one fixed backend/dataset.

Simple operators use parametric forms (linear in cardinality-derived
features; sorts carry an n*log n term). Joins default to the parametric
match+materialize decomposition with an optional gradient-boosted tree
ensemble behind the same predict interface. Query-level prediction is the
sum of per-node predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import querygraph as qg
from .backend import CardinalityEstimate, ExecutionBackend
from .catalog import Catalog

MODEL_KINDS = (
    "scan", "filter", "evalscalar_arith", "evalscalar_string", "evalscalar_date",
    "sort", "aggregate", "join",
)

_LINEAR_KINDS = ("filter", "evalscalar_arith", "evalscalar_string", "evalscalar_date")


class FitError(Exception):
    pass


@dataclass(frozen=True)
class JoinFeatures:
    build_card: float
    probe_card: float
    ratio: float            # build/probe, probe floored at 1
    log_build: float
    materialize_term: float  # |R_out| * mean output width
    tasks: float

    @classmethod
    def from_quantities(cls, build: float, probe: float, out_rows: float,
                        out_width: float, tasks: float) -> "JoinFeatures":
        return cls(
            build_card=float(build),
            probe_card=float(probe),
            ratio=float(build) / max(float(probe), 1.0),
            log_build=math.log(max(float(build), 1.0)),
            materialize_term=float(out_rows) * float(out_width),
            tasks=float(tasks),
        )

    def vector(self) -> np.ndarray:
        return np.array([self.build_card, self.probe_card, self.ratio,
                         self.log_build, self.materialize_term, self.tasks])


@dataclass(frozen=True)
class ProfileSample:
    kind: str           # one of MODEL_KINDS
    features: dict      # named raw quantities, see _design_row
    cpu_time_ms: float

    def __post_init__(self):
        if self.cpu_time_ms < 0:
            raise ValueError("measured cpu must be >= 0")


def _design_row(kind: str, f: dict) -> np.ndarray:
    """Feature vector of the parametric form for one operator instance."""
    if kind == "scan":
        return np.array([f["weighted_bytes"]])
    if kind in _LINEAR_KINDS:
        applications = f.get("applications", f.get("predicates", 1.0))
        return np.array([f["input_rows"] * applications])
    if kind == "sort":
        n = f["input_rows"]
        return np.array([n * math.log2(max(n, 2.0)), n * f["output_width"]])
    if kind == "aggregate":
        return np.array([f["input_rows"], f["output_rows"] * f["group_keys"]])
    if kind == "join":
        return np.array([
            f["build_rows"] * f.get("build_keys", 1.0),
            f["probe_rows"] * f.get("probe_keys", 1.0),
            f["tasks"],
            f["output_rows"] * f["output_width"],
        ])
    raise ValueError(f"unknown operator kind: {kind}")


# Kinds whose parametric form carries a fitted intercept.
_HAS_INTERCEPT = {k: True for k in MODEL_KINDS}
_HAS_INTERCEPT["scan"] = False   # pure per-byte rate
_HAS_INTERCEPT["join"] = False   # the tasks term plays the constant role


@dataclass
class OperatorCoefficients:
    """Fitted constants per operator kind; None until that kind is fitted.

    Each entry is (feature coefficients..., intercept?) matching
    _design_row's layout. Hash/fetch unit costs are linear per key /
    per projected column and are folded into the join coefficients.
    """

    by_kind: dict = field(default_factory=dict)
    cost_hash_unit: float = 1.0
    cost_fetch_unit: float = 1.0

    def get(self, kind: str) -> Optional[np.ndarray]:
        return self.by_kind.get(kind)


@dataclass
class LocalModel:
    coefficients: OperatorCoefficients
    join_regressor: str = "parametric"   # parametric | tree_ensemble
    join_trees: Optional["TreeEnsemble"] = None
    tasks: float = 4.0
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Fitting.

def _clamped_lstsq(X: np.ndarray, y: np.ndarray, intercept: bool) -> np.ndarray:
    """Least squares with variable coefficients clamped >= 0.

    Negative fitted coefficients are zeroed and the remaining terms refit;
    the intercept (when present) keeps its sign. Returns the full vector
    [coefs..., intercept?].
    """
    n_vars = X.shape[1]
    columns = [X[:, i] for i in range(n_vars)]
    if intercept:
        columns.append(np.ones(X.shape[0]))
    full = np.column_stack(columns)
    if np.linalg.matrix_rank(full) < full.shape[1]:
        raise FitError("degenerate design matrix (all-equal features)")
    active = list(range(n_vars))
    while True:
        idx = active + ([n_vars] if intercept else [])
        coef, *_ = np.linalg.lstsq(full[:, idx], y, rcond=None)
        var = coef[: len(active)]
        negative = [i for i, c in enumerate(var) if c < 0]
        if not negative or not active:
            break
        worst = min(negative, key=lambda i: var[i])
        active.pop(worst)
    out = np.zeros(n_vars + (1 if intercept else 0))
    for pos, col in enumerate(active):
        out[col] = coef[pos]
    if intercept:
        out[-1] = coef[-1] if len(coef) else 0.0
    return out


def fit(samples, join_regressor: str = "parametric") -> LocalModel:
    """Fit per-kind parametric forms (and optionally the tree-ensemble join
    regressor) from profiling samples."""
    if join_regressor not in ("parametric", "tree_ensemble"):
        raise ValueError(f"unknown join regressor {join_regressor}")
    by_kind: dict[str, list[ProfileSample]] = {}
    for s in samples:
        if s.kind not in MODEL_KINDS:
            raise ValueError(f"unknown operator kind: {s.kind}")
        by_kind.setdefault(s.kind, []).append(s)

    coeffs = OperatorCoefficients()
    errors: dict[str, float] = {}
    for kind, group in sorted(by_kind.items()):
        if len(group) < 2:
            raise FitError(f"need >= 2 samples to fit {kind}, got {len(group)}")
        X = np.array([_design_row(kind, s.features) for s in group])
        y = np.array([s.cpu_time_ms for s in group])
        coef = _clamped_lstsq(X, y, _HAS_INTERCEPT[kind])
        coeffs.by_kind[kind] = coef
        pred = X @ coef[: X.shape[1]] + (coef[-1] if _HAS_INTERCEPT[kind] else 0.0)
        rel = np.abs(pred - y) / np.maximum(y, 1e-6)
        errors[kind] = float(np.median(rel))

    trees = None
    if join_regressor == "tree_ensemble":
        joins = by_kind.get("join", [])
        if len(joins) < 2:
            raise FitError("tree-ensemble join regressor needs >= 2 join samples")
        Xj = np.array([
            JoinFeatures.from_quantities(
                s.features["build_rows"], s.features["probe_rows"],
                s.features["output_rows"], s.features["output_width"],
                s.features["tasks"],
            ).vector()
            for s in joins
        ])
        yj = np.array([s.cpu_time_ms for s in joins])
        trees = TreeEnsemble.fit_boosted(Xj, yj)

    tasks = 4.0
    for s in by_kind.get("join", []):
        tasks = float(s.features.get("tasks", tasks))
        break
    return LocalModel(
        coefficients=coeffs,
        join_regressor=join_regressor,
        join_trees=trees,
        tasks=tasks,
        metadata={
            "sample_counts": {k: len(v) for k, v in sorted(by_kind.items())},
            "in_sample_median_rel_error": errors,
        },
    )


# ---------------------------------------------------------------------------
# Prediction.

def predict_operator(model: LocalModel, kind: str, features: dict) -> float:
    """Predicted CPU ms for one operator; finite and clamped at 0."""
    if kind == "join" and model.join_regressor == "tree_ensemble":
        jf = JoinFeatures.from_quantities(
            features["build_rows"], features["probe_rows"],
            features["output_rows"], features["output_width"],
            features["tasks"],
        )
        return max(float(model.join_trees.predict(jf.vector())), 0.0)
    coef = model.coefficients.get(kind)
    if coef is None:
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown operator kind: {kind}")
        raise FitError(f"operator kind {kind} was not fitted")
    row = _design_row(kind, features)
    value = float(row @ coef[: row.size])
    if _HAS_INTERCEPT[kind]:
        value += float(coef[-1])
    return max(value, 0.0)


def node_kind_and_features(g: qg.QueryGraph, node_id: int,
                           cards: CardinalityEstimate, catalog: Catalog,
                           tasks: float) -> tuple[str, dict]:
    """Model kind tag plus raw feature quantities for one graph node."""
    node = g.node(node_id)
    kids = g.children(node_id)
    if node.kind == qg.SCAN:
        table = catalog.table(node.attr("table"))
        bytes_per_row = sum(table.column(c).bytes_per_value
                            for c in node.attr("columns"))
        return "scan", {"weighted_bytes": table.row_count * bytes_per_row}
    if node.kind == qg.FILTER:
        return "filter", {
            "input_rows": cards.of(kids[0]),
            "predicates": len(node.attr("predicates")),
            "applications": len(node.attr("predicates")),
        }
    if node.kind == qg.EVALSCALAR:
        return f"evalscalar_{node.attr('expr_kind')}", {
            "input_rows": cards.of(kids[0]),
            "applications": node.attr("repeat_count"),
        }
    if node.kind == qg.SORT:
        return "sort", {
            "input_rows": cards.of(kids[0]),
            "output_width": qg.output_width(g, node_id),
        }
    if node.kind == qg.AGGREGATE:
        return "aggregate", {
            "input_rows": cards.of(kids[0]),
            "output_rows": cards.of(node_id),
            "group_keys": len(node.attr("group_by")),
        }
    if node.kind == qg.JOIN:
        a, b = cards.of(kids[0]), cards.of(kids[1])
        build, probe = (b, a) if b < a else (a, b)
        return "join", {
            "build_rows": build,
            "probe_rows": probe,
            "build_keys": 1.0,
            "probe_keys": 1.0,
            "tasks": tasks,
            "output_rows": cards.of(node_id),
            "output_width": qg.output_width(g, node_id),
        }
    raise ValueError(f"unknown node kind {node.kind}")


def predict_query(model: LocalModel, g: qg.QueryGraph, cards: CardinalityEstimate,
                  catalog: Catalog) -> float:
    """Sum of per-node predictions over the whole graph."""
    total = 0.0
    for nid in g.topological():
        kind, features = node_kind_and_features(g, nid, cards, catalog, model.tasks)
        total += predict_operator(model, kind, features)
    return total


# ---------------------------------------------------------------------------
# Profiling collection.

def collect_profiles(catalog: Catalog, backend: ExecutionBackend,
                     n_queries: int, seed: int = 0,
                     bounds: Optional[dict] = None) -> list[ProfileSample]:
    """Execute random graphs and emit one sample per operator instance."""
    rng = np.random.default_rng(seed)
    bounds = bounds or qg.default_sample_bounds(catalog)
    tasks = float(getattr(getattr(backend, "config", None), "parallel_tasks", 4))
    samples: list[ProfileSample] = []
    for _ in range(n_queries):
        g = qg.sample_random_graph(catalog, bounds, rng=rng)
        profile = backend.execute(g)
        cards = CardinalityEstimate(
            rows={row.node_id: row.output_card for row in profile.per_operator}
        )
        for row in profile.per_operator:
            kind, features = node_kind_and_features(g, row.node_id, cards,
                                                    catalog, tasks)
            samples.append(ProfileSample(kind=kind, features=features,
                                         cpu_time_ms=row.cpu_time_ms))
    return samples


# ---------------------------------------------------------------------------
# Tree ensemble (squared-error boosting over shallow regression trees).

@dataclass(frozen=True)
class FlatTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, x: np.ndarray) -> float:
        i = 0
        while self.left[i] != -1:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return float(self.value[i])


@dataclass
class TreeEnsemble:
    init_value: float
    learning_rate: float
    trees: list

    def predict(self, x: np.ndarray) -> float:
        total = self.init_value
        for tree in self.trees:
            total += self.learning_rate * tree.predict(x)
        return total

    @classmethod
    def fit_boosted(cls, X: np.ndarray, y: np.ndarray, n_trees: int = 100,
                    max_depth: int = 4, learning_rate: float = 0.1) -> "TreeEnsemble":
        from sklearn.tree import DecisionTreeRegressor

        init = float(np.mean(y))
        residual = y - init
        trees: list[FlatTree] = []
        pred = np.full(y.shape, init)
        for _ in range(n_trees):
            stump = DecisionTreeRegressor(max_depth=max_depth, random_state=0)
            stump.fit(X, y - pred)
            flat = FlatTree(
                feature=stump.tree_.feature.copy(),
                threshold=stump.tree_.threshold.copy(),
                left=stump.tree_.children_left.copy(),
                right=stump.tree_.children_right.copy(),
                value=stump.tree_.value[:, 0, 0].copy(),
            )
            trees.append(flat)
            pred = pred + learning_rate * np.array([flat.predict(row) for row in X])
        return cls(init_value=init, learning_rate=learning_rate, trees=trees)


# ---------------------------------------------------------------------------
# Model files: structured text; floats use shortest round-trip repr, so a
# reloaded model predicts bit-exactly.

def save_model(model: LocalModel, path) -> None:
    lines = [
        "# local cost model",
        f"join_regressor={model.join_regressor}",
        f"tasks={model.tasks!r}",
        f"cost_hash_unit={model.coefficients.cost_hash_unit!r}",
        f"cost_fetch_unit={model.coefficients.cost_fetch_unit!r}",
    ]
    for kind, count in model.metadata.get("sample_counts", {}).items():
        lines.append(f"samples_{kind}={count}")
    for kind, err in model.metadata.get("in_sample_median_rel_error", {}).items():
        lines.append(f"fit_error_{kind}={err!r}")
    for kind in MODEL_KINDS:
        coef = model.coefficients.get(kind)
        if coef is not None:
            rendered = " ".join(repr(float(c)) for c in coef)
            lines.append(f"[{kind}] {rendered}")
    if model.join_trees is not None:
        ens = model.join_trees
        lines.append(f"[join_trees] n={len(ens.trees)} "
                     f"learning_rate={ens.learning_rate!r} init={ens.init_value!r}")
        for ti, tree in enumerate(ens.trees):
            for ni in range(tree.feature.size):
                lines.append(
                    f"tree={ti} node={ni} feature={int(tree.feature[ni])} "
                    f"threshold={float(tree.threshold[ni])!r} "
                    f"left={int(tree.left[ni])} right={int(tree.right[ni])} "
                    f"value={float(tree.value[ni])!r}"
                )
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> LocalModel:
    coeffs = OperatorCoefficients()
    meta: dict = {"sample_counts": {}, "in_sample_median_rel_error": {}}
    join_regressor = "parametric"
    tasks = 4.0
    tree_meta = None
    tree_nodes: dict[int, list[tuple]] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            section, _, rest = line[1:].partition("] ")
            if section == "join_trees":
                parts = dict(p.split("=") for p in rest.split())
                tree_meta = (int(parts["n"]), float(parts["learning_rate"]),
                             float(parts["init"]))
            else:
                coeffs.by_kind[section] = np.array([float(v) for v in rest.split()])
            continue
        if line.startswith("tree="):
            parts = dict(p.split("=") for p in line.split())
            tree_nodes.setdefault(int(parts["tree"]), []).append((
                int(parts["node"]), int(parts["feature"]), float(parts["threshold"]),
                int(parts["left"]), int(parts["right"]), float(parts["value"]),
            ))
            continue
        key, _, value = line.partition("=")
        if key == "join_regressor":
            join_regressor = value
        elif key == "tasks":
            tasks = float(value)
        elif key == "cost_hash_unit":
            coeffs.cost_hash_unit = float(value)
        elif key == "cost_fetch_unit":
            coeffs.cost_fetch_unit = float(value)
        elif key.startswith("samples_"):
            meta["sample_counts"][key[len("samples_"):]] = int(value)
        elif key.startswith("fit_error_"):
            meta["in_sample_median_rel_error"][key[len("fit_error_"):]] = float(value)
    trees = None
    if tree_meta is not None:
        n, lr, init = tree_meta
        flat_trees = []
        for ti in range(n):
            rows = sorted(tree_nodes.get(ti, []))
            flat_trees.append(FlatTree(
                feature=np.array([r[1] for r in rows], dtype=np.int64),
                threshold=np.array([r[2] for r in rows]),
                left=np.array([r[3] for r in rows], dtype=np.int64),
                right=np.array([r[4] for r in rows], dtype=np.int64),
                value=np.array([r[5] for r in rows]),
            ))
        trees = TreeEnsemble(init_value=init, learning_rate=lr, trees=flat_trees)
    return LocalModel(coefficients=coeffs, join_regressor=join_regressor,
                      join_trees=trees, tasks=tasks, metadata=meta)
