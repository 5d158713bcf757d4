"""Correlation pruning, CART decision trees with Gini importances,
greedy threshold feature selection, and Cohen's d effect sizes.

The tree is exact CART: exhaustive search over midpoints of adjacent
distinct feature values, Gini impurity, best-first recursive splitting.
Equal-gain ties go to the earliest feature in the training feature
order (column order unless a weighting order is supplied), and to the
lowest threshold within a feature, so training is fully deterministic.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .datamodel import FeatureTable, format_float
from .errors import (
    ParameterError,
    SchemaError,
    SelectionError,
    UndefinedEffectError,
)

TREE_VERSION = "eegrisk-tree/1"


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 8
    min_leaf: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1:
            raise ParameterError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.min_leaf < 1:
            raise ParameterError(f"min_leaf must be >= 1, got {self.min_leaf}")


@dataclass
class Node:
    node_id: int
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    counts: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left < 0


@dataclass
class TreeModel:
    """Fitted binary CART classifier."""

    classes: list[str]
    feature_names: list[str]
    nodes: list[Node]
    importances: np.ndarray
    params: TreeParams
    n_training_rows: int = 0

    def _route(self, row: np.ndarray) -> Node:
        node = self.nodes[0]
        while not node.is_leaf:
            if row[node.feature] <= node.threshold:
                node = self.nodes[node.left]
            else:
                node = self.nodes[node.right]
        return node

    def predict(self, values: np.ndarray) -> list[str]:
        values = np.atleast_2d(values)
        out = []
        for row in values:
            counts = self._route(row).counts
            # majority vote; ties go to the first class in sorted order
            out.append(self.classes[int(np.argmax(counts))])
        return out

    def predict_proba(self, values: np.ndarray, positive_class: str
                      ) -> np.ndarray:
        """Leaf class fraction with Laplace (+1/+2) smoothing."""
        pos = self.classes.index(positive_class)
        values = np.atleast_2d(values)
        out = np.empty(values.shape[0])
        for i, row in enumerate(values):
            counts = self._route(row).counts
            out[i] = (counts[pos] + 1.0) / (counts.sum() + 2.0)
        return out

    def accuracy(self, values: np.ndarray, labels) -> float:
        pred = self.predict(values)
        labels = list(labels)
        return sum(p == t for p, t in zip(pred, labels)) / len(labels)


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - np.sum(p * p))


def _best_split_for_feature(col: np.ndarray, y_idx: np.ndarray,
                            n_classes: int, min_leaf: int
                            ) -> tuple[float, float]:
    """(gain, threshold) of the best midpoint split, or (-inf, nan)."""
    n = col.size
    order = np.argsort(col, kind="stable")
    sv = col[order]
    sy = y_idx[order]
    change = np.nonzero(sv[:-1] != sv[1:])[0]
    if change.size == 0:
        return -np.inf, np.nan
    lo, hi = min_leaf - 1, n - min_leaf - 1
    change = change[(change >= lo) & (change <= hi)]
    if change.size == 0:
        return -np.inf, np.nan
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), sy] = 1.0
    cum = np.cumsum(onehot, axis=0)
    left = cum[change]
    total = cum[-1]
    right = total - left
    n_left = (change + 1).astype(np.float64)
    n_right = n - n_left
    gini_left = 1.0 - np.sum((left / n_left[:, None]) ** 2, axis=1)
    gini_right = 1.0 - np.sum((right / n_right[:, None]) ** 2, axis=1)
    parent = 1.0 - np.sum((total / n) ** 2)
    gains = parent - (n_left / n) * gini_left - (n_right / n) * gini_right
    best = int(np.argmax(gains))  # first index wins -> lowest threshold
    threshold = (sv[change[best]] + sv[change[best] + 1]) / 2.0
    return float(gains[best]), float(threshold)


def train_tree(values: np.ndarray, labels, params: TreeParams | None = None,
               feature_names: list[str] | None = None,
               feature_order: list[int] | None = None) -> TreeModel:
    """Fit a CART classifier.

    feature_order gives the tie-break priority for equal-gain splits
    (defaults to column order); it does not restrict which features may
    be used. A single-class input yields a one-leaf model with a warning.
    """
    params = params or TreeParams()
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    labels = np.asarray(list(labels))
    n, n_features = values.shape
    if labels.shape[0] != n:
        raise ParameterError("labels length must match row count")
    classes = sorted(set(labels.tolist()))
    if len(classes) == 1:
        warnings.warn("single-class input; returning a trivial one-leaf model")
    y_idx = np.array([classes.index(l) for l in labels])
    names = feature_names or [f"x{i}" for i in range(n_features)]
    order = list(feature_order) if feature_order is not None \
        else list(range(n_features))

    nodes: list[Node] = []
    importance = np.zeros(n_features)

    def build(rows: np.ndarray, depth: int) -> int:
        node_id = len(nodes)
        counts = np.bincount(y_idx[rows], minlength=len(classes)).astype(float)
        node = Node(node_id=node_id, counts=counts)
        nodes.append(node)
        if (depth >= params.max_depth or counts.max() == counts.sum()
                or rows.size < 2 * params.min_leaf):
            return node_id
        best_gain, best_feature, best_threshold = 0.0, -1, np.nan
        for f in order:
            gain, threshold = _best_split_for_feature(
                values[rows, f], y_idx[rows], len(classes), params.min_leaf)
            if gain > best_gain:
                best_gain, best_feature, best_threshold = gain, f, threshold
        if best_feature < 0:
            return node_id
        mask = values[rows, best_feature] <= best_threshold
        importance[best_feature] += (rows.size / n) * best_gain
        node.feature = best_feature
        node.threshold = best_threshold
        node.left = build(rows[mask], depth + 1)
        node.right = build(rows[~mask], depth + 1)
        return node_id

    build(np.arange(n), 0)
    total = importance.sum()
    if total > 0.0:
        importance = importance / total
    return TreeModel(classes=classes, feature_names=names, nodes=nodes,
                     importances=importance, params=params,
                     n_training_rows=n)


def top_k_importance(model: TreeModel, k: int) -> list[str]:
    """Names of the k features with the largest Gini importance
    (descending, ties by feature index)."""
    n = len(model.feature_names)
    if k > n:
        warnings.warn(f"k={k} exceeds {n} features; returning all")
        k = n
    ranked = sorted(range(n), key=lambda i: (-model.importances[i], i))
    return [model.feature_names[i] for i in ranked[:k]]


def correlation_prune(table: FeatureTable, threshold: float = 0.95
                      ) -> FeatureTable:
    """Drop one feature of every pair with |Pearson r| above threshold.

    Pairs are resolved in descending |r|; the dropped member is the one
    with the larger mean |r| to the other remaining features (ties drop
    the later column). Constant features are dropped first.
    """
    if not 0.0 < threshold <= 1.0:
        raise ParameterError(f"threshold must lie in (0, 1], got {threshold}")
    if len(table.feature_names) < 2:
        raise ParameterError("pruning needs at least 2 features")
    values = table.values
    variances = values.var(axis=0)
    constant = [table.feature_names[i]
                for i in np.nonzero(variances == 0.0)[0]]
    if constant:
        warnings.warn(f"dropping constant feature(s): {constant[:5]}"
                      + ("..." if len(constant) > 5 else ""))
    alive = [i for i in range(values.shape[1]) if variances[i] > 0.0]
    corr = np.abs(np.corrcoef(values[:, alive], rowvar=False))
    np.fill_diagonal(corr, 0.0)
    active = list(range(len(alive)))
    while len(active) > 1:
        sub = corr[np.ix_(active, active)]
        flat = int(np.argmax(sub))
        a, b = divmod(flat, len(active))
        if sub[a, b] <= threshold:
            break
        mean_a = sub[a].sum() / (len(active) - 1)
        mean_b = sub[b].sum() / (len(active) - 1)
        # later column loses ties; positions map to ascending column order
        drop = max(a, b) if mean_a == mean_b else (a if mean_a > mean_b else b)
        active.pop(drop)
    kept = [table.feature_names[alive[i]] for i in active]
    return table.select_features(kept)


@dataclass
class SelectionOutcome:
    """Result of the accuracy-threshold greedy feature scan."""

    selected: list[str]
    accuracies: dict[str, float]
    weights: dict[str, float]
    threshold: float
    model: TreeModel = field(default=None)


def default_eval_protocol(cv_folds: int = 10, seed: int = 0,
                          max_depth: int = 2):
    """Mean stratified k-fold CV accuracy of a single-feature tree."""
    from .evaluate import cross_validate

    def protocol(column: np.ndarray, labels) -> float:
        scores = cross_validate(column.reshape(-1, 1), labels,
                                TreeParams(max_depth=max_depth, min_leaf=1),
                                k=cv_folds, seed=seed)
        return float(np.mean(scores))

    return protocol


def greedy_feature_select(table: FeatureTable, labels,
                          threshold: float = 0.6,
                          eval_protocol=None,
                          final_params: TreeParams | None = None
                          ) -> SelectionOutcome:
    """Keep features whose single-feature accuracy reaches the threshold,
    weight them by normalized accuracy, and retrain on the kept set.

    The weights order the final tree's equal-gain tie-breaks (heaviest
    feature first); CART has no per-sample feature weighting, so this is
    the only place the weights enter training. They are also exported
    for reporting.
    """
    if not 0.0 <= threshold:
        raise ParameterError(f"threshold must be >= 0, got {threshold}")
    eval_protocol = eval_protocol or default_eval_protocol()
    labels = list(labels)
    accuracies = {}
    for i, name in enumerate(table.feature_names):
        accuracies[name] = eval_protocol(table.values[:, i], labels)
    selected = [n for n in table.feature_names if accuracies[n] >= threshold]
    if not selected:
        best = max(accuracies.values())
        raise SelectionError(
            f"no feature reached accuracy threshold {threshold} "
            f"(best single-feature accuracy: {best:.4f})")
    total = sum(accuracies[n] for n in selected)
    weights = {n: accuracies[n] / total for n in selected}
    sub = table.select_features(selected)
    order = sorted(range(len(selected)),
                   key=lambda i: (-weights[selected[i]], i))
    model = train_tree(sub.values, labels, final_params or TreeParams(),
                       feature_names=selected, feature_order=order)
    return SelectionOutcome(selected=selected, accuracies=accuracies,
                            weights=weights, threshold=threshold, model=model)


def cohens_d(values_a, values_b) -> float:
    """Signed effect size (mean_a - mean_b) / pooled SD.

    Convention: group a is the carrier (ACr) group, so reported signs
    follow the carrier-minus-control direction.
    """
    a = np.asarray(values_a, dtype=np.float64)
    b = np.asarray(values_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ParameterError("each group needs >= 2 values")
    na, nb = a.size, b.size
    pooled = np.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1))
                     / (na + nb - 2))
    if pooled == 0.0:
        raise UndefinedEffectError("zero pooled SD; effect size undefined")
    return float((a.mean() - b.mean()) / pooled)


def effect_sizes(table: FeatureTable, features: list[str]) -> dict[str, float]:
    """Cohen's d (ACr minus HC) per feature on a harmonized, matched table."""
    groups = table.group_labels()
    acr = groups == "ACr"
    out = {}
    for name in features:
        col = table.column(name)
        out[name] = cohens_d(col[acr], col[~acr])
    return out


def save_tree(model: TreeModel, path: str) -> None:
    """One node per line: id, kind, feature, threshold, children, counts."""
    lines = [
        TREE_VERSION,
        "classes=" + ",".join(model.classes),
        "features=" + ",".join(model.feature_names),
        (f"params=max_depth:{model.params.max_depth},"
         f"min_leaf:{model.params.min_leaf},seed:{model.params.seed}"),
        "importances=" + ",".join(format_float(v)
                                  for v in model.importances),
        f"n_training_rows={model.n_training_rows}",
    ]
    for node in model.nodes:
        counts = ":".join(str(int(c)) for c in node.counts)
        if node.is_leaf:
            lines.append(f"{node.node_id} leaf - - - - {counts}")
        else:
            lines.append(
                f"{node.node_id} split {node.feature} "
                f"{format_float(node.threshold)} {node.left} {node.right} "
                f"{counts}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tree(path: str) -> TreeModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != TREE_VERSION:
        raise SchemaError(f"{path}: not a {TREE_VERSION} file")
    header = {}
    body_start = 1
    for i, line in enumerate(lines[1:], start=1):
        if "=" in line and not line.split(" ")[0].isdigit():
            key, _, value = line.partition("=")
            header[key] = value
            body_start = i + 1
        else:
            break
    classes = header["classes"].split(",")
    names = header["features"].split(",")
    raw = dict(p.split(":") for p in header["params"].split(","))
    params = TreeParams(max_depth=int(raw["max_depth"]),
                        min_leaf=int(raw["min_leaf"]), seed=int(raw["seed"]))
    importances = np.array([float(v)
                            for v in header["importances"].split(",")])
    nodes = []
    for line in lines[body_start:]:
        if not line:
            continue
        parts = line.split(" ")
        node_id, kind = int(parts[0]), parts[1]
        counts = np.array([float(c) for c in parts[6].split(":")])
        if kind == "leaf":
            nodes.append(Node(node_id=node_id, counts=counts))
        else:
            nodes.append(Node(node_id=node_id, feature=int(parts[2]),
                              threshold=float(parts[3]), left=int(parts[4]),
                              right=int(parts[5]), counts=counts))
    nodes.sort(key=lambda nd: nd.node_id)
    return TreeModel(classes=classes, feature_names=names, nodes=nodes,
                     importances=importances, params=params,
                     n_training_rows=int(header.get("n_training_rows", 0)))
