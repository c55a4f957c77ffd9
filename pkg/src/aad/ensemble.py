"""
Tree ensembles for aad.
Random forest, extremely randomized trees and gradient-boosted trees built on
a shared flat-array tree representation, with probability outputs for
self-training and model files in the aad artifact container.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from aad.errors import ConfigError, CorruptModel, DataError, EmptyNode, ShapeMismatch
from aad.models import ClassifierKind, WindowLabel
from aad.seeding import expand_seed
from aad.storage import decode_array, encode_array, load_artifact, save_artifact


logger = logging.getLogger(__name__)

SINGLE_CLASS_WARNING = "single-class training set"
PROBABILITY_CLIP = 1e-6
FOREST_KINDS = (ClassifierKind.RANDOM_FOREST, ClassifierKind.EXTRA_TREES)


def gini(class_counts: Any) -> float:
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise EmptyNode("Class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise EmptyNode("Gini impurity of an empty node is undefined")
    return float(1.0 - np.sum((counts / total) ** 2))


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_features: Union[str, int] = "sqrt"
    min_samples_split: int = 2
    max_depth: Optional[int] = None
    n_jobs: int = 1

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ConfigError("forest n_trees must be at least 1")
        if not (self.max_features == "sqrt" or (isinstance(self.max_features, int) and self.max_features >= 1)):
            raise ConfigError(f"forest max_features must be 'sqrt' or a positive int, got {self.max_features!r}")
        if self.min_samples_split < 2:
            raise ConfigError("forest min_samples_split must be at least 2")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError("forest max_depth must be positive")
        if self.n_jobs < 1:
            raise ConfigError("forest n_jobs must be at least 1")

    def n_candidates(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(np.sqrt(n_features)))
        return min(int(self.max_features), n_features)

    def to_dict(self) -> Dict[str, Any]:
        # n_jobs does not change the fitted model
        return {
            "n_trees": self.n_trees,
            "max_features": self.max_features,
            "min_samples_split": self.min_samples_split,
            "max_depth": self.max_depth,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ForestParams":
        return cls(**data)


@dataclass(frozen=True)
class BoostedParams:
    n_rounds: int = 100
    max_depth: int = 6
    learning_rate: float = 0.3
    l2_lambda: float = 1.0
    min_child_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.n_rounds < 0 or self.max_depth < 1:
            raise ConfigError("boosted n_rounds must be >= 0 and max_depth >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("boosted learning_rate must lie in (0, 1]")
        if self.l2_lambda < 0 or self.min_child_weight < 0:
            raise ConfigError("boosted l2_lambda and min_child_weight must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_rounds": self.n_rounds,
            "max_depth": self.max_depth,
            "learning_rate": self.learning_rate,
            "l2_lambda": self.l2_lambda,
            "min_child_weight": self.min_child_weight,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BoostedParams":
        return cls(**data)


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flat binary tree; feature == -1 marks a leaf.

    Classification trees keep per-leaf class frequencies in value (n_nodes, 2),
    regression trees keep the leaf output in value (n_nodes, 1).
    """
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth_reached: int = 0

    def __post_init__(self) -> None:
        n = len(self.feature)
        if n == 0:
            raise CorruptModel("Tree has no nodes")
        for name in ("threshold", "left", "right"):
            if len(getattr(self, name)) != n:
                raise CorruptModel(f"Tree array {name} has {len(getattr(self, name))} entries for {n} nodes")
        if self.value.ndim != 2 or self.value.shape[0] != n:
            raise CorruptModel("Tree values must be (n_nodes, n_outputs)")
        internal = self.feature >= 0
        if np.any((self.left >= 0) != internal) or np.any((self.right >= 0) != internal):
            raise CorruptModel("Every internal node needs two children")
        if np.any(self.left[internal] >= n) or np.any(self.right[internal] >= n):
            raise CorruptModel("Child index out of range")

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.nonzero(self.feature[node] >= 0)[0]
        while len(active):
            current = node[active]
            go_left = X[active, self.feature[current]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict_value(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "feature": encode_array(self.feature),
            "threshold": encode_array(self.threshold),
            "left": encode_array(self.left),
            "right": encode_array(self.right),
            "value": encode_array(self.value),
            "max_depth_reached": self.max_depth_reached,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DecisionTree":
        return cls(
            feature=decode_array(data["feature"]),
            threshold=decode_array(data["threshold"]),
            left=decode_array(data["left"]),
            right=decode_array(data["right"]),
            value=decode_array(data["value"]),
            max_depth_reached=int(data.get("max_depth_reached", 0)),
        )


class _TreeBuilder:
    """Accumulates nodes in allocation order."""

    def __init__(self, n_outputs: int):
        self.n_outputs = n_outputs
        self.feature: List[int] = []
        self.threshold: List[float] = []
        self.left: List[int] = []
        self.right: List[int] = []
        self.value: List[np.ndarray] = []
        self.max_depth = 0

    def add(self, depth: int) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(np.zeros(self.n_outputs))
        self.max_depth = max(self.max_depth, depth)
        return len(self.feature) - 1

    def split(self, node: int, feature: int, threshold: float) -> Tuple[int, int]:
        self.feature[node] = int(feature)
        self.threshold[node] = float(threshold)
        return self.left[node], self.right[node]

    def build(self) -> DecisionTree:
        return DecisionTree(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            value=np.vstack(self.value),
            max_depth_reached=self.max_depth,
        )


def _midpoint(a: float, b: float) -> float:
    t = a / 2.0 + b / 2.0
    return a if (t >= b or t < a) else t


def _children_gini(n_left: np.ndarray, pos_left: np.ndarray, n_total: int, pos_total: int) -> np.ndarray:
    """Weighted gini of the two children for each candidate split."""
    n_right = n_total - n_left
    pos_right = pos_total - pos_left
    with np.errstate(invalid="ignore", divide="ignore"):
        gini_left = 1.0 - (pos_left / n_left) ** 2 - ((n_left - pos_left) / n_left) ** 2
        gini_right = 1.0 - (pos_right / n_right) ** 2 - ((n_right - pos_right) / n_right) ** 2
    return (n_left * gini_left + n_right * gini_right) / n_total


def _candidate_features(Xn: np.ndarray, rng: np.random.Generator, k: int) -> np.ndarray:
    """First k non-constant features in a random order."""
    order = rng.permutation(Xn.shape[1])
    lo = Xn.min(axis=0)
    hi = Xn.max(axis=0)
    return order[hi[order] > lo[order]][:k]


def _best_exhaustive_split(Xn: np.ndarray, yn: np.ndarray, rng: np.random.Generator,
                           k: int) -> Optional[Tuple[int, float]]:
    features = _candidate_features(Xn, rng, k)
    if len(features) == 0:
        return None
    n = Xn.shape[0]
    cols = Xn[:, features]
    idx = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, idx, axis=0)
    pos_left = np.cumsum(yn[idx], axis=0)[:-1]
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    impurity = _children_gini(n_left, pos_left, n, int(yn.sum()))
    impurity = np.where(xs[1:] > xs[:-1], impurity, np.inf)
    j, i = divmod(int(np.argmin(impurity.T)), n - 1)
    return int(features[j]), _midpoint(xs[i, j], xs[i + 1, j])


def _best_random_split(Xn: np.ndarray, yn: np.ndarray, rng: np.random.Generator,
                       k: int) -> Optional[Tuple[int, float]]:
    features = _candidate_features(Xn, rng, k)
    if len(features) == 0:
        return None
    n = Xn.shape[0]
    cols = Xn[:, features]
    lo = cols.min(axis=0)
    hi = cols.max(axis=0)
    thresholds = rng.uniform(lo, hi)
    thresholds = np.where(thresholds >= hi, lo, thresholds)
    go_left = cols <= thresholds
    n_left = go_left.sum(axis=0).astype(np.float64)
    pos_left = (go_left & (yn[:, None] == 1)).sum(axis=0).astype(np.float64)
    j = int(np.argmin(_children_gini(n_left, pos_left, n, int(yn.sum()))))
    return int(features[j]), float(thresholds[j])


def _grow_classification_tree(X: np.ndarray, y: np.ndarray, rng: np.random.Generator,
                              params: ForestParams, randomized: bool) -> DecisionTree:
    find_split = _best_random_split if randomized else _best_exhaustive_split
    k = params.n_candidates(X.shape[1])
    builder = _TreeBuilder(n_outputs=2)
    stack = [(builder.add(0), np.arange(len(y)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        yn = y[rows]
        counts = np.bincount(yn, minlength=2)
        builder.value[node] = counts / len(rows)
        if counts.min() == 0 or len(rows) < params.min_samples_split:
            continue
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        split = find_split(X[rows], yn, rng, k)
        if split is None:
            continue
        feature, threshold = split
        builder.left[node] = builder.add(depth + 1)
        builder.right[node] = builder.add(depth + 1)
        left, right = builder.split(node, feature, threshold)
        go_left = X[rows, feature] <= threshold
        stack.append((right, rows[~go_left], depth + 1))
        stack.append((left, rows[go_left], depth + 1))
    return builder.build()


def _best_gain_split(Xn: np.ndarray, gn: np.ndarray, hn: np.ndarray,
                     params: BoostedParams) -> Optional[Tuple[int, float]]:
    """Exact greedy search over every feature and every distinct value boundary."""
    n = Xn.shape[0]
    lam = params.l2_lambda
    idx = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, idx, axis=0)
    G, H = gn.sum(), hn.sum()
    GL = np.cumsum(gn[idx], axis=0)[:-1]
    HL = np.cumsum(hn[idx], axis=0)[:-1]
    GR, HR = G - GL, H - HL
    gain = 0.5 * (GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - G ** 2 / (H + lam))
    valid = (xs[1:] > xs[:-1]) & (HL >= params.min_child_weight) & (HR >= params.min_child_weight)
    gain = np.where(valid, gain, -np.inf).T
    j, i = divmod(int(np.argmax(gain)), n - 1)
    if not gain[j, i] > 0:
        return None
    return j, _midpoint(xs[i, j], xs[i + 1, j])


def _grow_regression_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray,
                          params: BoostedParams) -> DecisionTree:
    builder = _TreeBuilder(n_outputs=1)
    stack = [(builder.add(0), np.arange(len(g)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        gn, hn = g[rows], h[rows]
        builder.value[node] = np.array([-gn.sum() / (hn.sum() + params.l2_lambda)])
        if depth >= params.max_depth or len(rows) < 2:
            continue
        split = _best_gain_split(X[rows], gn, hn, params)
        if split is None:
            continue
        feature, threshold = split
        builder.left[node] = builder.add(depth + 1)
        builder.right[node] = builder.add(depth + 1)
        left, right = builder.split(node, feature, threshold)
        go_left = X[rows, feature] <= threshold
        stack.append((right, rows[~go_left], depth + 1))
        stack.append((left, rows[go_left], depth + 1))
    return builder.build()


@dataclass(eq=False)
class ForestModel:
    kind: ClassifierKind
    trees: List[DecisionTree]
    params: ForestParams
    seed: int
    n_features: int
    warnings: List[str] = field(default_factory=list)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = _check_predict_input(X, self.n_features)
        total = np.zeros((X.shape[0], 2))
        for tree in self.trees:
            total += tree.predict_value(X)
        return total / len(self.trees)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "params": self.params.to_dict(),
            "seed": self.seed,
            "n_features": self.n_features,
            "warnings": list(self.warnings),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ForestModel":
        return cls(
            kind=ClassifierKind(data["kind"]),
            trees=[DecisionTree.from_dict(t) for t in data["trees"]],
            params=ForestParams.from_dict(data["params"]),
            seed=int(data["seed"]),
            n_features=int(data["n_features"]),
            warnings=list(data.get("warnings", [])),
        )


@dataclass(eq=False)
class BoostedModel:
    trees: List[DecisionTree]
    params: BoostedParams
    base_score: float
    seed: int
    n_features: int
    train_loss: List[float] = field(default_factory=list)  # log-loss after each round
    warnings: List[str] = field(default_factory=list)

    kind = ClassifierKind.BOOSTED

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = _check_predict_input(X, self.n_features)
        margin = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            margin += self.params.learning_rate * tree.predict_value(X)[:, 0]
        return margin

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "base_score": self.base_score,
            "seed": self.seed,
            "n_features": self.n_features,
            "train_loss": list(self.train_loss),
            "warnings": list(self.warnings),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BoostedModel":
        return cls(
            trees=[DecisionTree.from_dict(t) for t in data["trees"]],
            params=BoostedParams.from_dict(data["params"]),
            base_score=float(data["base_score"]),
            seed=int(data["seed"]),
            n_features=int(data["n_features"]),
            train_loss=[float(v) for v in data.get("train_loss", [])],
            warnings=list(data.get("warnings", [])),
        )


Model = Union[ForestModel, BoostedModel]


def _check_training_input(X: Any, y: Any) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"Expected X (n, d) and y (n,), got {X.shape} and {y.shape}")
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise DataError("Cannot fit a classifier on an empty matrix")
    if not np.all(np.isfinite(X)):
        raise DataError("Training features must be finite")
    if not np.isin(y, [WindowLabel.NORMAL, WindowLabel.AGITATION]).all():
        raise DataError("Training labels must be 0 (NORMAL) or 1 (AGITATION)")
    return X, y.astype(np.int64)


def _check_predict_input(X: Any, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ShapeMismatch(f"Model expects {n_features} features, got shape {X.shape}")
    return X


def _single_class(y: np.ndarray, warnings: List[str]) -> bool:
    if len(np.unique(y)) < 2:
        warnings.append(SINGLE_CLASS_WARNING)
        logger.warning("Training on a %s: only class %s present", SINGLE_CLASS_WARNING,
                       WindowLabel(int(y[0])).name)
        return True
    return False


def fit_forest(X: Any, y: Any, mode: ClassifierKind = ClassifierKind.RANDOM_FOREST,
               params: ForestParams = ForestParams(), seed: int = 0) -> ForestModel:
    """Bagged (RANDOM_FOREST) or fully randomized (EXTRA_TREES) gini trees."""
    if mode not in FOREST_KINDS:
        raise ConfigError(f"fit_forest does not build {mode.value} models")
    X, y = _check_training_input(X, y)
    warnings: List[str] = []
    _single_class(y, warnings)
    tree_seeds = expand_seed(seed, params.n_trees)
    randomized = mode is ClassifierKind.EXTRA_TREES
    n = len(y)

    def build(tree_seed: int) -> DecisionTree:
        rng = np.random.default_rng(tree_seed)
        if randomized:
            return _grow_classification_tree(X, y, rng, params, randomized=True)
        rows = rng.integers(0, n, size=n)
        return _grow_classification_tree(X[rows], y[rows], rng, params, randomized=False)

    if params.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=params.n_jobs) as pool:
            trees = list(pool.map(build, tree_seeds))
    else:
        trees = [build(s) for s in tree_seeds]

    logger.debug("Fitted %s with %d trees on %d rows (mean %.1f leaves)", mode.value, len(trees), n,
                 float(np.mean([t.n_leaves for t in trees])))
    return ForestModel(kind=mode, trees=trees, params=params, seed=seed,
                       n_features=X.shape[1], warnings=warnings)


def log_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1.0 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def fit_boosted(X: Any, y: Any, params: BoostedParams = BoostedParams(), seed: int = 0) -> BoostedModel:
    """Second-order logistic boosting with L2-regularized leaf values."""
    X, y = _check_training_input(X, y)
    warnings: List[str] = []
    target = y.astype(np.float64)
    positive_rate = float(np.clip(target.mean(), PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP))
    base_score = float(np.log(positive_rate / (1.0 - positive_rate)))
    model = BoostedModel(trees=[], params=params, base_score=base_score, seed=seed,
                         n_features=X.shape[1], warnings=warnings)
    if _single_class(y, warnings):
        return model

    margin = np.full(len(y), base_score)
    for round_index in range(params.n_rounds):
        p = expit(margin)
        tree = _grow_regression_tree(X, p - target, p * (1.0 - p), params)
        margin += params.learning_rate * tree.predict_value(X)[:, 0]
        model.trees.append(tree)
        model.train_loss.append(log_loss(target, expit(margin)))
    if model.train_loss:
        logger.debug("Fitted boosted model: %d rounds, final train log-loss %.5f",
                     model.n_rounds, model.train_loss[-1])
    return model


def fit_model(kind: ClassifierKind, X: Any, y: Any, seed: int = 0,
              forest: ForestParams = ForestParams(), boosted: BoostedParams = BoostedParams()) -> Model:
    if kind is ClassifierKind.BOOSTED:
        return fit_boosted(X, y, boosted, seed)
    return fit_forest(X, y, kind, forest, seed)


def predict_proba(model: Model, X: Any) -> np.ndarray:
    """(n, 2) array of (p_normal, p_agitation)."""
    return model.predict_proba(X)


def predict(model: Model, X: Any) -> np.ndarray:
    """Most probable class; ties go to NORMAL."""
    proba = predict_proba(model, X)
    return (proba[:, 1] > proba[:, 0]).astype(np.int8)


def save_model(model: Model, path: Union[str, Path]) -> str:
    kind = "boosted" if isinstance(model, BoostedModel) else "forest"
    return save_artifact(path, kind, model.to_dict())


def load_model(path: Union[str, Path]) -> Model:
    kind, payload = load_artifact(path)
    loaders: Dict[str, Callable[[Dict[str, Any]], Model]] = {
        "forest": ForestModel.from_dict,
        "boosted": BoostedModel.from_dict,
    }
    if kind not in loaders:
        raise CorruptModel(f"{path}: expected a classifier model, found {kind}")
    try:
        return loaders[kind](payload)
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptModel(f"{path}: incomplete {kind} payload ({e})") from e
