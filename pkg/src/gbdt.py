"""Gradient-boosted regression trees with squared-error loss.

Trees are grown by exact greedy search: for every feature the node's rows
are scanned in sorted order and every boundary between distinct values is
a candidate, with the midpoint as threshold. Rows with x < threshold go
left. The split with the largest reduction in squared error wins; ties go
to the lowest feature index, then the lowest threshold. A leaf stores the
mean residual of its rows; predictions add learning_rate * leaf value.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

LEAF = -1
GAIN_TOLERANCE = 1e-12


class GBDTError(Exception):
    """Raised when boosting cannot run on the given data."""


@dataclass(frozen=True)
class GBDTParams:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 20

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 1 or self.min_leaf < 1:
            raise GBDTError(f"Invalid boosting parameters: {self}")
        if not 0 < self.learning_rate <= 1:
            raise GBDTError(f"learning_rate must be in (0, 1], got {self.learning_rate}")


@dataclass(eq=False)
class RegressionTree:
    """Binary tree stored as parallel node arrays; node 0 is the root.

    Leaves have feature == LEAF and carry value; internal nodes route rows
    with x[feature] < threshold to left, the rest to right.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def is_leaf(self) -> bool:
        return self.n_nodes == 1

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = self.feature[node] != LEAF
        while np.any(active):
            rows = np.flatnonzero(active)
            nd = node[rows]
            go_left = x[rows, self.feature[nd]] < self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])
            active[rows] = self.feature[node[rows]] != LEAF
        return self.value[node]


@dataclass(eq=False)
class GBDTModel:
    base_score: float
    trees: list
    learning_rate: float
    max_depth: int
    min_leaf: int
    feature_names: tuple
    train_mse: list = field(default_factory=list)

    def __post_init__(self):
        n_features = len(self.feature_names)
        for tree in self.trees:
            used = tree.feature[tree.feature != LEAF]
            if used.size and used.max() >= n_features:
                raise GBDTError(f"Tree uses feature {int(used.max())} but only {n_features} are named")

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_rows(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = np.full(x.shape[0], self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree.predict(x)
        return out


@dataclass
class _Split:
    gain: float
    feature: int
    threshold: float
    left_rows: np.ndarray
    right_rows: np.ndarray


def find_best_split(x: np.ndarray, residual: np.ndarray, rows: np.ndarray, sorted_index: list,
                    min_leaf: int) -> Optional[_Split]:
    """Exact greedy split search over the given rows.

    Args:
        x: (N, F) features.
        residual: (N,) current residuals.
        rows: Boolean (N,) membership mask of the node.
        sorted_index: Per-feature row order sorted by feature value.
        min_leaf: Minimum rows on either side.

    Returns:
        The best split, or None when no split improves the squared error.
    """
    n = int(rows.sum())
    if n < 2 * min_leaf:
        return None
    r_node = np.sort(residual[rows])
    total = r_node.sum()
    parent = total * total / n
    sse = float(np.sum((r_node - total / n) ** 2))
    if sse <= GAIN_TOLERANCE * float(np.sum(r_node * r_node)):
        return None
    best = None
    best_gain = GAIN_TOLERANCE * sse
    for f, order in enumerate(sorted_index):
        idx = order[rows[order]]
        xs = x[idx, f]
        csum = np.cumsum(residual[idx])
        counts = np.arange(1, n)
        left_sum = csum[:-1]
        right_sum = total - left_sum
        gain = left_sum * left_sum / counts + right_sum * right_sum / (n - counts) - parent
        ok = (xs[:-1] < xs[1:]) & (counts >= min_leaf) & (n - counts >= min_leaf)
        if not np.any(ok):
            continue
        gain = np.where(ok, gain, -np.inf)
        pos = int(np.argmax(gain))
        if gain[pos] > best_gain and gain[pos] > 0:
            lo, hi = xs[pos], xs[pos + 1]
            threshold = 0.5 * (lo + hi)
            if not lo < threshold:
                threshold = hi
            best_gain = gain[pos]
            best = _Split(float(gain[pos]), f, float(threshold), idx[:pos + 1], idx[pos + 1:])
    return best


def build_tree(x: np.ndarray, residual: np.ndarray, sorted_index: list, max_depth: int, min_leaf: int) -> RegressionTree:
    """Grow one regression tree on the residuals."""
    n = x.shape[0]
    feature, threshold, left, right, value = [], [], [], [], []

    def add_leaf(mask):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(np.sort(residual[mask]).mean()))
        return len(feature) - 1

    def grow(mask, depth):
        split = find_best_split(x, residual, mask, sorted_index, min_leaf) if depth < max_depth else None
        if split is None:
            return add_leaf(mask)
        node = len(feature)
        feature.append(split.feature)
        threshold.append(split.threshold)
        left.append(LEAF)
        right.append(LEAF)
        value.append(0.0)
        left_mask = np.zeros(n, dtype=bool)
        left_mask[split.left_rows] = True
        right_mask = np.zeros(n, dtype=bool)
        right_mask[split.right_rows] = True
        left[node] = grow(left_mask, depth + 1)
        right[node] = grow(right_mask, depth + 1)
        return node

    grow(np.ones(n, dtype=bool), 0)
    return RegressionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
    )


def fit_gbdt_arrays(x: np.ndarray, y: np.ndarray, feature_names, params: GBDTParams = GBDTParams()) -> GBDTModel:
    """Boost squared-error trees on raw arrays.

    Boosting stops early once a round's tree cannot split at its root.

    Raises:
        GBDTError: If there are fewer than 2 * min_leaf rows.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n < 2 * params.min_leaf:
        raise GBDTError(f"Need at least {2 * params.min_leaf} rows for min_leaf={params.min_leaf}, got {n}")
    base = float(np.sort(y).mean())
    pred = np.full(n, base)
    sorted_index = [np.argsort(x[:, f], kind="stable") for f in range(x.shape[1])]
    trees = []
    history = [float(np.mean((y - pred) ** 2))]
    for round_no in range(params.n_trees):
        residual = y - pred
        tree = build_tree(x, residual, sorted_index, params.max_depth, params.min_leaf)
        if tree.is_leaf:
            logger.debug("Boosting stopped after %d trees: no split improves the fit", round_no)
            break
        trees.append(tree)
        pred = pred + params.learning_rate * tree.predict(x)
        history.append(float(np.mean((y - pred) ** 2)))
    logger.info("Fitted %d trees on %d rows x %d features (train MSE %.6g -> %.6g)",
                len(trees), n, x.shape[1], history[0], history[-1])
    return GBDTModel(
        base_score=base,
        trees=trees,
        learning_rate=params.learning_rate,
        max_depth=params.max_depth,
        min_leaf=params.min_leaf,
        feature_names=tuple(feature_names),
        train_mse=history,
    )
