"""
Fast random forest over presorted attribute index lists.

Every attribute is sorted once per fit. Each tree filters those lists to its
in-bag rows, and every split partitions the node's lists stably into the two
children, so a node's split search is a single left-to-right sweep over
already-sorted rows: no sorting happens below the root.
"""

import json
import math
import logging
from dataclasses import dataclass, field, asdict, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

import seeding
from config_loader import N_TREES, MIN_LEAF, MAX_DEPTH, SEED, REFERENCE_MTRY

logger = logging.getLogger('dcnnfrf.forest')

FOREST_FORMAT = 'dcnnfrf-forest/1'
LEAF = -1


class ForestError(ValueError):
    """Base class for forest configuration and fitting failures."""


class EmptyNode(ForestError):
    pass


class MtryTooLarge(ForestError):
    pass


class NoOobVotes(ForestError):
    pass


class ShapeMismatch(ForestError):
    pass


def _as_matrix(X) -> np.ndarray:
    values = getattr(X, 'values', X)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ForestError(f"expected an n x f matrix, got shape {values.shape}")
    return values


@dataclass
class SortedIndexCache:
    """order[j] lists row indices ascending by attribute j (ties by row index)."""
    order: np.ndarray

    @property
    def n_features(self) -> int:
        return self.order.shape[0]

    @property
    def n_rows(self) -> int:
        return self.order.shape[1]


def build_sorted_cache(X) -> SortedIndexCache:
    values = _as_matrix(X)
    if values.shape[0] < 1:
        raise ForestError("cannot sort an empty matrix")
    order = np.argsort(values, axis=0, kind='stable').T
    return SortedIndexCache(order=np.ascontiguousarray(order))


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = N_TREES
    mtry: Optional[int] = None
    min_leaf: int = MIN_LEAF
    max_depth: Optional[int] = MAX_DEPTH
    seed: int = SEED

    def __post_init__(self):
        for name in ('n_trees', 'min_leaf'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ForestError(f"{name} must be a positive integer, got {value!r}")
        for name in ('mtry', 'max_depth'):
            value = getattr(self, name)
            if value is not None and (isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1):
                raise ForestError(f"{name} must be a positive integer or unset, got {value!r}")

    def fingerprint(self) -> str:
        depth = 'unlimited' if self.max_depth is None else self.max_depth
        return f"trees={self.n_trees} mtry={self.mtry} min_leaf={self.min_leaf} depth={depth}"


def default_mtry(n_features: int) -> int:
    """floor(log2 f) + 1."""
    return int(math.floor(math.log2(n_features))) + 1


def reference_mtry(dataset_name: str) -> Optional[int]:
    key = dataset_name.lower()
    for name, value in REFERENCE_MTRY.items():
        if name in key:
            return int(value)
    return None


def resolve_mtry(policy: Union[str, int, None], n_features: int, dataset_name: str = '') -> int:
    """mtry for a policy: 'formula', 'reference-table' (table value, clamped to f) or an explicit integer."""
    if policy is None or policy == 'formula':
        return default_mtry(n_features)
    if policy == 'reference-table':
        value = reference_mtry(dataset_name)
        if value is None:
            logger.warning(f"⚠️ No table mtry for '{dataset_name}', using floor(log2 f)+1")
            return default_mtry(n_features)
        return min(value, n_features)
    try:
        return int(policy)
    except (TypeError, ValueError):
        raise ForestError(f"unknown mtry policy {policy!r}")


@dataclass
class Tree:
    """Preorder node arrays. Leaves have attribute == -1; ``decrease`` is weight x Gini gain."""
    attribute: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    decrease: np.ndarray
    counts: np.ndarray

    @property
    def node_count(self) -> int:
        return self.attribute.size

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row (value <= threshold goes left)."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        while True:
            attr = self.attribute[node]
            active = np.flatnonzero(attr != LEAF)
            if active.size == 0:
                return node
            here = node[active]
            go_left = X[active, attr[active]] <= self.threshold[here]
            node[active] = np.where(go_left, self.left[here], self.right[here])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.counts[self.apply(X)], axis=1)


@dataclass
class Forest:
    trees: List[Tree]
    inbag: List[np.ndarray]
    oob_votes: np.ndarray
    config: ForestConfig
    n_classes: int
    n_features: int
    class_names: Optional[List[str]] = None
    nominal_values: Dict[int, List[str]] = field(default_factory=dict)


@dataclass
class SplitResult:
    attribute: int
    threshold: float
    gain: float


@dataclass
class OobEstimate:
    error: float
    evaluated_rows: int
    excluded_rows: int


def gini(counts: Sequence[int]) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise EmptyNode("Gini impurity of an empty node is undefined")
    p = counts / total
    return float(1.0 - np.sum(p * p))


def split_gain(left_counts: np.ndarray, right_counts: np.ndarray) -> np.ndarray:
    """Weighted Gini decrease of splitting parent = left + right.

    gini(P) - nL/n gini(L) - nR/n gini(R) = (SL/nL + SR/nR - SP/n) / n with S = sum of squared
    counts. Integer counts keep the result identical whether evaluated one split at a
    time or vectorised over a whole sweep. Last axis indexes classes.
    """
    left_counts = np.asarray(left_counts, dtype=np.int64)
    right_counts = np.asarray(right_counts, dtype=np.int64)
    parent = left_counts + right_counts
    n_left = left_counts.sum(axis=-1)
    n_right = right_counts.sum(axis=-1)
    n = n_left + n_right
    with np.errstate(divide='ignore', invalid='ignore'):
        return ((left_counts ** 2).sum(axis=-1) / n_left
                + (right_counts ** 2).sum(axis=-1) / n_right
                - (parent ** 2).sum(axis=-1) / n) / n


def midpoint(low: float, high: float) -> float:
    """Threshold between adjacent distinct values that keeps ``high`` on the right."""
    mid = (low + high) / 2.0
    if mid >= high or not np.isfinite(mid):
        mid = low
    return float(mid)


def _sweep(sorted_rows: np.ndarray, attrs: np.ndarray, X: np.ndarray, labels: np.ndarray,
           weights: np.ndarray, n_classes: int, min_leaf: int) -> Optional[SplitResult]:
    """Best split over ``attrs`` given each attribute's node rows in ascending order (k x m)."""
    k, m = sorted_rows.shape
    if m < 2:
        return None
    values = X[sorted_rows, attrs[:, None]]
    w = weights[sorted_rows]
    cum = np.zeros((k, m, n_classes), dtype=np.int64)
    cum[np.arange(k)[:, None], np.arange(m)[None, :], labels[sorted_rows]] = w
    np.cumsum(cum, axis=1, out=cum)

    left = cum[:, :-1, :]
    right = cum[:, -1:, :] - left
    n_left = left.sum(axis=-1)
    n_right = right.sum(axis=-1)
    valid = (values[:, :-1] < values[:, 1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    if not valid.any():
        return None
    gains = np.where(valid, split_gain(left, right), -np.inf)

    best = None
    for row in range(k):  # attrs ascending: strict '>' keeps the lower attribute on ties
        if not valid[row].any():
            continue
        position = int(np.argmax(gains[row]))  # first maximum = lowest threshold
        gain = float(gains[row, position])
        if best is None or gain > best.gain:
            threshold = midpoint(values[row, position], values[row, position + 1])
            best = SplitResult(attribute=int(attrs[row]), threshold=threshold, gain=gain)
    return best


def best_split(weights: np.ndarray, attrs: Sequence[int], cache: SortedIndexCache, X, labels: np.ndarray,
               n_classes: Optional[int] = None, min_leaf: int = 1) -> Optional[SplitResult]:
    """Best Gini split of the rows with weight > 0 over the candidate attributes.

    Returns None when the rows are pure or no candidate attribute has two distinct values.
    """
    X = _as_matrix(X)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.int64)
    n_classes = n_classes or int(labels.max()) + 1
    attrs = np.sort(np.asarray(attrs, dtype=np.int64))
    member = weights > 0
    if np.unique(labels[member]).size < 2:
        return None
    order = cache.order[attrs]
    keep = member[order]
    sorted_rows = order[keep].reshape(attrs.size, -1)
    return _sweep(sorted_rows, attrs, X, labels, weights, n_classes, min_leaf)


def bootstrap_sample(n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """n uniform draws with replacement: (in-bag count per row, out-of-bag rows)."""
    if n < 1:
        raise ForestError("bootstrap needs at least one row")
    inbag = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.int64)
    return inbag, np.flatnonzero(inbag == 0)


def grow_tree(inbag: np.ndarray, cache: SortedIndexCache, X, labels: np.ndarray, cfg: ForestConfig,
              rng: np.random.Generator, n_classes: Optional[int] = None) -> Tree:
    """Grow one tree depth-first, left child first, over the in-bag multiset.

    A node becomes a leaf when it is pure, when it is at max_depth, when it holds
    fewer than 2*min_leaf weighted rows, or when none of its mtry randomly drawn
    attributes admits a valid split. Attributes are drawn only for nodes that pass
    the first three checks.
    """
    X = _as_matrix(X)
    labels = np.asarray(labels, dtype=np.int64)
    inbag = np.asarray(inbag, dtype=np.int64)
    n_classes = n_classes or int(labels.max()) + 1
    n_features = cache.n_features
    mtry = cfg.mtry or default_mtry(n_features)
    if inbag.sum() < 1:
        raise ForestError("a tree needs at least one in-bag row")

    keep = inbag[cache.order] > 0
    root_rows = cache.order[keep].reshape(n_features, -1)

    attribute, threshold, left, right, decrease, counts = [], [], [], [], [], []
    goes_left = np.zeros(X.shape[0], dtype=bool)
    stack = [(root_rows, 0, -1, False)]
    while stack:
        rows, depth, parent, is_right = stack.pop()
        node_id = len(attribute)
        if parent >= 0:
            (right if is_right else left)[parent] = node_id

        node_counts = np.bincount(labels[rows[0]], weights=inbag[rows[0]], minlength=n_classes).astype(np.int64)
        weight = int(node_counts.sum())
        attribute.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        decrease.append(0.0)
        counts.append(node_counts)

        if (np.count_nonzero(node_counts) < 2
                or (cfg.max_depth is not None and depth >= cfg.max_depth)
                or weight < 2 * cfg.min_leaf):
            continue
        attrs = np.sort(rng.choice(n_features, size=mtry, replace=False))
        split = _sweep(rows[attrs], attrs, X, labels, inbag, n_classes, cfg.min_leaf)
        if split is None:
            continue

        attribute[node_id] = split.attribute
        threshold[node_id] = split.threshold
        decrease[node_id] = weight * split.gain
        members = rows[0]
        goes_left[members] = X[members, split.attribute] <= split.threshold
        mask = goes_left[rows]
        n_left = int(mask[0].sum())
        left_rows = rows[mask].reshape(n_features, n_left)
        right_rows = rows[~mask].reshape(n_features, members.size - n_left)
        goes_left[members] = False
        stack.append((right_rows, depth + 1, node_id, True))
        stack.append((left_rows, depth + 1, node_id, False))

    return Tree(attribute=np.array(attribute, dtype=np.int64),
                threshold=np.array(threshold, dtype=np.float64),
                left=np.array(left, dtype=np.int64),
                right=np.array(right, dtype=np.int64),
                decrease=np.array(decrease, dtype=np.float64),
                counts=np.vstack(counts))


def _grow_member(index: int, cache: SortedIndexCache, X: np.ndarray, labels: np.ndarray,
                 cfg: ForestConfig, n_classes: int):
    rng = seeding.derive_rng(cfg.seed, seeding.FOREST, index)
    inbag, oob = bootstrap_sample(X.shape[0], rng)
    tree = grow_tree(inbag, cache, X, labels, cfg, rng, n_classes=n_classes)
    votes = np.zeros((X.shape[0], n_classes), dtype=np.int64)
    if oob.size:
        votes[oob, tree.predict(X[oob])] = 1
    return tree, inbag, votes


def fit_forest(X, labels: Sequence[int], cfg: ForestConfig, n_classes: Optional[int] = None,
               threads: Optional[int] = None, dataset_name: str = '') -> Forest:
    """Bag ``cfg.n_trees`` trees; tree t draws from the (seed, t) stream so threads never change the result."""
    X = _as_matrix(X)
    labels = np.asarray(labels, dtype=np.int64)
    n, f = X.shape
    n_classes = n_classes or int(labels.max()) + 1
    if n < 2:
        raise ForestError(f"need at least two rows to fit a forest, got {n}")
    if n_classes < 2:
        raise ForestError(f"need at least two classes, got {n_classes}")
    if labels.shape != (n,):
        raise ForestError(f"{labels.size} labels for {n} rows")
    mtry = cfg.mtry or default_mtry(f)
    if mtry > f:
        raise MtryTooLarge(f"mtry={mtry} exceeds the {f} available attributes")
    cfg = replace(cfg, mtry=mtry)

    cache = build_sorted_cache(X)
    logger.info(f"🌲 Growing {cfg.n_trees} trees on {dataset_name or 'features'}: n={n}, f={f}, mtry={mtry}")
    grown = Parallel(n_jobs=threads or 1, prefer='threads')(
        delayed(_grow_member)(t, cache, X, labels, cfg, n_classes) for t in range(cfg.n_trees))

    oob_votes = np.zeros((n, n_classes), dtype=np.int64)
    for _, _, votes in grown:  # tree-index order
        oob_votes += votes
    forest = Forest(trees=[g[0] for g in grown], inbag=[g[1] for g in grown], oob_votes=oob_votes,
                    config=cfg, n_classes=n_classes, n_features=f)
    logger.debug(f"🌲 Forest holds {sum(t.node_count for t in forest.trees)} nodes")
    return forest


def predict_proba_forest(forest: Forest, X) -> np.ndarray:
    totals = _summed_leaf_counts(forest, X).astype(np.float64)
    return totals / np.maximum(totals.sum(axis=1, keepdims=True), 1.0)


def _summed_leaf_counts(forest: Forest, X) -> np.ndarray:
    X = _as_matrix(X)
    if X.shape[1] != forest.n_features:
        raise ShapeMismatch(f"forest was fitted on {forest.n_features} attributes, got {X.shape[1]}")
    totals = np.zeros((X.shape[0], forest.n_classes), dtype=np.int64)
    for tree in forest.trees:
        totals += tree.counts[tree.apply(X)]
    return totals


def predict_forest(forest: Forest, X) -> np.ndarray:
    """Argmax of leaf class counts summed over trees; ties go to the lowest class."""
    return np.argmax(_summed_leaf_counts(forest, X), axis=1)


def oob_error(forest: Forest, labels: Sequence[int]) -> OobEstimate:
    labels = np.asarray(labels, dtype=np.int64)
    voted = forest.oob_votes.sum(axis=1) > 0
    if not voted.any():
        raise NoOobVotes("no row was out-of-bag for any tree")
    wrong = np.argmax(forest.oob_votes[voted], axis=1) != labels[voted]
    return OobEstimate(error=float(wrong.mean()), evaluated_rows=int(voted.sum()),
                       excluded_rows=int((~voted).sum()))


def feature_importance(forest: Forest) -> np.ndarray:
    """Mean decrease in Gini impurity per attribute, normalised to sum to 1."""
    total = np.zeros(forest.n_features, dtype=np.float64)
    for tree in forest.trees:
        split = tree.attribute != LEAF
        per_tree = np.bincount(tree.attribute[split], weights=tree.decrease[split], minlength=forest.n_features)
        total += per_tree / tree.counts[0].sum()
    total /= len(forest.trees)
    norm = total.sum()
    return total / norm if norm > 0 else total


def importance_report(forest: Forest, names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    scores = feature_importance(forest)
    names = list(names) if names is not None else [f"f{j}" for j in range(forest.n_features)]
    frame = pd.DataFrame({'attribute': names, 'importance': scores})
    return frame.sort_values('importance', ascending=False, kind='stable').reset_index(drop=True)


# --- persistence ---

def _tree_to_dict(tree: Tree) -> dict:
    nodes = []
    for i in range(tree.node_count):
        nodes.append([int(tree.attribute[i]), float(tree.threshold[i]), int(tree.left[i]), int(tree.right[i]),
                      float(tree.decrease[i]), tree.counts[i].tolist()])
    return {'nodes': nodes}


def _tree_from_dict(data: dict) -> Tree:
    nodes = data['nodes']
    return Tree(attribute=np.array([nd[0] for nd in nodes], dtype=np.int64),
                threshold=np.array([nd[1] for nd in nodes], dtype=np.float64),
                left=np.array([nd[2] for nd in nodes], dtype=np.int64),
                right=np.array([nd[3] for nd in nodes], dtype=np.int64),
                decrease=np.array([nd[4] for nd in nodes], dtype=np.float64),
                counts=np.array([nd[5] for nd in nodes], dtype=np.int64))


def save_forest(forest: Forest, path: str) -> None:
    """JSON: config, per-tree preorder node lists [attribute, threshold, left, right, decrease, counts],
    in-bag counts, OOB votes, class names and nominal value tables. Python's float repr makes the
    round trip exact."""
    payload = {
        'format': FOREST_FORMAT,
        'config': asdict(forest.config),
        'n_classes': forest.n_classes,
        'n_features': forest.n_features,
        'trees': [_tree_to_dict(t) for t in forest.trees],
        'inbag': [b.tolist() for b in forest.inbag],
        'oob_votes': forest.oob_votes.tolist(),
        'class_names': forest.class_names,
        'nominal_values': {str(j): values for j, values in sorted(forest.nominal_values.items())},
    }
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, separators=(',', ':'))
    logger.info(f"💾 Forest written to {path}")


def load_forest(path: str) -> Forest:
    with open(path, 'r', encoding='utf-8') as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ForestError(f"{path}: not a forest file ({e})")
    if not isinstance(payload, dict) or payload.get('format') != FOREST_FORMAT:
        raise ForestError(f"{path}: unsupported forest format")
    return Forest(trees=[_tree_from_dict(t) for t in payload['trees']],
                  inbag=[np.array(b, dtype=np.int64) for b in payload['inbag']],
                  oob_votes=np.array(payload['oob_votes'], dtype=np.int64).reshape(-1, payload['n_classes']),
                  config=ForestConfig(**payload['config']),
                  n_classes=int(payload['n_classes']),
                  n_features=int(payload['n_features']),
                  class_names=payload.get('class_names'),
                  nominal_values={int(j): v for j, v in (payload.get('nominal_values') or {}).items()})
