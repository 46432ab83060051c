"""Multiclass gradient-boosted trees with second-order softmax boosting.

Split finding is exact greedy: every midpoint between consecutive distinct
present values of every feature is scored, once with the missing-value
instances sent left and once with them sent right.  The better direction is
stored on the node as its default, so missing values at prediction time follow
the direction learned during training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ModelFormatError, TrainingError
from .labels import N_CLASSES, ORGANS

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PROB_FLOOR = 1e-15
HESS_FLOOR = 1e-16
# Gains closer than this (relative to the node's score magnitude) count as tied,
# so that candidates inducing the same partition resolve by the tie-break order
# rather than by summation rounding.
TIE_RTOL = 1e-10


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.05
    max_depth: int = 4
    n_rounds: int = 200
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ValueError("reg_lambda, gamma and min_child_weight must be >= 0")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")


# ---------------------------------------------------------------------------
# loss


def softmax(margins) -> np.ndarray:
    """Softmax over the last axis, with the row maximum subtracted first."""
    z = np.asarray(margins, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mlogloss(probabilities, labels) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("mlogloss needs a non-empty (n_samples, n_classes) array")
    if y.shape != (p.shape[0],):
        raise ValueError("labels must have one entry per sample")
    picked = np.maximum(p[np.arange(len(y)), y], PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


def grad_hess(probabilities, label: int, k: int) -> tuple[float, float]:
    """Gradient and hessian of -ln p[label] with respect to margin k."""
    pk = float(probabilities[k])
    g = pk - (1.0 if label == k else 0.0)
    return g, pk * (1.0 - pk)


# ---------------------------------------------------------------------------
# trees


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    default_left: bool
    gain: float


class Tree:
    """A regression tree stored as flat node arrays in preorder.

    ``feature[i] == -1`` marks node ``i`` as a leaf holding ``value[i]``.
    Internal nodes send ``x < threshold`` left, ``x >= threshold`` right and
    missing values to the side named by ``default_left``.
    """

    def __init__(self, feature, threshold, default_left, left, right, value, gain=None):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.default_left = np.asarray(default_left, dtype=bool)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.gain = np.zeros(len(self.feature)) if gain is None else np.asarray(gain, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def depth(self) -> int:
        def _depth(node):
            if self.is_leaf(node):
                return 0
            return 1 + max(_depth(self.left[node]), _depth(self.right[node]))

        return _depth(0)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            idx = rows[active]
            cur = node[idx]
            x = X[idx, self.feature[cur]]
            go_left = np.where(np.isnan(x), self.default_left[cur], x < self.threshold[cur])
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        """Unscaled leaf weight for each row of ``X``."""
        return self.value[self.apply(X)]

    def to_nodes(self) -> list[dict]:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                nodes.append({"id": i, "leaf": float(self.value[i])})
            else:
                nodes.append(
                    {
                        "id": i,
                        "feature": int(self.feature[i]),
                        "threshold": float(self.threshold[i]),
                        "default_left": bool(self.default_left[i]),
                        "left": int(self.left[i]),
                        "right": int(self.right[i]),
                        "gain": float(self.gain[i]),
                    }
                )
        return nodes

    @classmethod
    def from_nodes(cls, nodes: Sequence[dict], n_features: int) -> "Tree":
        n = len(nodes)
        if n == 0:
            raise ModelFormatError("tree has no nodes")
        cols = {k: [] for k in ("feature", "threshold", "default_left", "left", "right", "value", "gain")}
        for i, node in enumerate(nodes):
            if node.get("id") != i:
                raise ModelFormatError(f"node ids must be 0..{n - 1} in order")
            if "leaf" in node:
                cols["feature"].append(-1)
                cols["threshold"].append(0.0)
                cols["default_left"].append(False)
                cols["left"].append(-1)
                cols["right"].append(-1)
                cols["value"].append(float(node["leaf"]))
                cols["gain"].append(0.0)
                continue
            try:
                f, l, r = int(node["feature"]), int(node["left"]), int(node["right"])
                thr = float(node["threshold"])
                dl = node["default_left"]
                gain = float(node.get("gain", 0.0))
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFormatError(f"malformed node {i}: {exc}") from None
            if not 0 <= f < n_features:
                raise ModelFormatError(f"node {i}: feature index {f} out of range")
            # preorder layout: children always come after their parent
            if not (i < l < n and i < r < n):
                raise ModelFormatError(f"node {i}: invalid child reference")
            if not isinstance(dl, bool):
                raise ModelFormatError(f"node {i}: default_left must be a boolean")
            cols["feature"].append(f)
            cols["threshold"].append(thr)
            cols["default_left"].append(dl)
            cols["left"].append(l)
            cols["right"].append(r)
            cols["value"].append(0.0)
            cols["gain"].append(gain)
        return cls(**cols)


def _midpoints(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    mid = 0.5 * (lo + hi)
    # adjacent floats can round the midpoint down onto lo
    return np.where(mid > lo, mid, hi)


def find_best_split(X, g, h, hp: Hyperparams, instances=None) -> Split | None:
    """Best (feature, threshold, default direction) for one node, or None.

    Candidates whose children fall below ``min_child_weight`` are skipped.
    Ties go to the lower feature index, then the lower threshold, then
    ``default_left=True``.
    """
    X = np.asarray(X, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if instances is not None:
        X, g, h = X[instances], g[instances], h[instances]
    n, n_feat = X.shape
    if n < 2:
        return None

    lam = hp.reg_lambda
    order = np.argsort(X, axis=0, kind="stable")  # NaN sorts last
    xs = np.take_along_axis(X, order, axis=0)
    present = ~np.isnan(xs)
    gs = np.where(present, g[order], 0.0)
    hs = np.where(present, h[order], 0.0)
    g_miss = np.where(present, 0.0, g[order]).sum(axis=0)
    h_miss = np.where(present, 0.0, h[order]).sum(axis=0)

    # position i splits sorted present values into [0..i] and [i+1..]
    gl = np.cumsum(gs, axis=0)[:-1]
    hl = np.cumsum(hs, axis=0)[:-1]
    candidate = present[1:] & (xs[1:] != xs[:-1])
    if not candidate.any():
        return None

    G, H = g.sum(), h.sum()
    parent = G * G / max(H + lam, HESS_FLOOR)

    # axis 2: 0 -> missing go left, 1 -> missing go right
    GL = np.stack([gl + g_miss, gl], axis=2)
    HL = np.stack([hl + h_miss, hl], axis=2)
    GR = G - GL
    HR = H - HL
    with np.errstate(invalid="ignore", divide="ignore"):
        score = GL * GL / np.maximum(HL + lam, HESS_FLOOR) + GR * GR / np.maximum(HR + lam, HESS_FLOOR)
    gain = 0.5 * (score - parent) - hp.gamma
    ok = candidate[:, :, None] & (HL >= hp.min_child_weight) & (HR >= hp.min_child_weight)
    gain = np.where(ok, gain, -np.inf)

    # canonical tie-break order is (feature, position, direction)
    flat = np.transpose(gain, (1, 0, 2)).ravel()
    best = flat.max()
    if not best > 0.0:
        return None
    tol = TIE_RTOL * (0.5 * parent + best + abs(hp.gamma))
    pick = int(np.flatnonzero(flat >= best - tol)[0])
    feature, rest = divmod(pick, (n - 1) * 2)
    pos, direction = divmod(rest, 2)
    threshold = float(_midpoints(xs[pos, feature], xs[pos + 1, feature]))
    return Split(feature, threshold, direction == 0, float(flat[pick]))


def leaf_weight(g, h, reg_lambda: float) -> float:
    return float(-np.sum(g) / max(np.sum(h) + reg_lambda, HESS_FLOOR))


def build_tree(X, g, h, hp: Hyperparams, instances=None) -> Tree:
    """Grow one tree depth-first to ``hp.max_depth``; leaf weights are unscaled."""
    X = np.asarray(X, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    idx = np.arange(len(X)) if instances is None else np.asarray(instances, dtype=np.int64)
    if len(idx) == 0:
        raise TrainingError("cannot build a tree on an empty instance set")

    feature, threshold, default_left, left, right, value, gain = [], [], [], [], [], [], []

    def new_node() -> int:
        for col in (feature, left, right):
            col.append(-1)
        threshold.append(0.0)
        default_left.append(False)
        value.append(0.0)
        gain.append(0.0)
        return len(feature) - 1

    def grow(rows: np.ndarray, depth: int) -> int:
        node = new_node()
        split = None
        if depth < hp.max_depth:
            split = find_best_split(X[rows], g[rows], h[rows], hp)
        if split is None:
            value[node] = leaf_weight(g[rows], h[rows], hp.reg_lambda)
            return node
        x = X[rows, split.feature]
        go_left = np.where(np.isnan(x), split.default_left, x < split.threshold)
        feature[node] = split.feature
        threshold[node] = split.threshold
        default_left[node] = split.default_left
        gain[node] = split.gain
        left[node] = grow(rows[go_left], depth + 1)
        right[node] = grow(rows[~go_left], depth + 1)
        return node

    grow(idx, 0)
    return Tree(feature, threshold, default_left, left, right, value, gain)


# ---------------------------------------------------------------------------
# boosted model


@dataclass
class BoostedModel:
    """``trees[r * n_classes + k]`` is the round-r tree for class k."""

    trees: list[Tree]
    hyperparams: Hyperparams
    base_margin: np.ndarray | None = None
    organ_order: tuple[str, ...] = ORGANS
    class_order: tuple[int, ...] = tuple(range(N_CLASSES))
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        K = self.hyperparams.n_classes
        if self.base_margin is None:
            self.base_margin = np.zeros(K)
        self.base_margin = np.asarray(self.base_margin, dtype=np.float64)
        self.organ_order = tuple(self.organ_order)
        self.class_order = tuple(int(c) for c in self.class_order)
        if len(self.trees) % K:
            raise ModelFormatError(f"{len(self.trees)} trees is not a multiple of {K} classes")
        if self.base_margin.shape != (K,) or len(self.class_order) != K:
            raise ModelFormatError("base_margin and class_order must have one entry per class")

    @property
    def n_classes(self) -> int:
        return self.hyperparams.n_classes

    @property
    def n_rounds(self) -> int:
        return len(self.trees) // self.n_classes

    def predict_margins(self, X) -> np.ndarray:
        """Margins for a single vector (shape ``(K,)``) or a batch (``(n, K)``)."""
        X = np.asarray(getattr(X, "values", X), dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != len(self.organ_order):
            raise ValueError(f"expected {len(self.organ_order)} features, got {X.shape[1]}")
        K = self.n_classes
        lr = self.hyperparams.learning_rate
        margins = np.tile(self.base_margin, (len(X), 1))
        for i, tree in enumerate(self.trees):
            margins[:, i % K] += lr * tree.predict(X)
        return margins[0] if single else margins

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.predict_margins(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_margins(X), axis=-1)

    # -- persistence --------------------------------------------------------

    def to_dict(self) -> dict:
        K = self.n_classes
        return {
            "schema_version": SCHEMA_VERSION,
            "hyperparams": asdict(self.hyperparams),
            "class_order": list(self.class_order),
            "organ_order": list(self.organ_order),
            "base_margin": [float(b) for b in self.base_margin],
            "trees": [
                {"class": i % K, "round": i // K, "nodes": tree.to_nodes()}
                for i, tree in enumerate(self.trees)
            ],
            "history": {k: [float(v) for v in vals] for k, vals in self.history.items()},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BoostedModel":
        if not isinstance(doc, dict):
            raise ModelFormatError("model document must be a JSON object")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ModelFormatError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        for key in ("hyperparams", "class_order", "organ_order", "base_margin", "trees"):
            if key not in doc:
                raise ModelFormatError(f"model document lacks {key!r}")
        try:
            hp = Hyperparams(**doc["hyperparams"])
        except (TypeError, ValueError) as exc:
            raise ModelFormatError(f"bad hyperparams: {exc}") from None
        organ_order = doc["organ_order"]
        if not isinstance(organ_order, list) or not organ_order:
            raise ModelFormatError("organ_order must be a non-empty list")
        K = hp.n_classes
        trees = []
        for i, rec in enumerate(doc["trees"]):
            if rec.get("class") != i % K or rec.get("round") != i // K:
                raise ModelFormatError(f"tree {i} is out of round-major order")
            trees.append(Tree.from_nodes(rec.get("nodes", []), len(organ_order)))
        if len(trees) != hp.n_rounds * K:
            raise ModelFormatError(f"expected {hp.n_rounds * K} trees, found {len(trees)}")
        return cls(
            trees=trees,
            hyperparams=hp,
            base_margin=doc["base_margin"],
            organ_order=organ_order,
            class_order=doc["class_order"],
            history=doc.get("history", {}),
        )


def save_model(model: BoostedModel, path: str | Path) -> None:
    # json writes floats with repr, which round-trips exactly
    Path(path).write_text(json.dumps(model.to_dict(), indent=1) + "\n")


def load_model(path: str | Path) -> BoostedModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: cannot read model ({exc})") from None
    return BoostedModel.from_dict(doc)


# ---------------------------------------------------------------------------
# training


def train(table, hp: Hyperparams | None = None, eval_table=None) -> BoostedModel:
    """Fit ``hp.n_rounds`` rounds of one tree per class on a FeatureTable.

    Every round computes softmax probabilities from the accumulated margins,
    grows the K class trees from those probabilities, then adds
    ``learning_rate * leaf weight`` to the margins.  mlogloss on the training
    table (and on ``eval_table`` if given) is recorded after each round.
    """
    hp = hp or Hyperparams()
    X, y = table.X, table.phases
    if len(y) == 0:
        raise TrainingError("training table is empty")
    if X.shape[1] != len(ORGANS):
        raise TrainingError(f"expected {len(ORGANS)} features, got {X.shape[1]}")
    if len(np.unique(y)) < 2:
        raise TrainingError("training table needs at least two distinct phase labels")
    if y.max() >= hp.n_classes:
        raise TrainingError(f"label {y.max()} outside {hp.n_classes} classes")

    K, lr = hp.n_classes, hp.learning_rate
    onehot = np.eye(K)[y]
    margins = np.zeros((len(y), K))
    eval_margins = None
    if eval_table is not None and len(eval_table):
        eval_margins = np.zeros((len(eval_table), K))

    trees: list[Tree] = []
    history = {"train_mlogloss": []}
    if eval_margins is not None:
        history["eval_mlogloss"] = []

    for r in range(hp.n_rounds):
        p = softmax(margins)
        grad = p - onehot
        hess = p * (1.0 - p)
        delta = np.empty_like(margins)
        for k in range(K):
            tree = build_tree(X, grad[:, k], hess[:, k], hp)
            trees.append(tree)
            delta[:, k] = lr * tree.predict(X)
            if eval_margins is not None:
                eval_margins[:, k] += lr * tree.predict(eval_table.X)
        margins += delta
        history["train_mlogloss"].append(mlogloss(softmax(margins), y))
        if eval_margins is not None:
            history["eval_mlogloss"].append(mlogloss(softmax(eval_margins), eval_table.phases))
        if (r + 1) % 50 == 0:
            log.debug("round %d train mlogloss %.6f", r + 1, history["train_mlogloss"][-1])

    return BoostedModel(trees=trees, hyperparams=hp, history=history)
