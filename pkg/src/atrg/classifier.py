"""Token-level hallucination classifier: Newton-boosted regression trees.

Trees are grown greedily by exact enumeration of split points. Each node
carries gradient and hessian sums of the logistic loss; leaf weights are
``-soft_threshold(G, alpha) / (H + lambda)`` and a split is admissible only
if both children keep a hessian sum of at least ``min_child_weight``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attribution import AttributionMatrix, attribution_entropy, attribution_gradient_feature

FEATURE_NAMES = ("source_entropy", "target_entropy", "source_gradient", "target_gradient")


@dataclass
class EnsembleConfig:
    n_estimators: int = 15
    max_depth: int = 6
    subsample: float = 0.8
    colsample: float = 0.8
    min_child_weight: float = 3.0
    reg_lambda: float = 1.0
    reg_alpha: float = 1.0
    learning_rate: float = 0.3
    early_stopping_rounds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1 or self.max_depth < 1:
            raise ValueError("n_estimators and max_depth must be positive")
        if not (0 < self.subsample <= 1 and 0 < self.colsample <= 1):
            raise ValueError("subsample ratios must lie in (0, 1]")
        if self.min_child_weight <= 0 or self.learning_rate <= 0:
            raise ValueError("min_child_weight and learning_rate must be positive")
        if self.reg_lambda <= 0 or self.reg_alpha < 0:
            raise ValueError("reg_lambda must be positive and reg_alpha non-negative")


# ---------------------------------------------------------------- features


def extract_token_features(matrix: AttributionMatrix, t: int) -> np.ndarray:
    """Features of the token generated at step ``t`` from steps 0..t only."""
    if not 0 <= t < matrix.steps:
        raise IndexError(f"timestep {t} out of range for T={matrix.steps}")
    sub = matrix.truncate(t)
    return np.array(
        [
            attribution_entropy(matrix.source[t], matrix.source_mask),
            attribution_entropy(matrix.target[t, : t + 1]) if t else 0.0,
            attribution_gradient_feature(sub, "source"),
            attribution_gradient_feature(sub, "target") if t else 0.0,
        ]
    )


def sentence_token_features(matrix: AttributionMatrix) -> np.ndarray:
    return np.stack([extract_token_features(matrix, t) for t in range(matrix.steps)])


# ---------------------------------------------------------------- trees


def _soft(g: float, alpha: float) -> float:
    return float(np.sign(g) * max(abs(g) - alpha, 0.0))


@dataclass
class Node:
    feature: int = -1
    threshold: float | None = None
    left: int = -1
    right: int = -1
    leaf_value: float | None = None


@dataclass
class Tree:
    nodes: list[Node] = field(default_factory=list)

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(len(X))
        for i, x in enumerate(X):
            k = 0
            while self.nodes[k].leaf_value is None:
                n = self.nodes[k]
                k = n.left if x[n.feature] < n.threshold else n.right
            out[i] = self.nodes[k].leaf_value
        return out


class _Grower:
    def __init__(self, cfg: EnsembleConfig, X, g, h, features):
        self.cfg, self.X, self.g, self.h, self.features = cfg, X, g, h, features
        self.tree = Tree()

    def _score(self, G, H):
        s = np.sign(G) * np.maximum(np.abs(G) - self.cfg.reg_alpha, 0.0)
        return s * s / (H + self.cfg.reg_lambda)

    def _best_split(self, rows):
        G, H = self.g[rows].sum(), self.h[rows].sum()
        parent = self._score(G, H)
        best = (0.0, None, None)
        mcw = self.cfg.min_child_weight
        for f in self.features:
            xs = self.X[rows, f]
            order = np.argsort(xs, kind="stable")
            xs, gs, hs = xs[order], self.g[rows][order], self.h[rows][order]
            gl, hl = np.cumsum(gs)[:-1], np.cumsum(hs)[:-1]
            valid = (xs[1:] > xs[:-1]) & (hl >= mcw) & (H - hl >= mcw)
            if not valid.any():
                continue
            gains = 0.5 * (self._score(gl, hl) + self._score(G - gl, H - hl) - parent)
            gains = np.where(valid, gains, -np.inf)
            i = int(np.argmax(gains))
            if gains[i] > best[0] + 1e-12:
                best = (float(gains[i]), f, 0.5 * (xs[i] + xs[i + 1]))
        return best

    def grow(self, rows, depth=0) -> int:
        idx = len(self.tree.nodes)
        self.tree.nodes.append(Node())
        gain, f, thr = (0.0, None, None) if depth >= self.cfg.max_depth else self._best_split(rows)
        if f is None:
            G, H = self.g[rows].sum(), self.h[rows].sum()
            w = -_soft(G, self.cfg.reg_alpha) / (H + self.cfg.reg_lambda)
            self.tree.nodes[idx].leaf_value = self.cfg.learning_rate * w
            return idx
        go_left = self.X[rows, f] < thr
        left = self.grow(rows[go_left], depth + 1)
        right = self.grow(rows[~go_left], depth + 1)
        self.tree.nodes[idx] = Node(int(f), float(thr), left, right, None)
        return idx


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def f1_score(predictions, labels) -> float:
    """F1 of the positive class; 0 when nothing is predicted positive."""
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    tp = int((p & y).sum())
    fp = int((p & ~y).sum())
    fn = int((~p & y).sum())
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


class BoostedClassifier:
    def __init__(self, config: EnsembleConfig, n_features: int, trees: list[Tree] | None = None, base_margin: float = 0.0):
        self.config = config
        self.n_features = n_features
        self.trees = trees or []
        self.base_margin = base_margin
        self.train_losses: list[float] = []
        self.valid_f1: list[float] = []

    def margin(self, X, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        z = np.full(len(X), self.base_margin)
        for tree in self.trees[:n_trees]:
            z += tree.predict(X)
        return z

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.margin(X))

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        p = self.predict_proba(X)
        return p, (p >= 0.5).astype(int)

    def to_dict(self) -> dict:
        return {
            "trees": [{"nodes": [asdict(n) for n in t.nodes]} for t in self.trees],
            "config": asdict(self.config),
            "n_features": self.n_features,
            "base_margin": self.base_margin,
            "feature_names": list(FEATURE_NAMES[: self.n_features]),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedClassifier":
        trees = [Tree([Node(**n) for n in t["nodes"]]) for t in d["trees"]]
        return cls(EnsembleConfig(**d["config"]), d["n_features"], trees, d.get("base_margin", 0.0))

    @classmethod
    def load(cls, path) -> "BoostedClassifier":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _logloss(y, z) -> float:
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def fit(X, y, config: EnsembleConfig | None = None, X_valid=None, y_valid=None) -> BoostedClassifier:
    """Boost up to ``n_estimators`` trees; keep the prefix with the best validation F1."""
    config = config or EnsembleConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("fit needs a non-empty 2-D feature matrix")
    if len(np.unique(y)) < 2:
        raise ValueError("fit needs both classes present")
    rng = np.random.default_rng(config.seed)
    n, d = X.shape
    clf = BoostedClassifier(config, d)
    z = np.zeros(n)
    n_cols = max(1, int(round(config.colsample * d)))
    n_rows = max(1, int(round(config.subsample * n)))
    has_valid = X_valid is not None and y_valid is not None
    best_f1, best_k, stale = -1.0, 0, 0
    for _ in range(config.n_estimators):
        p = _sigmoid(z)
        g, h = p - y, p * (1 - p)
        rows = np.sort(rng.choice(n, size=n_rows, replace=False)) if n_rows < n else np.arange(n)
        cols = np.sort(rng.choice(d, size=n_cols, replace=False)) if n_cols < d else np.arange(d)
        tree = _Grower(config, X, g, h, cols.tolist())
        tree.grow(rows)
        clf.trees.append(tree.tree)
        z += tree.tree.predict(X)
        clf.train_losses.append(_logloss(y, z))
        if has_valid:
            _, labels = clf.predict(X_valid)
            f1 = f1_score(labels, y_valid)
            clf.valid_f1.append(f1)
            if f1 > best_f1:
                best_f1, best_k, stale = f1, len(clf.trees), 0
            else:
                stale += 1
                if stale >= config.early_stopping_rounds:
                    break
    if has_valid:
        clf.trees = clf.trees[:best_k]
    return clf


# ---------------------------------------------------------------- reports


def annotate(tokens: Sequence[str], labels: Sequence[int], open_mark: str = "[", close_mark: str = "]") -> str:
    """Render flagged tokens in brackets, the plain-text analogue of red marking."""
    return " ".join(f"{open_mark}{t}{close_mark}" if l else t for t, l in zip(tokens, labels))
