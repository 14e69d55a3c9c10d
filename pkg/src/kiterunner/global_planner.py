"""Global planner: traversability scoring of local candidates.

Candidates are scored as ``sum_i P_m(x_i) * P_w(x_i)`` where ``P_m`` comes
from the probability raster and ``P_w`` weights waypoints by distance to and
bearing toward the goal. The raster itself is produced by a per-cell
classifier trained with focal loss.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _binio
from ._nn import MLP, train_monotone
from .errors import DegenerateDataset, FeatureDimMismatch, MalformedFile
from .geo_raster import FeatureRaster, ProbabilityRaster

P_CLAMP = 1e-7
_CKPT_MAGIC = b"KRTM"


@dataclass(frozen=True)
class WaypointWeightParams:
    distance_scale: float = 10.0
    orientation_floor: float = 0.1

    def __post_init__(self):
        if not self.distance_scale > 0:
            raise ValueError("distance_scale must be > 0")
        if not 0.0 <= self.orientation_floor <= 1.0:
            raise ValueError("orientation_floor must lie in [0, 1]")


@dataclass(frozen=True)
class FocalLossParams:
    lambda_: float = 3.0
    gamma: float = 2.0

    def __post_init__(self):
        if not self.lambda_ > 0:
            raise ValueError("lambda must be > 0")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")


def waypoint_weights(points, robot, goal, params: WaypointWeightParams = WaypointWeightParams()):
    """P_w for an ``(N, 2)`` array of waypoints."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    robot = np.asarray(robot, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    dist = np.hypot(pts[:, 0] - goal[0], pts[:, 1] - goal[1])
    decay = np.exp(-dist / params.distance_scale)

    to_goal = goal - robot
    to_pts = pts - robot
    ng = np.hypot(*to_goal)
    npts = np.hypot(to_pts[:, 0], to_pts[:, 1])
    orient = np.ones(len(pts))
    ok = (npts > 0) & (ng > 0)
    if np.any(ok):
        dot = to_pts[ok, 0] * to_goal[0] + to_pts[ok, 1] * to_goal[1]
        cos = dot / (npts[ok] * ng)
        orient[ok] = np.maximum(params.orientation_floor, 0.5 * (1.0 + np.clip(cos, -1.0, 1.0)))
    return decay * orient


def waypoint_weight(point, robot, goal, params: WaypointWeightParams = WaypointWeightParams()) -> float:
    return float(waypoint_weights([point], robot, goal, params)[0])


def score_path(candidate, raster: ProbabilityRaster, robot, goal,
               params: WaypointWeightParams = WaypointWeightParams()) -> float:
    """Traversability score of a world-frame trajectory.

    Out-of-extent waypoints contribute 0. Terms are accumulated left to right.
    """
    pts = np.asarray(candidate, dtype=np.float64).reshape(-1, 2)
    terms = raster.sample_many(pts) * waypoint_weights(pts, robot, goal, params)
    total = 0.0
    for v in terms.tolist():
        total += v
    return total


def score_candidates(candidates, raster, robot, goal, params=WaypointWeightParams()):
    """Scores of a ``(K, N, 2)`` stack; equal to :func:`score_path` per candidate."""
    cands = np.asarray(getattr(candidates, "candidates", candidates), dtype=np.float64)
    K, N = cands.shape[:2]
    pts = cands.reshape(K * N, 2)
    terms = (raster.sample_many(pts) * waypoint_weights(pts, robot, goal, params)).reshape(K, N)
    total = np.zeros(K)
    for i in range(N):  # column-wise keeps each row's left-to-right order
        total = total + terms[:, i]
    return total.tolist()


def _argmax_first(scores):
    best = 0
    for k in range(1, len(scores)):
        if scores[k] > scores[best]:
            best = k
    return best


def select_best(candidates, raster: ProbabilityRaster, robot, goal,
                params: WaypointWeightParams = WaypointWeightParams(), return_scores=False):
    """(index, trajectory) of the highest-scoring candidate; ties -> lowest index.

    With ``return_scores`` the per-candidate scores are appended.
    """
    cands = np.asarray(getattr(candidates, "candidates", candidates), dtype=np.float64)
    scores = score_candidates(cands, raster, robot, goal, params)
    best = _argmax_first(scores)
    if return_scores:
        return best, cands[best], scores
    return best, cands[best]


def _p_t(p, label):
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    label = np.asarray(label)
    return np.where(label == 1, p, 1.0 - p)


def focal_loss(p, label, params: FocalLossParams = FocalLossParams()):
    """``-lambda (1 - p_t)^gamma log(p_t)`` with ``p_t = p`` for label 1, else ``1 - p``."""
    pt = _p_t(p, label)
    out = -params.lambda_ * (1.0 - pt) ** params.gamma * np.log(pt)
    return float(out) if out.ndim == 0 else out


def focal_loss_grad(p, label, params: FocalLossParams = FocalLossParams()):
    """Derivative of :func:`focal_loss` with respect to ``p``."""
    label = np.asarray(label)
    pt = _p_t(p, label)
    lam, g = params.lambda_, params.gamma
    q = 1.0 - pt
    dpt = lam * g * q ** (g - 1.0) * np.log(pt) - lam * q ** g / pt if g > 0 else -lam / pt
    out = np.where(label == 1, dpt, -dpt)
    return float(out) if out.ndim == 0 else out


@dataclass
class TrainSample:
    features: np.ndarray
    label: int


class TraversabilityClassifier(ClassifierMixin, BaseEstimator):
    """Per-cell traversability classifier trained with focal loss.

    ``hidden_units=0`` gives a logistic model; otherwise one SiLU hidden
    layer. Features are standardized with the training mean and scale.
    """

    def __init__(self, lambda_=3.0, gamma=2.0, hidden_units=0, epochs=300, learning_rate=0.05,
                 random_state=0):
        self.lambda_ = lambda_
        self.gamma = gamma
        self.hidden_units = hidden_units
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if len(np.unique(y)) < 2:
            raise DegenerateDataset("training labels contain a single class")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.scale_[self.scale_ == 0] = 1.0
        Z = (X - self.mean_) / self.scale_
        params = FocalLossParams(self.lambda_, self.gamma)
        sizes = [X.shape[1], *([self.hidden_units] if self.hidden_units else []), 1]
        net = MLP(sizes, rng=np.random.default_rng(self.random_state))

        def objective(m):
            return float(np.mean(focal_loss(self._proba(m, Z), y, params)))

        def run_epoch(m, opt, epoch):
            logits, cache = m.forward(Z, cache=True)
            p = 1.0 / (1.0 + np.exp(-logits[:, 0]))
            dz = focal_loss_grad(p, y, params) * p * (1.0 - p) / len(Z)
            opt.step(m.params, m.backward(cache, dz[:, None]))

        self.loss_history_ = train_monotone(net, objective, run_epoch, self.epochs,
                                            self.learning_rate)
        self.net_ = net
        return self

    @staticmethod
    def _proba(net, Z):
        p = 1.0 / (1.0 + np.exp(-net.forward(Z)[:, 0]))
        return np.clip(p, P_CLAMP, 1.0 - P_CLAMP)

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise FeatureDimMismatch(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        p = self._proba(self.net_, (X - self.mean_) / self.scale_)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def save(self, path):
        check_is_fitted(self, "net_")
        meta = {"kind": "traversability", "sizes": self.net_.sizes,
                "params": {k: v for k, v in self.get_params().items()}}
        arrays = {"mean": self.mean_, "scale": self.scale_}
        arrays.update({f"p{i}": p for i, p in enumerate(self.net_.params)})
        _binio.write_bundle(path, _CKPT_MAGIC, 1, meta, arrays)

    @classmethod
    def load(cls, path):
        _, meta, arrays = _binio.read_bundle(path, _CKPT_MAGIC)
        est = cls(**meta["params"])
        n_params = len(arrays) - 2
        est.net_ = MLP(meta["sizes"], params=[arrays[f"p{i}"] for i in range(n_params)])
        est.mean_, est.scale_ = arrays["mean"], arrays["scale"]
        est.n_features_in_ = len(est.mean_)
        est.classes_ = np.array([0, 1])
        est.loss_history_ = []
        return est


TraversabilityModel = TraversabilityClassifier


def train_traversability(samples, params: FocalLossParams = FocalLossParams(), epochs=300, seed=0,
                         **kwargs) -> TraversabilityClassifier:
    if len(samples) == 0:
        raise DegenerateDataset("no training samples")
    X = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
    y = np.array([int(s.label) for s in samples])
    est = TraversabilityClassifier(lambda_=params.lambda_, gamma=params.gamma, epochs=epochs,
                                   random_state=seed, **kwargs)
    return est.fit(X, y)


def save_samples_csv(X, y, path):
    """Write ``f0..fk,label`` rows."""
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*(f"f{i}" for i in range(X.shape[1])), "label"])
        for row, label in zip(X.tolist(), np.asarray(y).tolist()):
            w.writerow([*(repr(v) for v in row), int(label)])


def load_samples_csv(path):
    """(X, y) from a CSV written by :func:`save_samples_csv`; errors name the line."""
    X, y = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise MalformedFile(f"{path}:1: expected a header ending in 'label'")
        width = len(header)
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != width:
                raise MalformedFile(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                X.append([float(v) for v in row[:-1]])
                label = int(row[-1])
            except ValueError as exc:
                raise MalformedFile(f"{path}:{lineno}: {exc}") from exc
            if label not in (0, 1):
                raise MalformedFile(f"{path}:{lineno}: label must be 0 or 1")
            y.append(label)
    if not X:
        raise DegenerateDataset(f"{path}: no samples")
    return np.array(X), np.array(y, dtype=np.int64)


def predict_map(model: TraversabilityClassifier, feature_raster: FeatureRaster) -> ProbabilityRaster:
    check_is_fitted(model, "net_")
    g = feature_raster.georef
    if feature_raster.channels != model.n_features_in_:
        raise FeatureDimMismatch(
            f"raster has {feature_raster.channels} channels, model expects {model.n_features_in_}")
    flat = feature_raster.cells.reshape(-1, feature_raster.channels).astype(np.float64)
    p = model.predict_proba(flat)[:, 1]
    return ProbabilityRaster(g, p.reshape(g.height, g.width))
