"""Diffusion-based local planner.

A DDPM over short robot-centric trajectories: a linear noise schedule, the
reverse (denoising) update, K-candidate sampling and an epsilon-prediction
noise network conditioned on a local traversability patch and the offset to
the current subgoal.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import _binio
from ._nn import MLP, train_monotone
from .errors import (EmptyDataset, InvalidSchedule, MalformedFile, ShapeMismatch,
                     StepOutOfRange)

N_WAYPOINTS = 8
WAYPOINT_SPACING = 0.5
PATCH_SIZE = 7
N_STEPS = 50
N_CANDIDATES = 8
_TIME_FREQS = 8
_CKPT_MAGIC = b"KRNP"


@dataclass(frozen=True)
class SchedulerParams:
    """DDPM schedule; arrays are indexed by ``t - 1`` for t = 1..T."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def with_sigmas(self, sigmas):
        return replace(self, sigmas=np.asarray(sigmas, dtype=np.float64))


def make_schedule(T: int = N_STEPS, beta_start: float = 1e-4, beta_end: float = 0.02) -> SchedulerParams:
    if int(T) != T or T < 1:
        raise InvalidSchedule(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidSchedule(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    alpha_bars = np.empty(T)
    acc = 1.0
    for i, a in enumerate(alphas):
        acc = acc * a
        alpha_bars[i] = acc
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bars))
    sigmas[0] = 0.0
    return SchedulerParams(T, betas, alphas, alpha_bars, sigmas)


def denoise_step(A_t, t: int, n_pred, params: SchedulerParams, z):
    """One reverse step ``A_t -> A_{t-1}``."""
    if not 1 <= t <= params.T:
        raise StepOutOfRange(f"t={t} outside 1..{params.T}")
    A_t = np.asarray(A_t, dtype=np.float64)
    n_pred = np.asarray(n_pred, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if A_t.shape != n_pred.shape or A_t.shape != z.shape:
        raise ShapeMismatch(f"shapes differ: {A_t.shape}, {n_pred.shape}, {z.shape}")
    i = t - 1
    coef = params.betas[i] / np.sqrt(1.0 - params.alpha_bars[i])
    return (A_t - coef * n_pred) / np.sqrt(params.alphas[i]) + params.sigmas[i] * z


@dataclass
class ConditioningContext:
    observation_features: np.ndarray
    goal_offset: np.ndarray
    localization: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.observation_features = np.asarray(self.observation_features, dtype=np.float64).ravel()
        self.goal_offset = np.asarray(self.goal_offset, dtype=np.float64).reshape(2)
        self.localization = np.asarray(self.localization, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.goal_offset)):
            raise ValueError("goal_offset must be finite")

    def as_features(self):
        """Model input row: goal offset followed by the flattened patch."""
        return np.concatenate([self.goal_offset, self.observation_features])


@dataclass
class CandidateSet:
    candidates: np.ndarray  # (K, N, 2)
    rng_seed: object = None

    def __len__(self):
        return len(self.candidates)

    def __getitem__(self, k):
        return self.candidates[k]


class NoisePredictor(Protocol):
    def predict(self, noisy_trajectory, t: int, context: ConditioningContext) -> np.ndarray: ...


def _time_embedding(t, T):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = np.pi * 2.0 ** np.arange(_TIME_FREQS)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _seed_entropy(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (list, tuple)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


def generate_candidates(predictor: NoisePredictor, context: ConditioningContext,
                        params: SchedulerParams, K: int = N_CANDIDATES, seed=0,
                        n_waypoints: int | None = None) -> CandidateSet:
    """Run K independent reverse-diffusion chains from Gaussian noise.

    Chain k draws A_T and every z from its own child of ``SeedSequence(seed)``,
    so the result does not depend on whether chains are run together.
    The chains are batched through the predictor for speed.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    N = n_waypoints or getattr(predictor, "n_waypoints", N_WAYPOINTS)
    T = params.T
    children = _seed_entropy(seed).spawn(K)
    noise = np.stack([np.random.default_rng(c).standard_normal((T + 1, N, 2)) for c in children])
    A = noise[:, 0].copy()
    for t in range(T, 0, -1):
        n_pred = predictor.predict(A, t, context)
        A = denoise_step(A, t, n_pred, params, noise[:, T + 1 - t])
    scale = getattr(predictor, "traj_scale", 1.0)
    return CandidateSet(A * scale, seed)


def expert_trajectory(goal_offset, n_waypoints=N_WAYPOINTS, spacing=WAYPOINT_SPACING, bend=0.0):
    """Waypoints heading to ``goal_offset``, optionally veering sideways.

    The path is a straight ray toward the goal (shortened when the goal is
    closer than the horizon) plus a lateral offset ``bend * sin(pi s / 2L)``
    that reaches ``bend`` meters at the horizon.
    """
    g = np.asarray(goal_offset, dtype=np.float64)
    dist = float(np.hypot(*g))
    if dist < 1e-12:
        return np.zeros((n_waypoints, 2))
    u = g / dist
    lateral = np.array([-u[1], u[0]])
    step = min(spacing, dist / n_waypoints)
    s = step * np.arange(1, n_waypoints + 1)
    L = s[-1]
    off = bend * np.sin(0.5 * np.pi * s / L) * (L / (n_waypoints * spacing))
    return s[:, None] * u[None, :] + off[:, None] * lateral[None, :]


def _random_patch(rng, size):
    patch = np.ones((size, size))
    for _ in range(rng.integers(0, 4)):
        r, c = rng.integers(0, size, 2)
        h, w = rng.integers(1, 3, 2)
        patch[r:r + h, c:c + w] = 0.0
    return patch.ravel()


def make_trajectory_dataset(n, seed=0, bend=0.0, n_waypoints=N_WAYPOINTS, spacing=WAYPOINT_SPACING,
                            patch_size=PATCH_SIZE, max_goal=12.0):
    """Synthetic expert samples: list of (ConditioningContext, trajectory).

    ``bend = 0`` gives straight-line experts; ``bend > 0`` draws a uniform
    lateral veer in ``[-bend, bend]`` meters per sample, which makes the
    expert distribution multimodal around obstacles.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        ang = rng.uniform(-np.pi, np.pi)
        dist = rng.uniform(0.5, max_goal)
        goal = dist * np.array([np.cos(ang), np.sin(ang)])
        b = rng.uniform(-bend, bend) if bend > 0 else 0.0
        ctx = ConditioningContext(_random_patch(rng, patch_size), goal)
        out.append((ctx, expert_trajectory(goal, n_waypoints, spacing, b)))
    return out


def save_dataset_jsonl(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ctx, traj in dataset:
            rec = {"patch": ctx.observation_features.tolist(), "goal": ctx.goal_offset.tolist(),
                   "waypoints": np.asarray(traj).tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_dataset_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ctx = ConditioningContext(rec["patch"], rec["goal"])
                traj = np.asarray(rec["waypoints"], dtype=np.float64)
            except (KeyError, ValueError, TypeError) as exc:
                raise MalformedFile(f"{path}:{lineno}: {exc}") from exc
            if traj.ndim != 2 or traj.shape[1] != 2:
                raise MalformedFile(f"{path}:{lineno}: waypoints must be a list of [x, y]")
            out.append((ctx, traj))
    return out


class MLPNoisePredictor:
    """Epsilon network on normalized trajectories.

    Input row: flattened noisy trajectory, sinusoidal time embedding, goal
    offset clipped to the horizon and scaled to the unit disc, and the patch.
    """

    def __init__(self, net: MLP, T, n_waypoints, patch_len, horizon):
        self.net = net
        self.T = int(T)
        self.n_waypoints = int(n_waypoints)
        self.patch_len = int(patch_len)
        self.horizon = float(horizon)
        self.traj_scale = self.horizon / 2.0
        self._prepare()

    def _prepare(self):
        W1, b1 = self.net.params[0], self.net.params[1]
        nx = 2 * self.n_waypoints
        self._W_x = W1[:nx]
        self._W_c = W1[nx + 2 * _TIME_FREQS:]
        temb = _time_embedding(np.arange(1, self.T + 1), self.T)
        self._time_bias = temb @ W1[nx:nx + 2 * _TIME_FREQS] + b1
        self._ctx_ref = None
        self._ctx_bias = None

    def condition_features(self, goal, patch):
        goal = np.atleast_2d(np.asarray(goal, dtype=np.float64))
        patch = np.atleast_2d(np.asarray(patch, dtype=np.float64))
        if patch.shape[1] != self.patch_len:
            raise ShapeMismatch(f"patch length {patch.shape[1]} != {self.patch_len}")
        d = np.hypot(goal[:, 0], goal[:, 1])
        factor = np.where(d > self.horizon, self.horizon / np.maximum(d, 1e-12), 1.0) / self.horizon
        return np.concatenate([goal * factor[:, None], patch], axis=1)

    def network_input(self, x_norm, t, cond):
        n = x_norm.shape[0]
        temb = _time_embedding(t, self.T)
        if temb.shape[0] == 1:
            temb = np.repeat(temb, n, axis=0)
        if cond.shape[0] == 1:
            cond = np.repeat(cond, n, axis=0)
        return np.concatenate([x_norm.reshape(n, -1), temb, cond], axis=1)

    def predict(self, noisy_trajectory, t, context):
        A = np.asarray(noisy_trajectory, dtype=np.float64)
        single = A.ndim == 2
        batch = A.reshape(-1, 2 * self.n_waypoints)
        if self._ctx_ref is not context:
            cond = self.condition_features(context.goal_offset, context.observation_features)
            self._ctx_bias = cond @ self._W_c
            self._ctx_ref = context
        h = batch @ self._W_x + (self._time_bias[t - 1] + self._ctx_bias)
        params = self.net.params
        for i in range(1, self.net.n_layers):
            h = h / (1.0 + np.exp(-h))
            h = h @ params[2 * i] + params[2 * i + 1]
        out = h.reshape(A.shape)
        return out if not single else out.reshape(A.shape)

    def save(self, path):
        meta = {"kind": "noise_predictor", "sizes": self.net.sizes, "T": self.T,
                "n_waypoints": self.n_waypoints, "patch_len": self.patch_len, "horizon": self.horizon}
        arrays = {f"p{i}": p for i, p in enumerate(self.net.params)}
        _binio.write_bundle(path, _CKPT_MAGIC, 1, meta, arrays)

    @classmethod
    def load(cls, path):
        _, meta, arrays = _binio.read_bundle(path, _CKPT_MAGIC)
        params = [arrays[f"p{i}"] for i in range(len(arrays))]
        net = MLP(meta["sizes"], params=params)
        return cls(net, meta["T"], meta["n_waypoints"], meta["patch_len"], meta["horizon"])


class DiffusionLocalPlanner(BaseEstimator):
    """Conditional DDPM trajectory sampler with an sklearn-style interface.

    ``fit(X, y)`` takes conditioning rows ``[goal_dx, goal_dy, patch...]`` and
    expert trajectories of shape ``(n, N, 2)`` (or flattened ``(n, 2N)``).
    ``sample`` draws a :class:`CandidateSet` for one context and ``predict``
    returns the K candidates for every row of ``X``.
    """

    def __init__(self, n_steps=N_STEPS, beta_start=1e-4, beta_end=0.2, n_candidates=N_CANDIDATES,
                 n_waypoints=N_WAYPOINTS, spacing=WAYPOINT_SPACING, hidden=(128, 128), epochs=150,
                 batch_size=128, learning_rate=2e-3, eval_draws=2, random_state=0):
        self.n_steps = n_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.n_candidates = n_candidates
        self.n_waypoints = n_waypoints
        self.spacing = spacing
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.eval_draws = eval_draws
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if len(X) == 0:
            raise EmptyDataset("no training samples")
        N = self.n_waypoints
        y = y.reshape(len(y), -1)
        if y.shape != (len(X), 2 * N):
            raise ShapeMismatch(f"expected trajectories with {N} waypoints, got shape {y.shape}")
        self.schedule_ = make_schedule(self.n_steps, self.beta_start, self.beta_end)
        horizon = N * self.spacing
        seeds = np.random.SeedSequence(self.random_state).spawn(3)
        init_rng, epoch_seq, eval_rng = seeds[0], seeds[1], np.random.default_rng(seeds[2])

        patch_len = X.shape[1] - 2
        in_dim = 2 * N + 2 * _TIME_FREQS + 2 + patch_len
        net = MLP([in_dim, *self.hidden, 2 * N], rng=np.random.default_rng(init_rng))
        proto = MLPNoisePredictor(net, self.n_steps, N, patch_len, horizon)
        x0 = y / proto.traj_scale
        cond = proto.condition_features(X[:, :2], X[:, 2:])
        ab = self.schedule_.alpha_bars

        # fixed draws make the monitored objective deterministic
        n_eval = len(X) * self.eval_draws
        eval_idx = np.tile(np.arange(len(X)), self.eval_draws)
        eval_t = eval_rng.integers(1, self.n_steps + 1, n_eval)
        eval_eps = eval_rng.standard_normal((n_eval, 2 * N))
        eval_in = self._noised_input(proto, x0[eval_idx], cond[eval_idx], eval_t, eval_eps, ab)

        def objective(m):
            return float(np.mean((m.forward(eval_in) - eval_eps) ** 2))

        epoch_seeds = epoch_seq.spawn(max(self.epochs, 1))

        def run_epoch(m, opt, epoch):
            rng = np.random.default_rng(epoch_seeds[epoch])
            order = rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                t = rng.integers(1, self.n_steps + 1, len(idx))
                eps = rng.standard_normal((len(idx), 2 * N))
                inp = self._noised_input(proto, x0[idx], cond[idx], t, eps, ab)
                out, cache = m.forward(inp, cache=True)
                grad = 2.0 * (out - eps) / out.size
                opt.step(m.params, m.backward(cache, grad))

        self.loss_history_ = train_monotone(net, objective, run_epoch, self.epochs, self.learning_rate)
        self.predictor_ = MLPNoisePredictor(net, self.n_steps, N, patch_len, horizon)
        return self

    @staticmethod
    def _noised_input(proto, x0, cond, t, eps, ab):
        a = ab[t - 1][:, None]
        xt = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
        return proto.network_input(xt, t, cond)

    def sample(self, context: ConditioningContext, seed=0) -> CandidateSet:
        check_is_fitted(self, "predictor_")
        return generate_candidates(self.predictor_, context, self.schedule_, self.n_candidates, seed)

    def predict(self, X, seed=0):
        check_is_fitted(self, "predictor_")
        X = check_array(X, dtype=np.float64)
        out = []
        for i, row in enumerate(X):
            ctx = ConditioningContext(row[2:], row[:2])
            out.append(self.sample(ctx, seed=(int(seed), i)).candidates)
        return np.stack(out)

    @classmethod
    def from_predictor(cls, predictor: MLPNoisePredictor, **kwargs):
        """Wrap a loaded checkpoint; the schedule uses ``kwargs`` or defaults."""
        est = cls(n_steps=predictor.T, n_waypoints=predictor.n_waypoints,
                  spacing=predictor.horizon / predictor.n_waypoints, **kwargs)
        est.schedule_ = make_schedule(est.n_steps, est.beta_start, est.beta_end)
        est.predictor_ = predictor
        est.loss_history_ = []
        return est


def dataset_to_arrays(dataset: Sequence):
    X = np.stack([ctx.as_features() for ctx, _ in dataset])
    y = np.stack([np.asarray(traj, dtype=np.float64) for _, traj in dataset])
    return X, y


def train_noise_predictor(dataset, params: SchedulerParams | None = None, epochs=150, seed=0,
                          **kwargs) -> DiffusionLocalPlanner:
    """Fit a :class:`DiffusionLocalPlanner` on ``(context, trajectory)`` pairs.

    The fitted estimator's ``predictor_`` is the trained noise predictor.
    """
    if len(dataset) == 0:
        raise EmptyDataset("no training samples")
    X, y = dataset_to_arrays(dataset)
    Ns = {len(traj) for _, traj in dataset}
    if len(Ns) != 1:
        raise ShapeMismatch(f"expert trajectories have differing lengths {sorted(Ns)}")
    if params is not None:
        beta_start, beta_end = float(params.betas[0]), float(params.betas[-1])
        kwargs.setdefault("n_steps", params.T)
        kwargs.setdefault("beta_start", beta_start)
        kwargs.setdefault("beta_end", beta_end)
    est = DiffusionLocalPlanner(n_waypoints=Ns.pop(), epochs=epochs, random_state=seed, **kwargs)
    return est.fit(X, y)
