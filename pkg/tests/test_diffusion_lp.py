from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from kiterunner.diffusion_lp import (ConditioningContext, DiffusionLocalPlanner, MLPNoisePredictor,
                                     dataset_to_arrays, denoise_step, expert_trajectory,
                                     generate_candidates, load_dataset_jsonl, make_schedule,
                                     make_trajectory_dataset, save_dataset_jsonl,
                                     train_noise_predictor)
from kiterunner.errors import (EmptyDataset, InvalidSchedule, MalformedFile, ShapeMismatch,
                               StepOutOfRange)


class ZeroPredictor:
    def predict(self, A, t, context):
        return np.zeros_like(A)


def ctx(goal=(3.0, 1.0)):
    return ConditioningContext(np.ones(49), goal)


def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    assert s.alphas[0] == 0.5 and s.alpha_bars[0] == 0.5 and s.sigmas[0] == 0.0


def test_schedule_identities_t50():
    s = make_schedule(50, 1e-4, 0.02)
    assert np.allclose(s.betas, np.linspace(1e-4, 0.02, 50), rtol=0, atol=0)
    prod = 1.0
    for t in range(50):
        prod *= 1.0 - s.betas[t]
        assert abs(s.alpha_bars[t] - prod) <= 1e-12
        assert abs(s.alphas[t] - (1.0 - s.betas[t])) <= 1e-12
    assert s.sigmas[0] == 0.0
    for t in range(1, 50):
        ref = s.betas[t] * (1 - s.alpha_bars[t - 1]) / (1 - s.alpha_bars[t])
        assert abs(s.sigmas[t] ** 2 - ref) <= 1e-12
    assert np.all(np.diff(s.alpha_bars) < 0)


@pytest.mark.parametrize("args", [(50, 1e-4, 1.0), (0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02),
                                  (2.5, 1e-4, 0.02)])
def test_invalid_schedule(args):
    with pytest.raises(InvalidSchedule):
        make_schedule(*args)


def test_identity_step():
    s = make_schedule(3, 1e-4, 0.02)
    # alpha_t = 1 cannot come from a valid schedule, so build one by hand
    s1 = s.__class__(1, np.array([0.0]), np.array([1.0]), np.array([0.5]), np.array([0.0]))
    A = np.arange(16.0).reshape(8, 2)
    assert np.array_equal(denoise_step(A, 1, np.zeros_like(A), s1, np.zeros_like(A)), A)


def test_denoise_fixture_value():
    s = make_schedule(1, 0.01, 0.01)  # alpha 0.99, alpha_bar 0.99
    out = denoise_step(np.array([1.0]), 1, np.array([1.0]), s, np.array([0.0]))
    assert out[0] == pytest.approx(0.90454, abs=1e-5)


def test_denoise_errors():
    s = make_schedule(5, 1e-4, 0.02)
    A = np.zeros((8, 2))
    with pytest.raises(StepOutOfRange):
        denoise_step(A, 6, A, s, A)
    with pytest.raises(StepOutOfRange):
        denoise_step(A, 0, A, s, A)
    with pytest.raises(ShapeMismatch):
        denoise_step(A, 1, np.zeros((7, 2)), s, A)


@settings(max_examples=50)
@given(st.integers(1, 50), st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_denoise_superposition(t, seed, a, b):
    s = make_schedule(50)
    rng = np.random.default_rng(seed)
    A1, A2, n1, n2 = rng.normal(size=(4, 8, 2))
    z = np.zeros((8, 2))
    lhs = denoise_step(a * A1 + b * A2, t, a * n1 + b * n2, s, z)
    rhs = a * denoise_step(A1, t, n1, s, z) + b * denoise_step(A2, t, n2, s, z)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_forward_reverse_consistency_at_t1():
    s = make_schedule(50)
    rng = np.random.default_rng(0)
    A0, eps, z = rng.normal(size=(3, 8, 2))
    A1 = np.sqrt(s.alpha_bars[0]) * A0 + np.sqrt(1 - s.alpha_bars[0]) * eps
    assert np.max(np.abs(denoise_step(A1, 1, eps, s, z) - A0)) < 1e-9


def test_zero_predictor_closed_form():
    s = make_schedule(2, 1e-4, 0.02).with_sigmas([0.0, 0.0])
    out = generate_candidates(ZeroPredictor(), ctx(), s, K=1, seed=42, n_waypoints=8)
    child = np.random.SeedSequence(42).spawn(1)[0]
    A_T = np.random.default_rng(child).standard_normal((3, 8, 2))[0]
    expected = A_T / np.sqrt(s.alphas[0] * s.alphas[1])
    assert np.allclose(out.candidates[0], expected, rtol=1e-12, atol=0)


def test_chains_independent_of_batching():
    s = make_schedule(10)
    pred = ZeroPredictor()
    eight = generate_candidates(pred, ctx(), s, K=8, seed=5, n_waypoints=8).candidates
    seq = np.random.SeedSequence(5).spawn(8)
    for k in (0, 3, 7):
        noise = np.random.default_rng(seq[k]).standard_normal((11, 8, 2))
        A = noise[0]
        for t in range(10, 0, -1):
            A = denoise_step(A, t, np.zeros_like(A), s, noise[11 - t])
        assert np.array_equal(A, eight[k])


def test_generate_requires_k():
    with pytest.raises(ValueError):
        generate_candidates(ZeroPredictor(), ctx(), make_schedule(5), K=0)


def test_candidates_shape_and_determinism(toy_planner):
    a = toy_planner.sample(ctx(), seed=9)
    b = toy_planner.sample(ctx(), seed=9)
    assert a.candidates.shape == (8, 8, 2)
    assert np.all(np.isfinite(a.candidates))
    assert np.array_equal(a.candidates, b.candidates)
    assert not np.array_equal(a.candidates, toy_planner.sample(ctx(), seed=10).candidates)


def test_training_deterministic_and_monotone():
    data = make_trajectory_dataset(80, seed=1)
    a = train_noise_predictor(data, epochs=5, seed=2)
    b = train_noise_predictor(data, epochs=5, seed=2)
    for p, q in zip(a.predictor_.net.params, b.predictor_.net.params):
        assert np.array_equal(p, q)
    h = a.loss_history_
    assert all(y <= x for x, y in zip(h, h[1:]))


def test_zero_epochs_still_generates():
    est = train_noise_predictor(make_trajectory_dataset(20, seed=0), epochs=0, seed=0)
    c = est.sample(ctx(), seed=0).candidates
    assert c.shape == (8, 8, 2) and np.all(np.isfinite(c))


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train_noise_predictor([], epochs=1)


def test_sklearn_api(toy_planner):
    params = toy_planner.get_params()
    assert params["n_candidates"] == 8 and params["n_steps"] == 50
    assert clone(toy_planner).get_params() == params
    X, _ = dataset_to_arrays(make_trajectory_dataset(3, seed=8))
    out = toy_planner.predict(X, seed=1)
    assert out.shape == (3, 8, 8, 2)
    with pytest.raises(ShapeMismatch):
        DiffusionLocalPlanner(epochs=1).fit(X, np.zeros((3, 5, 2)))


def test_checkpoint_round_trip(tmp_path, toy_planner):
    toy_planner.predictor_.save(tmp_path / "lp.ckpt")
    loaded = DiffusionLocalPlanner.from_predictor(MLPNoisePredictor.load(tmp_path / "lp.ckpt"),
                                                  beta_end=toy_planner.beta_end)
    assert np.array_equal(loaded.sample(ctx(), seed=3).candidates,
                          toy_planner.sample(ctx(), seed=3).candidates)


def test_dataset_jsonl_round_trip(tmp_path):
    data = make_trajectory_dataset(5, seed=2)
    save_dataset_jsonl(data, tmp_path / "d.jsonl")
    back = load_dataset_jsonl(tmp_path / "d.jsonl")
    for (c1, t1), (c2, t2) in zip(data, back):
        assert np.array_equal(c1.goal_offset, c2.goal_offset)
        assert np.array_equal(t1, t2)
    (tmp_path / "bad.jsonl").write_text('{"patch": [1], "goal": [1, 0], "waypoints": [[0, 0]]}\n{"goal": 1}\n')
    with pytest.raises(MalformedFile, match=":2:"):
        load_dataset_jsonl(tmp_path / "bad.jsonl")


def test_expert_trajectory_geometry():
    traj = expert_trajectory((10.0, 0.0))
    assert np.allclose(traj[:, 1], 0.0) and np.allclose(np.diff(traj[:, 0]), 0.5)
    short = expert_trajectory((2.0, 0.0))
    assert short[-1] == pytest.approx([2.0, 0.0])
    bent = expert_trajectory((10.0, 0.0), bend=2.0)
    assert bent[-1, 1] == pytest.approx(2.0)
