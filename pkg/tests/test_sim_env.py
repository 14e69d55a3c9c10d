from __future__ import annotations

import math

import numpy as np
import pytest

from kiterunner.errors import NoTraversablePointOnRoute, SizeTooSmall
from kiterunner.geo_raster import FeatureRaster, GeoRef, ProbabilityRaster
from kiterunner.sim_env import (CAPTURE_RADIUS, EMBED_DIM, INTERVENTION_PENALTY, VOCABULARY,
                                DynamicObstacle, InterventionCause, Mode, PolicyConfig, RobotState,
                                RouteTracker, World, apply_intervention, detect_intervention,
                                edge_clear_fraction, generate_world, load_world,
                                mean_pairwise_similarity, route_lower_bound, run_trial, save_world,
                                step)
from kiterunner.topo_graph import TopoEdge, TopoNode, TopologyGraph
from kiterunner.vlp import TagOracleProvider


def corridor(blocked=(), width=12, obstacles=(), open_cells=None):
    """20 x 60 m corridor along y = 10 with six graph nodes; node 5 is the gate."""
    H, W = 20, 60
    g = GeoRef(0.0, 0.0, 1.0, W, H)
    trav = np.zeros((H, W), dtype=bool)
    if open_cells is None:
        trav[10 - width // 2:10 + width // 2, :] = True
    else:
        for r, c in open_cells:
            trav[r, c] = True
    for r, c in blocked:
        trav[r, c] = False
    prov = TagOracleProvider(VOCABULARY, EMBED_DIM)
    nodes = []
    for i in range(6):
        tag = "gate" if i == 5 else "tree"
        refs = [f"scene=lawn;tags={tag};weight=0.8;noise=0.1;var={i}"]
        emb = np.stack([prov.embed_image(r) for r in refs])
        nodes.append(TopoNode(i, (5.0 + 9 * i, 10.0), emb, refs))
    graph = TopologyGraph(nodes, [TopoEdge(i, i + 1, 9.0) for i in range(5)], EMBED_DIM)
    return World("structured", 0, g, trav, FeatureRaster(g, np.zeros((H, W, 4), np.float32)),
                 list(obstacles), graph, 0, "go to the gate")


def truth_map(world):
    return ProbabilityRaster(world.georef, world.traversable.astype(float))


ROUTE = np.array([[5.0, 10.0], [50.0, 10.0]])


# ---------------------------------------------------------------- step

def test_step_zero_length_trajectory():
    w = corridor()
    r0 = RobotState((5.0, 10.0), 0.3, 2.0, 1.0)
    r1 = step(w, r0, np.tile([5.0, 10.0], (8, 1)))
    assert r1.pose == r0.pose and r1.heading == r0.heading
    assert r1.time == pytest.approx(2.25)
    assert r1.odometer == 1.0


def test_step_moves_along_segment():
    w = corridor()
    r1 = step(w, RobotState((5.0, 10.0)), [[6.0, 10.0]], dt=0.25, speed=1.5)
    assert r1.pose == pytest.approx((5.375, 10.0))
    assert r1.odometer == pytest.approx(0.375)


def test_step_crosses_waypoints():
    w = corridor()
    r1 = step(w, RobotState((5.0, 10.0)), [[5.2, 10.0], [5.2, 11.0]], dt=0.25, speed=1.5)
    assert r1.pose == pytest.approx((5.2, 10.175))
    # the odometer counts the net displacement of the step
    assert r1.odometer == pytest.approx(math.hypot(0.2, 0.175))


def test_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        step(corridor(), RobotState((5.0, 10.0)), [[6.0, 10.0]], dt=0.0)


def test_obstacle_loop_period_four_steps():
    ob = DynamicObstacle([[10.0, 10.0], [11.5, 10.0]], speed=3.0, radius=0.3)
    dt = 0.25
    for k in range(12):
        np.testing.assert_allclose(ob.position(k * dt), ob.position((k + 4) * dt), atol=1e-12)
    assert not np.allclose(ob.position(0.0), ob.position(2 * dt))


def test_obstacle_radius_must_be_positive():
    with pytest.raises(ValueError):
        DynamicObstacle([[0.0, 0.0], [1.0, 0.0]], 1.0, 0.0)


# ------------------------------------------------------- interventions

def test_no_intervention_when_progressing():
    w = corridor()
    tr = RouteTracker(ROUTE)
    for x in np.arange(6.0, 10.0, 0.375):
        tr.record([x, 10.0])
    assert detect_intervention(w, RobotState((10.0, 10.0)), tr) is None


def test_inside_dynamic_obstacle_is_collision():
    ob = DynamicObstacle([[12.0, 10.0]], speed=0.0, radius=0.5)
    w = corridor(obstacles=[ob])
    assert detect_intervention(w, RobotState((12.2, 10.0)), RouteTracker(ROUTE)) \
        is InterventionCause.COLLISION


def test_blocked_cell_is_collision():
    w = corridor(blocked=[(10, 20)])
    assert detect_intervention(w, RobotState((20.5, 10.5)), RouteTracker(ROUTE)) \
        is InterventionCause.COLLISION


def test_deviation_beyond_five_metres():
    w = corridor(width=16)
    assert detect_intervention(w, RobotState((20.0, 15.5)), RouteTracker(ROUTE)) \
        is InterventionCause.DEVIATION
    assert detect_intervention(w, RobotState((20.0, 14.5)), RouteTracker(ROUTE)) is None


def test_stall_after_window():
    w = corridor()
    tr = RouteTracker(ROUTE)
    robot = RobotState((10.0, 10.0))
    for _ in range(30):
        tr.record(robot.position)
    assert detect_intervention(w, robot, tr, window=30) is None
    tr.record(robot.position + [0.04, 0.0])
    assert detect_intervention(w, robot, tr, window=30) is InterventionCause.STALL


def test_teleport_to_closest_route_point():
    w = corridor()
    tr = RouteTracker(ROUTE)
    r = apply_intervention(w, RobotState((20.0, 13.0), 0.0, 5.0, 7.0, 2), tr)
    assert r.pose == pytest.approx((20.0, 10.0))
    assert r.interventions == 3
    assert r.time == pytest.approx(5.0 + INTERVENTION_PENALTY)
    assert r.odometer == pytest.approx(10.0)


def test_teleport_skips_blocked_route_stretch():
    w = corridor(blocked=[(r, c) for r in range(4, 16) for c in (20, 21)])
    tr = RouteTracker(ROUTE)
    r = apply_intervention(w, RobotState((20.0, 10.0)), tr)
    assert r.pose[0] > 21.0 and w.is_traversable(r.pose)


def test_fully_blocked_route_raises():
    w = corridor(open_cells=[(10, 5)])
    tr = RouteTracker(ROUTE)
    with pytest.raises(NoTraversablePointOnRoute):
        apply_intervention(w, RobotState((20.0, 10.0)), tr)


# -------------------------------------------------------------- worlds

@pytest.fixture(scope="module")
def worlds():
    return {k: generate_world(k, 200, 3) for k in ("structured", "unstructured")}


def test_generate_world_deterministic(tmp_path, worlds):
    again = generate_world("structured", 200, 3)
    save_world(worlds["structured"], tmp_path / "a.world")
    save_world(again, tmp_path / "b.world")
    assert (tmp_path / "a.world").read_bytes() == (tmp_path / "b.world").read_bytes()


def test_structured_edges_clear(worlds):
    assert edge_clear_fraction(worlds["structured"]) >= 0.95


def test_unstructured_scenes_more_similar(worlds):
    assert mean_pairwise_similarity(worlds["unstructured"].graph) > \
        mean_pairwise_similarity(worlds["structured"].graph)


def test_world_size_too_small():
    with pytest.raises(SizeTooSmall):
        generate_world("structured", 49, 0)
    with pytest.raises(ValueError):
        generate_world("swamp", 200, 0)


def test_world_round_trip(tmp_path, worlds):
    w = worlds["unstructured"]
    save_world(w, tmp_path / "u.world")
    back = load_world(tmp_path / "u.world")
    assert back.graph == w.graph and back.instruction == w.instruction
    np.testing.assert_array_equal(back.traversable, w.traversable)
    for t in (0.0, 13.7):
        np.testing.assert_array_equal(back.obstacle_state(t)[0], w.obstacle_state(t)[0])


def test_world_spawn_and_goal_traversable(worlds):
    for w in worlds.values():
        assert w.is_traversable(w.spawn)
        assert all(o.radius > 0 for o in w.obstacles)


# -------------------------------------------------------------- trials

def test_route_lower_bound_straight_line():
    assert route_lower_bound(ROUTE) == pytest.approx(45.0 - 1.0)
    # a right-angle corner can be cut by at most r * sqrt(2)
    bent = [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]
    assert route_lower_bound(bent) == pytest.approx(20.0 - CAPTURE_RADIUS * math.sqrt(2) - 1.0)


@pytest.mark.parametrize("mode", ["GP_ONLY", "LP_GP", "LP_ONLY"])
def test_trivial_corridor_reaches_goal(mode, lp_planner):
    w = corridor()
    res = run_trial(w, PolicyConfig(mode, planner=lp_planner, probability_map=truth_map(w)), seed=1)
    assert res.reached_goal and res.interventions == 0
    assert res.actual_path_length >= res.optimal_path_length - 1e-9
    assert res.route == [0, 1, 2, 3, 4, 5]


def test_trial_deterministic(lp_planner):
    w = corridor(blocked=[(9, 27), (10, 27)])
    cfg = PolicyConfig("LP_GP", planner=lp_planner, probability_map=truth_map(w))
    a, b = run_trial(w, cfg, seed=4), run_trial(w, cfg, seed=4)
    a.wall_time = b.wall_time = 0.0
    assert a == b


def test_odometer_and_penalty_bookkeeping(lp_planner):
    w = corridor(blocked=[(9, 27), (10, 27), (11, 27)])
    res = run_trial(w, PolicyConfig("LP_ONLY", planner=lp_planner), seed=2)
    assert res.interventions > 0
    prev_pose, prev_t, total = np.array([5.0, 10.0]), 0.0, 0.0
    for ev in res.events:
        pose = np.array(ev["pose"])
        if "intervention_cause" in ev:
            before = np.array(ev["intervention_pose"])
            total += np.hypot(*(before - prev_pose)) + np.hypot(*(pose - before))
            assert ev["t"] - prev_t == pytest.approx(0.25 + INTERVENTION_PENALTY)
        else:
            total += np.hypot(*(pose - prev_pose))
            assert ev["t"] - prev_t == pytest.approx(0.25)
        prev_pose, prev_t = pose, ev["t"]
    assert res.actual_path_length == pytest.approx(total, abs=1e-9)
    assert res.sim_time == pytest.approx(prev_t)


class _Spy:
    """Records every candidate set a trial draws."""

    def __init__(self, planner):
        self.planner, self.drawn = planner, []

    def sample(self, ctx, seed=None):
        out = self.planner.sample(ctx, seed=seed)
        self.drawn.append(np.array(out.candidates))
        return out


def test_lp_gp_executes_best_scored_candidate(lp_planner):
    w = corridor(blocked=[(9, 27), (10, 27)])
    spy = _Spy(lp_planner)
    res = run_trial(w, PolicyConfig("LP_GP", planner=spy, probability_map=truth_map(w)), seed=0)
    assert len(spy.drawn) == len(res.events)
    robot = RobotState((5.0, 10.0))
    for ev, cands in zip(res.events, spy.drawn):
        scores = ev["scores"]
        assert ev["selected_candidate"] == int(np.argmax(scores))
        assert ev["score"] == max(scores)
        moved = step(w, robot, cands[ev["selected_candidate"]] + robot.position)
        if "intervention_cause" in ev:
            assert moved.pose == pytest.approx(tuple(ev["intervention_pose"]), abs=1e-12)
        else:
            assert moved.pose == pytest.approx(tuple(ev["pose"]), abs=1e-12)
        robot = RobotState(tuple(ev["pose"]), 0.0, ev["t"])


def test_lp_gp_fewer_interventions_on_post_band(lp_planner):
    # two blocked cells across the lane centre just before node 3
    w = corridor(blocked=[(9, 27), (10, 27)])
    pm = truth_map(w)
    totals = {}
    for mode in (Mode.LP_ONLY, Mode.LP_GP):
        cfg = PolicyConfig(mode, planner=lp_planner, probability_map=pm, log_events=False)
        totals[mode] = sum(run_trial(w, cfg, seed=s).interventions for s in range(10))
    assert totals[Mode.LP_GP] < totals[Mode.LP_ONLY]


def test_timeout_is_not_an_error():
    w = corridor()
    res = run_trial(w, PolicyConfig("GP_ONLY", timeout=5.0, probability_map=truth_map(w)), seed=0)
    assert not res.reached_goal and res.sim_time >= 5.0
