from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kiterunner.errors import (AllZeroDifferences, DidNotReachGoal, EmptyTrials, TooFewPairs,
                               ZeroOptimal)
from kiterunner.metrics_stats import (MetricSummary, build_report, compare, execution_time,
                                      intervention_count, pairwise_comparisons, path_efficiency,
                                      wilcoxon_signed_rank)
from kiterunner.sim_env import TrialResult

from oracles import wilcoxon_enumeration


def trial(interventions=0, actual=10.0, optimal=10.0, time=100.0, reached=True):
    return TrialResult(interventions, actual, optimal, time, reached)


def test_intervention_count():
    assert intervention_count([trial(0)] * 4) == 0.0
    assert intervention_count([trial(1)] * 5 + [trial(2)] * 10 + [trial(0)] * 5) == 1.25
    assert intervention_count([trial(1), trial(2), trial(3)]) == 2.0
    with pytest.raises(EmptyTrials):
        intervention_count([])


def test_path_efficiency():
    assert path_efficiency(trial(actual=405, optimal=405)) == 1.0
    assert path_efficiency(trial(actual=486, optimal=405)) == pytest.approx(1.2)
    assert path_efficiency(trial(actual=409.05, optimal=405)) == pytest.approx(1.01)
    with pytest.raises(DidNotReachGoal):
        path_efficiency(trial(reached=False))
    with pytest.raises(ZeroOptimal):
        path_efficiency(trial(optimal=0.0))


def test_execution_time():
    assert execution_time(trial(time=2392 * 0.25)) == 598.0
    assert execution_time(trial(time=580 + 2 * 10.0)) == 600.0
    with pytest.raises(DidNotReachGoal):
        execution_time(trial(reached=False))


def test_wilcoxon_all_positive_n5():
    r = wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0])
    assert r.W == 15 and r.n_effective == 5 and r.method == "exact"
    assert r.p_value == pytest.approx(0.0625, abs=1e-15)


def test_wilcoxon_errors():
    with pytest.raises(AllZeroDifferences):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    with pytest.raises(TooFewPairs):
        wilcoxon_signed_rank([1, 2, 3, 4, 0], [0, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1, 2], [1])
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1] * 6, [0] * 6, method="t")


def test_wilcoxon_constructed_ties():
    xs = [1, 0, 3, 5, 2, 7, 1, 4]
    ys = [0, 1, 1, 2, 4, 2, 1, 0]  # includes diffs 1 and -1, and one zero
    r = wilcoxon_signed_rank(xs, ys)
    W, p = wilcoxon_enumeration(xs, ys)
    assert (r.W, r.p_value) == (W, p)
    assert r.n_effective == 7


def test_wilcoxon_normal_branch():
    rng = np.random.default_rng(0)
    xs = rng.normal(0.5, 1, 20)
    ys = rng.normal(0, 1, 20)
    r = wilcoxon_signed_rank(xs, ys)
    assert r.method == "normal_approx" and 0 <= r.p_value <= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-4, 4), st.integers(-4, 4)), min_size=5, max_size=12))
def test_exact_matches_enumeration(pairs):
    xs = [a for a, _ in pairs]
    ys = [b for _, b in pairs]
    if sum(a != b for a, b in pairs) < 5:
        return
    r = wilcoxon_signed_rank(xs, ys)
    W, p = wilcoxon_enumeration(xs, ys)
    assert r.W == W
    assert r.p_value == pytest.approx(p, rel=1e-12, abs=1e-15)
    assert abs(r.W) <= r.n_effective * (r.n_effective + 1) / 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=5, max_size=25))
def test_antisymmetry(pairs):
    xs = [a for a, _ in pairs]
    ys = [b for _, b in pairs]
    try:
        r = wilcoxon_signed_rank(xs, ys)
    except (TooFewPairs, AllZeroDifferences):
        return
    s = wilcoxon_signed_rank(ys, xs)
    assert s.W == -r.W and s.p_value == r.p_value


def test_exact_and_normal_agree_at_12():
    rng = np.random.default_rng(3)
    for _ in range(50):
        xs = rng.normal(size=12)
        ys = rng.normal(size=12) + rng.uniform(-1, 1)
        e = wilcoxon_signed_rank(xs, ys, method="exact")
        n = wilcoxon_signed_rank(xs, ys, method="normal_approx")
        assert e.n_effective == 12
        assert abs(e.p_value - n.p_value) <= 0.02


def test_summary_and_report_single_method():
    s = MetricSummary.from_trials("LP_GP", [trial(1, 404, 400, 598.0), trial(2, 420, 400, 610.0),
                                            trial(0, reached=False)])
    assert s.IC == 1.0 and s.n_reached == 2
    assert s.PE == pytest.approx((1.01 + 1.05) / 2)
    rep = build_report([s])
    assert rep.report_csv().count("\n") == 2
    assert "(no pairwise comparisons)" in rep.text()
    with pytest.raises(ValueError):
        build_report([])


def test_report_renders_table_row():
    s = MetricSummary("Ours(LP+GP)", 1.25, 1.01, 598.12)
    text = build_report([s]).text()
    row = [line for line in text.splitlines() if line.startswith("-  ")][0]
    assert row.split() == ["-", "Ours(LP+GP)", "1.25", "1.01", "598.12"]


def test_three_methods_three_pairs(tmp_path):
    rng = np.random.default_rng(1)
    methods = {m: [trial(int(rng.integers(0, 5)), 400 + rng.random(), 400, 500 + rng.random())
                   for _ in range(8)] for m in ("A", "B", "C")}
    comps = pairwise_comparisons(methods, metrics=("IC",))
    assert [c.pair for c in comps] == ["A vs B", "A vs C", "B vs C"]
    rep = build_report([MetricSummary.from_trials(m, t) for m, t in methods.items()],
                       pairwise_comparisons(methods))
    rep.write(tmp_path)
    sig = (tmp_path / "significance.csv").read_text().splitlines()
    assert sig[0] == "world,pair,metric,W,n_effective,p,method" and len(sig) == 1 + 9


def test_compare_records_too_few_pairs():
    a = [trial(1)] * 3
    b = [trial(2)] * 3
    c = compare("A", a, "B", b, "IC")
    assert c.result is None and c.note == "TooFewPairs"
