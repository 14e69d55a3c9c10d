"""Benchmark metrics, Wilcoxon signed-rank tests and report tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import (AllZeroDifferences, DidNotReachGoal, EmptyTrials, TooFewPairs, ZeroOptimal)

EXACT_MAX_N = 12
MIN_PAIRS = 5


def intervention_count(trials) -> float:
    trials = list(trials)
    if not trials:
        raise EmptyTrials("no trials")
    return sum(t.interventions for t in trials) / len(trials)


def path_efficiency(trial) -> float:
    if not trial.reached_goal:
        raise DidNotReachGoal("path efficiency is undefined for a trial that timed out")
    if not trial.optimal_path_length > 0:
        raise ZeroOptimal("optimal path length must be positive")
    return trial.actual_path_length / trial.optimal_path_length


def execution_time(trial) -> float:
    if not trial.reached_goal:
        raise DidNotReachGoal("execution time is undefined for a trial that timed out")
    return trial.sim_time


@dataclass
class MetricSummary:
    method: str
    IC: float
    PE: float
    ET: float
    group: str = ""
    interventions: list = field(default_factory=list)
    efficiencies: list = field(default_factory=list)
    times: list = field(default_factory=list)
    n_trials: int = 0
    n_reached: int = 0

    @classmethod
    def from_trials(cls, method, trials, group=""):
        trials = list(trials)
        ic = intervention_count(trials)
        reached = [t for t in trials if t.reached_goal]
        pe = [path_efficiency(t) for t in reached]
        et = [execution_time(t) for t in reached]
        return cls(method, ic, float(np.mean(pe)) if pe else math.nan,
                   float(np.mean(et)) if et else math.nan, group,
                   [t.interventions for t in trials], pe, et, len(trials), len(reached))


@dataclass
class WilcoxonResult:
    W: float
    n_effective: int
    p_value: float
    method: str


def _signed_ranks(xs, ys):
    d = np.asarray(xs, dtype=np.float64) - np.asarray(ys, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    a = np.abs(d)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank of positions i..j
        i = j + 1
    return np.sign(d), ranks


def _exact_two_sided(ranks, W):
    """P(|W'| >= |W|) under random sign flips, counted exactly.

    Ranks are multiples of 1/2, so doubled ranks are integers and the null
    distribution of the doubled positive-rank sum is built by convolution.
    """
    r2 = np.rint(2 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    # with s = doubled positive-rank sum, the doubled statistic is 2s - total
    s = np.arange(total + 1)
    target = abs(int(round(2 * W)))
    hits = int(counts[np.abs(2 * s - total) >= target].sum())
    return min(1.0, hits / 2 ** len(r2))


def wilcoxon_signed_rank(xs, ys, alpha: float = 0.05, method: str = "auto") -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and tied magnitudes get midranks.
    ``W = sum sgn(x_i - y_i) * R_i``. The p-value is exact (sign-flip
    enumeration) for up to 12 non-zero pairs, otherwise a normal
    approximation using ``Var(W) = sum R_i^2`` with a continuity correction.
    ``method`` ("auto", "exact" or "normal_approx") overrides that choice.
    ``alpha`` is carried for reporting only.
    """
    if method not in ("auto", "exact", "normal_approx"):
        raise ValueError(f"unknown method {method!r}")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    sgn, ranks = _signed_ranks(xs, ys)
    n = len(ranks)
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    if n < MIN_PAIRS:
        raise TooFewPairs(f"{n} non-zero pairs, need at least {MIN_PAIRS}")
    W = float(np.sum(sgn * ranks))
    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        return WilcoxonResult(W, n, _exact_two_sided(ranks, W), "exact")
    sd = math.sqrt(float(np.sum(ranks ** 2)))
    z = max(abs(W) - 1.0, 0.0) / sd
    p = math.erfc(z / math.sqrt(2.0))
    return WilcoxonResult(W, n, min(1.0, p), "normal_approx")


@dataclass
class Comparison:
    """One paired test between two methods on one metric."""

    method_a: str
    method_b: str
    metric: str
    result: WilcoxonResult | None
    group: str = ""
    note: str = ""

    @property
    def pair(self):
        return f"{self.method_a} vs {self.method_b}"


def compare(method_a, trials_a, method_b, trials_b, metric, group="") -> Comparison:
    """Pair trials by index and run the test on one metric.

    PE and ET use only trial indices where both methods reached the goal.
    Test preconditions that fail are recorded in ``note`` instead of raised.
    """
    if metric == "IC":
        xs = [t.interventions for t in trials_a]
        ys = [t.interventions for t in trials_b]
    else:
        fn = path_efficiency if metric == "PE" else execution_time
        both = [(a, b) for a, b in zip(trials_a, trials_b) if a.reached_goal and b.reached_goal]
        xs = [fn(a) for a, _ in both]
        ys = [fn(b) for _, b in both]
    try:
        return Comparison(method_a, method_b, metric, wilcoxon_signed_rank(xs, ys), group)
    except (AllZeroDifferences, TooFewPairs) as exc:
        return Comparison(method_a, method_b, metric, None, group, type(exc).__name__)


def pairwise_comparisons(trials_by_method: dict, metrics=("IC", "PE", "ET"), group=""):
    out = []
    for a, b in combinations(list(trials_by_method), 2):
        for metric in metrics:
            out.append(compare(a, trials_by_method[a], b, trials_by_method[b], metric, group))
    return out


def _fmt(v, digits):
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def _fmt_p(p):
    return "<0.001" if p < 0.001 else f"{p:.3f}"


@dataclass
class BenchReport:
    summaries: list
    comparisons: list

    def metric_rows(self):
        return [[s.group, s.method, _fmt(s.IC, 6), _fmt(s.PE, 6), _fmt(s.ET, 6), s.n_trials,
                 s.n_reached] for s in self.summaries]

    def significance_rows(self):
        rows = []
        for c in self.comparisons:
            r = c.result
            rows.append([c.group, c.pair, c.metric,
                         "" if r is None else repr(r.W), "" if r is None else r.n_effective,
                         "NA" if r is None else f"{r.p_value:.6g}",
                         c.note or ("" if r is None else r.method)])
        return rows

    def report_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["world", "method", "IC", "PE", "ET", "trials", "reached"])
        w.writerows(self.metric_rows())
        return buf.getvalue()

    def significance_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["world", "pair", "metric", "W", "n_effective", "p", "method"])
        w.writerows(self.significance_rows())
        return buf.getvalue()

    def text(self):
        lines = []
        table = [["World", "Method", "IC", "PE", "ET"]]
        table += [[s.group or "-", s.method, _fmt(s.IC, 2), _fmt(s.PE, 2), _fmt(s.ET, 2)]
                  for s in self.summaries]
        lines += _align(table)
        lines.append("")
        if self.comparisons:
            sig = [["World", "Compared methods", "Metric", "p"]]
            sig += [[c.group or "-", c.pair, c.metric,
                     "NA" if c.result is None else _fmt_p(c.result.p_value)]
                    for c in self.comparisons]
            lines += _align(sig)
        else:
            lines.append("(no pairwise comparisons)")
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.report_csv(), encoding="utf-8")
        (out / "significance.csv").write_text(self.significance_csv(), encoding="utf-8")


def _align(rows):
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    out = []
    for k, r in enumerate(rows):
        out.append("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip())
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    return out


def build_report(summaries, comparisons=()) -> BenchReport:
    summaries = list(summaries)
    if not summaries:
        raise ValueError("report needs at least one summary")
    return BenchReport(summaries, list(comparisons))
