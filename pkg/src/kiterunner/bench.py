"""Seeded ablation benchmark: every mode on paired worlds of both kinds."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .diffusion_lp import DiffusionLocalPlanner
from .metrics_stats import MetricSummary, build_report, pairwise_comparisons
from .sim_env import (BENCH_BETA_COST, TIMEOUT, Mode, PolicyConfig, TrialResult, default_planner,
                      derive_seed, generate_world, run_trial, world_probability_map)

KINDS = ("structured", "unstructured")
MODES = (Mode.LP_ONLY.value, Mode.GP_ONLY.value, Mode.LP_GP.value)


@dataclass
class BenchConfig:
    master_seed: int = 0
    trials: int = 20
    kinds: tuple = KINDS
    modes: tuple = MODES
    size: int = 200
    workers: int = 1
    lp_samples: int = 2000
    lp_epochs: int = 150
    lp_bend: float = 3.5
    gp_epochs: int = 200
    beta_cost: float = BENCH_BETA_COST
    n_candidates: int = 8
    timeout: float = TIMEOUT

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.kinds = tuple(self.kinds)
        self.modes = tuple(Mode(m).value for m in self.modes)


@dataclass
class BenchResult:
    config: BenchConfig
    records: list  # one dict per (kind, trial, mode), in a fixed order
    report: object = None
    trials: dict = field(default_factory=dict)  # (kind, mode) -> [TrialResult | None]


def trial_seeds(master_seed, kind, index):
    """(world seed, trial seed) for one bench slot."""
    return derive_seed("bench-world", master_seed, kind, index), derive_seed("bench-trial", master_seed,
                                                                             kind, index)


def _slot(job):
    cfg, kind, index, planner, events_dir = job
    world_seed, seed = trial_seeds(cfg.master_seed, kind, index)
    out = []
    try:
        world = generate_world(kind, cfg.size, world_seed)
        pmap = None
        if any(m != Mode.LP_ONLY.value for m in cfg.modes):
            pmap, _ = world_probability_map(world, world_seed, epochs=cfg.gp_epochs)
    except Exception as exc:  # recorded, the bench carries on
        return [{"world": kind, "trial": index, "mode": m, "status": "error",
                 "error": f"{type(exc).__name__}: {exc}"} for m in cfg.modes]
    for mode in cfg.modes:
        policy = PolicyConfig(mode, beta_cost=cfg.beta_cost, n_candidates=cfg.n_candidates,
                              timeout=cfg.timeout, planner=planner, probability_map=pmap)
        rec = {"world": kind, "trial": index, "mode": mode, "world_seed": world_seed}
        try:
            res = run_trial(world, policy, seed)
        except Exception as exc:
            rec.update(status="error", error=f"{type(exc).__name__}: {exc}")
            out.append(rec)
            continue
        if events_dir is not None:
            write_events(res.events, Path(events_dir) / f"{kind}-{index:03d}-{mode}.jsonl")
        rec.update(status="ok", **res.summary())
        rec["world"], rec["trial"] = kind, index
        out.append(rec)
    return out


def write_events(events, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")


def _result_from_record(rec):
    return TrialResult(rec["interventions"], rec["actual_path_length"], rec["optimal_path_length"],
                       rec["sim_time"], rec["reached_goal"], [], rec["mode"], rec["world"], rec["seed"],
                       rec["route"], rec["causes"])


def summarize(records, kinds=KINDS, modes=MODES):
    """Metric summaries and paired tests per world kind.

    A trial index enters the paired tests only if every mode completed it.
    """
    summaries, comparisons, table = [], [], {}
    for kind in kinds:
        rows = [r for r in records if r["world"] == kind]
        if not rows:
            continue
        indices = sorted({r["trial"] for r in rows})
        by = {(r["trial"], r["mode"]): r for r in rows}
        complete = [i for i in indices if all(by.get((i, m), {}).get("status") == "ok" for m in modes)]
        paired = {}
        for mode in modes:
            ok = [_result_from_record(by[(i, mode)]) for i in indices
                  if by.get((i, mode), {}).get("status") == "ok"]
            table[(kind, mode)] = ok
            if ok:
                summaries.append(MetricSummary.from_trials(mode, ok, group=kind))
            paired[mode] = [_result_from_record(by[(i, mode)]) for i in complete]
        if complete:
            comparisons += pairwise_comparisons(paired, group=kind)
    return summaries, comparisons, table


def run_bench(config: BenchConfig | None = None, out_dir=None,
              planner: DiffusionLocalPlanner | None = None, **overrides) -> BenchResult:
    """Run the benchmark; results do not depend on ``workers``.

    Without ``planner`` one diffusion planner is trained from the master seed
    and shared by every trial.
    """
    cfg = config or BenchConfig(**overrides)
    if config is not None and overrides:
        cfg = BenchConfig(**{**asdict(config), **overrides})
    if planner is None and any(m != Mode.GP_ONLY.value for m in cfg.modes):
        planner = default_planner(cfg.master_seed, n_samples=cfg.lp_samples, bend=cfg.lp_bend,
                                  epochs=cfg.lp_epochs)
    events_dir = None
    if out_dir is not None:
        events_dir = Path(out_dir) / "events"
        events_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, kind, i, planner, events_dir) for kind in cfg.kinds for i in range(cfg.trials)]
    if cfg.workers == 1:
        chunks = [_slot(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_slot, jobs))
    records = [r for chunk in chunks for r in chunk]

    summaries, comparisons, table = summarize(records, cfg.kinds, cfg.modes)
    report = build_report(summaries, comparisons) if summaries else None
    if out_dir is not None:
        out = Path(out_dir)
        if report is not None:
            report.write(out)
            (out / "report.txt").write_text(report.text(), encoding="utf-8")
        with open(out / "trials.jsonl", "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return BenchResult(cfg, records, report, table)


def load_records(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
