"""Command-line interface.

Every command writes under ``--out DIR``. The master seed comes from
``--seed``, else the ``KITE_SEED`` environment variable, else 0. A
``--config FILE`` of ``key = value`` lines supplies defaults that explicit
flags override. Exit status is 0 on success and 2 on bad input.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import bench as bench_mod
from .diffusion_lp import (DiffusionLocalPlanner, MLPNoisePredictor, load_dataset_jsonl,
                           make_trajectory_dataset, save_dataset_jsonl, train_noise_predictor)
from .errors import KiteRunnerError
from .global_planner import (FocalLossParams, TraversabilityClassifier, load_samples_csv,
                             predict_map, save_samples_csv, train_traversability, TrainSample)
from .metrics_stats import build_report
from .sim_env import (BENCH_BETA_COST, TIMEOUT, Mode, PolicyConfig, edge_clear_fraction,
                      generate_world, load_world, mean_pairwise_similarity, plan_world_route,
                      run_trial, save_world, world_probability_map, default_planner)
from .topo_graph import save_graph
from .vlp import extract_landmarks_rulebased, similarity_matrix

EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("KITE_SEED")
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"KITE_SEED must be an integer, got {env!r}") from None


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Keys use flag names."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_planner(path, n_candidates=8):
    return DiffusionLocalPlanner.from_predictor(MLPNoisePredictor.load(path), n_candidates=n_candidates)


def _write_loss_csv(history, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v!r}\n")


# --------------------------------------------------------------------------
# commands


def cmd_gen_world(args):
    out = _out_dir(args)
    seed = _seed(args)
    world = generate_world(args.kind, args.size, seed)
    stem = f"{args.kind}-{seed}"
    save_world(world, out / f"{stem}.world")
    save_graph(world.graph, out / f"{stem}.graph.json")
    print(f"{stem}: {args.size}x{args.size} cells, {len(world.graph)} nodes, "
          f"{len(world.graph.edges)} edges, {len(world.obstacles)} dynamic obstacles")
    print(f"edge clear fraction {edge_clear_fraction(world):.3f}, "
          f"mean node similarity {mean_pairwise_similarity(world.graph):.3f}")
    print(f"instruction: {world.instruction}")
    return 0


def cmd_build_graph(args):
    """Export the world's topology graph and the landmark similarities and route."""
    world = load_world(_require(args.world, "--world"))
    out = _out_dir(args)
    save_graph(world.graph, out / "graph.json")
    instruction = args.instruction or world.instruction
    landmarks = extract_landmarks_rulebased(instruction)
    S = similarity_matrix(world.graph, landmarks, world.provider())
    S.to_csv(out / "similarity.csv")
    path = plan_world_route(world, instruction, args.beta_cost)
    doc = {"instruction": instruction, "landmarks": list(landmarks), "nodes": path.nodes,
           "matched": path.matched_landmarks, "value": path.total_value, "length": path.length}
    (out / "route.json").write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    print(f"landmarks {list(landmarks)} -> route of {len(path.nodes)} nodes, {path.length:.1f} m")
    return 0


def cmd_train(args):
    out = _out_dir(args)
    seed = _seed(args)
    if args.lp_data is None and args.gp_data is None and not args.synthetic:
        raise UsageError("give --lp-data and/or --gp-data, or --synthetic N")
    wrote = []
    lp_data = None
    if args.lp_data is not None:
        lp_data = load_dataset_jsonl(_require(args.lp_data, "--lp-data"))
    elif args.synthetic:
        lp_data = make_trajectory_dataset(args.synthetic, seed=seed, bend=args.bend)
        save_dataset_jsonl(lp_data, out / "lp_data.jsonl")
    if lp_data is not None:
        est = train_noise_predictor(lp_data, epochs=args.lp_epochs, seed=seed)
        est.predictor_.save(out / "noise_predictor.ckpt")
        _write_loss_csv(est.loss_history_, out / "lp_loss.csv")
        wrote.append(f"noise_predictor.ckpt (final loss {est.loss_history_[-1]:.5f})")

    samples = None
    if args.gp_data is not None:
        samples = load_samples_csv(_require(args.gp_data, "--gp-data"))
    elif args.synthetic:
        world = generate_world("structured", 100, seed)
        samples = world.traversability_samples(n_per_class=max(args.synthetic // 2, 10), seed=seed)
        save_samples_csv(*samples, out / "gp_data.csv")
    if samples is not None:
        X, y = samples
        params = FocalLossParams(args.lambda_, args.gamma)
        model = train_traversability([TrainSample(x, int(l)) for x, l in zip(X, y)], params,
                                     epochs=args.gp_epochs, seed=seed, hidden_units=args.hidden)
        model.save(out / "traversability.ckpt")
        _write_loss_csv(model.loss_history_, out / "gp_loss.csv")
        wrote.append(f"traversability.ckpt (final loss {model.loss_history_[-1]:.5f})")
    for line in wrote:
        print("wrote", line)
    return 0


def cmd_run_trial(args):
    world = load_world(_require(args.world, "--world"))
    out = _out_dir(args)
    seed = _seed(args)
    mode = Mode(args.mode)
    planner = pmap = None
    if mode != Mode.GP_ONLY:
        planner = (_load_planner(args.lp_checkpoint, args.candidates) if args.lp_checkpoint
                   else default_planner(seed))
    if mode != Mode.LP_ONLY:
        if args.gp_checkpoint:
            pmap = predict_map(TraversabilityClassifier.load(args.gp_checkpoint), world.features)
        else:
            pmap, _ = world_probability_map(world, world.seed)
    policy = PolicyConfig(mode, beta_cost=args.beta_cost, n_candidates=args.candidates,
                          timeout=args.timeout, planner=planner, probability_map=pmap,
                          instruction=args.instruction)
    res = run_trial(world, policy, seed)
    bench_mod.write_events(res.events, out / "events.jsonl")
    summary = res.summary()
    (out / "trial.json").write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{mode.value}: reached={res.reached_goal} interventions={res.interventions} "
          f"path={res.actual_path_length:.1f} m optimal>={res.optimal_path_length:.1f} m "
          f"time={res.sim_time:.1f} s")
    return 0


def cmd_run_bench(args):
    out = _out_dir(args)
    planner = _load_planner(args.lp_checkpoint, args.candidates) if args.lp_checkpoint else None
    cfg = bench_mod.BenchConfig(master_seed=_seed(args), trials=args.trials,
                                kinds=tuple(args.kinds.split(",")),
                                modes=tuple(args.modes.split(",")), size=args.size,
                                workers=args.workers, lp_samples=args.lp_samples,
                                lp_epochs=args.lp_epochs, gp_epochs=args.gp_epochs,
                                beta_cost=args.beta_cost, n_candidates=args.candidates,
                                timeout=args.timeout)
    for kind in cfg.kinds:
        if kind not in bench_mod.KINDS:
            raise UsageError(f"unknown world kind {kind!r}")
    result = bench_mod.run_bench(cfg, out_dir=out, planner=planner)
    failed = [r for r in result.records if r["status"] != "ok"]
    if result.report is not None:
        sys.stdout.write(result.report.text())
    for r in failed:
        print(f"trial failed: {r['world']} #{r['trial']} {r['mode']}: {r['error']}", file=sys.stderr)
    return 0


def cmd_report(args):
    records = bench_mod.load_records(_require(args.trials_file, "--trials-file"))
    kinds = tuple(dict.fromkeys(r["world"] for r in records))
    modes = tuple(dict.fromkeys(r["mode"] for r in records))
    summaries, comparisons, _ = bench_mod.summarize(records, kinds, modes)
    if not summaries:
        raise UsageError("no completed trials in the input")
    report = build_report(summaries, comparisons)
    out = _out_dir(args)
    report.write(out)
    sys.stdout.write(report.text())
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (default: $KITE_SEED, else 0)")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--config", default=None, help="key = value file of defaults")

    p = argparse.ArgumentParser(prog="kiterunner", description="Language-guided navigation simulator.")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    g = sub.add_parser("gen-world", parents=[common], formatter_class=fmt,
                       help="generate a world bundle and its graph")
    g.add_argument("--kind", choices=bench_mod.KINDS, default="structured")
    g.add_argument("--size", type=int, default=200, help="cells per side (1 m cells)")
    g.set_defaults(func=cmd_gen_world)

    b = sub.add_parser("build-graph", parents=[common], formatter_class=fmt,
                       help="export graph, landmark similarities and the planned route")
    b.add_argument("--world", default=None, help="world bundle from gen-world")
    b.add_argument("--instruction", default=None, help="route instruction (default: the world's)")
    b.add_argument("--beta-cost", type=float, default=BENCH_BETA_COST, help="route cost per meter")
    b.set_defaults(func=cmd_build_graph)

    t = sub.add_parser("train", parents=[common], formatter_class=fmt,
                       help="train the noise predictor and the traversability model")
    t.add_argument("--lp-data", default=None, help="JSON-lines trajectory dataset")
    t.add_argument("--gp-data", default=None, help="CSV of features and 0/1 label")
    t.add_argument("--synthetic", type=int, default=0,
                   help="generate N synthetic samples for any dataset not given")
    t.add_argument("--bend", type=float, default=3.5, help="lateral veer of synthetic experts (m)")
    t.add_argument("--lambda", dest="lambda_", type=float, default=3.0, help="focal loss lambda")
    t.add_argument("--gamma", type=float, default=2.0, help="focal loss gamma")
    t.add_argument("--hidden", type=int, default=16, help="hidden units of the traversability model")
    t.add_argument("--lp-epochs", type=int, default=150)
    t.add_argument("--gp-epochs", type=int, default=200)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run-trial", parents=[common], formatter_class=fmt, help="run one trial")
    r.add_argument("--world", default=None, help="world bundle from gen-world")
    r.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.LP_GP.value)
    r.add_argument("--instruction", default=None, help="route instruction (default: the world's)")
    r.add_argument("--lp-checkpoint", default=None, help="noise predictor (default: train one)")
    r.add_argument("--gp-checkpoint", default=None,
                   help="traversability model (default: train on the world)")
    r.add_argument("--beta-cost", type=float, default=BENCH_BETA_COST)
    r.add_argument("--candidates", type=int, default=8, help="K candidates per cycle")
    r.add_argument("--timeout", type=float, default=TIMEOUT, help="simulated seconds")
    r.set_defaults(func=cmd_run_trial)

    n = sub.add_parser("run-bench", parents=[common], formatter_class=fmt,
                       help="all modes on seeded worlds of both kinds")
    n.add_argument("--trials", type=int, default=20, help="trials per mode and world kind")
    n.add_argument("--kinds", default=",".join(bench_mod.KINDS))
    n.add_argument("--modes", default=",".join(bench_mod.MODES))
    n.add_argument("--size", type=int, default=200)
    n.add_argument("--workers", type=int, default=1, help="worker processes")
    n.add_argument("--lp-checkpoint", default=None, help="noise predictor (default: train one)")
    n.add_argument("--lp-samples", type=int, default=2000)
    n.add_argument("--lp-epochs", type=int, default=150)
    n.add_argument("--gp-epochs", type=int, default=200)
    n.add_argument("--beta-cost", type=float, default=BENCH_BETA_COST)
    n.add_argument("--candidates", type=int, default=8)
    n.add_argument("--timeout", type=float, default=TIMEOUT)
    n.set_defaults(func=cmd_run_bench)

    q = sub.add_parser("report", parents=[common], formatter_class=fmt,
                       help="rebuild report tables from trials.jsonl")
    q.add_argument("--trials-file", default=None, help="trials.jsonl from run-bench")
    q.set_defaults(func=cmd_report)
    return p


def _apply_config(parser, argv):
    """Re-parse with config-file values installed as subcommand defaults."""
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    values = read_config(args.config)
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices[args.command]
    known = {a.dest: a for a in sp._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in known or key in ("help", "config"):
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        action = known[key]
        try:
            defaults[key] = action.type(raw) if action.type else raw
        except ValueError:
            raise UsageError(f"{args.config}: bad value for {key}: {raw!r}") from None
        if action.choices is not None and defaults[key] not in action.choices:
            raise UsageError(f"{args.config}: {key} must be one of {list(action.choices)}")
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if exc.code is not None else 0
    except (UsageError, KiteRunnerError, FileNotFoundError, ValueError) as exc:
        print(f"kiterunner: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
