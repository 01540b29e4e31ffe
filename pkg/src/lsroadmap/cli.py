"""Command-line pipeline driver.

Subcommands: gen, train, build, plan, apm, score, ablate.  Every run writes a
manifest (arguments, seeds, content hashes) next to its primary output.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, apm, evaluate, mapping, planner, roadmap as rm, storage, tasks
from .evaluate import PipelineConfig, derive_seed
from .mapping import EncoderMode, LossConfig
from .metrics import Metric
from .roadmap import EpsilonClustering, Linkage
from .tasks import TaskKind


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _clustering_arg(name: str):
    if name.startswith("epsilon:"):
        return EpsilonClustering(float(name.split(":", 1)[1]))
    return Linkage.parse(name)


_SUBPARSERS: dict[str, argparse.ArgumentParser] = {}


def build_parser() -> _Parser:
    parser = _Parser(prog="lsr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"lsr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a training dataset", parents=[_config_parent()])
    p.add_argument("--task", required=True, choices=[t.value for t in TaskKind])
    p.add_argument("--pairs", type=int, default=2500)
    p.add_argument("--action-frac", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train a mapping model on a dataset", parents=[_config_parent()])
    p.add_argument("--dataset", required=True)
    p.add_argument("--ld", type=int, default=12)
    p.add_argument("--mode", choices=["vae", "ae"], default="vae")
    p.add_argument("--gamma", type=float, default=100.0)
    p.add_argument("--baseline", action="store_true", help="shorthand for --gamma 0")
    p.add_argument("--metric", default="l1", choices=["l1", "l2", "linf"])
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--static-dm", type=float, default=None, help="disable the dynamic schedule at this margin")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--latent-out", default=None, help="also write the encoded dataset")

    p = sub.add_parser("build", help="build a roadmap from encoded tuples", parents=[_config_parent()])
    p.add_argument("--latent", required=True)
    p.add_argument("--metric", default="l1", choices=["l1", "l2", "linf"])
    p.add_argument("--cmax", type=int, default=1)
    p.add_argument("--tau-min", type=float, default=0.0)
    p.add_argument("--tau-max", type=float, default=3.0)
    p.add_argument("--tau", type=float, default=None, help="skip optimization, cut at this threshold")
    p.add_argument("--clustering", default="avg", help="avg|single|complete|epsilon:R")
    p.add_argument("--out", required=True)

    p = sub.add_parser("plan", help="plan between two task states", parents=[_config_parent()])
    p.add_argument("--roadmap", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--apn", default=None, help="fill actions with this APN model")
    p.add_argument("--aab", action="store_true", help="fill actions from roadmap AAB annotations")
    p.add_argument("--start-state", type=int, required=True)
    p.add_argument("--goal-state", type=int, required=True)
    p.add_argument("--max-fallback", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("apm", help="action proposal: train an APN or annotate a roadmap")
    apm_sub = p.add_subparsers(dest="apm_command", required=True)
    pt = apm_sub.add_parser("train", parents=[_config_parent()])
    pt.add_argument("--latent", required=True)
    pt.add_argument("--model", required=True)
    pt.add_argument("--samples", type=int, default=1, help="posterior samples per pair")
    pt.add_argument("--epochs", type=int, default=500)
    pt.add_argument("--dropout", type=float, default=0.3)
    pt.add_argument("--dataset", default=None, help="raw dataset (required for sampling augmentation)")
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--out", required=True)
    pa = apm_sub.add_parser("annotate", parents=[_config_parent()])
    pa.add_argument("--roadmap", required=True)
    pa.add_argument("--out", required=True)

    p = sub.add_parser("score", help="score planning and coverage", parents=[_config_parent()])
    p.add_argument("--roadmap", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in TaskKind])
    p.add_argument("--queries", type=int, default=1000)
    p.add_argument("--holdout", type=int, default=2500)
    p.add_argument("--coverage", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="run an ablation sweep from a config file", parents=[_config_parent()])
    p.add_argument("--out-dir", required=True)

    _SUBPARSERS.clear()
    _SUBPARSERS.update(sub.choices)
    _SUBPARSERS.update({f"apm {k}": v for k, v in apm_sub.choices.items()})
    return parser


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", default=None, help="JSON file of default argument values")
    return parent


def _apply_config(args: argparse.Namespace, parser_defaults: dict) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    try:
        overrides = json.loads(Path(args.config).read_text())
    except Exception as exc:
        raise storage.StorageError(f"failed to read config file {args.config}: {exc}") from exc
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise UsageError(f"config key {key!r} is not a recognized option")
        # the config supplies defaults only; explicit flags win
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)
    return args


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_gen(args) -> int:
    task = TaskKind.parse(args.task)
    fraction = evaluate.DEFAULT_ACTION_FRACTION[task] if args.action_frac is None else args.action_frac
    dataset = tasks.generate_dataset(task, args.pairs, fraction, args.seed)
    storage.save_dataset(dataset, task, args.seed, fraction, args.out)
    storage.write_manifest(args.out, "gen", vars(args), [], [args.out])
    print(f"wrote {len(dataset)} tuples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    task, header, dataset = storage.load_dataset(args.dataset)
    gamma = 0.0 if args.baseline else args.gamma
    cfg = LossConfig(gamma=gamma, metric=Metric.parse(args.metric))
    if args.static_dm is not None:
        cfg.dynamic_dm = False
        cfg.dm = args.static_dm
    if args.mode == "ae":
        cfg.weight_decay = 1e-4
    model = mapping.EncoderModel.init(
        EncoderMode.parse(args.mode),
        dim=header["dim"],
        ld=args.ld,
        hidden=args.hidden,
        rng_seed=derive_seed(args.seed, 2),
    )
    model, trace = mapping.train(model, dataset, cfg, epochs=args.epochs, rng_seed=derive_seed(args.seed, 3))
    storage.save_model(model, args.out, cfg=cfg, final_dm=trace.final_dm(), seed=args.seed, task=task)
    outputs = [args.out]
    if args.latent_out:
        latent = evaluate.encode_dataset(model, dataset, task)
        storage.save_latent(latent, task, model.ld, args.latent_out, model_hash=storage.sha256_file(args.out))
        outputs.append(args.latent_out)
    storage.write_manifest(args.out, "train", vars(args), [args.dataset], outputs)
    print(f"trained {args.mode} model (final dm {trace.final_dm():.3g}) -> {args.out}")
    return 0


def _cmd_build(args) -> int:
    task, header, latent = storage.load_latent(args.latent)
    metric = Metric.parse(args.metric)
    clustering = _clustering_arg(args.clustering)
    if args.tau is not None:
        graph = rm.build_lsr(latent, metric, args.tau, clustering)
        tau = args.tau
    else:
        tau, graph = rm.optimize_tau(
            latent, metric, clustering,
            tau_min=args.tau_min, tau_max=args.tau_max, c_max=args.cmax,
        )
    storage.save_roadmap(graph, args.out, task=task, dataset_hash=storage.sha256_file(args.latent))
    storage.write_manifest(args.out, "build", vars(args), [args.latent], [args.out])
    print(
        f"roadmap: {len(graph.regions)} regions, {len(graph.edges)} edges, "
        f"{graph.components} components at tau={tau:.4f} -> {args.out}"
    )
    return 0


def _cmd_plan(args) -> int:
    graph, payload = storage.load_roadmap(args.roadmap)
    model, _ = storage.load_model(args.model)
    task = TaskKind.parse(payload["task"])
    states = tasks.enumerate_states(task)
    if not (0 <= args.start_state < len(states) and 0 <= args.goal_state < len(states)):
        raise UsageError(f"state ids must be in [0, {len(states)})")
    rng = np.random.default_rng(args.seed)
    obs_start = tasks.render(task, states[args.start_state], rng)
    obs_goal = tasks.render(task, states[args.goal_state], rng)
    results = planner.plan(graph, model, obs_start, obs_goal, max_fallback=args.max_fallback)
    if args.apn:
        apn_model, _ = storage.load_apn(args.apn)
        results = [apm.fill_action_plan(r, apn_model) for r in results]
    elif args.aab:
        annotations = storage.load_aab(payload)
        results = [apm.fill_action_plan(r, annotations) for r in results]
    storage.save_plans(results, task, args.out)
    storage.write_manifest(args.out, "plan", vars(args), [args.roadmap, args.model], [args.out])
    print(f"{len(results)} shortest plan(s), length {len(results[0].node_ids)} -> {args.out}")
    return 0


def _cmd_apm(args) -> int:
    if args.apm_command == "annotate":
        graph, payload = storage.load_roadmap(args.roadmap)
        annotations = apm.aab_annotate(graph)
        task = TaskKind.parse(payload["task"]) if payload.get("task") else None
        storage.save_roadmap(graph, args.out, task=task, dataset_hash=payload.get("dataset_hash"), aab=annotations)
        storage.write_manifest(args.out, "apm annotate", vars(args), [args.roadmap], [args.out])
        print(f"annotated {len(annotations)} edges -> {args.out}")
        return 0

    task, header, latent = storage.load_latent(args.latent)
    model, _ = storage.load_model(args.model)
    if args.samples > 0:
        if not args.dataset:
            raise UsageError("--dataset is required when --samples > 0 (posterior sampling)")
        _, _, dataset = storage.load_dataset(args.dataset)
        action_tuples = [t for t in dataset if t.a == 1]
        latent_tuples = mapping.augment_apn_dataset(model, action_tuples, args.samples,
                                                    rng_seed=derive_seed(args.seed, 7))
    else:
        latent_tuples = [t for t in latent if t.a == 1]
    apn_model = apm.train_apn(latent_tuples, task, epochs=args.epochs, dropout=args.dropout,
                              rng_seed=derive_seed(args.seed, 6))
    storage.save_apn(apn_model, args.out, task=task, seed=args.seed)
    inputs = [args.latent, args.model] + ([args.dataset] if args.dataset else [])
    storage.write_manifest(args.out, "apm train", vars(args), inputs, [args.out])
    print(f"trained APN on {len(latent_tuples)} tuples -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    graph, _ = storage.load_roadmap(args.roadmap)
    model, _ = storage.load_model(args.model)
    task = TaskKind.parse(args.task)
    report = evaluate.score_planning(task, graph, model, args.queries, args.seed, holdout_size=args.holdout)
    rows = [
        {
            "task": task.value, "seed": args.seed, "n_queries": report.n_queries,
            "pct_all": f"{report.pct_all:.4f}", "pct_any": f"{report.pct_any:.4f}",
            "pct_trans": f"{report.pct_trans:.4f}", "n_unreachable": report.n_unreachable,
        }
    ]
    if args.coverage:
        holdout = evaluate.holdout_renders(task, args.holdout, derive_seed(args.seed, 4))
        ood = evaluate.make_ood_sources(task, args.holdout, derive_seed(args.seed, 8))
        coverage = evaluate.score_coverage(graph, model, holdout, ood)
        rows[0]["coverage_in_dist"] = f"{coverage.in_distribution_rate:.4f}"
        for name, rate in sorted(coverage.ood_rates.items()):
            rows[0][f"coverage_{name}"] = f"{rate:.4f}"
    storage.write_rows_csv(rows, args.out)
    storage.write_manifest(args.out, "score", vars(args), [args.roadmap, args.model], [args.out])
    print(
        f"%All={report.pct_all:.2f} %Any={report.pct_any:.2f} %Trans={report.pct_trans:.2f} "
        f"({report.n_unreachable} unreachable) -> {args.out}"
    )
    return 0


_ABLATION_KINDS = {
    "cmax": lambda d: evaluate.CmaxSweep([int(v) for v in d["values"]]),
    "dm-mode": lambda d: evaluate.DmMode(d["values"]),
    "clustering": lambda d: evaluate.ClusteringSweep([_clustering_arg(v) for v in d["values"]]),
    "latent-dim": lambda d: evaluate.LatentDimSweep([int(v) for v in d["values"]]),
    "dataset-size": lambda d: evaluate.DatasetSizeSweep([int(v) for v in d["values"]]),
    "encoder-mode": lambda d: evaluate.EncoderModeSweep(
        [(EncoderMode.parse(m), float(g)) for m, g in d["values"]]
    ),
}


def pipeline_config_from_dict(data: dict) -> PipelineConfig:
    config = PipelineConfig(task=TaskKind.parse(data.get("task", "ns")))
    for key, value in data.items():
        if key == "task":
            continue
        attr = key.replace("-", "_")
        if attr == "metric":
            value = Metric.parse(value)
        elif attr == "mode":
            value = EncoderMode.parse(value)
        elif attr == "clustering":
            value = _clustering_arg(value)
        elif not hasattr(config, attr):
            raise UsageError(f"unknown pipeline config key {key!r}")
        config = replace(config, **{attr: value})
    return config


def _cmd_ablate(args) -> int:
    if not args.config:
        raise UsageError("ablate requires --config")
    try:
        spec_doc = json.loads(Path(args.config).read_text())
    except Exception as exc:
        raise storage.StorageError(f"failed to read config file {args.config}: {exc}") from exc
    base = pipeline_config_from_dict(spec_doc.get("pipeline", {}))
    kind = spec_doc.get("ablation", {}).get("kind")
    if kind not in _ABLATION_KINDS:
        raise UsageError(f"unknown ablation kind {kind!r}, expected one of {sorted(_ABLATION_KINDS)}")
    spec = _ABLATION_KINDS[kind](spec_doc["ablation"])
    seeds = spec_doc.get("seeds", [0, 1, 2, 3, 4])

    rows = evaluate.run_ablation(base, spec, seeds)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows_path = out_dir / f"{kind}_rows.csv"
    summary_path = out_dir / f"{kind}_summary.csv"
    storage.write_rows_csv([vars(r) for r in rows], rows_path)
    storage.write_rows_csv(evaluate.summarize_rows(rows), summary_path)
    storage.write_manifest(rows_path, "ablate", vars(args), [args.config], [rows_path, summary_path])
    n_failed = sum(1 for r in rows if r.error)
    print(f"{len(rows)} rows ({n_failed} failed) -> {rows_path}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "build": _cmd_build,
    "plan": _cmd_plan,
    "apm": _cmd_apm,
    "score": _cmd_score,
    "ablate": _cmd_ablate,
}


def _parser_defaults(args) -> dict:
    key = args.command
    if key == "apm" and getattr(args, "apm_command", None):
        key = f"apm {args.apm_command}"
    subparser = _SUBPARSERS.get(key)
    if subparser is None:
        return {}
    return {action.dest: action.default for action in subparser._actions}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args, _parser_defaults(args))
        return _COMMANDS[args.command](args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (storage.StorageError, rm.NoRoadmapError, planner.PlanUnreachableError,
            mapping.TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


def _forward(command: str) -> None:
    sys.exit(cli_main([command, *sys.argv[1:]]))


def main_gen() -> None:
    _forward("gen")


def main_train() -> None:
    _forward("train")


def main_build() -> None:
    _forward("build")


def main_plan() -> None:
    _forward("plan")


def main_apm() -> None:
    _forward("apm")
