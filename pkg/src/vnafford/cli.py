"""Command-line entry point: ``vnafford {collect,train,eval,predict}``.

Every command writes ``run_manifest.json`` into its ``--out`` directory before
doing any work, and derives all randomness from its single ``--seed``.

Exit codes: 0 success, 2 usage, 3 infeasible training data, 4 artifact load
failure, 5 inference failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .datagen import DEFAULT_BETA, collect_offline, collect_online, load_dataset, make_scenes, save_dataset
from .errors import (CheckpointLoadError, DatasetLoadError, NoValidProposalError, TrainingInfeasibleError,
                     UndefinedMetricError)
from .evalkit import (SETTINGS, EvalReport, eval_equivariance_consistency, eval_f1, eval_success_rate,
                      export_heatmap, make_test_cases, posed_scene)
from .heads import infer_best_action, load_model, save_model
from .simenv import PrimitiveType, generate_specs, initial_state, load_specs, primitive, render_cloud
from .trainer import TrainConfig, train, write_metrics

log = logging.getLogger("vnafford")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_LOAD, EXIT_INFERENCE = 0, 2, 3, 4, 5

MANIFEST = "run_manifest.json"
CHECKPOINT = "checkpoint.npz"
METRICS = "metrics.csv"
CONFIG = "config.json"
REPORT = "report.json"
ACTION = "action.json"
HEATMAP = "heatmap.ply"


class UsageError(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    seed: int
    code_version: str
    output_dir: str
    args: dict = field(default_factory=dict)
    started_at: str = field(default_factory=_now)
    finished_at: str | None = None
    status: str = "running"

    def write(self) -> None:
        Path(self.output_dir, MANIFEST).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def _seed_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


# ---------------------------------------------------------------- commands

def cmd_collect(args) -> None:
    if args.online and not args.checkpoint:
        raise UsageError("--online requires --checkpoint")
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    n_objects = args.n_objects or max(1, -(-args.n // 10))
    specs = generate_specs(args.family, n_objects, [args.seed, 0], setting=args.setting)
    scenes = make_scenes(specs, args.n_points, _seed_rng(args.seed, 1))
    rng = _seed_rng(args.seed, 2)
    if args.online:
        model = load_model(args.checkpoint)
        if model.primitive != primitive(args.primitive):
            raise UsageError(f"checkpoint was trained for {model.primitive.value}")
        ds = collect_online(model, scenes, args.n, args.primitive, rng, workers=args.workers)
    else:
        ds = collect_offline(scenes, args.n, args.primitive, rng, beta=args.beta, workers=args.workers)
    ds.meta.update(family=args.family, setting=args.setting, seed=args.seed)
    save_dataset(ds, args.out)
    log.info("collected %d records (%d positive)", len(ds), ds.manifest["n_positive"])


def cmd_train(args) -> None:
    if not Path(args.data).is_dir():
        raise UsageError(f"dataset directory {args.data} does not exist")
    if args.config and not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} does not exist")
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    ds = load_dataset(args.data, seed=cfg.seed)
    out = Path(args.out)
    (out / CONFIG).write_text(cfg.to_json() + "\n")
    res = train(ds, cfg)
    save_model(out / CHECKPOINT, res.model)
    write_metrics(res.log, out / METRICS)
    if len(res.online):
        save_dataset(res.online, out / "online")


def cmd_eval(args) -> None:
    model = load_model(args.checkpoint)
    prim = model.primitive
    specs = generate_specs(args.family, args.n_objects, [args.seed, 0])
    rate = eval_success_rate(model, specs, prim, args.setting, args.n_episodes, k=args.k, seed=args.seed,
                             n_points=model.cfg.n_points, workers=args.workers)
    n_f1 = min(args.n_objects, args.n_episodes)
    cases = make_test_cases(specs[:n_f1], prim, args.setting, args.seed + 1, per_object=args.f1_per_object,
                            n_points=model.cfg.n_points)
    try:
        f1 = eval_f1(model, cases)
    except UndefinedMetricError:
        log.warning("F1 undefined: %d test records of a single class", len(cases))
        f1 = None
    _, cloud, _, _ = posed_scene(specs[0], args.setting, args.seed, 0, model.cfg.n_points)
    aff_dev, prop_dev = eval_equivariance_consistency(model, cloud, 3, _seed_rng(args.seed, 3))
    report = EvalReport(args.setting, prim.value, f1, rate, args.n_episodes,
                        {"affordance_dev": aff_dev, "proposal_geodesic_dev": prop_dev},
                        {"seed": args.seed, "n_objects": args.n_objects, "k": args.k, "f1_records": len(cases)},
                        args.family)
    Path(args.out, REPORT).write_text(report.to_json() + "\n")
    log.info("%s success rate %.4f f1 %s", args.setting, rate, f1)


def cmd_predict(args) -> None:
    if not Path(args.object_spec).is_file():
        raise UsageError(f"object spec {args.object_spec} does not exist")
    model = load_model(args.checkpoint)
    try:
        spec = load_specs(args.object_spec)[0]
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise DatasetLoadError(f"cannot read object spec {args.object_spec}: {exc}") from exc
    rng = _seed_rng(args.seed)
    cloud = render_cloud(initial_state(spec, rng), model.cfg.n_points, rng)
    pred = infer_best_action(model, cloud, args.k, rng, prim=args.primitive)
    doc = {"primitive": primitive(args.primitive).value, "contact_point_m": cloud.points[pred.point_index].tolist(),
           **pred.to_dict()}
    out = Path(args.out)
    (out / ACTION).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    export_heatmap(cloud, pred.affordance, out / HEATMAP)


# ---------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vnafford", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    prims = [x.value for x in PrimitiveType]

    c = sub.add_parser("collect", help="collect interaction records")
    c.add_argument("--family", choices=["drawer", "door"], required=True)
    c.add_argument("--primitive", choices=prims, required=True)
    c.add_argument("--n", type=int, required=True)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--online", action="store_true", help="choose actions with --checkpoint")
    c.add_argument("--checkpoint")
    c.add_argument("--setting", choices=["identity", *SETTINGS], default="z")
    c.add_argument("--n-objects", type=int, default=0, help="default: one object per 10 records")
    c.add_argument("--n-points", type=int, default=256)
    c.add_argument("--beta", type=float, default=DEFAULT_BETA)
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_collect, config=None)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--workers", type=int, default=1, help="accepted for symmetry; training runs in-process")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="F1, success rate and equivariance report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--setting", choices=SETTINGS, required=True)
    e.add_argument("--n-episodes", type=int, required=True)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--family", choices=["drawer", "door"], default="drawer")
    e.add_argument("--n-objects", type=int, default=100)
    e.add_argument("--k", type=int, default=100)
    e.add_argument("--f1-per-object", type=int, default=20)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval, config=None)

    r = sub.add_parser("predict", help="best action and affordance heatmap for one object")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--object-spec", required=True)
    r.add_argument("--primitive", choices=prims, required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--k", type=int, default=100)
    r.add_argument("--workers", type=int, default=1, help="accepted for symmetry; one inference runs in-process")
    r.set_defaults(func=cmd_predict, config=None)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "n_episodes", 1) < 1 or getattr(args, "workers", 1) < 1 or getattr(args, "k", 1) < 1:
        print("error: --n-episodes, --workers and --k must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else -1
    manifest = RunManifest(args.command, args.config, seed, __version__, str(out),
                           {k: v for k, v in vars(args).items() if k != "func"})
    manifest.write()
    torch.set_num_threads(1)
    try:
        args.func(args)
        code = EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except TrainingInfeasibleError as exc:
        print(f"error: infeasible training data: {exc}", file=sys.stderr)
        code = EXIT_INFEASIBLE
    except (DatasetLoadError, CheckpointLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_LOAD
    except NoValidProposalError as exc:
        print(f"error: inference failed: {exc}", file=sys.stderr)
        code = EXIT_INFERENCE
    manifest.finished_at = _now()
    manifest.status = "ok" if code == EXIT_OK else f"exit {code}"
    manifest.write()
    return code


if __name__ == "__main__":
    sys.exit(main())
