"""Command-line pipeline: ``gen`` data, ``train`` models, ``eval`` energy drift, ``report`` tables."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import jsonschema

from .constraints import CONSTRAINT_KINDS, ConstraintSpec
from .evaluation import aggregate, read_report, write_energy_csv, write_report
from .models import MODEL_KINDS, OracleModel, load_checkpoint
from .physics import SYSTEMS, generate_dataset, get_system, read_ndjson, write_ndjson
from .training import TrainConfig, train

log = logging.getLogger("constrdyn")

SEED_ENV = "CONSTRDYN_SEED"

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["task", "dataset", "out_dir"],
    "properties": {
        "task": {"enum": sorted(SYSTEMS)},
        "dataset": {"type": "string"},
        "out_dir": {"type": "string"},
        "model_kind": {"enum": sorted(k for k in MODEL_KINDS if k != "oracle")},
        "constraint": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(CONSTRAINT_KINDS)},
                "weight": {"type": "number", "minimum": 0},
                "bounds": {"type": ["array", "null"], "items": {"type": "number"}},
            },
        },
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden_layers": {"type": "integer", "minimum": 0},
                "hidden_units": {"type": "integer", "minimum": 1},
                "activation": {"enum": ["softplus", "tanh", "relu"]},
                "n_blocks": {"type": "integer", "minimum": 1},
                "block_layers": {"type": "integer", "minimum": 0},
                "block_units": {"type": "integer", "minimum": 1},
                "latent": {"enum": ["node", "hnn"]},
            },
        },
    },
}


class CliError(Exception):
    pass


def resolve_seed(flag, fallback=0):
    """Seed precedence: command-line flag, then $CONSTRDYN_SEED, then ``fallback``."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise CliError(f"{SEED_ENV}={env!r} is not an integer") from None
    return fallback


def load_run_config(path, seed_flag=None):
    """Validate a training config and return ``(TrainConfig, dataset_path, out_dir)``.

    Relative paths are resolved against the config file's directory.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    try:
        jsonschema.validate(raw, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise CliError(f"{path}: invalid config at {where}: {exc.message}") from None
    base = os.path.dirname(os.path.abspath(path))
    dataset = os.path.normpath(os.path.join(base, raw["dataset"]))
    out_dir = os.path.normpath(os.path.join(base, raw["out_dir"]))
    system = get_system(raw["task"])
    cfg = TrainConfig(
        task=system.name,
        model_kind=raw.get("model_kind", "node"),
        constraint=ConstraintSpec(**raw.get("constraint", {"kind": "none"})),
        lr=raw.get("lr", 1e-4),
        epochs=raw.get("epochs", 1000),
        batch_size=raw.get("batch_size", system.batch_size),
        seed=resolve_seed(seed_flag, raw.get("seed", 0)),
        checkpoint_every=raw.get("checkpoint_every", 0),
        model=raw.get("model", {}),
    )
    return cfg, dataset, out_dir


def cmd_gen(args):
    seed = resolve_seed(args.seed)
    ds = generate_dataset(args.task, n_traj=args.n_traj, n_samples=args.n_samples,
                          noise_sigma=args.sigma, seed=seed, sampler=args.sampler, jobs=args.jobs)
    write_ndjson(ds, args.out)
    n = sum(len(tr.times) for tr in ds.trajectories)
    print(f"gen: {ds.task} seed={seed} sigma={ds.noise_sigma:g} -> {len(ds.trajectories)} "
          f"trajectories, {n} samples, {args.out}")


def cmd_train(args):
    cfg, dataset_path, out_dir = load_run_config(args.config, args.seed)
    if not os.path.isfile(dataset_path):
        raise CliError(f"dataset not found: {dataset_path}")
    ds = read_ndjson(dataset_path, task=cfg.task)
    dim = ds.trajectories[0].states.shape[-1]
    if dim != get_system(cfg.task).state_dim:
        raise CliError(f"dataset states have dimension {dim}, task {cfg.task} needs "
                       f"{get_system(cfg.task).state_dim}")
    result = train(cfg, ds, out_dir=out_dir)
    last = result.history[-1] if result.history else None
    summary = "no epochs run" if last is None else (
        f"epoch {last['epoch']} mse={last['mse']:.4g} penalty={last['penalty']:.4g}")
    print(f"train: {cfg.task} {cfg.model_kind}+{cfg.constraint.kind} seed={cfg.seed}: {summary}; "
          f"wrote {os.path.join(out_dir, 'model.json')}")


def _load_eval_model(spec, task):
    if spec == "oracle":
        return OracleModel(task), "oracle"
    if not os.path.isfile(spec):
        raise CliError(f"model checkpoint not found: {spec}")
    model = load_checkpoint(spec)
    with open(spec) as fh:
        meta = json.load(fh).get("meta") or {}
    if meta.get("task") not in (None, task):
        raise CliError(f"checkpoint was trained on {meta['task']}, not {task}")
    if isinstance(model, OracleModel) and model.system.name != task:
        raise CliError(f"oracle checkpoint is for {model.system.name}, not {task}")
    if model.state_dim != get_system(task).state_dim:
        raise CliError(f"model state dimension {model.state_dim} does not match task {task}")
    kind = (meta.get("constraint") or {}).get("kind", "none")
    label = model.kind if kind == "none" else f"{model.kind}+{kind}"
    return model, label


def cmd_eval(args):
    task = get_system(args.task).name
    model, label = _load_eval_model(args.model, task)
    seed = resolve_seed(args.seed)
    kw = dict(n_test=args.n_test, seed=seed, t_end=args.t_end, dt=args.dt,
              sampler=args.sampler, label=args.label or label)
    if args.energy_csv:
        report, series = aggregate(model, task, return_series=True, **kw)
        write_energy_csv(args.energy_csv, *series)
    else:
        report = aggregate(model, task, jobs=args.jobs, **kw)
    write_report(report, args.report)
    print(f"eval: {task} {report.model} n={report.n_test} median={report.median:.4g} "
          f"p2.5={report.p2_5:.4g} p97.5={report.p97_5:.4g} overflow={report.overflow_count}")


def format_cell(report):
    if report.median == float("inf"):
        return "inf"
    return (f"{report.median:.3g} (+{report.p97_5 - report.median:.3g}"
            f"/-{report.median - report.p2_5:.3g})")


def cmd_report(args):
    reports = []
    for path in args.inputs:
        if not os.path.isfile(path):
            raise CliError(f"report not found: {path}")
        reports.append(read_report(path))
    tasks = [t for t in SYSTEMS if any(r.task == t for r in reports)]
    methods = list(dict.fromkeys(r.model for r in reports))
    cells = {}
    for r in reports:
        if (r.model, r.task) in cells:
            raise CliError(f"duplicate report for {r.model} on {r.task}")
        cells[r.model, r.task] = format_cell(r)
    with open(args.csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method"] + tasks)
        for m in methods:
            w.writerow([m] + [cells.get((m, t), "") for t in tasks])
    print(f"report: {len(methods)} methods x {len(tasks)} tasks -> {args.csv}")


def build_parser():
    p = argparse.ArgumentParser(prog="constrdyn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="simulate a task's trajectory dataset to NDJSON")
    g.add_argument("--task", required=True, choices=sorted(SYSTEMS))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-traj", type=int)
    g.add_argument("--n-samples", type=int)
    g.add_argument("--sigma", type=float, help="state noise std (task default if omitted)")
    g.add_argument("--sampler", choices=["normal", "uniform"], default="normal")
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="overrides $CONSTRDYN_SEED and the config seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="energy-deviation RMSE over fresh test trajectories")
    e.add_argument("--model", required=True, help="checkpoint path, or 'oracle' for the true field")
    e.add_argument("--task", required=True, choices=sorted(SYSTEMS))
    e.add_argument("--n-test", type=int, default=100)
    e.add_argument("--t-end", type=float, default=100.0)
    e.add_argument("--dt", type=float, default=0.1)
    e.add_argument("--seed", type=int)
    e.add_argument("--sampler", choices=["normal", "uniform"], default="normal")
    e.add_argument("--label", help="method name used in reports")
    e.add_argument("--report", required=True)
    e.add_argument("--energy-csv", help="also write per-trajectory energy series")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="collect eval reports into a methods x tasks CSV")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--csv", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except (CliError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
