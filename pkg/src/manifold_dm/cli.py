"""Command-line entry point: ``manifold-dm <subcommand> [options]``.

Configuration comes from ``--preset``, then ``--config FILE``, then one
``--<key>`` flag per config field (``--sigma-min 0.001``, ``--samplers annealing``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import experiments as ex
from .config import PRESETS, ExperimentConfig, parse_assignment
from .errors import ManifoldDMError
from .network import ScoreModel


def _add_config_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named preset")
    p.add_argument("--config", help="flat TOML config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    group = p.add_argument_group("config keys")
    for f in fields(ExperimentConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name,
                           default=None, metavar=f.name.upper())


def config_from_args(args):
    cfg = PRESETS[args.preset] if args.preset else ExperimentConfig()
    if args.config:
        cfg = ExperimentConfig.load(args.config, base=cfg)
    raw = {}
    for f in fields(ExperimentConfig):
        val = getattr(args, "cfg_" + f.name, None)
        if val is not None:
            raw[f.name] = parse_assignment(f"{f.name}={val}")[1]
    for item in args.set:
        k, v = parse_assignment(item)
        raw[k] = v
    return cfg.updated(raw) if raw else cfg


def _seed_dir(args, cfg):
    out = args.out or os.path.join("runs", cfg.config_hash()[:12], f"seed-{cfg.seed}")
    return ex.fresh_dir(out)


def cmd_generate_data(args):
    cfg = config_from_args(args)
    out = _seed_dir(args, cfg)
    manifold = ex.manifold_for(cfg)
    ds = ex.generate_dataset(cfg, manifold, cfg.seed)
    with open(os.path.join(out, "config.toml"), "w") as fh:
        fh.write(cfg.to_toml())
    ds.to_csv(os.path.join(out, "dataset.csv"))
    print(out)


def _load_run(run_dir):
    cfg = ExperimentConfig.load(os.path.join(run_dir, "config.toml"))
    return cfg, ex.Dataset.from_csv(os.path.join(run_dir, "dataset.csv"))


def cmd_train(args):
    if args.run_dir:
        cfg, ds = _load_run(args.run_dir)
        out = args.run_dir
        if os.path.exists(os.path.join(out, "checkpoint.bin")):
            raise ManifoldDMError(f"{out} already has a checkpoint; runs are append-only")
    else:
        cfg = config_from_args(args)
        out = _seed_dir(args, cfg)
        ds = ex.generate_dataset(cfg, ex.manifold_for(cfg), cfg.seed)
        with open(os.path.join(out, "config.toml"), "w") as fh:
            fh.write(cfg.to_toml())
        ds.to_csv(os.path.join(out, "dataset.csv"))
    history = []
    model = ex.train_model(cfg, ex.manifold_for(cfg), ds.train, cfg.seed, history)
    model.save(os.path.join(out, "checkpoint.bin"))
    np.savetxt(os.path.join(out, "train_log.csv"), np.array(history), delimiter=",",
               fmt=["%d", "%.10g"], header="epoch,loss", comments="")
    print(out)


def cmd_sample(args):
    cfg, ds = _load_run(args.run_dir)
    model = ScoreModel.load(os.path.join(args.run_dir, "checkpoint.bin"))
    sampler = args.sampler or cfg.samplers[0]
    if sampler not in cfg.samplers:
        cfg = cfg.replace(samplers=[sampler])
    count = args.count or cfg.n_samples or int(ds.is_test.sum())
    x = ex.sample_model(cfg, model, ex.manifold_for(cfg), sampler, count, cfg.seed)
    path = os.path.join(args.run_dir, f"samples-{sampler}.csv")
    if os.path.exists(path):
        raise ManifoldDMError(f"{path} exists; runs are append-only")
    ex.write_samples(path, x, {**ex.sampler_params(cfg, sampler, count), "seed": cfg.seed,
                               "config_hash": cfg.config_hash()})
    print(path)


def cmd_evaluate(args):
    cfg, ds = _load_run(args.run_dir)
    if args.metrics:
        cfg = cfg.replace(metrics=args.metrics)
    x = ex.read_samples(args.samples)
    name = os.path.basename(args.samples).removesuffix(".csv").removeprefix("samples-")
    res = ex.evaluate_samples(cfg, ex.manifold_for(cfg), x, ds, cfg.seed, name)
    print(json.dumps(res, indent=2, sort_keys=True))


def cmd_verify(args):
    v = ex.VerifyConfig()
    for item in args.set:
        k, val = parse_assignment(item)
        if not hasattr(v, k):
            raise ManifoldDMError(f"unknown verification key {k!r}")
        setattr(v, k, type(getattr(v, k))(val))
    rep = ex.verify_theorems(v, args.out)
    for c in rep.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: {c['value']:.6g}")
    if args.out:
        print(rep.artifacts["report"])
    return 0 if all(c["passed"] for c in rep.checks) else 1


def cmd_run(args):
    cfg = config_from_args(args)
    rep = ex.run_experiment(cfg, args.seeds, args.out, workers=args.workers)
    for k, s in rep.summary.items():
        print(f"{k}: mean {s['mean']:.6g} std {s['std']:.6g} median {s['median']:.6g}")
    if "report" in rep.artifacts:
        print(rep.artifacts["report"])


def build_parser():
    p = argparse.ArgumentParser(prog="manifold-dm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="sample a dataset and its train/test split")
    _add_config_flags(g)
    g.add_argument("--out", help="run directory (created; must not exist)")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a score model")
    _add_config_flags(t)
    t.add_argument("--run-dir", help="train on an existing generate-data directory")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a trained run directory")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--sampler", choices=["reverse", "annealing"])
    s.add_argument("--count", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="metrics of a samples CSV against the held-out split")
    e.add_argument("--run-dir", required=True)
    e.add_argument("--samples", required=True)
    e.add_argument("--metrics", nargs="+", choices=["mmd", "sliced_w1", "w2", "js_faces"])
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify-theorems", help="quadrature small-noise sweeps with pass/fail")
    v.add_argument("--out", help="directory for sweep.csv and report.json")
    v.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("run", help="end-to-end over several seeds")
    _add_config_flags(r)
    r.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    r.add_argument("--out", default="runs")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except ManifoldDMError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
