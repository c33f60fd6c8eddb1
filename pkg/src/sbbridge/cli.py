"""Command-line experiment runner.

Verbs: train, infer, eval, sweep, sinkhorn1d, emit-plots, and
reproduce {table1, table4, fig1, appendix-pilot}.  The output root defaults
to ./runs and can be overridden with --out or the SBBRIDGE_OUT environment
variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment
from .datasets import SampleBatch, generate, save_batch_csv
from .evaluation import w2_subsampled
from .potential import GmmPotential
from .sampler import infer
from .trainer import SbbConfig
from .transport_net import TransportNet

CONFIG_DIR = Path(__file__).resolve().parent.parent.parent / "configs"

TABLE1_CONFIGS = ("n2d_to_gauss8.toml", "moons_to_gauss8.toml", "n2d_to_moons.toml")
SWEEP_BETAS = (1.0, 10.0, 50.0, 100.0, 1000.0, None)


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("SBBRIDGE_OUT", "runs"))


def _load(args) -> dict:
    return experiment.load_config(args.config)


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    summary = experiment.run_experiment(
        cfg, _out_root(args), workers=args.workers, deterministic=args.deterministic
    )
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if not summary["failures"] else 1


def cmd_infer(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else cfg["seeds"][0]
    seed_dir = _out_root(args) / cfg["name"] / f"seed{seed}"
    if not (seed_dir / "potential.json").exists():
        print(f"no trained model under {seed_dir}; run `sbbridge train` first", file=sys.stderr)
        return 1
    potential = GmmPotential.from_json((seed_dir / "potential.json").read_text())
    net_path = seed_dir / "net.json"
    net = TransportNet.from_json(net_path.read_text()) if net_path.exists() else None
    sbb = SbbConfig(seed=seed, **cfg["sbb"])
    spec = experiment._dataset_spec(
        cfg["source"], cfg["metric"]["n_eval"], experiment.derive_seed(seed, 13)
    )
    x0 = generate(spec).points
    out = infer(potential, net, x0, sbb, np.random.default_rng(experiment.derive_seed(seed, 14)))
    path = seed_dir / "inferred.csv"
    save_batch_csv(SampleBatch(out, "generated"), path)
    print(f"wrote {out.shape[0]} samples to {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else cfg["seeds"][0]
    seed_dir = _out_root(args) / cfg["name"] / f"seed{seed}"
    gen_path = seed_dir / "generated.csv"
    tgt_path = seed_dir / "target.csv"
    if not gen_path.exists() or not tgt_path.exists():
        print(f"missing artifacts under {seed_dir}", file=sys.stderr)
        return 1
    gen = np.genfromtxt(gen_path, delimiter=",", skip_header=1)
    tgt = np.genfromtxt(tgt_path, delimiter=",", skip_header=1)
    gen = np.atleast_2d(gen if gen.ndim > 1 else gen[:, None])
    tgt = np.atleast_2d(tgt if tgt.ndim > 1 else tgt[:, None])
    n_sub = min(cfg["metric"]["n_sub"], gen.shape[0], tgt.shape[0])
    res = w2_subsampled(
        gen, tgt, n_sub, cfg["metric"]["repeats"],
        np.random.default_rng(experiment.derive_seed(seed, experiment._SALT_METRIC)),
    )
    print(json.dumps({"w2_mean": res.value, "w2_std": res.subsample_std}))
    return 0


def cmd_sweep(args) -> int:
    betas = []
    for token in args.betas.split(","):
        token = token.strip().lower()
        betas.append(None if token in ("inf", "none") else float(token))
    rows = experiment.run_beta_sweep(_load(args), betas, _out_root(args), workers=args.workers)
    best = min((r for r in rows if r["w2_mean"] is not None), key=lambda r: r["w2_mean"])
    print(json.dumps({"rows": rows, "best_beta": best["beta"]}, indent=2))
    return 0


def cmd_sinkhorn1d(args) -> int:
    cfg = _load(args)
    if cfg["kind"] != "sinkhorn1d":
        print("config is not a sinkhorn1d experiment (set kind = 'sinkhorn1d')", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    summary = experiment.run_experiment(cfg, _out_root(args))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0 if not summary["failures"] else 1


def cmd_emit_plots(args) -> int:
    try:
        path = experiment.emit_plot_data(args.experiment, _out_root(args))
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    print(f"plot bundles under {path}")
    return 0


def cmd_reproduce(args) -> int:
    out = _out_root(args)
    status = 0
    if args.what == "table1":
        rows = []
        for fname in TABLE1_CONFIGS:
            cfg = experiment.load_config(CONFIG_DIR / fname)
            sbb_summary = experiment.run_experiment(cfg, out, workers=args.workers)
            base_cfg = json.loads(json.dumps(cfg))
            base_cfg["name"] = cfg["name"] + "_betainf"
            base_cfg["sbb"]["beta"] = None
            inf_summary = experiment.run_experiment(base_cfg, out, workers=args.workers)
            rows.append(
                {
                    "task": cfg["name"],
                    "sbb_w2_mean": sbb_summary["w2_mean"],
                    "sbb_w2_std": sbb_summary["w2_std"],
                    "bridge_matching_w2_mean": inf_summary["w2_mean"],
                    "bridge_matching_w2_std": inf_summary["w2_std"],
                }
            )
            if sbb_summary["failures"] or inf_summary["failures"]:
                status = 1
        (out / "table1.json").write_text(json.dumps(rows, indent=2))
        print(json.dumps(rows, indent=2))
    elif args.what == "table4":
        all_rows = []
        for fname in TABLE1_CONFIGS:
            cfg = experiment.load_config(CONFIG_DIR / fname)
            all_rows += experiment.run_beta_sweep(cfg, list(SWEEP_BETAS), out, workers=args.workers)
        (out / "table4.json").write_text(json.dumps(all_rows, indent=2))
        print(json.dumps(all_rows, indent=2))
    elif args.what == "fig1":
        for fname in ("gauss_to_gauss.toml", "dirac_to_student.toml"):
            cfg = experiment.load_config(CONFIG_DIR / fname)
            summary = experiment.run_experiment(cfg, out, workers=args.workers)
            if summary["failures"]:
                status = 1
            experiment.emit_plot_data(cfg["name"], out)
        print(f"fig1 bundles under {out}")
    elif args.what == "appendix-pilot":
        cfg = experiment.load_config(CONFIG_DIR / "appendix_pilot.toml")
        summary = experiment.run_experiment(cfg, out)
        print(json.dumps(summary, indent=2, sort_keys=True))
        if summary["failures"]:
            status = 1
    else:
        print(f"unknown reproduce target {args.what}", file=sys.stderr)
        return 2
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbbridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output root (default $SBBRIDGE_OUT or ./runs)")
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--workers", type=int, default=1)

    common(sub.add_parser("train", help="train all seeds of an experiment"))
    common(sub.add_parser("infer", help="sample from a trained model"))
    common(sub.add_parser("eval", help="score stored generated samples"))
    p = sub.add_parser("sweep", help="run an experiment across beta values")
    common(p)
    p.add_argument("--betas", default="1,10,50,100,1000,inf")
    common(sub.add_parser("sinkhorn1d", help="run the 1-d grid solver"))
    p = sub.add_parser("emit-plots", help="emit plot-ready CSV bundles")
    p.add_argument("--experiment", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p = sub.add_parser("reproduce", help="rerun a shipped benchmark suite")
    p.add_argument("what", choices=["table1", "table4", "fig1", "appendix-pilot"])
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "infer": cmd_infer,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "sinkhorn1d": cmd_sinkhorn1d,
        "emit-plots": cmd_emit_plots,
        "reproduce": cmd_reproduce,
    }
    try:
        return handlers[args.command](args)
    except experiment.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
