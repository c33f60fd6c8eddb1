"""Experiment runner: config files, multi-seed runs, results ledger, and
plot-data emission.

A config is a single TOML file with an explicit ``schema_version``; see
``configs/`` for the shipped experiments.  Per-seed dataset and sampling
seeds are derived from the run seed with fixed salts, so a rerun of the same
config is bit-reproducible.  Results append to a JSONL ledger keyed by
(experiment id, config hash, seed); prior records are never rewritten.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import sinkhorn1d
from .datasets import DatasetSpec, SampleBatch, generate, save_batch_csv
from .evaluation import ecdf_distance, w2_subsampled
from .potential import GmmPotential, drift
from .sampler import export_trajectories, infer, simulate_y_sde_batch
from .trainer import (
    SbbConfig,
    TrainingDivergedError,
    config_hash,
    train,
    train_beta_large,
)
from .transport_net import TransportNet, z_forward

SCHEMA_VERSION = 1

_SBB_KEYS = set(SbbConfig.__dataclass_fields__.keys()) - {"seed"}
_SINKHORN_KEYS = set(sinkhorn1d.Sinkhorn1DConfig.__dataclass_fields__.keys()) - {
    "seed",
    "dump_dir",
}
_DATASET_KEYS = {"name", "n", "mean", "var", "point", "dof"}
_METRIC_DEFAULTS = {"n_eval": 10_000, "n_sub": 2048, "repeats": 5}

# salts for per-seed derived streams
_SALT_SOURCE, _SALT_TARGET = 1, 2
_SALT_EVAL_SOURCE, _SALT_EVAL_TARGET = 3, 4
_SALT_INFER, _SALT_METRIC = 5, 6


class ConfigError(ValueError):
    """Config schema violation; the message names the offending key path."""


def _require(table: dict, key: str, path: str):
    if key not in table:
        raise ConfigError(f"missing required key '{path}.{key}'" if path else f"missing required key '{key}'")
    return table[key]


def load_config(path: str | Path) -> dict:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return validate_config(raw)


def validate_config(raw: dict) -> dict:
    version = _require(raw, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}, expected {SCHEMA_VERSION}")
    name = _require(raw, "name", "")
    kind = raw.get("kind", "sbb")
    if kind not in ("sbb", "sinkhorn1d"):
        raise ConfigError(f"unknown kind {kind!r} for key 'kind'")
    seeds = _require(raw, "seeds", "")
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("'seeds' must be a nonempty list")

    cfg = {"schema_version": version, "name": name, "kind": kind, "seeds": list(seeds)}
    for side in ("source", "target"):
        table = _require(raw, side, "")
        _require(table, "name", side)
        _require(table, "n", side)
        unknown = set(table) - _DATASET_KEYS
        if unknown:
            raise ConfigError(f"unknown key '{side}.{sorted(unknown)[0]}'")
        cfg[side] = dict(table)

    if kind == "sbb":
        table = _require(raw, "sbb", "")
        _require(table, "beta", "sbb")
        unknown = set(table) - _SBB_KEYS
        if unknown:
            raise ConfigError(f"unknown key 'sbb.{sorted(unknown)[0]}'")
        table = dict(table)
        if isinstance(table["beta"], str):
            if table["beta"] not in ("inf", "none"):
                raise ConfigError("'sbb.beta' must be a number, 'inf' or 'none'")
            table["beta"] = None
        elif np.isinf(table["beta"]):
            table["beta"] = None
        cfg["sbb"] = table
    else:
        table = _require(raw, "sinkhorn", "")
        unknown = set(table) - _SINKHORN_KEYS
        if unknown:
            raise ConfigError(f"unknown key 'sinkhorn.{sorted(unknown)[0]}'")
        cfg["sinkhorn"] = dict(table)

    metric = dict(_METRIC_DEFAULTS)
    metric.update(raw.get("metric", {}))
    unknown = set(metric) - set(_METRIC_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown key 'metric.{sorted(unknown)[0]}'")
    cfg["metric"] = metric
    return cfg


def derive_seed(seed: int, salt: int) -> int:
    return (seed * 1009 + salt) % (2 ** 31)


def _dataset_spec(table: dict, n: int | None, seed: int) -> DatasetSpec:
    kwargs = {k: v for k, v in table.items() if k not in ("n",)}
    return DatasetSpec(n=n if n is not None else table["n"], seed=seed, **kwargs)


@dataclass
class ResultsLedger:
    """Append-only JSONL record sink; one line per metric observation."""

    path: Path

    def append(self, record: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def _run_one_seed(cfg: dict, seed: int, seed_dir: Path, deterministic: bool) -> dict:
    """Train + infer + score a single seed; returns ledger-ready entries."""
    t_start = time.perf_counter()
    sbb = SbbConfig(seed=seed, deterministic=deterministic, **cfg["sbb"])
    source = generate(_dataset_spec(cfg["source"], None, derive_seed(seed, _SALT_SOURCE)), "source")
    target = generate(_dataset_spec(cfg["target"], None, derive_seed(seed, _SALT_TARGET)), "target")

    if sbb.variant == "beta_large":
        potential, report = train_beta_large(sbb, source.points, target.points)
        net = None
    else:
        potential, net, report = train(sbb, source.points, target.points)

    n_eval = cfg["metric"]["n_eval"]
    eval_source = generate(
        _dataset_spec(cfg["source"], n_eval, derive_seed(seed, _SALT_EVAL_SOURCE)), "source"
    )
    eval_target = generate(
        _dataset_spec(cfg["target"], n_eval, derive_seed(seed, _SALT_EVAL_TARGET)), "target"
    )
    generated = infer(
        potential, net, eval_source.points, sbb, np.random.default_rng(derive_seed(seed, _SALT_INFER))
    )
    if not np.isfinite(generated).all():
        raise TrainingDivergedError("non-finite generated samples", {"seed": seed})

    w2 = w2_subsampled(
        generated,
        eval_target.points,
        min(cfg["metric"]["n_sub"], n_eval),
        cfg["metric"]["repeats"],
        np.random.default_rng(derive_seed(seed, _SALT_METRIC)),
    )
    metrics = {"w2": w2.value, "w2_subsample_std": w2.subsample_std}
    if generated.shape[1] == 1:
        metrics["ks"] = ecdf_distance(generated, eval_target.points)

    seed_dir.mkdir(parents=True, exist_ok=True)
    (seed_dir / "potential.json").write_text(potential.to_json())
    if net is not None:
        (seed_dir / "net.json").write_text(net.to_json())
    (seed_dir / "report.json").write_text(report.to_json())
    save_batch_csv(SampleBatch(eval_source.points, "source"), seed_dir / "source.csv")
    save_batch_csv(SampleBatch(eval_target.points, "target"), seed_dir / "target.csv")
    save_batch_csv(SampleBatch(generated, "generated"), seed_dir / "generated.csv")

    return {
        "seed": seed,
        "metrics": metrics,
        "wall_clock_s": time.perf_counter() - t_start,
        "config_hash": report.config_hash,
    }


def run_experiment(
    cfg: dict | str | Path,
    out_root: str | Path,
    workers: int = 1,
    deterministic: bool = False,
) -> dict:
    """Run every seed of an experiment config; write per-seed artifacts, a
    mean/std summary and ledger records.  Per-seed training failures are
    recorded and the run continues with the remaining seeds."""
    if not isinstance(cfg, dict):
        cfg = load_config(cfg)
    if cfg["kind"] == "sinkhorn1d":
        return run_sinkhorn_experiment(cfg, out_root)

    out_root = Path(out_root)
    exp_dir = out_root / cfg["name"]
    exp_dir.mkdir(parents=True, exist_ok=True)
    ledger = ResultsLedger(out_root / "ledger.jsonl")
    chash = config_hash(cfg)
    (exp_dir / "config_echo.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))

    results, failures = [], []
    if workers > 1 and len(cfg["seeds"]) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                seed: pool.submit(_run_one_seed, cfg, seed, exp_dir / f"seed{seed}", deterministic)
                for seed in cfg["seeds"]
            }
            outcomes = list(futures.items())
    else:
        outcomes = [(seed, None) for seed in cfg["seeds"]]

    for seed, fut in outcomes:
        try:
            if fut is not None:
                res = fut.result()
            else:
                res = _run_one_seed(cfg, seed, exp_dir / f"seed{seed}", deterministic)
            results.append(res)
        except (TrainingDivergedError, RuntimeError, ValueError) as exc:
            failures.append({"seed": seed, "error": str(exc)})
            continue

    now = time.time()
    for res in results:
        for metric, value in res["metrics"].items():
            ledger.append(
                {
                    "experiment": cfg["name"],
                    "config_hash": chash,
                    "seed": res["seed"],
                    "metric": metric,
                    "value": value,
                    "wall_clock_s": res["wall_clock_s"],
                    "timestamp": now,
                }
            )
    for fail in failures:
        ledger.append(
            {
                "experiment": cfg["name"],
                "config_hash": chash,
                "seed": fail["seed"],
                "metric": "failure",
                "value": fail["error"],
                "wall_clock_s": None,
                "timestamp": now,
            }
        )

    w2s = [r["metrics"]["w2"] for r in results]
    summary = {
        "experiment": cfg["name"],
        "config_hash": chash,
        "seeds_completed": [r["seed"] for r in results],
        "failures": failures,
        "w2_per_seed": dict(zip([str(r["seed"]) for r in results], w2s)),
        "w2_mean": float(np.mean(w2s)) if w2s else None,
        "w2_std": float(np.std(w2s)) if w2s else None,
        "wall_clock_s": {str(r["seed"]): r["wall_clock_s"] for r in results},
    }
    (exp_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def run_sinkhorn_experiment(cfg: dict, out_root: str | Path) -> dict:
    """Grid-solver experiment: one run per seed, reporting the controls at
    (t=0, x=0) and the terminal-sample KS distance to the target sample."""
    out_root = Path(out_root)
    exp_dir = out_root / cfg["name"]
    exp_dir.mkdir(parents=True, exist_ok=True)
    ledger = ResultsLedger(out_root / "ledger.jsonl")
    chash = config_hash(cfg)
    (exp_dir / "config_echo.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))

    results, failures = [], []
    for seed in cfg["seeds"]:
        t_start = time.perf_counter()
        seed_dir = exp_dir / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        source = generate(_dataset_spec(cfg["source"], None, derive_seed(seed, _SALT_SOURCE)))
        target = generate(_dataset_spec(cfg["target"], None, derive_seed(seed, _SALT_TARGET)))
        sk_cfg = sinkhorn1d.Sinkhorn1DConfig(
            seed=seed, dump_dir=str(seed_dir / "states"), **cfg["sinkhorn"]
        )
        try:
            state, trajectories = sinkhorn1d.run_sinkhorn_sbb(
                source.points, target.points, sk_cfg
            )
        except RuntimeError as exc:
            failures.append({"seed": seed, "error": str(exc)})
            continue
        alpha, sigma = sinkhorn1d.extract_controls(state)
        alpha0, sigma0 = float(alpha(0.0, 0.0)), float(sigma(0.0, 0.0))
        # generated samples: the transported process integrated with the
        # extracted controls
        _, x_paths = sinkhorn1d.simulate_x_process(
            state, source.points, sk_cfg.n_pi,
            np.random.default_rng(derive_seed(seed, _SALT_INFER)),
        )
        ks = ecdf_distance(x_paths[-1], target.points)
        export_trajectories(trajectories[: min(200, len(trajectories))], seed_dir / "trajectories.csv")
        ts = np.linspace(0.0, sk_cfg.T, 11)
        xs = np.linspace(state.phi.lo / 2, state.phi.hi / 2, 41)
        sinkhorn1d.export_controls(alpha, sigma, ts, xs, seed_dir / "controls.csv")
        res = {
            "seed": seed,
            "metrics": {"alpha0": alpha0, "sigma0": sigma0, "ks": ks},
            "wall_clock_s": time.perf_counter() - t_start,
        }
        results.append(res)

    now = time.time()
    for res in results:
        for metric, value in res["metrics"].items():
            ledger.append(
                {
                    "experiment": cfg["name"],
                    "config_hash": chash,
                    "seed": res["seed"],
                    "metric": metric,
                    "value": value,
                    "wall_clock_s": res["wall_clock_s"],
                    "timestamp": now,
                }
            )

    summary = {
        "experiment": cfg["name"],
        "config_hash": chash,
        "seeds_completed": [r["seed"] for r in results],
        "failures": failures,
        "metrics": {str(r["seed"]): r["metrics"] for r in results},
    }
    (exp_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def run_beta_sweep(
    base_cfg: dict | str | Path,
    betas: list[float | None],
    out_root: str | Path,
    workers: int = 1,
) -> list[dict]:
    """One experiment per beta value (None = infinite-beta limit); emits a
    CSV of (beta, dataset, w2_mean, w2_std) rows."""
    if not isinstance(base_cfg, dict):
        base_cfg = load_config(base_cfg)
    out_root = Path(out_root)
    rows = []
    for beta in betas:
        cfg = json.loads(json.dumps(base_cfg))
        label = "inf" if beta is None else f"{beta:g}"
        cfg["name"] = f"{base_cfg['name']}_beta{label}"
        cfg["sbb"]["beta"] = beta
        summary = run_experiment(cfg, out_root, workers=workers)
        rows.append(
            {
                "beta": label,
                "dataset": base_cfg["name"],
                "w2_mean": summary["w2_mean"],
                "w2_std": summary["w2_std"],
                "n_failures": len(summary["failures"]),
            }
        )
    sweep_path = out_root / f"{base_cfg['name']}_sweep.csv"
    with open(sweep_path, "w") as fh:
        fh.write("beta,dataset,w2_mean,w2_std,n_failures\n")
        for row in rows:
            mean = "nan" if row["w2_mean"] is None else f"{row['w2_mean']:.17g}"
            std = "nan" if row["w2_std"] is None else f"{row['w2_std']:.17g}"
            fh.write(f"{row['beta']},{row['dataset']},{mean},{std},{row['n_failures']}\n")
    return rows


def emit_plot_data(experiment_id: str, out_root: str | Path) -> Path:
    """Regenerate plot-ready CSV bundles (scatter, trajectories, ECDF) from
    the stored artifacts of a finished experiment.  Deterministic, so
    re-emission is byte-identical."""
    out_root = Path(out_root)
    exp_dir = out_root / experiment_id
    if not (exp_dir / "summary.json").exists():
        known = sorted(p.parent.name for p in out_root.glob("*/summary.json"))
        raise FileNotFoundError(
            f"no artifacts for experiment '{experiment_id}'; known experiments: {known}"
        )
    summary = json.loads((exp_dir / "summary.json").read_text())
    cfg = json.loads((exp_dir / "config_echo.json").read_text())
    plots = exp_dir / "plots"
    plots.mkdir(exist_ok=True)

    seeds = summary.get("seeds_completed", [])
    if not seeds:
        raise FileNotFoundError(f"experiment '{experiment_id}' has no completed seeds")
    seed = seeds[0]
    seed_dir = exp_dir / f"seed{seed}"

    # scatter bundle: labeled roles, one row per point
    with open(plots / "scatter.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        first = np.genfromtxt(seed_dir / "source.csv", delimiter=",", skip_header=1)
        d = first.shape[1] if first.ndim > 1 else 1
        writer.writerow(["role"] + [f"x_{i + 1}" for i in range(d)])
        for role in ("source", "target", "generated"):
            pts = np.genfromtxt(seed_dir / f"{role}.csv", delimiter=",", skip_header=1)
            pts = np.atleast_2d(pts if pts.ndim > 1 else pts[:, None])
            for row in pts:
                writer.writerow([role] + [f"{v:.17g}" for v in row])

    if cfg["kind"] == "sbb":
        potential = GmmPotential.from_json((seed_dir / "potential.json").read_text())
        net_path = seed_dir / "net.json"
        net = TransportNet.from_json(net_path.read_text()) if net_path.exists() else None
        sbb = SbbConfig(seed=seed, **cfg["sbb"])
        source_pts = np.genfromtxt(seed_dir / "source.csv", delimiter=",", skip_header=1)
        source_pts = np.atleast_2d(source_pts if source_pts.ndim > 1 else source_pts[:, None])
        n_traj = min(64, source_pts.shape[0])
        with torch.no_grad():
            if sbb.beta is None:
                y0 = source_pts[:n_traj]
            elif net is not None and sbb.variant == "full":
                y0 = z_forward(net, 0.0, source_pts[:n_traj]).numpy()
            else:
                y0 = (
                    source_pts[:n_traj]
                    - drift(potential, 0.0, torch.as_tensor(source_pts[:n_traj])).numpy()
                    / sbb.beta
                )
        trajs = simulate_y_sde_batch(
            potential, y0, 100, sbb, np.random.default_rng(derive_seed(seed, _SALT_INFER) + 7)
        )
        export_trajectories(trajs, plots / "trajectories.csv")

    gen = np.genfromtxt(seed_dir / "generated.csv", delimiter=",", skip_header=1)
    if gen.ndim == 1:
        tgt = np.genfromtxt(seed_dir / "target.csv", delimiter=",", skip_header=1)
        order = np.sort(gen)
        t_order = np.sort(tgt)
        with open(plots / "ecdf.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["role", "x", "ecdf"])
            for i, v in enumerate(order):
                writer.writerow(["generated", f"{v:.17g}", f"{(i + 1) / order.size:.17g}"])
            for i, v in enumerate(t_order):
                writer.writerow(["target", f"{v:.17g}", f"{(i + 1) / t_order.size:.17g}"])
    return plots
