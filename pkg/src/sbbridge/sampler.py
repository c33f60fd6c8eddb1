"""Inference pipelines and diagnostic SDE simulation.

The product path is simulation-free: map the source point through the
learned inverse map, draw the endpoint from the closed-form conditional
coupling, then undo the volatility stretch just before the horizon.  The
Euler-Maruyama route integrates the driving process instead and exists as a
distributional cross-check (it is slower and adds discretization error).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .potential import GmmPotential, drift, forward_map, recover_x, sample_conditional_batch
from .trainer import SbbConfig
from .transport_net import TransportNet, z_forward


@dataclass
class Trajectory:
    """One path of the driving process with its stretched image
    x_t = y_t + s(t, y_t)/beta on the same grid."""

    times: np.ndarray    # strictly increasing, times[0] = 0, last = T_tilde
    y_path: np.ndarray   # (n_times, d)
    x_path: np.ndarray   # (n_times, d)
    seed: int | None = None

    def __post_init__(self):
        if self.times.ndim != 1 or (np.diff(self.times) <= 0).any() or self.times[0] != 0.0:
            raise ValueError("times must be strictly increasing from 0")
        if self.y_path.shape != self.x_path.shape or self.y_path.shape[0] != self.times.size:
            raise ValueError("path shapes must match the time grid")


def infer(
    potential: GmmPotential,
    net: TransportNet | None,
    x0_batch: np.ndarray,
    config: SbbConfig,
    rng: np.random.Generator | int,
) -> np.ndarray:
    """Simulation-free sampling: x0 -> y0 -> yT ~ pi(.|y0) -> xT.
    Deterministic given the generator state.

    The y0 map follows the trained pipeline: the learned inverse net for the
    full variant, the explicit first-order inverse x - s(0, x)/beta for the
    large-beta variant (``net=None``), and the identity when beta is None.
    """
    rng = np.random.default_rng(rng)
    x0_batch = np.atleast_2d(np.asarray(x0_batch, dtype=np.float64))
    for p in potential.parameters():
        if not torch.isfinite(p).all():
            raise ValueError("potential parameters are not finite")
    with torch.no_grad():
        x0t = torch.as_tensor(x0_batch)
        if config.beta is None:
            y0 = x0t
        elif net is None or config.variant == "beta_large":
            s0 = drift(potential, 0.0, x0t)
            if config.beta_large_log_form:
                y0 = x0t - torch.log(s0) / config.beta
            else:
                y0 = x0t - s0 / config.beta
        else:
            y0 = z_forward(net, 0.0, x0t)
        yT = sample_conditional_batch(potential, y0.numpy(), rng)
        xT = recover_x(potential, config.beta, yT, config.T_tilde)
    return xT.numpy()


def simulate_y_sde(
    potential: GmmPotential,
    y0: np.ndarray,
    n_steps: int,
    config: SbbConfig,
    rng: np.random.Generator | int,
) -> Trajectory:
    """Euler-Maruyama for dY = s(t, Y) dt + sqrt(eps) dW on a uniform grid
    over [0, T_tilde] (the drift is singular at T itself)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(rng)
    y0 = np.asarray(y0, dtype=np.float64).reshape(-1)
    times = np.linspace(0.0, config.T_tilde, n_steps + 1)
    dt = times[1] - times[0]
    d = y0.size
    y_path = np.empty((n_steps + 1, d))
    y_path[0] = y0
    with torch.no_grad():
        for i in range(n_steps):
            yi = torch.as_tensor(y_path[i])
            s = drift(potential, float(times[i]), yi).numpy()
            step = y_path[i] + s * dt + np.sqrt(config.epsilon * dt) * rng.standard_normal(d)
            if not np.isfinite(step).all():
                raise RuntimeError(
                    f"SDE state went non-finite at step {i + 1}; last finite step index {i}"
                )
            y_path[i + 1] = step
        x_path = np.stack(
            [
                forward_map(potential, config.beta, float(t), torch.as_tensor(yrow)).numpy()
                for t, yrow in zip(times, y_path)
            ]
        )
    return Trajectory(times=times, y_path=y_path, x_path=x_path)


def simulate_y_sde_batch(
    potential: GmmPotential,
    y0_batch: np.ndarray,
    n_steps: int,
    config: SbbConfig,
    rng: np.random.Generator | int,
) -> list[Trajectory]:
    """Vectorized lockstep simulation of many trajectories on a shared grid."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(rng)
    y = np.atleast_2d(np.asarray(y0_batch, dtype=np.float64)).copy()
    n, d = y.shape
    times = np.linspace(0.0, config.T_tilde, n_steps + 1)
    dt = times[1] - times[0]
    y_paths = np.empty((n_steps + 1, n, d))
    y_paths[0] = y
    with torch.no_grad():
        for i in range(n_steps):
            s = drift(potential, float(times[i]), torch.as_tensor(y_paths[i])).numpy()
            step = (
                y_paths[i]
                + s * dt
                + np.sqrt(config.epsilon * dt) * rng.standard_normal((n, d))
            )
            if not np.isfinite(step).all():
                raise RuntimeError(
                    f"SDE state went non-finite at step {i + 1}; last finite step index {i}"
                )
            y_paths[i + 1] = step
        x_paths = np.stack(
            [
                forward_map(potential, config.beta, float(t), torch.as_tensor(y_paths[i])).numpy()
                for i, t in enumerate(times)
            ]
        )
    return [
        Trajectory(times=times.copy(), y_path=y_paths[:, j], x_path=x_paths[:, j])
        for j in range(n)
    ]


def export_trajectories(trajectories: list[Trajectory], path: str | Path) -> Path:
    """Write trajectories as CSV with columns traj_id, t, y_1..y_d, x_1..x_d,
    ordered by (traj_id, t).  Values keep 17 significant digits so a parse
    round-trips exactly."""
    if not trajectories:
        raise ValueError("no trajectories to export")
    path = Path(path)
    d = trajectories[0].y_path.shape[1]
    header = (
        ["traj_id", "t"]
        + [f"y_{i + 1}" for i in range(d)]
        + [f"x_{i + 1}" for i in range(d)]
    )
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for tid, traj in enumerate(trajectories):
                for row in range(traj.times.size):
                    writer.writerow(
                        [tid, f"{traj.times[row]:.17g}"]
                        + [f"{v:.17g}" for v in traj.y_path[row]]
                        + [f"{v:.17g}" for v in traj.x_path[row]]
                    )
    except OSError as exc:
        raise OSError(f"failed writing trajectories to {path}: {exc}") from exc
    return path
