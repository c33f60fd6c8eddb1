"""Alternating training of the mixture potential and the inverse transport map.

Each outer iteration (a) maps endpoint samples through the current inverse
map, (b) fits the score drift by bridge matching on Brownian-bridge points,
and (c) refits the inverse map against the updated volatility stretch.  The
large-beta variant replaces the learned inverse map with the explicit
first-order approximation y = x - s(t, x)/beta and trains the potential only.

Randomness is drawn from a single numpy generator in a fixed documented
order (per drift step: source indices, target indices, bridge times, bridge
noise; per map step: source indices, target indices), so seeded runs are
reproducible and the beta -> infinity path consumes the identical stream as
a plain bridge-matching loop.
"""

from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .potential import GmmPotential, drift
from .transport_net import TransportNet, ZRegressionBatch, z_loss

Tensor = torch.Tensor


@dataclass
class SbbConfig:
    """Solver settings.  ``beta=None`` encodes the infinite-beta limit
    (identity maps, pure bridge matching)."""

    beta: float | None = 10.0
    epsilon: float = 1.0
    T: float = 1.0
    T_tilde: float = 0.99
    K: int = 5
    J: int = 10
    n_epoch: int = 15000
    batch_size: int = 512
    lr: float = 1e-3
    seed: int = 0
    variant: str = "full"                 # "full" | "beta_large"
    t_model: int = 8
    d_model: int = 32
    theta_step_fraction: float = 0.8      # share of each iteration's steps spent on the potential
    warm_start_theta: bool = True
    beta_large_log_form: bool = False     # literal elementwise-log endpoint update
    early_stop_patience: int = 200
    early_stop_delta: float = 1e-6
    # windowed convergence rule for the (noisy) bridge-matching phase:
    # stop when the mean loss over the last window stalls
    theta_window: int = 200
    theta_stall_rel: float = 1e-3
    deterministic: bool = False

    def __post_init__(self):
        if self.beta is not None and np.isinf(self.beta):
            self.beta = None
        if self.beta is not None and self.beta <= 0:
            raise ValueError(f"beta must be positive or None, got {self.beta}")
        if self.T_tilde >= self.T:
            raise ValueError(f"T_tilde must be below T, got {self.T_tilde} >= {self.T}")
        if self.variant not in ("full", "beta_large"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.beta is not None and self.beta <= 1.0 / self.T:
            warnings.warn(
                f"beta = {self.beta} <= 1/T = {1.0 / self.T}: dual attainment is not "
                "guaranteed and training may fail to converge",
                RuntimeWarning,
            )

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(config: dict) -> str:
    """Short stable hash of a config mapping, invariant to key order."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


@dataclass
class BridgeSample:
    """Brownian-bridge interior point(s) between paired endpoints, plus the
    bridge-matching regression target (yT - yt)/(T - t)."""

    y0: np.ndarray
    yT: np.ndarray
    t: np.ndarray
    yt: np.ndarray
    target: np.ndarray


def sample_bridge(
    y0,
    yT,
    T: float,
    epsilon: float,
    rng: np.random.Generator | int,
    t=None,
    t_max: float | None = None,
) -> BridgeSample:
    """Sample y_t = ((T-t)/T) y0 + (t/T) yT + sigma_t sqrt(eps) z with
    sigma_t^2 = t(T-t)/T.

    Accepts single endpoints ``(d,)`` or stacked batches ``(B, d)``; one time
    per row, drawn uniformly on [0, t_max) (default t_max = T) unless ``t``
    is pinned explicitly.
    """
    rng = np.random.default_rng(rng)
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.float64))
    yT = np.atleast_2d(np.asarray(yT, dtype=np.float64))
    if y0.shape != yT.shape:
        raise ValueError("endpoint shapes differ")
    if not (np.isfinite(y0).all() and np.isfinite(yT).all()):
        raise ValueError("endpoints must be finite")
    n = y0.shape[0]
    if t is None:
        t = rng.uniform(0.0, T if t_max is None else t_max, size=n)
    else:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    if (t < 0).any() or (t >= T).any():
        raise ValueError("bridge times must lie in [0, T)")
    z = rng.standard_normal(y0.shape)
    sigma_t = np.sqrt(t * (T - t) / T)
    tcol = t[:, None]
    yt = (T - tcol) / T * y0 + tcol / T * yT + sigma_t[:, None] * np.sqrt(epsilon) * z
    target = (yT - yt) / (T - tcol)
    return BridgeSample(y0=y0, yT=yT, t=t, yt=yt, target=target)


def dsm_loss(potential: GmmPotential, batch: BridgeSample) -> Tensor:
    """Bridge-matching loss: mean over the batch of
    || s(t, y_t) - (yT - yt)/(T - t) ||^2, differentiable in the potential."""
    if (batch.t >= potential.horizon).any():
        raise ValueError("bridge sample contains t >= T")
    t = torch.as_tensor(batch.t, dtype=torch.float64)
    yt = torch.as_tensor(batch.yt, dtype=torch.float64)
    target = torch.as_tensor(batch.target, dtype=torch.float64)
    s = drift(potential, t, yt)
    return ((s - target) ** 2).sum(dim=1).mean()


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostic state dump."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainReport:
    dsm_losses: list = field(default_factory=list)   # per outer iteration: list of step losses
    z_losses: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    config: dict = field(default_factory=dict)
    config_hash: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @property
    def final_dsm(self) -> float:
        return self.dsm_losses[-1][-1]

    @property
    def initial_dsm(self) -> float:
        return self.dsm_losses[0][0]


def _step_budget(config: SbbConfig) -> tuple[int, int]:
    """Per-iteration step counts (drift steps, map-step cap).

    The drift phase takes its configured share of n_epoch/K.  The map
    regression is a tracking problem, so it runs under the convergence rule
    (early stop on stalled loss) with the full per-iteration budget as a
    cap; at large beta the stretch barely moves and the phase ends after a
    couple hundred steps.
    """
    per_k = config.n_epoch // config.K
    if config.beta is None:
        return per_k, 0
    n_theta = int(round(config.theta_step_fraction * per_k))
    return n_theta, per_k


def _draw_pair(
    rng: np.random.Generator, x0: Tensor, xT: Tensor, batch_size: int
) -> tuple[Tensor, Tensor]:
    i0 = rng.integers(0, x0.shape[0], size=batch_size)
    iT = rng.integers(0, xT.shape[0], size=batch_size)
    return x0[i0], xT[iT]


class _WindowStall:
    """Convergence probe for noisy loss curves: stalls when the windowed
    mean stops improving by a relative margin."""

    def __init__(self, window: int, rel: float, patience_windows: int = 2):
        self.window = window
        self.rel = rel
        self.patience_windows = patience_windows
        self.losses: list[float] = []
        self.best = np.inf
        self.stalled_windows = 0

    def update(self, loss: float) -> bool:
        self.losses.append(loss)
        if len(self.losses) % self.window:
            return False
        mean = float(np.mean(self.losses[-self.window:]))
        if mean < self.best * (1.0 - self.rel):
            self.best = mean
            self.stalled_windows = 0
        else:
            self.stalled_windows += 1
        return self.stalled_windows >= self.patience_windows


def _check_finite(loss: Tensor, where: str, potential: GmmPotential, report: TrainReport):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite {where} loss",
            {
                "where": where,
                "loss": float(loss.detach()),
                "potential": potential.to_json(),
                "dsm_tail": [c[-5:] for c in report.dsm_losses[-2:]],
                "z_tail": [c[-5:] for c in report.z_losses[-2:]],
            },
        )


def train(
    config: SbbConfig,
    source: np.ndarray,
    target: np.ndarray,
    checkpoint_dir: str | Path | None = None,
) -> tuple[GmmPotential, TransportNet, TrainReport]:
    """Run the full alternating scheme; returns the fitted potential, the
    fitted inverse map and per-iteration loss curves.

    Endpoint pairs within a batch are drawn independently from the two
    sample sets.  Gradients of the bridge-matching loss flow only through
    the drift; endpoint maps are evaluated under no_grad with the previous
    iterate frozen.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.size == 0 or target.size == 0:
        raise ValueError("sample arrays must be nonempty")
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise ValueError("source/target must be (n, d) with matching d")
    d = source.shape[1]

    # tensors here are tiny; dispatch overhead makes extra threads a loss
    torch.set_num_threads(1)
    # main stream: potential init, then per-step draws; the map net draws
    # from an auxiliary stream so the infinite-beta path consumes exactly
    # the stream of a plain bridge-matching loop
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()

    pot = GmmPotential.initialize(
        config.J, d, config.epsilon, config.T, target_std=target.std(axis=0), rng=rng
    ).requires_grad_()
    net = TransportNet(d, config.t_model, config.d_model, config.T).init_weights(
        np.random.default_rng([config.seed, 1])
    )

    x0 = torch.as_tensor(source)
    xT = torch.as_tensor(target)
    opt_theta = torch.optim.Adam(pot.parameters(), lr=config.lr)
    opt_z = torch.optim.Adam(net.parameters(), lr=config.lr)

    report = TrainReport(config=config.to_dict(), config_hash=config_hash(config.to_dict()))
    n_theta, n_z = _step_budget(config)

    for k in range(config.K):
        if not config.warm_start_theta and k > 0:
            pot = GmmPotential.initialize(
                config.J, d, config.epsilon, config.T,
                target_std=target.std(axis=0), rng=rng,
            ).requires_grad_()
            opt_theta = torch.optim.Adam(pot.parameters(), lr=config.lr)

        # (a) + (b): bridge matching on mapped endpoints, run to the
        # windowed convergence rule within the per-iteration budget
        curve = []
        stall = _WindowStall(config.theta_window, config.theta_stall_rel)
        for _ in range(n_theta):
            b0, bT = _draw_pair(rng, x0, xT, config.batch_size)
            with torch.no_grad():
                if config.beta is None or k == 0:
                    # the map entering iteration 0 is the exact identity
                    y0, yT = b0, bT
                else:
                    tcol = torch.cat(
                        [
                            torch.zeros(b0.shape[0], 1, dtype=torch.float64),
                            torch.full((bT.shape[0], 1), config.T, dtype=torch.float64),
                        ]
                    )
                    mapped = net(tcol, torch.cat([b0, bT]))
                    y0, yT = mapped[: b0.shape[0]], mapped[b0.shape[0]:]
            bridge = sample_bridge(
                y0.numpy(), yT.numpy(), config.T, config.epsilon, rng,
                t_max=config.T_tilde,
            )
            loss = dsm_loss(pot, bridge)
            _check_finite(loss, f"dsm (iteration {k})", pot, report)
            opt_theta.zero_grad()
            loss.backward()
            opt_theta.step()
            curve.append(float(loss.detach()))
            if stall.update(curve[-1]):
                break
        report.dsm_losses.append(curve)

        # (c): regression of the inverse map onto the volatility stretch
        zcurve = []
        if n_z > 0:
            best, since_best = np.inf, 0
            for _ in range(n_z):
                b0, bT = _draw_pair(rng, x0, xT, config.batch_size)
                with torch.no_grad():
                    pts = torch.cat([b0, bT])
                    tvec = torch.cat(
                        [
                            torch.zeros(b0.shape[0], dtype=torch.float64),
                            torch.full((bT.shape[0],), config.T_tilde, dtype=torch.float64),
                        ]
                    )
                    stretched = pts + drift(pot, tvec, pts) / config.beta
                batch = ZRegressionBatch(
                    times=np.concatenate(
                        [np.zeros(b0.shape[0]), np.full(bT.shape[0], config.T)]
                    ),
                    inputs=stretched.numpy(),
                    targets=pts.numpy(),
                )
                loss = z_loss(net, batch)
                _check_finite(loss, f"z (iteration {k})", pot, report)
                opt_z.zero_grad()
                loss.backward()
                opt_z.step()
                zcurve.append(float(loss.detach()))
                if zcurve[-1] < best - config.early_stop_delta:
                    best, since_best = zcurve[-1], 0
                else:
                    since_best += 1
                    if since_best >= config.early_stop_patience:
                        break
        report.z_losses.append(zcurve)

        if checkpoint_dir is not None:
            ckpt = Path(checkpoint_dir)
            ckpt.mkdir(parents=True, exist_ok=True)
            (ckpt / f"potential_k{k}.json").write_text(pot.to_json())
            (ckpt / f"net_k{k}.json").write_text(net.to_json())

    report.wall_clock_s = time.perf_counter() - t0
    return pot, net, report


def train_beta_large(
    config: SbbConfig,
    source: np.ndarray,
    target: np.ndarray,
    checkpoint_dir: str | Path | None = None,
) -> tuple[GmmPotential, TrainReport]:
    """Variant without an inverse-map model: endpoints are the explicit
    first-order approximation y = x - s(t, x)/beta (identity at iteration 0).

    ``beta_large_log_form`` switches to the elementwise-log endpoint update
    y = x - log(s(t, x))/beta; it is only meaningful where the drift is
    strictly positive and is off by default.
    """
    if config.beta is None:
        raise ValueError("beta_large variant needs a finite beta")
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.size == 0 or target.size == 0:
        raise ValueError("sample arrays must be nonempty")
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise ValueError("source/target must be (n, d) with matching d")
    d = source.shape[1]

    torch.set_num_threads(1)
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()

    pot = GmmPotential.initialize(
        config.J, d, config.epsilon, config.T, target_std=target.std(axis=0), rng=rng
    ).requires_grad_()
    x0 = torch.as_tensor(source)
    xT = torch.as_tensor(target)
    opt_theta = torch.optim.Adam(pot.parameters(), lr=config.lr)

    report = TrainReport(config=config.to_dict(), config_hash=config_hash(config.to_dict()))
    per_k = config.n_epoch // config.K

    for k in range(config.K):
        curve = []
        stall = _WindowStall(config.theta_window, config.theta_stall_rel)
        for _ in range(per_k):
            b0, bT = _draw_pair(rng, x0, xT, config.batch_size)
            with torch.no_grad():
                if k == 0:
                    y0, yT = b0, bT
                else:
                    pts = torch.cat([b0, bT])
                    tvec = torch.cat(
                        [
                            torch.zeros(b0.shape[0], dtype=torch.float64),
                            torch.full((bT.shape[0],), config.T_tilde, dtype=torch.float64),
                        ]
                    )
                    s = drift(pot, tvec, pts)
                    correction = torch.log(s) if config.beta_large_log_form else s
                    mapped = pts - correction / config.beta
                    y0, yT = mapped[: b0.shape[0]], mapped[b0.shape[0]:]
            if not (torch.isfinite(y0).all() and torch.isfinite(yT).all()):
                raise TrainingDivergedError(
                    f"non-finite endpoints (iteration {k})",
                    {"where": f"beta_large endpoints (iteration {k})", "potential": pot.to_json()},
                )
            bridge = sample_bridge(
                y0.numpy(), yT.numpy(), config.T, config.epsilon, rng,
                t_max=config.T_tilde,
            )
            loss = dsm_loss(pot, bridge)
            _check_finite(loss, f"dsm (iteration {k})", pot, report)
            opt_theta.zero_grad()
            loss.backward()
            opt_theta.step()
            curve.append(float(loss.detach()))
            if stall.update(curve[-1]):
                break
        report.dsm_losses.append(curve)
        report.z_losses.append([])

        if checkpoint_dir is not None:
            ckpt = Path(checkpoint_dir)
            ckpt.mkdir(parents=True, exist_ok=True)
            (ckpt / f"potential_k{k}.json").write_text(pot.to_json())

    report.wall_clock_s = time.perf_counter() - t0
    return pot, report
