"""Grid-based 1-d solver for the joint drift/volatility bridge.

Works with tabulated potentials on a uniform grid and unit diffusion.  One
outer iteration: (1) Monte-Carlo Gaussian convolution of e^phi with common
random numbers, (2)-(3) quadratic-penalty argmin maps pushing the source and
target samples, (4) a kernel-density / Gaussian-mixture density ratio giving
the next potential, (5) phi <- log of the ratio.  After the loop the optimal
drift and volatility come from finite differences of the interpolated
log-densities, and the driving process is integrated with Euler steps.

Everything that can blow up (convolutions, density ratios) is handled in
log-space; the compact-support KDE numerator is floored so the ratio stays
finite.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .sampler import Trajectory

_LOG_2PI = math.log(2.0 * math.pi)

DENSITY_FLOOR = 1e-12
BETA_SWITCH = 50.0
_LOG_RATIO_CAP = 700.0   # keep exp() finite; divergence is caught separately


@dataclass
class Grid1D:
    """Uniformly spaced tabulated function with linear interpolation and
    linear extrapolation past the ends."""

    lo: float
    hi: float
    n: int
    values: np.ndarray
    kind: str = "phi"     # phi | h | logh

    def __post_init__(self):
        if self.n < 16:
            raise ValueError("grid needs n >= 16")
        if not self.hi > self.lo:
            raise ValueError("need hi > lo")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n,):
            raise ValueError(f"values must have shape ({self.n},)")
        if self.kind == "h" and (self.values <= 0).any():
            raise ValueError("h-kind grids must be strictly positive")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    def with_values(self, values: np.ndarray, kind: str) -> "Grid1D":
        return Grid1D(self.lo, self.hi, self.n, values, kind)

    def interp(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        xs, v = self.xs, self.values
        out = np.interp(x, xs, v)
        dx = self.spacing
        lo_slope = (v[1] - v[0]) / dx
        hi_slope = (v[-1] - v[-2]) / dx
        out = np.where(x < xs[0], v[0] + lo_slope * (x - xs[0]), out)
        out = np.where(x > xs[-1], v[-1] + hi_slope * (x - xs[-1]), out)
        return out

    def gradient_at(self, x) -> np.ndarray:
        """Central finite difference of the interpolant at grid spacing."""
        dx = self.spacing
        return (self.interp(np.asarray(x) + dx) - self.interp(np.asarray(x) - dx)) / (2 * dx)

    def second_derivative_at(self, x) -> np.ndarray:
        dx = self.spacing
        x = np.asarray(x)
        return (self.interp(x + dx) - 2 * self.interp(x) + self.interp(x - dx)) / dx ** 2


@dataclass
class SinkhornState:
    """Iteration state: phi = log h_T on the grid, the Monte-Carlo log h_0,
    and the run parameters (unit diffusion).  ``evidence`` marks the grid
    cells whose phi values rest on actual pushed-sample density (the rest
    are floor clamps or semiconvex wings); push maps search only there."""

    phi: Grid1D
    h0: Grid1D | None        # kind "logh"
    k: int
    beta: float
    T: float = 1.0
    epsilon: float = 1.0
    N_mc: int = 10_000
    lam: float = 0.3
    evidence: np.ndarray | None = None


@dataclass
class Sinkhorn1DConfig:
    beta: float = 10.0
    T: float = 1.0
    K: int = 20
    N_mc: int = 10_000       # Gaussian draws in the convolution step
    n_pi: int = 40           # Euler steps for the terminal simulation
    lam: float = 0.3         # KDE bandwidth
    grid_lo: float | None = None
    grid_hi: float | None = None
    grid_n: int = 512
    phi0: str = "zero"       # "zero" | "quadratic" (y^2/4)
    density_floor: float = DENSITY_FLOOR
    beta_switch: float = BETA_SWITCH
    max_abs_phi: float = 1e6
    # project each iterate onto the dual-feasible class (phi must be a
    # sup-convolution, hence beta-semiconvex); keeps the small-beta
    # iteration well-posed.  The slack keeps the projected curvature
    # strictly above -beta so downstream argmins stay proper.
    semiconvex_projection: bool = True
    projection_slack: float = 0.98
    # relaxation of the potential update: phi <- (1-damping) phi + damping
    # log h_T.  1.0 is the plain update; 0.5 contracts the oscillatory
    # modes of the fixed-point map on informative targets.
    damping: float = 1.0
    seed: int = 0
    n_trajectories: int | None = None   # default: one per source sample
    dump_dir: str | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def quartic_kernel(u: np.ndarray, lam: float, normalized: bool = True) -> np.ndarray:
    """Compact-support kernel (1 - (u/lam)^2)^2 / lam on |u| < lam; the
    normalized form divides by its mass 16/15 so it integrates to one."""
    u = np.asarray(u, dtype=np.float64)
    scaled = u / lam
    raw = np.where(np.abs(scaled) < 1.0, (1.0 - scaled ** 2) ** 2, 0.0) / lam
    return raw * (15.0 / 16.0) if normalized else raw


def _log_gauss(x: np.ndarray, var: float) -> np.ndarray:
    return -0.5 * (_LOG_2PI + math.log(var)) - x ** 2 / (2.0 * var)


def conv_h0(phi: Grid1D, T: float, N_mc: int, rng: np.random.Generator | int) -> Grid1D:
    """Step 1: log h_0(y) = log E[e^{phi(y + Z)}], Z ~ N(0, T), by Monte
    Carlo with the same draws shared across grid points.  Returns the log
    values (kind "logh") so nothing overflows."""
    if N_mc < 1:
        raise ValueError("N_mc must be >= 1")
    rng = np.random.default_rng(rng)
    z = math.sqrt(T) * rng.standard_normal(N_mc)
    shifted = phi.interp(phi.xs[:, None] + z[None, :])      # (n, N_mc)
    vals = logsumexp(shifted, axis=1) - math.log(N_mc)
    return phi.with_values(vals, "logh")


def sup_convolve(psi: Grid1D, beta: float) -> Grid1D:
    """Quadratic sup-convolution: out(y) = max_x [psi(x) - beta/2 (x-y)^2],
    exact over the grid points."""
    xs = psi.xs
    gap = xs[None, :] - xs[:, None]
    out = (psi.values[None, :] - 0.5 * beta * gap ** 2).max(axis=1)
    return psi.with_values(out, psi.kind)


def inf_convolve(phi: Grid1D, beta: float) -> Grid1D:
    """Quadratic inf-convolution: out(x) = min_y [phi(y) + beta/2 (x-y)^2]."""
    xs = phi.xs
    gap = xs[None, :] - xs[:, None]
    out = (phi.values[None, :] + 0.5 * beta * gap ** 2).min(axis=1)
    return phi.with_values(out, phi.kind)


def semiconvex_hull(phi: Grid1D, beta: float, valid: np.ndarray | None = None) -> Grid1D:
    """Double envelope sup-inf projection onto the beta-semiconvex class.

    Both convolutions draw their source points from the ``valid`` cells
    only and the result is evaluated on the whole grid: inside the valid
    band this is the usual double envelope, outside it the values continue
    as decaying parabolic wings from the band.  Cells without density
    evidence therefore never act as wells and never leak back in.
    """
    xs = phi.xs
    if valid is None:
        valid = np.ones(phi.n, dtype=bool)
    if not valid.any():
        return phi.with_values(phi.values.copy(), phi.kind)
    xs_v = xs[valid]
    vals = phi.values[valid]
    inf_c = (vals[None, :] + 0.5 * beta * (xs_v[None, :] - xs_v[:, None]) ** 2).min(axis=1)
    out = (inf_c[None, :] - 0.5 * beta * (xs_v[None, :] - xs[:, None]) ** 2).max(axis=1)
    return phi.with_values(out, phi.kind)


def argmin_map(
    target: Grid1D,
    beta: float,
    x,
    beta_switch: float = BETA_SWITCH,
    valid: np.ndarray | None = None,
) -> np.ndarray:
    """Quadratic-penalty argmin y*(x) = argmin_y [target(y) + beta/2 (x-y)^2].

    Grid search plus one parabolic refinement around the best grid point;
    for beta >= beta_switch the explicit gradient shortcut
    y* = x - target'(x)/beta is used instead.  ``valid`` masks grid cells
    out of the search (used for floor-clamped cells, which carry no density
    evidence and would otherwise act as artificial wells at small beta).
    Arguments at the search boundary raise a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    if beta >= beta_switch:
        out = flat - target.gradient_at(flat) / beta
        return out.reshape(x.shape)
    xs = target.xs
    objective = target.values[None, :] + 0.5 * beta * (xs[None, :] - flat[:, None]) ** 2
    if valid is not None and not valid.all():
        objective = np.where(valid[None, :], objective, np.inf)
    best = objective.argmin(axis=1)
    lo_idx, hi_idx = 0, target.n - 1
    if valid is not None and valid.any():
        lo_idx = int(np.argmax(valid))
        hi_idx = target.n - 1 - int(np.argmax(valid[::-1]))
    at_edge = (best <= lo_idx) | (best >= hi_idx)
    if at_edge.any():
        warnings.warn(
            f"argmin at the grid boundary for {int(at_edge.sum())} point(s); "
            "grid domain too small",
            RuntimeWarning,
        )
    best_inner = np.clip(best, 1, target.n - 2)
    g_lo = objective[np.arange(flat.size), best_inner - 1]
    g_mid = objective[np.arange(flat.size), best_inner]
    g_hi = objective[np.arange(flat.size), best_inner + 1]
    with np.errstate(invalid="ignore"):
        denom = g_lo - 2 * g_mid + g_hi
        shift = np.where(
            np.isfinite(denom) & (denom > 0),
            0.5 * (g_lo - g_hi) / np.maximum(denom, 1e-300),
            0.0,
        )
    shift = np.clip(np.nan_to_num(shift), -1.0, 1.0)
    refined = xs[best_inner] + shift * target.spacing
    out = np.where(at_edge, xs[best], refined)
    return out.reshape(x.shape)


KDE_EVIDENCE_REL = 1e-3


def update_hT(
    state: SinkhornState,
    mu0_samples: np.ndarray,
    muT_samples: np.ndarray,
    rng: np.random.Generator | int,
    density_floor: float = DENSITY_FLOOR,
    beta_switch: float = BETA_SWITCH,
    kde_evidence_rel: float = KDE_EVIDENCE_REL,
) -> Grid1D:
    """Step 4: next h_T as (KDE of pushed target samples) over (Gaussian
    mixture from pushed source samples, deflated by h_0).

    KDE cells below ``kde_evidence_rel`` of the peak carry only stray
    kernel tails; they are zeroed so the log-ratio's dynamic range inside
    the evidence band stays bounded.
    """
    mu0 = np.asarray(mu0_samples, dtype=np.float64).reshape(-1)
    muT = np.asarray(muT_samples, dtype=np.float64).reshape(-1)
    if mu0.size == 0 or muT.size == 0:
        raise ValueError("both sample sets must be nonempty")
    if state.h0 is None:
        raise ValueError("state.h0 missing; run the convolution step first")
    ys = state.phi.xs

    # cells without density evidence (floor clamps / extension wings) are
    # kept out of the push-map search
    if state.evidence is not None:
        valid = state.evidence
    else:
        valid = state.phi.values > math.log(density_floor) + 1e-9
    y_T = argmin_map(state.phi, state.beta, muT, beta_switch,
                     valid=valid if valid.any() and not valid.all() else None)
    num = quartic_kernel(ys[:, None] - y_T[None, :], state.lam).mean(axis=1)
    # stray kernel tails carry no usable evidence; zeroing them bounds the
    # log-ratio's dynamic range inside the evidence band
    num = np.where(num > kde_evidence_rel * num.max(), num, 0.0)
    if (num == 0.0).any():
        warnings.warn(
            "KDE numerator is zero on part of the grid; values clamped to the density floor",
            RuntimeWarning,
        )

    y_0 = argmin_map(state.h0, state.beta, mu0, beta_switch)
    log_h0_at = state.h0.interp(y_0)
    log_den_terms = _log_gauss(ys[:, None] - y_0[None, :], state.T) - log_h0_at[None, :]
    log_den = logsumexp(log_den_terms, axis=1) - math.log(mu0.size)

    with np.errstate(divide="ignore"):
        log_ratio = np.log(num) - log_den
    log_ratio = np.clip(log_ratio, math.log(density_floor), _LOG_RATIO_CAP)
    return state.phi.with_values(np.exp(log_ratio), "h")


def log_gauss_convolve(log_f: Grid1D, var: float) -> Grid1D:
    """log of (e^{log_f} * N(0, var)) by trapezoid quadrature on the grid."""
    if var <= 0:
        return log_f.with_values(log_f.values.copy(), "logh")
    xs = log_f.xs
    log_w = np.full(log_f.n, math.log(log_f.spacing))
    log_w[[0, -1]] -= math.log(2.0)
    gap = xs[:, None] - xs[None, :]
    vals = logsumexp(log_f.values[None, :] + _log_gauss(gap, var) + log_w[None, :], axis=1)
    return log_f.with_values(vals, "logh")


def extract_controls(state: SinkhornState, beta_switch: float = BETA_SWITCH):
    """Optimal drift and volatility as callables (t, x) -> value.

    log h_t is tabulated by exact Gaussian quadrature of h_T on the grid
    (t = T uses the h_T grid directly); derivatives are central finite
    differences of the interpolant, composed with the push map (gradient
    mode by default, grid search above ``beta_switch``).
    """
    cache: dict[float, Grid1D] = {}

    def _log_ht(t: float) -> Grid1D:
        key = round(float(t), 12)
        if key not in cache:
            if not 0.0 <= t <= state.T:
                raise ValueError(f"t must lie in [0, T], got {t}")
            cache[key] = log_gauss_convolve(state.phi, state.T - t)
        return cache[key]

    def alpha(t: float, x) -> np.ndarray | float:
        grid = _log_ht(t)
        y = argmin_map(grid, state.beta, x, beta_switch=beta_switch)
        out = grid.gradient_at(y)
        return float(out) if np.isscalar(x) else out

    def sigma(t: float, x) -> np.ndarray | float:
        grid = _log_ht(t)
        y = argmin_map(grid, state.beta, x, beta_switch=beta_switch)
        out = 1.0 + grid.second_derivative_at(y) / state.beta
        return float(out) if np.isscalar(x) else out

    return alpha, sigma


def simulate_x_process(
    state: SinkhornState,
    x0: np.ndarray,
    n_steps: int,
    rng: np.random.Generator | int,
) -> tuple[np.ndarray, np.ndarray]:
    """Euler integration of the transported process itself,
    dX = alpha(t, X) dt + sigma(t, X) dW, using the extracted controls.

    Returns (times, paths) with paths of shape (n_steps + 1, n).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    rng = np.random.default_rng(rng)
    alpha, sigma = extract_controls(state)
    x = np.asarray(x0, dtype=np.float64).reshape(-1).copy()
    times = np.linspace(0.0, state.T, n_steps + 1)
    dt = times[1] - times[0]
    paths = np.empty((n_steps + 1, x.size))
    paths[0] = x
    for i in range(n_steps):
        a = np.asarray(alpha(float(times[i]), paths[i]))
        s = np.asarray(sigma(float(times[i]), paths[i]))
        paths[i + 1] = paths[i] + a * dt + s * math.sqrt(dt) * rng.standard_normal(x.size)
        if not np.isfinite(paths[i + 1]).all():
            raise RuntimeError(f"X simulation went non-finite at step {i + 1}")
    return times, paths


def export_controls(alpha, sigma, ts, xs, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "x", "alpha", "sigma"])
        for t in ts:
            for x in xs:
                writer.writerow(
                    [f"{t:.17g}", f"{x:.17g}", f"{alpha(t, x):.17g}", f"{sigma(t, x):.17g}"]
                )
    return path


def run_sinkhorn_sbb(
    mu0_samples: np.ndarray,
    muT_samples: np.ndarray,
    config: Sinkhorn1DConfig,
) -> tuple[SinkhornState, list[Trajectory]]:
    """Full outer loop followed by Euler simulation of the driving process
    from the pushed source points.  Returns the final state and one
    trajectory per simulated source point."""
    mu0 = np.asarray(mu0_samples, dtype=np.float64).reshape(-1)
    muT = np.asarray(muT_samples, dtype=np.float64).reshape(-1)
    if mu0.size == 0 or muT.size == 0:
        raise ValueError("need nonempty 1-d sample sets")
    rng = np.random.default_rng(config.seed)

    if config.grid_lo is None or config.grid_hi is None:
        pooled = np.concatenate([mu0, muT])
        center, spread = pooled.mean(), pooled.std()
        half = 6.0 * max(spread, 0.5)
        lo, hi = center - half, center + half
    else:
        lo, hi = config.grid_lo, config.grid_hi
    xs = np.linspace(lo, hi, config.grid_n)
    phi_vals = xs ** 2 / 4.0 if config.phi0 == "quadratic" else np.zeros(config.grid_n)
    phi = Grid1D(lo, hi, config.grid_n, phi_vals, "phi")

    state = SinkhornState(
        phi=phi, h0=None, k=0, beta=config.beta, T=config.T,
        N_mc=config.N_mc, lam=config.lam,
    )
    dump_dir = Path(config.dump_dir) if config.dump_dir else None
    if dump_dir:
        dump_dir.mkdir(parents=True, exist_ok=True)

    for k in range(config.K):
        state.h0 = conv_h0(state.phi, config.T, config.N_mc, rng)
        h_T = update_hT(
            state, mu0, muT, rng,
            density_floor=config.density_floor, beta_switch=config.beta_switch,
        )
        new_phi = np.log(h_T.values)
        if np.abs(new_phi).max() > config.max_abs_phi:
            raise RuntimeError(
                f"potential diverged at iteration {k}: sup |phi| = {np.abs(new_phi).max():.3g}"
            )
        if dump_dir:
            with open(dump_dir / f"state_k{k:03d}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["y", "phi", "h0", "hT"])
                for row in zip(xs, state.phi.values, np.exp(state.h0.values), h_T.values):
                    writer.writerow([f"{v:.17g}" for v in row])
        next_grid = state.phi.with_values(new_phi, "phi")
        evidence = h_T.values > config.density_floor * (1.0 + 1e-9)
        if config.semiconvex_projection:
            next_grid = semiconvex_hull(
                next_grid, config.projection_slack * config.beta, valid=evidence
            )
        if config.damping != 1.0:
            mixed = (1.0 - config.damping) * state.phi.values + config.damping * next_grid.values
            next_grid = next_grid.with_values(mixed, "phi")
        state.phi = next_grid
        state.evidence = evidence
        state.k = k + 1

    state.h0 = conv_h0(state.phi, config.T, config.N_mc, rng)

    # terminal simulation of dY = (log h_t)'(Y) dt + dW from pushed mu0;
    # the initial map uses the exact-quadrature h_0 (same object the
    # controls use), which matters when N_mc is tiny
    n_traj = mu0.size if config.n_trajectories is None else min(config.n_trajectories, mu0.size)
    log_h0_exact = log_gauss_convolve(state.phi, config.T)
    y = argmin_map(log_h0_exact, config.beta, mu0[:n_traj], config.beta_switch)
    times = np.linspace(0.0, config.T, config.n_pi + 1)
    dt = times[1] - times[0]
    grids = [
        log_gauss_convolve(state.phi, config.T - t) if t < config.T else state.phi
        for t in times
    ]
    y_paths = np.empty((config.n_pi + 1, n_traj))
    y_paths[0] = y
    for i in range(config.n_pi):
        s = grids[i].gradient_at(y_paths[i])
        y_paths[i + 1] = y_paths[i] + s * dt + math.sqrt(dt) * rng.standard_normal(n_traj)
    x_paths = np.stack(
        [y_paths[i] + grids[i].gradient_at(y_paths[i]) / config.beta for i in range(len(times))]
    )
    trajectories = [
        Trajectory(
            times=times.copy(),
            y_path=y_paths[:, j][:, None],
            x_path=x_paths[:, j][:, None],
        )
        for j in range(n_traj)
    ]
    return state, trajectories
