"""Gaussian-mixture potential and the closed-form quantities it induces.

The potential is a J-component Gaussian mixture

    phi(x) = sum_j alpha_j N(x | r_j, eps * Sigma_j),      Sigma_j diagonal,

which defines a bridge process on [0, T] through the endpoint plan
pi(x_T | x_0) proportional to exp(<x_0, x_T>/eps) * phi(x_T).  Everything a
solver needs is available in closed form:

  * ``drift``                the score drift s(t, y) = eps * d/dy log h_t(y)
  * ``log_h``                the underlying log-density log h_t(y)
  * ``conditional_coupling`` the exact mixture form of pi(. | x_0)
  * ``forward_map``          the volatility stretch y -> y + s(t, y)/beta

All mixture arithmetic runs in log-space (log-sum-exp), so evaluations stay
finite for |y| up to ~1e6.  Computations are torch-based so the trainer can
differentiate through the drift; float64 throughout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

Tensor = torch.Tensor

_LOG_2PI = math.log(2.0 * math.pi)


class GmmPotential:
    """Parameters of the mixture potential.

    Weights are a softmax over ``logits`` and component covariances are
    ``diag(exp(log_diag_sigma_j))``, so every parameter is unconstrained and
    the simplex / positivity invariants hold by construction.
    """

    def __init__(
        self,
        logits: Tensor,
        r: Tensor,
        log_diag_sigma: Tensor,
        epsilon: float,
        horizon: float = 1.0,
    ):
        logits = torch.as_tensor(logits, dtype=torch.float64)
        r = torch.as_tensor(r, dtype=torch.float64)
        log_diag_sigma = torch.as_tensor(log_diag_sigma, dtype=torch.float64)
        if r.ndim != 2:
            raise ValueError(f"r must be (J, d), got shape {tuple(r.shape)}")
        if log_diag_sigma.shape != r.shape:
            raise ValueError(
                f"log_diag_sigma shape {tuple(log_diag_sigma.shape)} != r shape {tuple(r.shape)}"
            )
        if logits.shape != (r.shape[0],):
            raise ValueError(f"logits must be (J,), got shape {tuple(logits.shape)}")
        if r.shape[0] < 1 or r.shape[1] < 1:
            raise ValueError("need J >= 1 and d >= 1")
        if not epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        if not horizon > 0:
            raise ValueError(f"horizon must be positive, got {horizon}")
        self.logits = logits
        self.r = r
        self.log_diag_sigma = log_diag_sigma
        self.epsilon = float(epsilon)
        self.horizon = float(horizon)

    @property
    def n_components(self) -> int:
        return self.r.shape[0]

    @property
    def dim(self) -> int:
        return self.r.shape[1]

    @property
    def weights(self) -> Tensor:
        return torch.softmax(self.logits, dim=0)

    @property
    def sigma(self) -> Tensor:
        """Diagonals of Sigma_j, shape (J, d)."""
        return torch.exp(self.log_diag_sigma)

    def parameters(self) -> list[Tensor]:
        return [self.logits, self.r, self.log_diag_sigma]

    def requires_grad_(self, flag: bool = True) -> "GmmPotential":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    @classmethod
    def initialize(
        cls,
        n_components: int,
        dim: int,
        epsilon: float,
        horizon: float = 1.0,
        target_std: np.ndarray | float = 1.0,
        rng: np.random.Generator | int | None = None,
    ) -> "GmmPotential":
        """Fresh potential: zero logits, locations ~ N(0, I) scaled to the
        target sample's per-coordinate standard deviation, unit Sigma."""
        rng = np.random.default_rng(rng)
        std = np.broadcast_to(np.asarray(target_std, dtype=np.float64), (dim,))
        r = rng.standard_normal((n_components, dim)) * std
        return cls(
            logits=torch.zeros(n_components, dtype=torch.float64),
            r=torch.as_tensor(r, dtype=torch.float64),
            log_diag_sigma=torch.zeros((n_components, dim), dtype=torch.float64),
            epsilon=epsilon,
            horizon=horizon,
        )

    # --- serialization: flat JSON, exact round trip for finite doubles ---

    def to_json(self) -> str:
        obj = {
            "J": self.n_components,
            "d": self.dim,
            "epsilon": self.epsilon,
            "horizon": self.horizon,
            "logits": self.logits.detach().tolist(),
            "r": self.r.detach().tolist(),
            "log_diag_sigma": self.log_diag_sigma.detach().tolist(),
        }
        return json.dumps(obj)

    @classmethod
    def from_json(cls, text: str) -> "GmmPotential":
        obj = json.loads(text)
        pot = cls(
            logits=torch.tensor(obj["logits"], dtype=torch.float64),
            r=torch.tensor(obj["r"], dtype=torch.float64),
            log_diag_sigma=torch.tensor(obj["log_diag_sigma"], dtype=torch.float64),
            epsilon=obj["epsilon"],
            horizon=obj["horizon"],
        )
        if pot.n_components != obj["J"] or pot.dim != obj["d"]:
            raise ValueError("serialized shapes inconsistent with J/d fields")
        return pot


@dataclass
class ConditionalCoupling:
    """Exact Gaussian-mixture form of the endpoint plan pi(. | x0):
    component weights, means ``r_j + Sigma_j x0`` and diagonal covariances
    ``eps * Sigma_j``."""

    weights: np.ndarray      # (J,)
    means: np.ndarray        # (J, d)
    cov_diag: np.ndarray     # (J, d)


def _as_batch(y) -> tuple[Tensor, bool]:
    y = torch.as_tensor(y, dtype=torch.float64)
    if y.ndim == 1:
        return y.unsqueeze(0), True
    if y.ndim == 2:
        return y, False
    raise ValueError(f"points must be (d,) or (B, d), got ndim {y.ndim}")


def _validate_time(potential: GmmPotential, t: Tensor) -> None:
    if not torch.isfinite(t).all():
        raise ValueError("time must be finite")
    if (t < 0).any() or (t >= potential.horizon).any():
        raise ValueError(
            f"time must lie in [0, T) = [0, {potential.horizon}); drift is singular at t = T"
        )


def _posterior_terms(potential: GmmPotential, t: Tensor, y: Tensor):
    """Per-component posterior quantities of the endpoint given Y_t = y.

    Completing the square in the defining integral of h_t gives, per
    component, a Gaussian in the endpoint with precision

        A_j = t/(eps (T - t)) I + Sigma_j^{-1}/eps

    and natural parameter h_j = y/(eps (T - t)) + Sigma_j^{-1} r_j / eps,
    i.e. mean m_j = A_j^{-1} h_j.  The log component masses carry the
    *positive* quadratic form +h^T A^{-1} h / 2 produced by the Gaussian
    integral (verified against quadrature and conditional-expectation
    oracles; a literal Gaussian density in h_j has the wrong sign).

    Returns (a, h, log_mass) with shapes (B, J, d), (B, J, d), (B, J).
    """
    eps = potential.epsilon
    remaining = (potential.horizon - t).reshape(-1, 1, 1)       # (B, 1, 1)
    tt = t.reshape(-1, 1, 1)
    sigma = potential.sigma                                     # (J, d)
    a = tt / (eps * remaining) + 1.0 / (eps * sigma)            # (B, J, d)
    h = y.unsqueeze(1) / (eps * remaining) + potential.r / (eps * sigma)
    log_alpha = torch.log_softmax(potential.logits, dim=0)      # (J,)
    log_norm_r = -0.5 * (
        (_LOG_2PI + math.log(eps) + potential.log_diag_sigma)
        + potential.r ** 2 / (eps * sigma)
    ).sum(dim=1)                                                # (J,)
    log_mass = (
        log_alpha
        + log_norm_r
        - 0.5 * torch.log(a).sum(dim=2)
        + 0.5 * (h ** 2 / a).sum(dim=2)
    )                                                           # (B, J)
    return a, h, log_mass


def drift(potential: GmmPotential, t, y) -> Tensor:
    """Score drift s(t, y) = eps * d/dy log h_t(y), evaluated analytically.

    Accepts a scalar or per-row ``t`` and a single point or a batch ``y``;
    broadcast follows the batch.  Equals the conditional-expectation form
    (E[Y_T | Y_t = y] - y) / (T - t).
    """
    yb, squeeze = _as_batch(y)
    if not torch.isfinite(yb).all():
        raise ValueError("drift: y must be finite")
    tb = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if tb.numel() == 1:
        tb = tb.expand(yb.shape[0])
    _validate_time(potential, tb)
    a, h, log_mass = _posterior_terms(potential, tb, yb)
    w = torch.softmax(log_mass, dim=1)                          # (B, J)
    mean_end = (w.unsqueeze(2) * (h / a)).sum(dim=1)            # (B, d)
    s = (mean_end - yb) / (potential.horizon - tb).reshape(-1, 1)
    return s.squeeze(0) if squeeze else s


def log_h(potential: GmmPotential, t, y) -> Tensor:
    """log h_t(y): the log of the closed-form product whose eps-scaled
    gradient is the drift.  Exposed for finite-difference oracles."""
    yb, squeeze = _as_batch(y)
    if not torch.isfinite(yb).all():
        raise ValueError("log_h: y must be finite")
    tb = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if tb.numel() == 1:
        tb = tb.expand(yb.shape[0])
    _validate_time(potential, tb)
    _, _, log_mass = _posterior_terms(potential, tb, yb)
    eps = potential.epsilon
    remaining = (potential.horizon - tb).reshape(-1, 1)
    log_bridge = -0.5 * (
        (_LOG_2PI + torch.log(eps * remaining)) + yb ** 2 / (eps * remaining)
    ).sum(dim=1)
    d = potential.dim
    out = log_bridge + torch.logsumexp(log_mass + 0.5 * d * _LOG_2PI, dim=1)
    return out.squeeze(0) if squeeze else out


def coupling_log_weights(potential: GmmPotential, x0: Tensor) -> Tensor:
    """Log weights of pi(. | x0) up to a shared constant: logit_j +
    (r_j . x0 + x0^T Sigma_j x0 / 2) / eps.  Raw logits keep the x0 = 0 case
    bit-identical to the mixture weights.  x0 may be (d,) or (B, d)."""
    x0b, squeeze = _as_batch(x0)
    sigma = potential.sigma
    lw = potential.logits + (
        x0b @ potential.r.T + 0.5 * (x0b ** 2) @ sigma.T
    ) / potential.epsilon
    return lw.squeeze(0) if squeeze else lw


def conditional_coupling(potential: GmmPotential, x0) -> ConditionalCoupling:
    """Exact mixture form of pi(x_T | x0) by completing the square."""
    x0t = torch.as_tensor(x0, dtype=torch.float64)
    if x0t.ndim != 1 or x0t.shape[0] != potential.dim:
        raise ValueError(f"x0 must be a ({potential.dim},) vector")
    if not torch.isfinite(x0t).all():
        raise ValueError("conditional_coupling: x0 must be finite")
    lw = coupling_log_weights(potential, x0t)
    weights = torch.softmax(lw, dim=0)
    means = potential.r + potential.sigma * x0t
    cov = potential.epsilon * potential.sigma
    return ConditionalCoupling(
        weights=weights.detach().numpy(),
        means=means.detach().numpy(),
        cov_diag=cov.detach().numpy(),
    )


def sample_conditional(
    potential: GmmPotential, x0, rng: np.random.Generator | int
) -> np.ndarray:
    """One draw x_T ~ pi(. | x0); deterministic given the seed."""
    rng = np.random.default_rng(rng)
    coup = conditional_coupling(potential, x0)
    j = rng.choice(coup.weights.shape[0], p=coup.weights)
    return coup.means[j] + np.sqrt(coup.cov_diag[j]) * rng.standard_normal(
        potential.dim
    )


def sample_conditional_batch(
    potential: GmmPotential, x0_batch: np.ndarray, rng: np.random.Generator | int
) -> np.ndarray:
    """Vectorized endpoint sampling: one draw from pi(. | x0) per row.

    Component selection by inverse-CDF on the per-row weights, then a
    Gaussian draw from the chosen component.
    """
    rng = np.random.default_rng(rng)
    x0t = torch.as_tensor(np.asarray(x0_batch), dtype=torch.float64)
    if x0t.ndim != 2:
        raise ValueError("x0_batch must be (B, d)")
    if not torch.isfinite(x0t).all():
        raise ValueError("x0_batch must be finite")
    with torch.no_grad():
        lw = coupling_log_weights(potential, x0t)               # (B, J)
        w = torch.softmax(lw, dim=1).numpy()
    cdf = np.cumsum(w, axis=1)
    cdf[:, -1] = 1.0                                            # guard rounding
    u = rng.random((x0t.shape[0], 1))
    idx = (u > cdf).sum(axis=1)
    means = (potential.r + potential.sigma * x0t.unsqueeze(1)).detach().numpy()
    stds = np.sqrt(potential.epsilon * potential.sigma.detach().numpy())
    rows = np.arange(x0t.shape[0])
    z = rng.standard_normal((x0t.shape[0], potential.dim))
    return means[rows, idx] + stds[idx] * z


def forward_map(potential: GmmPotential, beta: float | None, t, y) -> Tensor:
    """Volatility stretch y -> y + s(t, y) / beta.  ``beta=None`` encodes the
    beta -> infinity limit, where the map is the identity."""
    if beta is None:
        yb, squeeze = _as_batch(y)
        return yb.squeeze(0) if squeeze else yb
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    yb, squeeze = _as_batch(y)
    s = drift(potential, t, yb)
    out = yb + s / beta
    return out.squeeze(0) if squeeze else out


def recover_x(
    potential: GmmPotential, beta: float | None, y_T, t_tilde: float | None = None
) -> Tensor:
    """Map terminal Y back to X via the stretch evaluated just before the
    horizon (the drift is singular at t = T, so a shifted time T - delta is
    used; default delta = 0.01)."""
    if t_tilde is None:
        t_tilde = potential.horizon - 0.01
    if t_tilde >= potential.horizon:
        raise ValueError(
            f"t_tilde must be strictly below the horizon {potential.horizon}, got {t_tilde}"
        )
    return forward_map(potential, beta, t_tilde, y_T)
