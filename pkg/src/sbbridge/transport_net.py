"""Time-conditioned MLP approximating the inverse of the volatility stretch.

The net maps (t, x) -> x + mlp(t, x) with three feed-forward blocks
(linear -> layer norm -> GELU -> linear): a time embedding (1 -> t_model),
a state embedding (d -> d_model) and a head on the concatenation back to d.
The final head layer is zero-initialized so the map is exactly the identity
before the first update, as the alternating trainer requires.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

Tensor = torch.Tensor


def _block(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(n_in, hidden),
        nn.LayerNorm(hidden),
        nn.GELU(),
        nn.Linear(hidden, n_out),
    )


class TransportNet(nn.Module):
    """Residual inverse-map model z(t, x) = x + head([t_embed(t/T), x_embed(x)])."""

    def __init__(self, dim: int, t_model: int = 8, d_model: int = 32, horizon: float = 1.0):
        super().__init__()
        if dim < 1 or t_model < 1 or d_model < 1:
            raise ValueError("dim, t_model and d_model must be positive")
        self.dim = dim
        self.t_model = t_model
        self.d_model = d_model
        self.horizon = float(horizon)
        self.t_embed = _block(1, t_model, t_model)
        self.x_embed = _block(dim, d_model, d_model)
        self.head = _block(t_model + d_model, d_model, dim)
        self.double()
        # identity at init: residual plus zeroed final layer
        last = self.head[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def init_weights(self, rng: np.random.Generator | int) -> "TransportNet":
        """Deterministic re-init of all linear layers (uniform fan-in rule,
        matching the torch default) from an explicit generator.  The final
        head layer stays zero so the identity property is preserved."""
        rng = np.random.default_rng(rng)
        linears = [m for m in self.modules() if isinstance(m, nn.Linear)]
        for layer in linears[:-1]:
            bound = 1.0 / np.sqrt(layer.in_features)
            w = rng.uniform(-bound, bound, size=tuple(layer.weight.shape))
            b = rng.uniform(-bound, bound, size=tuple(layer.bias.shape))
            with torch.no_grad():
                layer.weight.copy_(torch.as_tensor(w))
                layer.bias.copy_(torch.as_tensor(b))
        last = linears[-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.zero_()
        return self

    def forward(self, t: Tensor, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"state dimension {x.shape[-1]} != net dim {self.dim}")
        te = self.t_embed(t / self.horizon)
        xe = self.x_embed(x)
        return x + self.head(torch.cat([te, xe], dim=-1))

    # --- serialization: JSON with explicit layer shapes ---

    def to_json(self) -> str:
        state = {
            name: {"shape": list(p.shape), "data": p.detach().reshape(-1).tolist()}
            for name, p in self.state_dict().items()
        }
        return json.dumps(
            {
                "dim": self.dim,
                "t_model": self.t_model,
                "d_model": self.d_model,
                "horizon": self.horizon,
                "state": state,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TransportNet":
        obj = json.loads(text)
        net = cls(obj["dim"], obj["t_model"], obj["d_model"], obj["horizon"])
        state = {}
        for name, entry in obj["state"].items():
            state[name] = torch.tensor(entry["data"], dtype=torch.float64).reshape(
                entry["shape"]
            )
        net.load_state_dict(state)
        return net


def z_forward(net: TransportNet | None, t: float, x) -> Tensor:
    """Evaluate the inverse map at a single time for a point or a batch.
    ``net=None`` stands for the exact identity map (the beta -> infinity
    pipeline)."""
    xt = torch.as_tensor(x, dtype=torch.float64)
    squeeze = xt.ndim == 1
    if squeeze:
        xt = xt.unsqueeze(0)
    if net is None:
        out = xt
    else:
        tt = torch.full((xt.shape[0], 1), float(t), dtype=torch.float64)
        out = net(tt, xt)
    return out.squeeze(0) if squeeze else out


@dataclass
class ZRegressionBatch:
    """Endpoint supervision rows (time in {0, T}, mapped point, target)."""

    times: np.ndarray     # (N,)
    inputs: np.ndarray    # (N, d)
    targets: np.ndarray   # (N, d)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.times.size == 0:
            raise ValueError("empty regression batch")
        if self.inputs.shape != self.targets.shape or self.inputs.shape[0] != self.times.size:
            raise ValueError("batch arrays must agree in length/shape")

    def validate_times(self, horizon: float) -> None:
        ok = (self.times == 0.0) | (self.times == horizon)
        if not ok.all():
            raise ValueError("regression times must be exactly 0 or T")


def z_loss(net: TransportNet, batch: ZRegressionBatch) -> Tensor:
    """Mean squared residual norm over the batch; differentiable in the
    net's weights."""
    batch.validate_times(net.horizon)
    t = torch.as_tensor(batch.times, dtype=torch.float64).unsqueeze(1)
    x = torch.as_tensor(batch.inputs, dtype=torch.float64)
    target = torch.as_tensor(batch.targets, dtype=torch.float64)
    pred = net(t, x)
    return ((pred - target) ** 2).sum(dim=1).mean()
