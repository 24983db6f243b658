"""Flow-matching objective on the linear noise-to-data path, plus an Euler sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import torch

from .errors import InvalidArgument, NumericError, ShapeError


@dataclass
class FlowPair:
    x0: torch.Tensor
    x1: torch.Tensor
    t: torch.Tensor
    xt: torch.Tensor
    v: torch.Tensor


def _expand_t(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if t.ndim == 0:
        return t
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def make_training_pair(x1: torch.Tensor, t: float | torch.Tensor, generator: torch.Generator | None = None,
                       x0: torch.Tensor | None = None) -> FlowPair:
    """Interpolant ``xt = t*x1 + (1-t)*x0`` and constant velocity ``x1 - x0``.

    ``t`` is a scalar or one value per leading (batch) index.
    """
    t = torch.as_tensor(t, dtype=x1.dtype)
    if bool(((t < 0) | (t > 1)).any()):
        raise InvalidArgument(f"t must lie in [0, 1], got {t}")
    if x0 is None:
        x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    tt = _expand_t(t, x1)
    v = x1 - x0
    xt = x0 + tt * v
    # exact endpoints regardless of rounding in the blend
    if tt.ndim == 0:
        if t == 0:
            xt = x0.clone()
        elif t == 1:
            xt = x1.clone()
    else:
        xt = torch.where(tt == 0, x0, torch.where(tt == 1, x1, xt))
    return FlowPair(x0, x1, t, xt, v)


def sample_timesteps(batch: int, generator: torch.Generator | None = None,
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.rand(batch, generator=generator, dtype=dtype)


def fm_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


VelocityFn = Callable[[torch.Tensor, torch.Tensor, Any], torch.Tensor]


@torch.no_grad()
def euler_sample(velocity_fn: VelocityFn, conditions: Any, steps: int, generator: torch.Generator | None,
                 shape: tuple[int, ...], dtype: torch.dtype = torch.float32,
                 x0: torch.Tensor | None = None) -> torch.Tensor:
    """Integrate dx/dt = v(x, t) from noise at t=0 to data at t=1 on a uniform grid."""
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    x = torch.randn(shape, generator=generator, dtype=dtype) if x0 is None else x0.clone()
    dt = 1.0 / steps
    for i in range(steps):
        t = torch.full((shape[0],), i * dt, dtype=dtype)
        v = velocity_fn(x, t, conditions)
        x = x + dt * v
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite state at Euler step {i}")
    return x
