"""Forward-process variance schedule and its closed-form marginals.

The schedule fixes the per-step noise variances ``beta_t`` of the forward
corruption chain and precomputes the cumulative products ``alpha_bar_t``
that give the closed-form marginal: a sample noised to step ``t`` is
``sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps``.

Steps are 0-based: index 0 is the first corruption step, so
``alpha_bars[0] == 1 - betas[0]``.  All stochastic inputs (``eps``,
``noise``) are supplied by the caller; nothing here touches an RNG.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_NUM_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable beta sequence plus precomputed cumulative products.

    Attributes:
        num_steps: number of forward steps T.
        betas: float64 array of shape (T,), each in (0, 1).
        alpha_bars: float64 array of shape (T,), ``cumprod(1 - betas)``.
    """

    num_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray = field(repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if betas.shape != (self.num_steps,):
            raise ValueError(
                f"betas must have shape ({self.num_steps},), got {betas.shape}")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        expected = np.cumprod(1.0 - betas)
        if alpha_bars.shape != betas.shape or not np.allclose(
                alpha_bars, expected, rtol=1e-12, atol=0.0):
            raise ValueError("alpha_bars is not the cumulative product of (1 - betas)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar_t`` for a 0-based step, with ``t == -1`` meaning the
        clean-data boundary (returns 1.0)."""
        if t == -1:
            return 1.0
        self._check_step(t)
        return float(self.alpha_bars[t])

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t])

    def _check_step(self, t: int) -> None:
        if not 0 <= t < self.num_steps:
            raise ValueError(f"step {t} outside [0, {self.num_steps})")


def make_linear_schedule(num_steps: int = DEFAULT_NUM_STEPS,
                         beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Build a schedule with betas linearly spaced over [beta_start, beta_end].

    Raises:
        ValueError: if ``num_steps < 1``, the endpoints leave (0, 1), or
            ``beta_start > beta_end``.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(num_steps=num_steps, betas=betas, alpha_bars=alpha_bars)


def _per_step_coef(values: np.ndarray, t, x):
    """Coefficient(s) ``values[t]`` shaped to broadcast against ``x``.

    ``t`` may be a single 0-based step (returns a python float) or a 1-D
    batch of per-sample steps, in which case the coefficients are reshaped
    to (B, 1, ..., 1) and converted to the array type of ``x``.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= len(values)):
        raise ValueError(f"step index {t} outside [0, {len(values)})")
    if t_arr.ndim == 0:
        return float(values[int(t_arr)])
    coefs = values[t_arr].reshape((-1,) + (1,) * (_ndim(x) - 1))
    if _is_torch(x):
        import torch
        return torch.as_tensor(coefs, dtype=x.dtype, device=x.device)
    return coefs


def _ndim(x) -> int:
    return getattr(x, "ndim", 0)


def _is_torch(x) -> bool:
    return type(x).__module__.split(".")[0] == "torch"


def _check_same_shape(a, b, names: str) -> None:
    sa, sb = getattr(a, "shape", ()), getattr(b, "shape", ())
    if sa != sb:
        raise ValueError(f"{names} shapes differ: {sa} vs {sb}")


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Closed-form marginal sample at step ``t``:
    ``sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps``.

    ``t`` is a 0-based step or a 1-D batch of steps (one per leading-dim
    sample).  ``eps`` must be standard normal noise drawn by the caller and
    shaped like ``x0``; this function consumes no randomness.
    """
    _check_same_shape(x0, eps, "x0/eps")
    a = _per_step_coef(np.sqrt(sched.alpha_bars), t, x0)
    b = _per_step_coef(np.sqrt(1.0 - sched.alpha_bars), t, x0)
    return a * x0 + b * eps


def forward_step(x_prev, t, sched: NoiseSchedule, noise):
    """One forward corruption step:
    ``sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * noise``.

    Iterating steps 0..t from clean data reproduces the ``q_sample``
    marginal at ``t`` in distribution.
    """
    _check_same_shape(x_prev, noise, "x_prev/noise")
    a = _per_step_coef(np.sqrt(1.0 - sched.betas), t, x_prev)
    b = _per_step_coef(np.sqrt(sched.betas), t, x_prev)
    return a * x_prev + b * noise
