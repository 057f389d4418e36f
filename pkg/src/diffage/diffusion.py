"""Noise-prediction loss, conditioned reverse process, and latent utilities.

The reverse process conditions every denoising step on a semantic latent:
given the current noisy image and a noise prediction from the model, the
clean image is estimated in closed form and the next (less noisy) state is
assembled with a DDIM-style update.  With ``eta = 0`` the update consumes
no randomness and sampling is a pure function of its inputs.

Predicted clean images are clamped to the pixel range [0, 1] at every
reverse step; that is the range preprocessing guarantees, and clamping
keeps early-training trajectories from diverging.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule, _check_same_shape, _is_torch, q_sample

TERMINAL_STEP = -1  # pseudo-step with alpha_bar == 1, i.e. clean data


@dataclass(frozen=True)
class ReverseStepConfig:
    """Reverse-trajectory settings.

    ``step_indices`` is the strictly decreasing subsequence of schedule
    steps the sampler visits, e.g. 50 evenly spaced indices out of 1000.
    ``eta`` scales the per-step stochasticity; 0 is fully deterministic.
    """

    step_indices: tuple
    eta: float = 0.0

    def __post_init__(self):
        steps = tuple(int(t) for t in self.step_indices)
        if len(steps) == 0:
            raise ValueError("step_indices must be non-empty")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError("step_indices must be strictly decreasing")
        if steps[-1] < 0:
            raise ValueError("step_indices must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        object.__setattr__(self, "step_indices", steps)

    @property
    def num_inference_steps(self) -> int:
        return len(self.step_indices)

    @classmethod
    def evenly_spaced(cls, num_train_steps: int, num_inference_steps: int,
                      eta: float = 0.0) -> "ReverseStepConfig":
        """Evenly spaced subsequence from T-1 down to 0 (inclusive)."""
        if not 1 <= num_inference_steps <= num_train_steps:
            raise ValueError(
                f"num_inference_steps must be in [1, {num_train_steps}], "
                f"got {num_inference_steps}")
        if num_inference_steps == 1:
            steps = (num_train_steps - 1,)
        else:
            grid = np.linspace(num_train_steps - 1, 0, num_inference_steps)
            steps = tuple(dict.fromkeys(int(round(v)) for v in grid))
        return cls(step_indices=steps, eta=eta)

    def validate_for(self, sched: NoiseSchedule) -> None:
        if self.step_indices[0] >= sched.num_steps:
            raise ValueError(
                f"step index {self.step_indices[0]} outside schedule "
                f"[0, {sched.num_steps})")


def diffusion_loss(eps_pred, eps):
    """Batch-averaged squared L2 norm of the noise-prediction error.

    Each leading-dim sample contributes the sum of squared elementwise
    differences over its remaining dims; the result is the mean of those
    per-sample sums.  1-D inputs are treated as a single sample.  Returns
    a scalar tensor for torch inputs (differentiable) and a float
    otherwise.
    """
    _check_same_shape(eps_pred, eps, "eps_pred/eps")
    diff = eps_pred - eps
    if _is_torch(diff):
        if diff.ndim <= 1:
            return (diff ** 2).sum()
        return (diff ** 2).reshape(diff.shape[0], -1).sum(dim=1).mean()
    diff = np.asarray(diff, dtype=np.float64)
    if diff.ndim <= 1:
        return float(np.sum(diff ** 2))
    return float(np.mean(np.sum(diff.reshape(diff.shape[0], -1) ** 2, axis=1)))


def _clamp01(x):
    if _is_torch(x):
        return x.clamp(0.0, 1.0)
    return np.clip(x, 0.0, 1.0)


def predict_x0(x_t, eps_pred, t, sched: NoiseSchedule, clamp: bool = True):
    """Invert the closed-form marginal to estimate the clean image:
    ``(x_t - sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_bar_t)``.

    The estimate is clamped to [0, 1] unless ``clamp=False`` (tests use the
    raw value).  Raises on ``alpha_bar_t == 0``, where the inversion is
    degenerate.
    """
    _check_same_shape(x_t, eps_pred, "x_t/eps_pred")
    from .schedule import _per_step_coef
    sqrt_a = _per_step_coef(np.sqrt(sched.alpha_bars), t, x_t)
    if np.any(np.asarray(sqrt_a) == 0.0):
        raise ValueError(f"alpha_bar at step {t} is zero; cannot invert")
    sqrt_1ma = _per_step_coef(np.sqrt(1.0 - sched.alpha_bars), t, x_t)
    x0 = (x_t - sqrt_1ma * eps_pred) / sqrt_a
    return _clamp01(x0) if clamp else x0


def reverse_step(x_t, t: int, t_next: int, z_sem, model, sched: NoiseSchedule,
                 cfg: ReverseStepConfig, noise=None):
    """One conditioned reverse update from step ``t`` to ``t_next``.

    ``model(x_t, t, z_sem)`` must return the predicted noise.  ``t_next``
    may be ``TERMINAL_STEP`` (-1), the clean-data boundary, in which case
    the step returns the clamped clean-image estimate.  The update is

        x_next = sqrt(a_next) * x0_hat
               + sqrt(1 - a_next - sigma^2) * eps_hat + sigma * noise

    with ``sigma = eta * sqrt((1-a_next)/(1-a_t)) * sqrt(1 - a_t/a_next)``.
    With ``eta == 0`` no noise is consumed and the step is deterministic.
    """
    if t_next >= t:
        raise ValueError(f"t_next ({t_next}) must be below t ({t})")
    a_t = sched.alpha_bar(t)
    a_next = sched.alpha_bar(t_next)

    eps_hat = model(x_t, t, z_sem)
    x0_hat = predict_x0(x_t, eps_hat, t, sched, clamp=True)

    sigma = cfg.eta * math.sqrt((1.0 - a_next) / (1.0 - a_t)) \
        * math.sqrt(max(1.0 - a_t / a_next, 0.0))
    dir_coef = math.sqrt(max(1.0 - a_next - sigma ** 2, 0.0))
    x_next = math.sqrt(a_next) * x0_hat + dir_coef * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise tensor")
        _check_same_shape(x_t, noise, "x_t/noise")
        x_next = x_next + sigma * noise
    return x_next


def reconstruct(x0, z_sem, model, sched: NoiseSchedule,
                cfg: ReverseStepConfig, seed: int):
    """Stochastic-encode then denoise: reconstruct ``x0`` from its own
    semantic latent.

    The noisy code is drawn with the closed-form marginal at the first
    configured step using a generator seeded with ``seed``; the reverse
    trajectory then runs through ``cfg.step_indices`` down to the clean
    boundary.  Output is in [0, 1] with the shape of ``x0``.  Given a
    frozen model the result is a pure function of (x0, z_sem, cfg, seed).
    """
    import torch

    cfg.validate_for(sched)
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    x = q_sample(x0, cfg.step_indices[0], eps.to(x0.device), sched)
    steps = list(cfg.step_indices) + [TERMINAL_STEP]
    for t, t_next in zip(steps[:-1], steps[1:]):
        noise = None
        if cfg.eta > 0.0 and t_next != TERMINAL_STEP:
            noise = torch.randn(x.shape, generator=gen,
                                dtype=x0.dtype).to(x0.device)
        x = reverse_step(x, t, t_next, z_sem, model, sched, cfg, noise=noise)
    return x


def interpolate_latents(z_a, z_b, lam: float):
    """Linear blend ``(1 - lam) * z_a + lam * z_b`` for ``lam`` in [0, 1]."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    _check_same_shape(z_a, z_b, "z_a/z_b")
    return (1.0 - lam) * z_a + lam * z_b
