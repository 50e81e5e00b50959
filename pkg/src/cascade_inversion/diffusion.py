"""Noise schedules and deterministic (eta=0) DDIM stepping.

Conventions used throughout the package:

* Image-like states are float64 arrays of shape (H, W, C), roughly in
  [-1, 1] when clean and unbounded when noisy.
* A trajectory over an inference grid with T steps has T+1 positions.
  Position 0 is the clean endpoint, addressed by the virtual timestep -1
  whose cumulative alpha is exactly 1; position p >= 1 sits at training
  timestep ``grid.timesteps[p - 1]``.
* Noise predictions for the edge between positions k and k+1 are evaluated
  at the edge timestep ``grid.timesteps[k]`` in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALPHA_BAR_FLOOR = 1e-12

# Virtual timestep for the clean endpoint of a trajectory (alpha_bar == 1).
CLEAN_TIMESTEP = -1


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process variance schedule.

    ``betas[t]`` is the per-step variance at training timestep t and
    ``alpha_bars[t]`` the cumulative product of (1 - beta) up to and
    including t.
    """

    num_train_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.num_train_steps < 1:
            raise ValueError("num_train_steps must be >= 1")
        if self.betas.shape != (self.num_train_steps,):
            raise ValueError("betas must have shape (num_train_steps,)")
        if self.alpha_bars.shape != (self.num_train_steps,):
            raise ValueError("alpha_bars must have shape (num_train_steps,)")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(self.alpha_bars <= 0.0) or np.any(self.alpha_bars > 1.0):
            raise ValueError("alpha_bars must lie in (0, 1]")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha at timestep ``t``; ``t == -1`` is the clean endpoint."""
        if t == CLEAN_TIMESTEP:
            return 1.0
        if not 0 <= t < self.num_train_steps:
            raise ValueError(
                f"timestep {t} outside [0, {self.num_train_steps}) (or -1 for clean)"
            )
        return float(self.alpha_bars[t])


def build_linear_schedule(
    num_train_steps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` inclusive."""
    if num_train_steps < 1:
        raise ValueError("num_train_steps must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("require 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(num_train_steps, betas, alpha_bars)


@dataclass(frozen=True)
class TimestepGrid:
    """Strictly increasing selection of training timesteps used at inference."""

    inference_steps: int
    timesteps: np.ndarray

    def __post_init__(self):
        if self.inference_steps < 1:
            raise ValueError("inference_steps must be >= 1")
        ts = np.asarray(self.timesteps, dtype=np.int64)
        object.__setattr__(self, "timesteps", ts)
        if ts.shape != (self.inference_steps,):
            raise ValueError("timesteps must have shape (inference_steps,)")
        if ts[0] < 0:
            raise ValueError("timesteps[0] must be >= 0")
        if np.any(np.diff(ts) <= 0):
            raise ValueError("timesteps must be strictly increasing")

    def position_timestep(self, position: int) -> int:
        """Training timestep of a trajectory position (0 -> clean endpoint)."""
        if not 0 <= position <= self.inference_steps:
            raise ValueError(f"position {position} outside [0, {self.inference_steps}]")
        if position == 0:
            return CLEAN_TIMESTEP
        return int(self.timesteps[position - 1])


def make_timestep_grid(num_train_steps: int, inference_steps: int) -> TimestepGrid:
    """Evenly spaced grid with stride ``num_train_steps // inference_steps``."""
    if inference_steps < 1 or inference_steps > num_train_steps:
        raise ValueError("require 1 <= inference_steps <= num_train_steps")
    stride = num_train_steps // inference_steps
    timesteps = np.arange(inference_steps, dtype=np.int64) * stride
    grid = TimestepGrid(inference_steps, timesteps)
    if timesteps[-1] >= num_train_steps:
        raise ValueError("grid extends past the training schedule")
    return grid


def _check_like(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def q_sample(
    schedule: NoiseSchedule, x0: np.ndarray, t: int, noise: np.ndarray
) -> np.ndarray:
    """Diffuse a clean image to timestep ``t``: sqrt(ab)*x0 + sqrt(1-ab)*noise."""
    _check_like(x0, noise, "q_sample")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def predict_x0(
    schedule: NoiseSchedule, z_t: np.ndarray, t: int, eps_hat: np.ndarray
) -> np.ndarray:
    """Clean-image estimate implied by a noise prediction at timestep ``t``."""
    _check_like(z_t, eps_hat, "predict_x0")
    ab = schedule.alpha_bar(t)
    if ab < ALPHA_BAR_FLOOR:
        raise ValueError(f"alpha_bar({t}) = {ab} below floor {ALPHA_BAR_FLOOR}")
    return (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def ddim_step_forward(
    schedule: NoiseSchedule,
    z_t: np.ndarray,
    t: int,
    t_next: int,
    eps_hat: np.ndarray,
) -> np.ndarray:
    """One deterministic step toward higher noise (inversion direction)."""
    if t_next <= t:
        raise ValueError(f"forward step requires t_next > t, got {t} -> {t_next}")
    x0_hat = predict_x0(schedule, z_t, t, eps_hat)
    ab_next = schedule.alpha_bar(t_next)
    return np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat


def ddim_step_backward(
    schedule: NoiseSchedule,
    z_t: np.ndarray,
    t: int,
    t_prev: int,
    eps_hat: np.ndarray,
) -> np.ndarray:
    """One deterministic step toward lower noise (sampling direction).

    ``t_prev == -1`` targets the clean endpoint, where the step reduces to
    ``predict_x0``.
    """
    if t_prev >= t:
        raise ValueError(f"backward step requires t_prev < t, got {t} -> {t_prev}")
    x0_hat = predict_x0(schedule, z_t, t, eps_hat)
    ab_prev = schedule.alpha_bar(t_prev)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def backward_step_coeffs(
    schedule: NoiseSchedule, t: int, t_prev: int
) -> tuple[float, float]:
    """Coefficients (a, b) with backward_step(z) = a*z + b*eps_hat.

    Used by the inversion optimizers, whose gradients need the affine
    structure of the step explicitly.
    """
    if t_prev >= t:
        raise ValueError(f"backward step requires t_prev < t, got {t} -> {t_prev}")
    ab_t = schedule.alpha_bar(t)
    if ab_t < ALPHA_BAR_FLOOR:
        raise ValueError(f"alpha_bar({t}) below floor {ALPHA_BAR_FLOOR}")
    ab_prev = schedule.alpha_bar(t_prev)
    a = np.sqrt(ab_prev / ab_t)
    b = np.sqrt(1.0 - ab_prev) - a * np.sqrt(1.0 - ab_t)
    return float(a), float(b)


def cfg_combine(
    eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float
) -> np.ndarray:
    """Classifier-free guidance blend ``w * eps_cond + (1 - w) * eps_uncond``.

    At ``w == 1`` the conditional prediction is returned untouched, so callers
    may skip evaluating the unconditional branch entirely.
    """
    if w == 1.0:
        return eps_cond
    _check_like(eps_cond, eps_uncond, "cfg_combine")
    return w * eps_cond + (1.0 - w) * eps_uncond
