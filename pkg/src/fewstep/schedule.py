"""Linear flow-matching schedule: x_t = (1 - t) x + t eps.

These helpers accept numpy arrays or autodiff tensors; ``t`` may be a float
or a per-sample array broadcast against the leading (batch) axis.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor

T_MIN = 0.002
T_MAX = 0.998


def alpha(t):
    return 1.0 - np.asarray(t, dtype=np.float64)


def sigma(t):
    return np.asarray(t, dtype=np.float64)


def check_time(t) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise ValueError(f"time must lie in [0, 1], got {t!r}")
    return arr


def time_column(t, like) -> np.ndarray:
    """Reshape scalar or per-sample ``t`` so it broadcasts against ``like``."""
    arr = check_time(t)
    if arr.ndim == 0:
        return arr
    ndim = like.ndim
    if arr.shape[0] != like.shape[0] or arr.ndim != 1:
        raise ShapeError(f"per-sample t of shape {arr.shape} does not match batch {like.shape}")
    return arr.reshape((-1,) + (1,) * (ndim - 1))


def _same_shape(a, b, op: str) -> None:
    if tuple(np.shape(a.data if isinstance(a, Tensor) else a)) != tuple(
        np.shape(b.data if isinstance(b, Tensor) else b)
    ):
        raise ShapeError(f"{op}: shapes differ")


def interpolate(x, eps, t):
    _same_shape(x, eps, "interpolate")
    tc = time_column(t, np.asarray(x.data if isinstance(x, Tensor) else x))
    return x * (1.0 - tc) + eps * tc


def velocity_target(x, eps):
    """d/dt of ``interpolate``: eps - x."""
    _same_shape(x, eps, "velocity_target")
    return eps - x


def cm_apply(f_out, x_t, t):
    """Consistency map f(x_t, t) = x_t - t F(x_t, t); identity at t = 0."""
    _same_shape(f_out, x_t, "cm_apply")
    tc = time_column(t, np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t))
    if tc.ndim == 0 and tc == 0.0:
        return x_t
    return x_t - f_out * tc


def score_from_velocity(f_out, x_t, t):
    """Marginal score implied by a velocity prediction: -(x_t + (1-t) F) / t."""
    _same_shape(f_out, x_t, "score_from_velocity")
    tc = time_column(t, np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t))
    if np.any(tc == 0.0):
        raise ZeroDivisionError("score is undefined at t = 0")
    return -(x_t + f_out * (1.0 - tc)) / tc


def sample_times(rng: np.random.Generator, n: int, t_min: float = T_MIN, t_max: float = T_MAX) -> np.ndarray:
    return rng.uniform(t_min, t_max, size=n)
