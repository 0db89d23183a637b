"""Noise schedules and the continuous-space diffusion kernels.

A schedule fixes per-step noise levels beta_t and the cumulative signal
level alpha_bar_t = prod_{i<=t} (1 - beta_i) over T steps. Two schedules
are provided:

* ``linear``  -- beta_t interpolated between two endpoints; signal decays
  slowly at first (the standard image-diffusion convention).
* ``uniform`` -- alpha_bar_t = (1 - beta0) * (1 - t/T): the signal level
  drops to 1 - beta0 immediately and then decreases linearly, so corruption
  is active from the very first step.

All kernels are pure functions; callers supply the Gaussian noise tensors
explicitly, which keeps every sampling path reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "linear_schedule",
    "uniform_schedule",
    "q_sample",
    "posterior_sample",
    "subset_trajectory",
    "schedule_to_config",
    "schedule_from_config",
    "UNIFORM_ALPHA_BAR_FLOOR",
]

# alpha_bar at t=T would be exactly 0 under the uniform schedule, which makes
# posterior coefficients singular; clip to a small positive floor instead.
UNIFORM_ALPHA_BAR_FLOOR = 1e-5

# Default endpoints for the linear schedule at T=1000; for other T the
# endpoints scale by 1000/T so the terminal signal level stays ~4e-5.
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
DEFAULT_BETA0 = 0.3


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels and cumulative signal levels over T steps.

    ``betas[i]`` and ``alpha_bars[i]`` hold beta_t and alpha_bar_t for
    t = i + 1; ``alpha_bar0`` is the t=0 convention (1 for linear, 1 - beta0
    for uniform) that makes alpha_bar_t = (1 - beta_t) * alpha_bar_{t-1}
    hold for every t >= 1.
    """

    kind: str
    betas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bar0: float
    beta_start: float | None = None
    beta_end: float | None = None
    beta0: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", np.asarray(self.betas, dtype=np.float64))
        object.__setattr__(self, "alpha_bars", np.asarray(self.alpha_bars, dtype=np.float64))
        if self.betas.shape != self.alpha_bars.shape or self.betas.ndim != 1:
            raise ValueError("betas and alpha_bars must be 1-D arrays of equal length")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal level at step t, with the t=0 convention."""
        if t == 0:
            return float(self.alpha_bar0)
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in [0, {self.T}], got {t}")
        return float(self.alpha_bars[t - 1])


def linear_schedule(
    T: int,
    beta_start: float | None = None,
    beta_end: float | None = None,
) -> NoiseSchedule:
    """Linearly interpolated beta_t from beta_start (t=1) to beta_end (t=T).

    When endpoints are omitted they default to 1e-4 and 0.02 scaled by
    1000/T, which keeps alpha_bar_T ~ 4e-5 for any T.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    if beta_start is None:
        beta_start = LINEAR_BETA_START * (1000.0 / T)
    if beta_end is None:
        beta_end = LINEAR_BETA_END * (1000.0 / T)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(
        kind="linear",
        betas=betas,
        alpha_bars=alpha_bars,
        alpha_bar0=1.0,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
    )


def uniform_schedule(T: int, beta0: float = DEFAULT_BETA0) -> NoiseSchedule:
    """Schedule whose signal level decreases linearly from 1 - beta0 to ~0.

    alpha_bar_t = (1 - beta0) * (1 - t/T) for t = 1..T, clipped below at
    1e-5; alpha_bar at t=0 is 1 - beta0, so corruption is active with noise
    variance beta0 already at the first step.
    """
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < beta0 < 1.0:
        raise ValueError("need 0 < beta0 < 1")
    t = np.arange(1, T + 1, dtype=np.float64)
    alpha_bars = np.maximum((1.0 - beta0) * (1.0 - t / T), UNIFORM_ALPHA_BAR_FLOOR)
    prev = np.concatenate([[1.0 - beta0], alpha_bars[:-1]])
    betas = 1.0 - alpha_bars / prev
    return NoiseSchedule(
        kind="uniform",
        betas=betas,
        alpha_bars=alpha_bars,
        alpha_bar0=1.0 - beta0,
        beta0=float(beta0),
    )


def _check_shape(name: str, arr: np.ndarray, like: np.ndarray) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.shape != like.shape:
        raise ValueError(f"{name} must have shape {like.shape}, got {a.shape}")
    return a


def q_sample(ns: NoiseSchedule, v0: np.ndarray, t: int, noise: np.ndarray) -> np.ndarray:
    """Closed-form forward marginal: sqrt(ab_t) * v0 + sqrt(1 - ab_t) * noise."""
    if not 1 <= t <= ns.T:
        raise ValueError(f"t must be in [1, {ns.T}], got {t}")
    v0 = np.asarray(v0, dtype=np.float64)
    eps = _check_shape("noise", noise, v0)
    ab = ns.alpha_bar(t)
    return np.sqrt(ab) * v0 + np.sqrt(1.0 - ab) * eps


def posterior_sample(
    ns: NoiseSchedule,
    v_t: np.ndarray,
    v0_hat: np.ndarray,
    t: int,
    t_prev: int,
    noise: np.ndarray,
    mode: str = "posterior",
) -> np.ndarray:
    """One reverse step from level t down to t_prev (0 <= t_prev < t).

    mode="posterior" draws from the Gaussian posterior q(v_{t_prev} | v_t,
    v0_hat) generalized to arbitrary step gaps: with a' = ab_t / ab_{t_prev}
    and b' = 1 - a',

        mean = sqrt(ab_{t_prev}) * b' / (1 - ab_t) * v0_hat
             + sqrt(a') * (1 - ab_{t_prev}) / (1 - ab_t) * v_t
        var  = b' * (1 - ab_{t_prev}) / (1 - ab_t)

    mode="renoise" re-corrupts the prediction instead, returning
    q_sample(ns, v0_hat, t_prev, noise).

    At t_prev = 0 both modes return v0_hat exactly (the terminal step adds
    no noise).
    """
    if mode not in ("posterior", "renoise"):
        raise ValueError(f"unknown mode {mode!r}")
    if not 0 <= t_prev < t <= ns.T:
        raise ValueError(f"need 0 <= t_prev < t <= {ns.T}, got t={t}, t_prev={t_prev}")
    v0_hat = np.asarray(v0_hat, dtype=np.float64)
    if t_prev == 0:
        return v0_hat.copy()
    if mode == "renoise":
        return q_sample(ns, v0_hat, t_prev, noise)
    v_t = _check_shape("v_t", v_t, v0_hat)
    eps = _check_shape("noise", noise, v0_hat)
    ab_t = ns.alpha_bar(t)
    ab_p = ns.alpha_bar(t_prev)
    a_step = ab_t / ab_p
    b_step = 1.0 - a_step
    denom = 1.0 - ab_t
    mean = (
        np.sqrt(ab_p) * b_step / denom * v0_hat
        + np.sqrt(a_step) * (1.0 - ab_p) / denom * v_t
    )
    var = b_step * (1.0 - ab_p) / denom
    return mean + np.sqrt(var) * eps


def subset_trajectory(T: int, steps: int) -> np.ndarray:
    """Evenly spaced descending timesteps starting at T.

    Successive elements differ by round(T / steps); if that stride would
    push the last element below 1, the stride falls back to floor(T / steps)
    (which always keeps all elements in [1, T] since steps <= T).
    """
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    stride = max(1, round(T / steps))
    if T - (steps - 1) * stride < 1:
        stride = T // steps
    taus = T - stride * np.arange(steps, dtype=np.int64)
    return taus


def schedule_to_config(ns: NoiseSchedule) -> dict:
    cfg = {"kind": ns.kind, "T": ns.T}
    if ns.kind == "linear":
        cfg["beta_start"] = ns.beta_start
        cfg["beta_end"] = ns.beta_end
    else:
        cfg["beta0"] = ns.beta0
    return cfg


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    kind = cfg["kind"]
    if kind == "linear":
        return linear_schedule(cfg["T"], cfg.get("beta_start"), cfg.get("beta_end"))
    if kind == "uniform":
        return uniform_schedule(cfg["T"], cfg.get("beta0", DEFAULT_BETA0))
    raise ValueError(f"unknown schedule kind {kind!r}")
