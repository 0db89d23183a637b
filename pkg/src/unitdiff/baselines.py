"""Discrete diffusion baselines: multinomial and absorbing corruption.

Both processes operate directly on unit ids and never consult codebook
geometry, so they are equivariant under any relabeling of the vocabulary.
Reverse steps are parameterized by the model's prediction of the clean
sequence, mirroring the hybrid sampler's structure:

* multinomial -- each position is resampled uniformly over the vocabulary
  with probability 1 - alpha_bar_t; the reverse step samples the exact
  categorical posterior marginalized over the predicted x0 distribution.
* absorbing  -- each position is replaced by a dedicated mask id with
  probability 1 - alpha_bar_t; the reverse step reveals masked positions
  to the predicted unit with probability (ab_prev - ab_t) / (1 - ab_t).

The mask id equals the unit vocabulary size K (one past the last real
unit), and the padding id used by the denoiser is K + 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import generator
from .schedule import NoiseSchedule, subset_trajectory

__all__ = [
    "CorruptionKind",
    "multinomial_q_sample",
    "multinomial_reverse_step",
    "absorbing_q_sample",
    "absorbing_reverse_step",
    "baseline_sample",
]


@dataclass(frozen=True)
class CorruptionKind:
    """Tag for a discrete corruption process; mask_id = K exactly."""

    tag: str
    mask_id: int

    def __post_init__(self):
        if self.tag not in ("multinomial", "absorbing"):
            raise ValueError(f"unknown corruption tag {self.tag!r}")
        if self.mask_id < 1:
            raise ValueError("mask_id must equal the unit vocabulary size K >= 1")


def _check_t(ns: NoiseSchedule, t: int) -> None:
    if not 1 <= t <= ns.T:
        raise ValueError(f"t must be in [1, {ns.T}], got {t}")


def multinomial_q_sample(
    ns: NoiseSchedule, x0: np.ndarray, t: int, K: int, seed: int
) -> np.ndarray:
    """Corrupt x0 to step t: with probability 1 - ab_t resample uniformly over K."""
    _check_t(ns, t)
    x0 = np.asarray(x0, dtype=np.int64)
    ab = ns.alpha_bar(t)
    rng = generator(seed, "multinomial_q")
    resample = rng.random(x0.shape) >= ab
    random_units = rng.integers(0, K, size=x0.shape)
    return np.where(resample, random_units, x0)


def multinomial_reverse_step(
    ns: NoiseSchedule,
    x_t: np.ndarray,
    x0_probs: np.ndarray,
    t: int,
    t_prev: int,
    seed: int,
) -> np.ndarray:
    """Sample x_{t_prev} from the uniform-transition posterior.

    With a' = ab_t / ab_prev, the posterior over x_{t_prev} = i given
    x_t = j and x0 ~ p is proportional to

        [a' * 1{i=j} + (1-a')/K] * [ab_prev * p_i + (1-ab_prev)/K].

    t_prev = 0 returns the argmax of x0_probs per position.
    """
    x_t = np.asarray(x_t, dtype=np.int64)
    probs = np.asarray(x0_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != x_t.shape[0]:
        raise ValueError("x0_probs must be an n x K matrix aligned with x_t")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("x0_probs rows must sum to 1 within 1e-6")
    if t_prev == 0:
        return probs.argmax(axis=1).astype(np.int64)
    if not 1 <= t_prev < t <= ns.T:
        raise ValueError(f"need 0 <= t_prev < t <= {ns.T}, got t={t}, t_prev={t_prev}")
    K = probs.shape[1]
    ab_t = ns.alpha_bar(t)
    ab_p = ns.alpha_bar(t_prev)
    a_step = ab_t / ab_p
    lik = np.full((x_t.shape[0], K), (1.0 - a_step) / K)
    lik[np.arange(x_t.shape[0]), x_t] += a_step
    prior = ab_p * probs + (1.0 - ab_p) / K
    w = lik * prior
    w /= w.sum(axis=1, keepdims=True)
    rng = generator(seed, "multinomial_reverse")
    u = rng.random(x_t.shape[0])
    cdf = np.cumsum(w, axis=1)
    return (u[:, None] > cdf).sum(axis=1).astype(np.int64)


def absorbing_q_sample(
    ns: NoiseSchedule, x0: np.ndarray, t: int, mask_id: int, seed: int
) -> np.ndarray:
    """Corrupt x0 to step t: each position becomes mask_id w.p. 1 - ab_t."""
    _check_t(ns, t)
    x0 = np.asarray(x0, dtype=np.int64)
    ab = ns.alpha_bar(t)
    rng = generator(seed, "absorbing_q")
    masked = rng.random(x0.shape) >= ab
    return np.where(masked, np.int64(mask_id), x0)


def absorbing_reverse_step(
    ns: NoiseSchedule,
    x_t: np.ndarray,
    x0_hat: np.ndarray,
    t: int,
    t_prev: int,
    mask_id: int,
    seed: int,
) -> np.ndarray:
    """Reveal masked positions to x0_hat w.p. (ab_prev - ab_t) / (1 - ab_t).

    Unmasked positions pass through unchanged; t_prev = 0 reveals all
    remaining masks.
    """
    x_t = np.asarray(x_t, dtype=np.int64)
    x0_hat = np.asarray(x0_hat, dtype=np.int64)
    if x0_hat.shape != x_t.shape:
        raise ValueError("x0_hat must align with x_t")
    if not 0 <= t_prev < t <= ns.T:
        raise ValueError(f"need 0 <= t_prev < t <= {ns.T}, got t={t}, t_prev={t_prev}")
    masked = x_t == mask_id
    if t_prev == 0:
        return np.where(masked, x0_hat, x_t)
    ab_t = ns.alpha_bar(t)
    ab_p = ns.alpha_bar(t_prev)
    reveal_p = (ab_p - ab_t) / (1.0 - ab_t)
    rng = generator(seed, "absorbing_reverse")
    reveal = rng.random(x_t.shape) < reveal_p
    return np.where(masked & reveal, x0_hat, x_t)


def baseline_sample(
    kind: CorruptionKind,
    model,
    ns: NoiseSchedule,
    source: np.ndarray,
    target_len: int,
    cfg,
    seed: int,
):
    """Reverse-process sampling for a discrete baseline.

    Initializes x_T with uniform random units (multinomial) or all masks
    (absorbing), then alternates model prediction and the kind's reverse
    step along ``subset_trajectory(T, cfg.steps)``. Returns ``(x0, trace)``
    where trace lists ``(t, x0_hat)`` per step when ``cfg.track_intermediate``
    is set, else None.
    """
    units, trace, _ = _baseline_sample_scored(kind, model, ns, source, target_len, cfg, seed)
    return units, trace


def _baseline_sample_scored(kind, model, ns, source, target_len, cfg, seed):
    """baseline_sample plus the final-step logits (for length-beam scoring)."""
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    K = kind.mask_id
    taus = subset_trajectory(ns.T, cfg.steps)
    rng = generator(seed, "baseline_sample", kind.tag)
    if kind.tag == "multinomial":
        x_t = rng.integers(0, K, size=target_len).astype(np.int64)
    else:
        x_t = np.full(target_len, kind.mask_id, dtype=np.int64)
    trace = [] if getattr(cfg, "track_intermediate", False) else None
    x0_hat = None
    logits = None
    for i, t in enumerate(taus):
        t = int(t)
        t_prev = int(taus[i + 1]) if i + 1 < len(taus) else 0
        logits = model.forward(x_t, t, source)
        real = logits[:, :K]
        x0_hat = real.argmax(axis=1).astype(np.int64)
        if trace is not None:
            trace.append((t, x0_hat.copy()))
        if t_prev == 0:
            x_t = x0_hat
            break
        step_seed = int(rng.integers(0, 2**63 - 1))
        if kind.tag == "multinomial":
            shifted = real - real.max(axis=1, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            x_t = multinomial_reverse_step(ns, x_t, probs, t, t_prev, step_seed)
        else:
            x_t = absorbing_reverse_step(ns, x_t, x0_hat, t, t_prev, kind.mask_id, step_seed)
    return x_t, trace, logits
