"""The hybrid diffusion process: continuous forward, discrete backward.

Forward corruption embeds a unit sequence into the codebook space, applies
the closed-form Gaussian marginal there, and re-quantizes:

    x_t = quantize( sqrt(ab_t) * embed(x0) + sqrt(1 - ab_t) * noise )

so corrupted sequences are drawn from the semantically structured
neighborhood of the clean ones rather than uniformly from the vocabulary.

Reverse sampling starts from quantized Gaussian noise and alternates a
discrete model prediction with a continuous posterior step: the model sees
only discrete units, predicts the clean sequence by argmax, which is
re-embedded to form the posterior mean for the next (lower) noise level.
A subset trajectory of timesteps accelerates decoding.

``sample_without_kmeans_mapping`` is the mapping ablation: dropping the
embed/quantize conversions turns the process into plain multinomial
diffusion, and the implementation delegates to that exact code path so the
two produce identical trajectories for identical seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import denoiser as _dn
from .baselines import CorruptionKind, _baseline_sample_scored
from .codebook import Codebook, embed, quantize
from .rng import derive_seed, generator
from .schedule import NoiseSchedule, posterior_sample, q_sample, subset_trajectory

__all__ = [
    "SamplerConfig",
    "forward_corrupt",
    "training_loss",
    "sample",
    "sample_with_length_beam",
    "sample_without_kmeans_mapping",
    "knn_accuracy_curve",
    "intermediate_quality",
]


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process settings: step count, posterior mode, length beam."""

    steps: int = 50
    mode: str = "posterior"
    length_beam: int = 5
    track_intermediate: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.length_beam < 1:
            raise ValueError("length_beam must be >= 1")
        if self.mode not in ("posterior", "renoise"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")


def forward_corrupt(
    cb: Codebook, ns: NoiseSchedule, x0: np.ndarray, t: int, seed: int
) -> np.ndarray:
    """One forward draw x_t = quantize(q_sample(embed(x0), t))."""
    v0 = embed(cb, x0)
    rng = generator(seed, "forward_corrupt")
    noise = rng.standard_normal(v0.shape)
    return quantize(cb, q_sample(ns, v0, t, noise))


def training_loss(model, cb: Codebook, ns: NoiseSchedule, batch_pairs, seed: int,
                  smoothing: float = 0.2, length_weight: float = _dn.LENGTH_LOSS_WEIGHT):
    """Denoising loss over a batch of (source, target) pairs.

    Per example, draws t uniform in {1..T}, corrupts the target through the
    continuous space, and scores the model's prediction of the clean units
    with label-smoothed cross-entropy plus the weighted length loss.
    Returns (loss, grads). Deterministic given the seed.
    """
    pairs = list(batch_pairs)
    if not pairs:
        raise ValueError("batch must be non-empty")
    rng = generator(seed, "training_loss")
    ts = rng.integers(1, ns.T + 1, size=len(pairs))
    sources, x_ts, x0s = [], [], []
    for j, (pair, t) in enumerate(zip(pairs, ts)):
        x_ts.append(forward_corrupt(cb, ns, pair.target, int(t), derive_seed(seed, "corrupt", j)))
        x0s.append(pair.target)
        sources.append(pair.source)
    batch = model.make_batch(sources, x_ts, ts)
    batch["tgt_out"] = _dn._pad_targets(x0s, batch["tgt_in"].shape, model.config.pad_id)
    drop_rng = generator(seed, "dropout") if model.config.dropout > 0 else None
    loss, grads, _ = _dn.loss_and_grads(
        model, batch, smoothing, length_weight, dropout_rng=drop_rng
    )
    return loss, grads


def sample(
    model,
    cb: Codebook,
    ns: NoiseSchedule,
    source: np.ndarray,
    target_len: int,
    cfg: SamplerConfig,
    seed: int,
):
    """Reverse-process decoding of one target of the given length.

    Returns ``(x0, trace)``; the trace lists ``(t, x0_hat)`` per reverse step
    when ``cfg.track_intermediate`` is set, else None.
    """
    units, trace, _ = _sample_scored(model, cb, ns, source, target_len, cfg, seed)
    return units, trace


def _sample_scored(model, cb, ns, source, target_len, cfg, seed):
    """sample() plus the final-step logits, for length-beam scoring."""
    if target_len < 1:
        raise ValueError("target_len must be >= 1")
    taus = subset_trajectory(ns.T, cfg.steps)
    rng = generator(seed, "hybrid_sample")
    v_t = rng.standard_normal((target_len, cb.D))
    x_t = quantize(cb, v_t)
    trace = [] if cfg.track_intermediate else None
    x0_hat = None
    logits = None
    for i, t in enumerate(taus):
        t = int(t)
        t_prev = int(taus[i + 1]) if i + 1 < len(taus) else 0
        logits = model.forward(x_t, t, source)
        x0_hat = logits[:, : cb.K].argmax(axis=1).astype(np.int64)
        if trace is not None:
            trace.append((t, x0_hat.copy()))
        if t_prev == 0:
            return x0_hat, trace, logits
        v0_hat = embed(cb, x0_hat)
        noise = rng.standard_normal(v_t.shape)
        v_t = posterior_sample(ns, v_t, v0_hat, t, t_prev, noise, mode=cfg.mode)
        x_t = quantize(cb, v_t)
    return x0_hat, trace, logits


def sample_without_kmeans_mapping(
    model, cb: Codebook, ns: NoiseSchedule, source, target_len, cfg, seed
):
    """Mapping ablation: the hybrid sampler with embed/quantize removed.

    Without the conversions the continuous kernel has nothing to act on and
    the process degenerates to multinomial diffusion over the vocabulary;
    this delegates to that code path, so trajectories match the multinomial
    baseline exactly for equal seeds.
    """
    kind = CorruptionKind(tag="multinomial", mask_id=cb.K)
    units, trace, _ = _baseline_sample_scored(kind, model, ns, source, target_len, cfg, seed)
    return units, trace


def sample_with_length_beam(
    model, cb: Codebook, ns: NoiseSchedule, source, cfg: SamplerConfig, seed: int
) -> np.ndarray:
    """Decode one target, choosing among predicted candidate lengths.

    Runs the sampler once per candidate length and keeps the candidate with
    the lowest mean per-token NLL under its own final-step logits; ties go
    to the shorter candidate.
    """
    lengths = model.predict_length(source, beam=cfg.length_beam)
    best = None
    for rank, n in enumerate(lengths):
        n = int(n)
        cand, _, logits = _sample_scored(model, cb, ns, source, n, cfg, seed)
        score = _dn.sequence_nll(logits, cand)
        key = (score, n, rank)
        if best is None or key < best[0]:
            best = (key, cand)
    return best[1]


def knn_accuracy_curve(
    cb: Codebook, ns: NoiseSchedule, data, ts, seed: int
) -> list[tuple[int, float]]:
    """Fraction of positions that survive forward corruption, per timestep.

    ``data`` is a sequence of unit sequences; accuracy at t pools all
    positions of one corruption draw per sequence.
    """
    seqs = list(data)
    if not seqs:
        raise ValueError("data must be non-empty")
    ts = [int(t) for t in ts]
    if not ts:
        raise ValueError("ts must be non-empty")
    curve = []
    for t in ts:
        hits = 0
        total = 0
        for i, x in enumerate(seqs):
            x = np.asarray(x, dtype=np.int64)
            x_t = forward_corrupt(cb, ns, x, t, derive_seed(seed, "knn_curve", t, i))
            hits += int((x_t == x).sum())
            total += x.size
        curve.append((t, hits / total))
    return curve


def intermediate_quality(trace, reference, metric) -> list[tuple[int, float]]:
    """Score each intermediate prediction of a trace against the reference."""
    if not trace:
        raise ValueError("trace is empty; sample with track_intermediate=True")
    return [(int(t), float(metric(x0_hat, reference))) for t, x0_hat in trace]
