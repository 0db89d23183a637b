"""Trainable conditional denoiser p(x0 | x_t, t, source).

A small pre-norm transformer encoder-decoder implemented directly in numpy
with hand-written forward and backward passes, so gradients can be verified
against finite differences (see ``gradcheck``). The decoder self-attention
is fully bidirectional: all target positions are predicted simultaneously,
conditioned on the corrupted units x_t, the timestep t (added to every
decoder position as a sinusoidal embedding) and the encoded source.

Vocabulary layout: real units occupy [0, K); id K is the mask token (used
only by the absorbing baseline) and id K + 1 is padding, excluded from both
attention and the loss. The source vocabulary reserves its last id for
padding as well.

Everything runs in double precision; training is deterministic given the
``TrainConfig`` seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.special import erf

from .rng import derive_seed, generator

__all__ = [
    "DenoiserConfig",
    "TrainConfig",
    "Denoiser",
    "TrainingDiverged",
    "sequence_nll",
    "token_loss_and_grad",
    "train",
    "gradcheck",
    "save_checkpoint",
    "load_checkpoint",
    "desk_config",
    "LENGTH_LOSS_WEIGHT",
]

# Weight of the length-prediction cross-entropy in the training objective.
LENGTH_LOSS_WEIGHT = 0.1

_NEG_INF = -1e30
_LN_EPS = 1e-5


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters.

    ``vocab_size`` counts real units plus mask and pad (K + 2);
    ``source_vocab`` counts source symbols plus one pad id.
    """

    vocab_size: int
    source_vocab: int
    embed_dim: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    max_len: int = 80
    dropout: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be at least 3 (one unit + mask + pad)")
        if self.source_vocab < 2:
            raise ValueError("source_vocab must include at least one symbol and pad")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def unit_vocab(self) -> int:
        """Number of real units K."""
        return self.vocab_size - 2

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1

    @property
    def src_pad_id(self) -> int:
        return self.source_vocab - 1


def desk_config(n_units: int, n_source_symbols: int, **overrides) -> DenoiserConfig:
    """The CPU-trainable default architecture for a K-unit codebook."""
    return DenoiserConfig(
        vocab_size=n_units + 2, source_vocab=n_source_symbols + 1, **overrides
    )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 500
    total_steps: int = 5000
    batch_size: int = 32
    label_smoothing: float = 0.2
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size must be >= 1 and total_steps >= 0")


def inverse_sqrt_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then decay proportional to 1/sqrt(step)."""
    s = step + 1
    w = max(1, warmup_steps)
    return base_lr * min(s / w, math.sqrt(w / s))


def sinusoidal_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Standard fixed sin/cos embedding, rows indexed by position."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    ang = pos * freqs[None, :]
    emb = np.zeros((pos.shape[0], dim), dtype=np.float64)
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang[:, : dim - half])
    return emb


# ---------------------------------------------------------------------------
# primitive ops (forward returns a cache consumed by the matching backward)

def _linear(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, (x, w)


def _linear_bwd(dy: np.ndarray, cache, grads: dict, wname: str, bname: str):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads[wname] += x2.T @ dy2
    grads[bname] += dy2.sum(axis=0)
    return dy @ w.T


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_bwd(dy: np.ndarray, cache, grads: dict, gname: str, bname: str):
    xhat, inv, g = cache
    dxhat = dy * g
    grads[gname] += (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _gelu(x: np.ndarray):
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return x * phi, (x, phi)


def _gelu_bwd(dy: np.ndarray, cache):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return dy * (phi + x * pdf)


def _dropout(x: np.ndarray, p: float, rng: np.random.Generator | None):
    if rng is None or p <= 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def _dropout_bwd(dy: np.ndarray, mask):
    return dy if mask is None else dy * mask


def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(q_in, kv_in, key_valid, p, heads, wq, bq, wk, bk, wv, bv, wo, bo):
    """Multi-head attention; key_valid masks padded keys. Shapes: (B,Nq,E), (B,Nk,E)."""
    B, Nq, E = q_in.shape
    Nk = kv_in.shape[1]
    dh = E // heads
    q, cq = _linear(q_in, wq, bq)
    k, ck = _linear(kv_in, wk, bk)
    v, cv = _linear(kv_in, wv, bv)
    qh = q.reshape(B, Nq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, Nk, heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(B, Nk, heads, dh).transpose(0, 2, 1, 3)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) / math.sqrt(dh)
    scores = scores + np.where(key_valid, 0.0, _NEG_INF)[:, None, None, :]
    attn = _softmax_last(scores)
    ctx = (attn @ vh).transpose(0, 2, 1, 3).reshape(B, Nq, E)
    out, co = _linear(ctx, wo, bo)
    cache = (cq, ck, cv, co, qh, kh, vh, attn, heads)
    return out, cache


def _attention_bwd(dout, cache, grads, prefix):
    cq, ck, cv, co, qh, kh, vh, attn, heads = cache
    B, H, Nq, dh = qh.shape
    Nk = kh.shape[2]
    E = H * dh
    dctx = _linear_bwd(dout, co, grads, f"{prefix}.wo", f"{prefix}.bo")
    dctx_h = dctx.reshape(B, Nq, H, dh).transpose(0, 2, 1, 3)
    dattn = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ dctx_h
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores = dscores / math.sqrt(dh)
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh
    dq = dqh.transpose(0, 2, 1, 3).reshape(B, Nq, E)
    dk = dkh.transpose(0, 2, 1, 3).reshape(B, Nk, E)
    dv = dvh.transpose(0, 2, 1, 3).reshape(B, Nk, E)
    dq_in = _linear_bwd(dq, cq, grads, f"{prefix}.wq", f"{prefix}.bq")
    dk_in = _linear_bwd(dk, ck, grads, f"{prefix}.wk", f"{prefix}.bk")
    dv_in = _linear_bwd(dv, cv, grads, f"{prefix}.wv", f"{prefix}.bv")
    return dq_in, dk_in + dv_in


# ---------------------------------------------------------------------------
# the model

class Denoiser:
    """Encoder-decoder with bidirectional decoding and a length head.

    Parameters live in an ordered dict of float64 arrays; the insertion
    order is the declared checkpoint ordering.
    """

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self._init_params(generator(seed, "denoiser_init"))
        self._posenc = sinusoidal_embedding(np.arange(config.max_len), config.embed_dim)

    # -- initialization ----------------------------------------------------
    def _init_params(self, rng: np.random.Generator):
        cfg = self.config
        E, F = cfg.embed_dim, cfg.ffn_dim

        def xavier(shape):
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-bound, bound, size=shape)

        def add(name, arr):
            self.params[name] = np.asarray(arr, dtype=np.float64)

        add("src_embed", rng.normal(0.0, E ** -0.5, size=(cfg.source_vocab, E)))
        add("tgt_embed", rng.normal(0.0, E ** -0.5, size=(cfg.vocab_size, E)))
        for side, n_layers in (("enc", cfg.enc_layers), ("dec", cfg.dec_layers)):
            for i in range(n_layers):
                blocks = ["self_attn"] if side == "enc" else ["self_attn", "cross_attn"]
                for blk in blocks:
                    p = f"{side}.{i}.{blk}"
                    for nm in ("wq", "wk", "wv", "wo"):
                        add(f"{p}.{nm}", xavier((E, E)))
                    for nm in ("bq", "bk", "bv", "bo"):
                        add(f"{p}.{nm}", np.zeros(E))
                n_ln = 2 if side == "enc" else 3
                for j in range(1, n_ln + 1):
                    add(f"{side}.{i}.ln{j}.g", np.ones(E))
                    add(f"{side}.{i}.ln{j}.b", np.zeros(E))
                add(f"{side}.{i}.ffn.w1", xavier((E, F)))
                add(f"{side}.{i}.ffn.b1", np.zeros(F))
                add(f"{side}.{i}.ffn.w2", xavier((F, E)))
                add(f"{side}.{i}.ffn.b2", np.zeros(E))
            add(f"{side}.ln_out.g", np.ones(E))
            add(f"{side}.ln_out.b", np.zeros(E))
        add("out.w", xavier((E, cfg.vocab_size)))
        add("out.b", np.zeros(cfg.vocab_size))
        add("len.w", xavier((E, cfg.max_len)))
        add("len.b", np.zeros(cfg.max_len))

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- public single-sequence interface -----------------------------------
    def forward(
        self,
        x_t: np.ndarray,
        t: int,
        source: np.ndarray,
        position_ids: np.ndarray | None = None,
    ) -> np.ndarray:
        """Per-position logits over the full vocabulary, shape (n, vocab_size).

        ``position_ids`` overrides the default 0..n-1 position indices (used
        to check permutation equivariance).
        """
        batch = self._single_batch(x_t, t, source, position_ids)
        logits, _, _ = self._run_batch(batch, dropout_rng=None)
        return logits[0, : batch["tgt_len"][0]]

    def predict_x0(self, x_t: np.ndarray, t: int, source: np.ndarray) -> np.ndarray:
        """Argmax prediction restricted to real units [0, K); ties -> lowest id."""
        logits = self.forward(x_t, t, source)
        return logits[:, : self.config.unit_vocab].argmax(axis=1).astype(np.int64)

    def predict_length(self, source: np.ndarray, beam: int = 1) -> np.ndarray:
        """Top-``beam`` candidate target lengths by length-head logit, descending."""
        if beam < 1:
            raise ValueError("beam must be >= 1")
        beam = min(beam, self.config.max_len)
        len_logits = self.length_logits(source)
        order = np.argsort(-len_logits, kind="stable")
        return (order[:beam] + 1).astype(np.int64)

    def length_logits(self, source: np.ndarray) -> np.ndarray:
        """Logits over candidate lengths 1..max_len for a single source."""
        src = self._check_tokens(source, self.config.source_vocab, "source")
        batch = {
            "src": src[None, :],
            "src_valid": np.ones((1, len(src)), dtype=bool),
        }
        memory, _ = self._encode(batch["src"], batch["src_valid"], None)
        pooled = memory[0].mean(axis=0, keepdims=True)
        logits, _ = _linear(pooled, self.params["len.w"], self.params["len.b"])
        return logits[0]

    # -- batched internals ---------------------------------------------------
    def _check_tokens(self, seq, vocab: int, what: str) -> np.ndarray:
        arr = np.asarray(seq)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError(f"{what} must be a non-empty 1-D sequence")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"{what} must contain discrete token ids, got {arr.dtype}")
        arr = arr.astype(np.int64)
        if arr.min() < 0 or arr.max() >= vocab:
            raise ValueError(f"{what} id out of range [0, {vocab})")
        if arr.size > self.config.max_len:
            raise ValueError(f"{what} longer than max_len={self.config.max_len}")
        return arr

    def _single_batch(self, x_t, t, source, position_ids=None) -> dict:
        cfg = self.config
        if not 1 <= int(t):
            raise ValueError("t must be a positive timestep")
        tgt = self._check_tokens(x_t, cfg.vocab_size, "x_t")
        src = self._check_tokens(source, cfg.source_vocab, "source")
        batch = {
            "src": src[None, :],
            "src_valid": np.ones((1, len(src)), dtype=bool),
            "tgt_in": tgt[None, :],
            "tgt_valid": np.ones((1, len(tgt)), dtype=bool),
            "t": np.array([int(t)], dtype=np.int64),
            "tgt_len": np.array([len(tgt)], dtype=np.int64),
        }
        if position_ids is not None:
            pos = np.asarray(position_ids, dtype=np.int64)
            if pos.shape != tgt.shape:
                raise ValueError("position_ids must align with x_t")
            batch["tgt_positions"] = pos[None, :]
        return batch

    def make_batch(self, sources, targets_in, ts) -> dict:
        """Pad variable-length sequences into aligned arrays."""
        cfg = self.config
        B = len(sources)
        S = max(len(s) for s in sources)
        N = max(len(x) for x in targets_in)
        if S > cfg.max_len or N > cfg.max_len:
            raise ValueError(f"sequence longer than max_len={cfg.max_len}")
        src = np.full((B, S), cfg.src_pad_id, dtype=np.int64)
        src_valid = np.zeros((B, S), dtype=bool)
        tgt_in = np.full((B, N), cfg.pad_id, dtype=np.int64)
        tgt_valid = np.zeros((B, N), dtype=bool)
        tgt_len = np.zeros(B, dtype=np.int64)
        for i, (s, x) in enumerate(zip(sources, targets_in)):
            src[i, : len(s)] = s
            src_valid[i, : len(s)] = True
            tgt_in[i, : len(x)] = x
            tgt_valid[i, : len(x)] = True
            tgt_len[i] = len(x)
        return {
            "src": src,
            "src_valid": src_valid,
            "tgt_in": tgt_in,
            "tgt_valid": tgt_valid,
            "t": np.asarray(ts, dtype=np.int64),
            "tgt_len": tgt_len,
        }

    def _encode(self, src, src_valid, dropout_rng):
        cfg = self.config
        p = self.params
        scale = math.sqrt(cfg.embed_dim)
        x = p["src_embed"][src] * scale + self._posenc[: src.shape[1]][None, :, :]
        x, demb = _dropout(x, cfg.dropout, dropout_rng)
        layers = []
        for i in range(cfg.enc_layers):
            pre = f"enc.{i}"
            h, c_ln1 = _layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            a, c_att = _attention(
                h, h, src_valid, cfg.dropout, cfg.heads,
                p[f"{pre}.self_attn.wq"], p[f"{pre}.self_attn.bq"],
                p[f"{pre}.self_attn.wk"], p[f"{pre}.self_attn.bk"],
                p[f"{pre}.self_attn.wv"], p[f"{pre}.self_attn.bv"],
                p[f"{pre}.self_attn.wo"], p[f"{pre}.self_attn.bo"],
            )
            a, m1 = _dropout(a, cfg.dropout, dropout_rng)
            x = x + a
            h, c_ln2 = _layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            f1, c_f1 = _linear(h, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"])
            g, c_g = _gelu(f1)
            f2, c_f2 = _linear(g, p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
            f2, m2 = _dropout(f2, cfg.dropout, dropout_rng)
            x = x + f2
            layers.append((c_ln1, c_att, m1, c_ln2, c_f1, c_g, c_f2, m2))
        out, c_out = _layer_norm(x, p["enc.ln_out.g"], p["enc.ln_out.b"])
        cache = {"src": src, "demb": demb, "layers": layers, "ln_out": c_out}
        return out, cache

    def _encode_bwd(self, dmem, cache, grads):
        cfg = self.config
        dx = _layer_norm_bwd(dmem, cache["ln_out"], grads, "enc.ln_out.g", "enc.ln_out.b")
        for i in reversed(range(cfg.enc_layers)):
            pre = f"enc.{i}"
            c_ln1, c_att, m1, c_ln2, c_f1, c_g, c_f2, m2 = cache["layers"][i]
            df2 = _dropout_bwd(dx, m2)
            dg = _linear_bwd(df2, c_f2, grads, f"{pre}.ffn.w2", f"{pre}.ffn.b2")
            df1 = _gelu_bwd(dg, c_g)
            dh = _linear_bwd(df1, c_f1, grads, f"{pre}.ffn.w1", f"{pre}.ffn.b1")
            dx = dx + _layer_norm_bwd(dh, c_ln2, grads, f"{pre}.ln2.g", f"{pre}.ln2.b")
            da = _dropout_bwd(dx, m1)
            dq, dkv = _attention_bwd(da, c_att, grads, f"{pre}.self_attn")
            dx = dx + _layer_norm_bwd(dq + dkv, c_ln1, grads, f"{pre}.ln1.g", f"{pre}.ln1.b")
        dx = _dropout_bwd(dx, cache["demb"])
        scale = math.sqrt(cfg.embed_dim)
        np.add.at(grads["src_embed"], cache["src"].ravel(), dx.reshape(-1, cfg.embed_dim) * scale)

    def _decode(self, batch, memory, dropout_rng):
        cfg = self.config
        p = self.params
        tgt, tgt_valid, src_valid = batch["tgt_in"], batch["tgt_valid"], batch["src_valid"]
        scale = math.sqrt(cfg.embed_dim)
        if "tgt_positions" in batch:
            pos = sinusoidal_embedding(batch["tgt_positions"].ravel(), cfg.embed_dim)
            pos = pos.reshape(tgt.shape[0], tgt.shape[1], cfg.embed_dim)
        else:
            pos = self._posenc[: tgt.shape[1]][None, :, :]
        t_emb = sinusoidal_embedding(batch["t"], cfg.embed_dim)[:, None, :]
        x = p["tgt_embed"][tgt] * scale + pos + t_emb
        x, demb = _dropout(x, cfg.dropout, dropout_rng)
        layers = []
        for i in range(cfg.dec_layers):
            pre = f"dec.{i}"
            h, c_ln1 = _layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            a, c_self = _attention(
                h, h, tgt_valid, cfg.dropout, cfg.heads,
                p[f"{pre}.self_attn.wq"], p[f"{pre}.self_attn.bq"],
                p[f"{pre}.self_attn.wk"], p[f"{pre}.self_attn.bk"],
                p[f"{pre}.self_attn.wv"], p[f"{pre}.self_attn.bv"],
                p[f"{pre}.self_attn.wo"], p[f"{pre}.self_attn.bo"],
            )
            a, m1 = _dropout(a, cfg.dropout, dropout_rng)
            x = x + a
            h, c_ln2 = _layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            a, c_cross = _attention(
                h, memory, src_valid, cfg.dropout, cfg.heads,
                p[f"{pre}.cross_attn.wq"], p[f"{pre}.cross_attn.bq"],
                p[f"{pre}.cross_attn.wk"], p[f"{pre}.cross_attn.bk"],
                p[f"{pre}.cross_attn.wv"], p[f"{pre}.cross_attn.bv"],
                p[f"{pre}.cross_attn.wo"], p[f"{pre}.cross_attn.bo"],
            )
            a, m2 = _dropout(a, cfg.dropout, dropout_rng)
            x = x + a
            h, c_ln3 = _layer_norm(x, p[f"{pre}.ln3.g"], p[f"{pre}.ln3.b"])
            f1, c_f1 = _linear(h, p[f"{pre}.ffn.w1"], p[f"{pre}.ffn.b1"])
            g, c_g = _gelu(f1)
            f2, c_f2 = _linear(g, p[f"{pre}.ffn.w2"], p[f"{pre}.ffn.b2"])
            f2, m3 = _dropout(f2, cfg.dropout, dropout_rng)
            x = x + f2
            layers.append((c_ln1, c_self, m1, c_ln2, c_cross, m2, c_ln3, c_f1, c_g, c_f2, m3))
        h, c_out = _layer_norm(x, p["dec.ln_out.g"], p["dec.ln_out.b"])
        logits, c_proj = _linear(h, p["out.w"], p["out.b"])
        cache = {"tgt": tgt, "demb": demb, "layers": layers, "ln_out": c_out, "proj": c_proj}
        return logits, cache

    def _decode_bwd(self, dlogits, cache, grads):
        cfg = self.config
        dh = _linear_bwd(dlogits, cache["proj"], grads, "out.w", "out.b")
        dx = _layer_norm_bwd(dh, cache["ln_out"], grads, "dec.ln_out.g", "dec.ln_out.b")
        dmem_total = None
        for i in reversed(range(cfg.dec_layers)):
            pre = f"dec.{i}"
            c_ln1, c_self, m1, c_ln2, c_cross, m2, c_ln3, c_f1, c_g, c_f2, m3 = cache["layers"][i]
            df2 = _dropout_bwd(dx, m3)
            dg = _linear_bwd(df2, c_f2, grads, f"{pre}.ffn.w2", f"{pre}.ffn.b2")
            df1 = _gelu_bwd(dg, c_g)
            dh = _linear_bwd(df1, c_f1, grads, f"{pre}.ffn.w1", f"{pre}.ffn.b1")
            dx = dx + _layer_norm_bwd(dh, c_ln3, grads, f"{pre}.ln3.g", f"{pre}.ln3.b")
            da = _dropout_bwd(dx, m2)
            dq, dmem = _attention_bwd(da, c_cross, grads, f"{pre}.cross_attn")
            dmem_total = dmem if dmem_total is None else dmem_total + dmem
            dx = dx + _layer_norm_bwd(dq, c_ln2, grads, f"{pre}.ln2.g", f"{pre}.ln2.b")
            da = _dropout_bwd(dx, m1)
            dq, dkv = _attention_bwd(da, c_self, grads, f"{pre}.self_attn")
            dx = dx + _layer_norm_bwd(dq + dkv, c_ln1, grads, f"{pre}.ln1.g", f"{pre}.ln1.b")
        dx = _dropout_bwd(dx, cache["demb"])
        scale = math.sqrt(cfg.embed_dim)
        np.add.at(grads["tgt_embed"], cache["tgt"].ravel(), dx.reshape(-1, cfg.embed_dim) * scale)
        return dmem_total

    def _run_batch(self, batch, dropout_rng):
        """Forward pass; returns (logits, length_logits, cache)."""
        memory, enc_cache = self._encode(batch["src"], batch["src_valid"], dropout_rng)
        logits, dec_cache = self._decode(batch, memory, dropout_rng)
        valid = batch["src_valid"][:, :, None]
        counts = valid.sum(axis=1)
        pooled = (memory * valid).sum(axis=1) / counts
        len_logits, len_cache = _linear(pooled, self.params["len.w"], self.params["len.b"])
        cache = {
            "enc": enc_cache,
            "dec": dec_cache,
            "len": len_cache,
            "src_valid": batch["src_valid"],
            "counts": counts,
        }
        return logits, len_logits, cache

    def _run_batch_bwd(self, dlogits, dlen_logits, cache):
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dmem = self._decode_bwd(dlogits, cache["dec"], grads)
        dpooled = _linear_bwd(dlen_logits, cache["len"], grads, "len.w", "len.b")
        valid = cache["src_valid"][:, :, None]
        dmem_len = np.where(valid, dpooled[:, None, :] / cache["counts"][:, None, :], 0.0)
        self._encode_bwd(dmem + dmem_len, cache["enc"], grads)
        return grads


# ---------------------------------------------------------------------------
# losses

def token_loss_and_grad(
    logits: np.ndarray,
    targets: np.ndarray,
    valid: np.ndarray,
    n_real_units: int,
    smoothing: float,
):
    """Label-smoothed cross-entropy over valid positions.

    The smoothed target distribution places 1 - eps on the true unit and
    spreads eps uniformly over the K real units; mask/pad logits receive no
    target mass but stay inside the softmax. Returns (loss, dlogits).
    """
    B, N, V = logits.shape
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid target positions")
    eps = smoothing
    tgt_logp = np.take_along_axis(logp, targets[:, :, None], axis=2)[:, :, 0]
    smooth_logp = logp[:, :, :n_real_units].sum(axis=-1)
    per_pos = -(1.0 - eps) * tgt_logp - (eps / n_real_units) * smooth_logp
    loss = float((per_pos * valid).sum() / n_valid)
    probs = np.exp(logp)
    q = np.zeros_like(probs)
    q[:, :, :n_real_units] = eps / n_real_units
    np.put_along_axis(
        q, targets[:, :, None],
        np.take_along_axis(q, targets[:, :, None], axis=2) + (1.0 - eps),
        axis=2,
    )
    dlogits = (probs - q) * valid[:, :, None] / n_valid
    return loss, dlogits


def _length_loss_and_grad(len_logits: np.ndarray, true_len: np.ndarray):
    B, L = len_logits.shape
    target = true_len - 1
    shifted = len_logits - len_logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    loss = float(-logp[np.arange(B), target].mean())
    d = np.exp(logp)
    d[np.arange(B), target] -= 1.0
    return loss, d / B


def loss_and_grads(
    model: Denoiser,
    batch: dict,
    smoothing: float,
    length_weight: float = LENGTH_LOSS_WEIGHT,
    dropout_rng: np.random.Generator | None = None,
    compute_grads: bool = True,
):
    """Total training loss (token CE + weighted length CE) and its gradients.

    ``batch`` must contain ``tgt_out`` (clean targets aligned with tgt_in).
    Returns (loss, grads_or_None, parts) where parts splits the objective.
    """
    logits, len_logits, cache = model._run_batch(batch, dropout_rng)
    tok_loss, dlogits = token_loss_and_grad(
        logits, batch["tgt_out"], batch["tgt_valid"],
        model.config.unit_vocab, smoothing,
    )
    len_loss, dlen = _length_loss_and_grad(len_logits, batch["tgt_len"])
    loss = tok_loss + length_weight * len_loss
    parts = {"token_loss": tok_loss, "length_loss": len_loss}
    if not compute_grads:
        return loss, None, parts
    grads = model._run_batch_bwd(dlogits, length_weight * dlen, cache)
    return loss, grads, parts


def sequence_nll(logits: np.ndarray, candidate: np.ndarray) -> float:
    """Mean per-position -log softmax(logits)[candidate_i]."""
    logits = np.asarray(logits, dtype=np.float64)
    cand = np.asarray(candidate, dtype=np.int64)
    if logits.ndim != 2 or cand.shape != (logits.shape[0],):
        raise ValueError("candidate length must equal the number of logit rows")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    logp = shifted[np.arange(len(cand)), cand] - logz
    return float(-logp.mean())


# ---------------------------------------------------------------------------
# training

def _corrupt_target(system: str, cb, ns, x0: np.ndarray, t: int, seed: int) -> np.ndarray:
    """Dispatch to the forward corruption of the given system.

    "hybrid_no_kmeans" deliberately shares the multinomial code path (and its
    random stream), which is what makes the mapping ablation reproduce the
    multinomial baseline bit-for-bit.
    """
    if system == "hybrid":
        from .hybrid import forward_corrupt

        return forward_corrupt(cb, ns, x0, t, seed)
    if system in ("multinomial", "hybrid_no_kmeans"):
        from .baselines import multinomial_q_sample

        return multinomial_q_sample(ns, x0, t, cb.K, seed)
    if system == "absorbing":
        from .baselines import absorbing_q_sample

        return absorbing_q_sample(ns, x0, t, cb.K, seed)
    raise ValueError(f"unknown system {system!r}")


def train(model: Denoiser, dataset, system: str, cb, ns, tc: TrainConfig):
    """Adam with inverse-square-root decay on the system's denoising loss.

    Every step draws a batch (with replacement), corrupts each target with a
    per-example timestep and derived seed, and takes one optimizer step.
    Fully deterministic given ``tc.seed``. Returns (model, history) where
    history rows are (step, loss, lr).
    """
    pairs = list(dataset.pairs) if hasattr(dataset, "pairs") else list(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    rng_batches = generator(tc.seed, "batches")
    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    history: list[tuple[int, float, float]] = []
    use_dropout = model.config.dropout > 0.0
    for step in range(tc.total_steps):
        idx = rng_batches.integers(0, len(pairs), size=tc.batch_size)
        ts = rng_batches.integers(1, ns.T + 1, size=tc.batch_size)
        sources, x_ts, x0s = [], [], []
        for j, (i, t) in enumerate(zip(idx, ts)):
            pair = pairs[i]
            seed_j = derive_seed(tc.seed, "corrupt", step, j)
            x_ts.append(_corrupt_target(system, cb, ns, pair.target, int(t), seed_j))
            x0s.append(pair.target)
            sources.append(pair.source)
        batch = model.make_batch(sources, x_ts, ts)
        batch["tgt_out"] = _pad_targets(x0s, batch["tgt_in"].shape, model.config.pad_id)
        drop_rng = generator(tc.seed, "dropout", step) if use_dropout else None
        loss, grads, _ = loss_and_grads(model, batch, tc.label_smoothing, dropout_rng=drop_rng)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss!r} at step {step}")
        lr_t = inverse_sqrt_lr(tc.lr, step, tc.warmup_steps)
        b1, b2, eps = tc.adam_beta1, tc.adam_beta2, tc.adam_eps
        bc1 = 1.0 - b1 ** (step + 1)
        bc2 = 1.0 - b2 ** (step + 1)
        for k, g in grads.items():
            m_state[k] = b1 * m_state[k] + (1.0 - b1) * g
            v_state[k] = b2 * v_state[k] + (1.0 - b2) * (g * g)
            update = (m_state[k] / bc1) / (np.sqrt(v_state[k] / bc2) + eps)
            model.params[k] -= lr_t * update
        history.append((step, loss, lr_t))
    return model, history


def _pad_targets(x0s, shape, pad_id):
    out = np.full(shape, pad_id, dtype=np.int64)
    for i, x in enumerate(x0s):
        out[i, : len(x)] = x
    return out


# ---------------------------------------------------------------------------
# gradient verification

def gradcheck(
    model: Denoiser,
    cb,
    ns,
    pairs,
    eps: float = 1e-5,
    num_coords: int = 200,
    seed: int = 0,
    system: str = "hybrid",
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The loss closure fixes the batch, the corruption draws and the dropout
    mask, so it is a smooth deterministic function of the parameters. The
    relative error for a coordinate is |a - n| / max(|a|, |n|, 1e-5).
    """
    rng = generator(seed, "gradcheck")
    ts = rng.integers(1, ns.T + 1, size=len(pairs))
    sources, x_ts, x0s = [], [], []
    for j, (pair, t) in enumerate(zip(pairs, ts)):
        seed_j = derive_seed(seed, "gradcheck_corrupt", j)
        x_ts.append(_corrupt_target(system, cb, ns, pair.target, int(t), seed_j))
        x0s.append(pair.target)
        sources.append(pair.source)
    batch = model.make_batch(sources, x_ts, ts)
    batch["tgt_out"] = _pad_targets(x0s, batch["tgt_in"].shape, model.config.pad_id)
    drop_seed = derive_seed(seed, "gradcheck_dropout")
    use_dropout = model.config.dropout > 0.0

    def eval_loss() -> float:
        drop = np.random.default_rng(drop_seed) if use_dropout else None
        loss, _, _ = loss_and_grads(model, batch, 0.2, dropout_rng=drop, compute_grads=False)
        return loss

    drop = np.random.default_rng(drop_seed) if use_dropout else None
    _, grads, _ = loss_and_grads(model, batch, 0.2, dropout_rng=drop)

    names = list(model.params)
    sizes = np.array([model.params[n].size for n in names])
    total = int(sizes.sum())
    chosen = rng.choice(total, size=min(num_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in chosen:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[pi]
        local = int(flat - offsets[pi])
        param = model.params[name].reshape(-1)
        orig = param[local]
        param[local] = orig + eps
        plus = eval_loss()
        param[local] = orig - eps
        minus = eval_loss()
        param[local] = orig
        numeric = (plus - minus) / (2.0 * eps)
        analytic = grads[name].reshape(-1)[local]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian float64 blob in declared order

def save_checkpoint(model: Denoiser, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    manifest = {
        "version": 1,
        "config": asdict(model.config),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "blob": blob_path.name,
    }
    if extra:
        manifest.update(extra)
    blob = np.concatenate([v.ravel() for v in model.params.values()])
    blob.astype("<f8").tofile(blob_path)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path):
    """Rebuild a Denoiser from a manifest; logits reproduce bitwise."""
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    config = DenoiserConfig(**manifest["config"])
    model = Denoiser(config, seed=0)
    blob = np.fromfile(path.parent / manifest["blob"], dtype="<f8")
    expected = [(p["name"], tuple(p["shape"])) for p in manifest["params"]]
    if [(k, v.shape) for k, v in model.params.items()] != expected:
        raise ValueError("checkpoint parameter table does not match the architecture")
    offset = 0
    for name, shape in expected:
        size = int(np.prod(shape))
        model.params[name] = blob[offset : offset + size].reshape(shape).astype(np.float64)
        offset += size
    if offset != blob.size:
        raise ValueError("checkpoint blob size mismatch")
    return model, manifest
