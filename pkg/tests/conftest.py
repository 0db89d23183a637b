import numpy as np
import pytest

from unitdiff import (
    Denoiser,
    desk_config,
    generate_dataset,
    linear_schedule,
    make_structured_codebook,
    uniform_schedule,
)


@pytest.fixture(scope="session")
def default_codebook():
    """The default desk-scale structured codebook: K=100, D=16, 10 classes."""
    return make_structured_codebook(10, 10, 16, seed=0)


@pytest.fixture(scope="session")
def small_codebook():
    """A light codebook for fast tests: K=12, D=8, 4 classes."""
    return make_structured_codebook(4, 3, 8, seed=1)


@pytest.fixture(scope="session")
def linear_ns():
    return linear_schedule(1000)


@pytest.fixture(scope="session")
def uniform_ns():
    return uniform_schedule(1000)


@pytest.fixture(scope="session")
def small_dataset(small_codebook):
    return generate_dataset(small_codebook, 24, (3, 6), (1, 3), seed=3)


@pytest.fixture(scope="session")
def tiny_model(small_codebook):
    cfg = desk_config(
        small_codebook.K, small_codebook.n_classes,
        embed_dim=16, heads=2, enc_layers=1, dec_layers=1,
        ffn_dim=24, max_len=24, dropout=0.0,
    )
    return Denoiser(cfg, seed=5)


class OracleDenoiser:
    """Perfect predictor: one-hot logits of a fixed reference per source.

    The length head is perfect as well: the true length ranks first,
    followed by the other lengths in ascending order.
    """

    def __init__(self, pairs, vocab_size, max_len=80):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self._targets = {tuple(p.source): np.asarray(p.target) for p in pairs}

    def target_for(self, source):
        return self._targets[tuple(np.asarray(source))]

    def forward(self, x_t, t, source):
        assert np.issubdtype(np.asarray(x_t).dtype, np.integer)
        target = self.target_for(source)
        if len(x_t) != len(target):
            # maximally uncertain on a wrong-length canvas, so beam scoring
            # prefers the true length
            return np.zeros((len(x_t), self.vocab_size))
        logits = np.full((len(x_t), self.vocab_size), -10.0)
        logits[np.arange(len(target)), target] = 10.0
        return logits

    def predict_length(self, source, beam=1):
        n = len(self.target_for(source))
        rest = [l for l in range(1, self.max_len + 1) if l != n]
        return np.asarray([n] + rest[: beam - 1], dtype=np.int64)


@pytest.fixture(scope="session")
def oracle_pairs(small_dataset):
    """Unique-source subset, so a perfect per-source oracle is well defined."""
    seen = set()
    pairs = []
    for p in small_dataset.pairs:
        key = tuple(p.source)
        if key not in seen:
            seen.add(key)
            pairs.append(p)
    return pairs


@pytest.fixture(scope="session")
def oracle_for(oracle_pairs, small_codebook):
    return OracleDenoiser(oracle_pairs, small_codebook.K + 2)
