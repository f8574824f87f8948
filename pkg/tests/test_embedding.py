from __future__ import annotations

import numpy as np
import pytest

from dyncomm.core import ConfigurationError
from dyncomm.embedding import EmbeddingConfig, SyntheticEmbedder, cosine, get_embedder


def test_embed_deterministic():
    emb = SyntheticEmbedder(d_emb=384, seed=5)
    a = emb.embed("some analysis text")
    b = emb.embed("some analysis text")
    assert np.array_equal(a, b)


def test_embed_unit_norm():
    emb = SyntheticEmbedder(d_emb=384, seed=5)
    for text in ("x", "a longer piece of analysis", "z" * 500):
        assert abs(np.linalg.norm(emb.embed(text)) - 1.0) < 1e-6


def test_embed_self_cosine():
    emb = SyntheticEmbedder(d_emb=64, seed=1)
    v = emb.embed("s")
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)


def test_embed_pure_function_of_provider_seed_text():
    a = SyntheticEmbedder(d_emb=32, seed=9).embed("t")
    b = SyntheticEmbedder(d_emb=32, seed=9).embed("t")
    c = SyntheticEmbedder(d_emb=32, seed=10).embed("t")
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_synth_embed_zero_noise_is_center():
    emb = SyntheticEmbedder(d_emb=384, seed=2)
    v = emb.synth_embed(3, jitter_seed=123, noise_scale=0.0)
    assert np.array_equal(v, emb.center(3))


def test_synth_embed_distinct_clusters_monte_carlo():
    # Monte-Carlo oracle over 10k center-seed pairs: random unit vectors in
    # R^384 concentrate near orthogonality, so cross-cluster cosine < 0.5.
    worst = 0.0
    for seed in range(10_000):
        emb = SyntheticEmbedder(d_emb=384, seed=seed)
        c = abs(cosine(emb.center(0), emb.center(1)))
        worst = max(worst, c)
    assert worst < 0.5


def test_synth_embed_same_cluster_noise_monte_carlo():
    emb = SyntheticEmbedder(d_emb=384, seed=7)
    rng = np.random.default_rng(0)
    worst = 1.0
    for _ in range(2000):
        u = emb.synth_embed(0, int(rng.integers(2**63)), 0.1)
        v = emb.synth_embed(0, int(rng.integers(2**63)), 0.1)
        worst = min(worst, cosine(u, v))
    assert worst > 0.9


def test_synth_embed_deterministic():
    emb = SyntheticEmbedder(d_emb=128, seed=3)
    assert np.array_equal(emb.synth_embed(1, 42, 0.2), emb.synth_embed(1, 42, 0.2))


def test_cosine_basis_cases():
    e1 = np.zeros(4)
    e1[0] = 1.0
    e2 = np.zeros(4)
    e2[1] = 1.0
    assert cosine(e1, e1) == 1.0
    assert cosine(e1, -e1) == -1.0
    assert cosine(e1, e2) == 0.0


def test_cosine_zero_vector_defined_as_zero():
    assert cosine(np.zeros(4), np.ones(4)) == 0.0


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EmbeddingConfig(d_emb=1)
    with pytest.raises(ConfigurationError):
        EmbeddingConfig(provider="bogus")
    assert isinstance(get_embedder(EmbeddingConfig()), SyntheticEmbedder)
