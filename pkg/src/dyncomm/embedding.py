"""Analysis-text embedding providers.

Two providers share one contract (deterministic, unit-norm vectors): a
synthetic embedder for fully offline runs, and a client for an external
sentence-encoder service speaking ``{"input": [texts]} -> {"embeddings":
[[...]]}``.

The synthetic embedder exposes fixed per-cluster centers so agent behavior
classes are separable in embedding space: cluster 0 is truthful analysis,
cluster 1 adversarial analysis, clusters 2+ are free for per-query
distractors.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

from .core import ConfigurationError, TransportError
from .seeding import TAG_EMBED_CENTER, TAG_EMBED_JITTER, TAG_EMBED_TEXT, rng_stream

logger = logging.getLogger(__name__)

CLUSTER_TRUTHFUL = 0
CLUSTER_ADVERSARIAL = 1


@dataclass(frozen=True)
class EmbeddingConfig:
    d_emb: int = 384
    provider: str = "synthetic"
    seed: int = 0
    endpoint: str = ""
    api_key_env: str = "DYNCOMM_EMBED_API_KEY"
    timeout_s: float = 10.0
    retries: int = 2
    max_inflight: int = 8

    def __post_init__(self) -> None:
        if self.d_emb < 2:
            raise ConfigurationError("d_emb must be >= 2")
        if self.provider not in ("synthetic", "external"):
            raise ConfigurationError(f"unknown embedding provider {self.provider!r}")


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale to unit L2 norm; the zero vector is returned unchanged."""
    n = float(np.linalg.norm(v))
    if n == 0.0:
        return v
    return v / n


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1]; defined as 0 for a zero vector."""
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        logger.debug("cosine of zero vector requested; returning 0.0")
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


class SyntheticEmbedder:
    """Seeded pseudo-random embeddings; a pure function of (seed, inputs)."""

    def __init__(self, d_emb: int = 384, seed: int = 0):
        if d_emb < 2:
            raise ConfigurationError("d_emb must be >= 2")
        self.d_emb = d_emb
        self.seed = seed
        self._centers: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def center(self, cluster_id: int) -> np.ndarray:
        with self._lock:
            cached = self._centers.get(cluster_id)
            if cached is None:
                rng = rng_stream(self.seed, TAG_EMBED_CENTER, cluster_id)
                cached = normalize(rng.standard_normal(self.d_emb))
                cached.setflags(write=False)
                self._centers[cluster_id] = cached
        return cached

    def synth_embed(self, cluster_id: int, jitter_seed: int, noise_scale: float) -> np.ndarray:
        """Cluster center plus seeded Gaussian jitter, renormalized.

        ``noise_scale`` is the expected total noise norm (per-coordinate std
        is noise_scale / sqrt(d_emb)), so e.g. 0.1 keeps same-cluster
        cosines above 0.9 regardless of dimension.
        """
        if noise_scale < 0:
            raise ConfigurationError("noise_scale must be >= 0")
        c = self.center(cluster_id)
        if noise_scale == 0.0:
            return c.copy()
        rng = rng_stream(self.seed, TAG_EMBED_JITTER, cluster_id, jitter_seed)
        eps = rng.standard_normal(self.d_emb) * (noise_scale / np.sqrt(self.d_emb))
        return normalize(c + eps)

    def embed(self, text: str) -> np.ndarray:
        if not text:
            raise ConfigurationError("cannot embed empty text")
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        lo = int.from_bytes(digest[:8], "little")
        hi = int.from_bytes(digest[8:16], "little")
        rng = rng_stream(self.seed, TAG_EMBED_TEXT, lo, hi)
        return normalize(rng.standard_normal(self.d_emb))


class ExternalEmbedder:
    """Client for an HTTP sentence-encoder endpoint.

    Enforces a configurable cap on in-flight requests and retries transient
    failures with exponential backoff before raising :class:`TransportError`
    with the retry budget flagged as exhausted.
    """

    def __init__(self, config: EmbeddingConfig, session: requests.Session | None = None):
        if not config.endpoint:
            raise ConfigurationError("external embedding provider requires an endpoint")
        self.config = config
        self.d_emb = config.d_emb
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(config.max_inflight)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        if any(not t for t in texts):
            raise ConfigurationError("cannot embed empty text")
        last_error: Exception | None = None
        for attempt in range(self.config.retries + 1):
            try:
                with self._gate:
                    resp = self._session.post(
                        self.config.endpoint,
                        json={"input": texts},
                        headers=self._headers(),
                        timeout=self.config.timeout_s,
                    )
                resp.raise_for_status()
                vectors = resp.json()["embeddings"]
                return [normalize(np.asarray(v, dtype=np.float64)) for v in vectors]
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < self.config.retries:
                    time.sleep(min(2.0**attempt * 0.1, 2.0))
        raise TransportError(
            f"embedding endpoint unreachable after {self.config.retries + 1} attempts: {last_error}",
            retries_exhausted=True,
        )

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]


def get_embedder(config: EmbeddingConfig):
    if config.provider == "synthetic":
        return SyntheticEmbedder(d_emb=config.d_emb, seed=config.seed)
    return ExternalEmbedder(config)
