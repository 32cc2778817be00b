"""Held-out log-likelihood with the left-to-right particle estimator.

``exact_doc_loglik`` enumerates every topic assignment of a short document
and serves as the reference the estimator is tested against.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .corpus import Corpus, make_rng
from .errors import Intractable, ModelError, OovError, ValidationError

MAX_ENUMERATION = 10**6


@dataclass(frozen=True)
class HeldoutConfig:
    particles: int = 30
    seed: int = 0
    resample_previous: bool = True

    def __post_init__(self):
        if self.particles < 1:
            raise ValidationError("particles must be >= 1")


@dataclass(frozen=True, eq=False)
class PerplexityResult:
    perplexity: float
    stderr: float
    doc_loglik: np.ndarray
    tokens: int
    particles: int
    seed: int


def _check_model(doc, phi, alpha):
    phi = np.asarray(phi, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if phi.ndim != 2 or alpha.shape != (phi.shape[0],):
        raise ModelError("phi must be K x V and alpha a K-vector")
    if np.any(phi < 0) or not np.allclose(phi.sum(axis=1), 1.0, atol=1e-6):
        raise ModelError("phi rows must be probability vectors")
    if np.any(alpha <= 0):
        raise ModelError("alpha must be positive")
    doc = np.asarray(doc, dtype=np.int64)
    if doc.size and (doc.min() < 0 or doc.max() >= phi.shape[1]):
        raise OovError(f"token id outside [0, {phi.shape[1]})")
    return doc, phi, alpha


@njit(cache=True)
def _left_to_right(doc, phi, alpha, particles, resample_previous, uniforms, probs):
    """Fills ``probs[n, r]`` with particle r's predictive probability of token n."""
    K = phi.shape[0]
    L = doc.shape[0]
    alpha_sum = alpha.sum()
    cum = np.empty(K)
    counts = np.zeros(K)
    z = np.empty(L, dtype=np.int64)
    u = 0
    for r in range(particles):
        counts[:] = 0.0
        for n in range(L):
            if resample_previous:
                for m in range(n):
                    counts[z[m]] -= 1.0
                    wm = doc[m]
                    total = 0.0
                    for k in range(K):
                        total += (counts[k] + alpha[k]) * phi[k, wm]
                        cum[k] = total
                    x = uniforms[u] * total
                    u += 1
                    k = 0
                    while k < K - 1 and cum[k] <= x:
                        k += 1
                    z[m] = k
                    counts[k] += 1.0
            w = doc[n]
            norm = n + alpha_sum
            total = 0.0
            for k in range(K):
                total += phi[k, w] * ((counts[k] + alpha[k]) / norm)
                cum[k] = total
            probs[n, r] = total
            x = uniforms[u] * total
            u += 1
            k = 0
            while k < K - 1 and cum[k] <= x:
                k += 1
            z[n] = k
            counts[k] += 1.0


def _uniforms_needed(L: int, particles: int, resample_previous: bool) -> int:
    per_particle = L + (L * (L - 1) // 2 if resample_previous else 0)
    return per_particle * particles


def left_to_right_doc(doc, phi, alpha, cfg: HeldoutConfig, rng: np.random.Generator | None = None,
                      return_stderr: bool = False):
    """Estimate log p(doc | phi, alpha) in nats.

    Each particle walks the document left to right: it (optionally) resamples
    the topics of all earlier tokens, scores the next token under its current
    topic counts, then samples a topic for that token. The document estimate
    is the sum over positions of the log of the particle-averaged scores.

    With ``return_stderr`` a delta-method Monte-Carlo standard error is
    returned alongside the estimate, treating positions as independent.
    """
    doc, phi, alpha = _check_model(doc, phi, alpha)
    L = doc.size
    if L == 0:
        return (0.0, 0.0) if return_stderr else 0.0
    rng = make_rng(cfg.seed) if rng is None else rng
    uniforms = rng.random(_uniforms_needed(L, cfg.particles, cfg.resample_previous))
    probs = np.empty((L, cfg.particles))
    _left_to_right(doc, phi, alpha, cfg.particles, cfg.resample_previous, uniforms, probs)
    # Identical particles (K=1, first token) keep their value bit-for-bit.
    means = np.where(probs.min(axis=1) == probs.max(axis=1), probs[:, 0], probs.mean(axis=1))
    loglik = math.fsum(np.log(means))
    if not return_stderr:
        return loglik
    if cfg.particles < 2:
        return loglik, float("nan")
    rel_var = probs.var(axis=1, ddof=1) / (cfg.particles * means**2)
    return loglik, math.sqrt(rel_var.sum())


def exact_doc_loglik(doc, phi, alpha) -> float:
    """Exact log p(doc | phi, alpha) by summing over all K**len(doc) assignments.

    Topic assignments follow the Polya urn implied by integrating theta out:
    p(z_n = k | z_<n) = (alpha_k + count_k) / (alpha_sum + n).
    """
    doc, phi, alpha = _check_model(doc, phi, alpha)
    K, L = phi.shape[0], doc.size
    if float(K) ** L > MAX_ENUMERATION:
        raise Intractable(f"{K}**{L} assignments exceed the enumeration limit {MAX_ENUMERATION}")
    alpha_sum = alpha.sum()
    weight = np.ones(1)
    counts = np.zeros((1, K))
    for n, w in enumerate(doc):
        step = (counts + alpha) / (alpha_sum + n) * phi[:, w]
        weight = (weight[:, None] * step).ravel()
        counts = np.repeat(counts, K, axis=0)
        counts[np.arange(counts.shape[0]), np.tile(np.arange(K), counts.shape[0] // K)] += 1
    return float(np.log(weight.sum()))


def doc_seed(seed: int, doc) -> tuple[int, int]:
    """Seed parts for one document, derived from its content rather than its position."""
    digest = hashlib.blake2b(np.asarray(doc, dtype=np.int64).tobytes(), digest_size=8).digest()
    return seed, int.from_bytes(digest, "little")


def perplexity(test: Corpus, phi, alpha, cfg: HeldoutConfig) -> PerplexityResult:
    """Negative held-out log-likelihood per token (nats).

    The standard error is the ratio-estimator error across documents.
    """
    if test.D == 0 or test.N == 0:
        raise ValidationError("test corpus is empty")
    phi = np.asarray(phi, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    ll = np.array([
        left_to_right_doc(doc, phi, alpha, cfg, rng=make_rng(*doc_seed(cfg.seed, doc)))
        for doc in test.docs
    ])
    lengths = test.doc_lengths.astype(np.float64)
    total_tokens = int(lengths.sum())
    value = -math.fsum(ll) / total_tokens
    if test.D > 1:
        resid = -ll - value * lengths
        se = math.sqrt(math.fsum(resid**2) / (test.D * (test.D - 1))) / lengths.mean()
    else:
        se = float("nan")
    return PerplexityResult(
        perplexity=value, stderr=se, doc_loglik=ll, tokens=total_tokens,
        particles=cfg.particles, seed=cfg.seed,
    )
