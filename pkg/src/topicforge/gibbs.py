"""Collapsed Gibbs sampling for LDA over bag-of-products corpora."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import gammaln

from .corpus import Corpus, make_rng
from .errors import ConfigError, StateCorruption

log = logging.getLogger(__name__)

DEFAULT_ALPHA_SUM = 3.0
DEFAULT_BETA = 0.01
# Upper bound on uniforms drawn in one block (tokens x sweeps).
_MAX_UNIFORM_BLOCK = 1 << 22


@dataclass(frozen=True, eq=False)
class HyperParams:
    """Fixed Dirichlet hyperparameters: ``alpha`` over topics, ``beta`` over products."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size == 0:
            raise ConfigError("alpha must be a non-empty vector (K >= 1)")
        if beta.ndim != 1 or beta.size == 0:
            raise ConfigError("beta must be a non-empty vector")
        if np.any(alpha <= 0) or np.any(beta <= 0):
            raise ConfigError("hyperparameters must be strictly positive")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def symmetric(cls, K: int, V: int, alpha_sum: float = DEFAULT_ALPHA_SUM, beta: float = DEFAULT_BETA):
        if K < 1:
            raise ConfigError("K must be >= 1")
        return cls(alpha=np.full(K, alpha_sum / K), beta=np.full(V, float(beta)))

    @property
    def K(self) -> int:
        return self.alpha.size

    @property
    def V(self) -> int:
        return self.beta.size

    @property
    def alpha_sum(self) -> float:
        return float(self.alpha.sum())

    @property
    def beta_sum(self) -> float:
        return float(self.beta.sum())


@dataclass(frozen=True)
class ChainConfig:
    iterations: int = 50_000
    burn_in: int = 30_000
    lag: int = 5_000
    chains: int = 4
    seed: int = 0
    loglik_every: int = 10
    store_theta: bool = False

    def __post_init__(self):
        if self.iterations < 1 or self.burn_in < 0:
            raise ConfigError("iterations must be >= 1 and burn_in >= 0")
        if self.burn_in >= self.iterations:
            raise ConfigError("burn_in must be smaller than iterations")
        if self.lag < 1:
            raise ConfigError("lag must be >= 1")
        if (self.iterations - self.burn_in) // self.lag < 1:
            raise ConfigError("no sample would be recorded after burn-in")
        if self.chains < 1 or self.loglik_every < 1:
            raise ConfigError("chains and loglik_every must be >= 1")

    @property
    def record_iterations(self) -> list[int]:
        return list(range(self.burn_in, self.iterations + 1, self.lag))


@dataclass
class SamplerState:
    """Topic assignments plus the count matrices they imply.

    Counts are stored product-major (``n_wk`` is V x K) for cache-friendly
    sweeps; ``n_kv`` exposes the K x V view.
    """

    words: np.ndarray
    doc_index: np.ndarray
    offsets: np.ndarray
    z: np.ndarray
    n_wk: np.ndarray
    n_dk: np.ndarray
    n_k: np.ndarray
    n_d: np.ndarray
    rng: np.random.Generator
    iteration: int = 0

    @property
    def n_kv(self) -> np.ndarray:
        return self.n_wk.T

    @property
    def K(self) -> int:
        return self.n_k.size

    def recount(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Rebuild (n_wk, n_dk, n_k) from ``z`` alone."""
        return _counts_from_z(self.words, self.doc_index, self.z, self.n_wk.shape[0], self.n_d.size, self.K)

    def check(self) -> None:
        n_wk, n_dk, n_k = self.recount()
        if not (np.array_equal(n_wk, self.n_wk) and np.array_equal(n_dk, self.n_dk) and np.array_equal(n_k, self.n_k)):
            raise StateCorruption("stored counts disagree with a recount from z")


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    phi: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    chain_id: int = 0
    iteration: int = 0
    seed: int = 0
    theta: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.phi.shape[0]


@dataclass
class ChainResult:
    chain_id: int
    samples: list[PosteriorSample] = field(default_factory=list)
    trace: list[tuple[int, float]] = field(default_factory=list)


def _counts_from_z(words, doc_index, z, V, D, K):
    n_wk = np.zeros((V, K), dtype=np.int64)
    n_dk = np.zeros((D, K), dtype=np.int64)
    np.add.at(n_wk, (words, z), 1)
    np.add.at(n_dk, (doc_index, z), 1)
    return n_wk, n_dk, n_dk.sum(axis=0)


def chain_seed(seed: int, chain_id: int) -> int:
    """Per-chain seed derived from (seed, chain_id) through a seed sequence."""
    return int(np.random.SeedSequence([seed, chain_id]).generate_state(1, np.uint64)[0])


def init_state(corpus: Corpus, hp: HyperParams, seed: int) -> SamplerState:
    """Uniformly random topic assignments with consistent counts."""
    if hp.K < 1:
        raise ConfigError("K must be >= 1")
    if hp.V != corpus.V:
        raise ConfigError(f"beta has length {hp.V} but the corpus has V={corpus.V}")
    rng = make_rng(seed)
    words = corpus.words
    doc_index = corpus.doc_index
    z = rng.integers(0, hp.K, size=words.size).astype(np.int64)
    n_wk, n_dk, n_k = _counts_from_z(words, doc_index, z, corpus.V, corpus.D, hp.K)
    return SamplerState(
        words=words, doc_index=doc_index, offsets=corpus.offsets, z=z,
        n_wk=n_wk, n_dk=n_dk, n_k=n_k, n_d=corpus.doc_lengths.copy(), rng=rng,
    )


def full_conditional(state: SamplerState, hp: HyperParams, d: int, i: int) -> np.ndarray:
    """Unnormalized topic weights for token ``i`` of document ``d``.

    The token's own assignment must already be removed from the counts.
    The per-document denominator is constant in k and left out.
    """
    t = state.offsets[d] + i
    if not state.offsets[d] <= t < state.offsets[d + 1]:
        raise IndexError(f"document {d} has no token {i}")
    w = state.words[t]
    n_w, n_k, n_d = state.n_wk[w], state.n_k, state.n_dk[d]
    if (n_w < 0).any() or (n_k < 0).any() or (n_d < 0).any():
        raise StateCorruption(f"negative count while sampling token ({d}, {i})")
    return (n_w + hp.beta[w]) / (n_k + hp.beta_sum) * (n_d + hp.alpha)


@njit(cache=True)
def _sweeps(n_sweeps, words, doc_index, z, n_wk, n_dk, n_k, alpha, beta, beta_sum, uniforms):
    K = n_k.shape[0]
    N = words.shape[0]
    cum = np.empty(K)
    for s in range(n_sweeps):
        base = s * N
        for t in range(N):
            w = words[t]
            d = doc_index[t]
            k = z[t]
            n_wk[w, k] -= 1
            n_dk[d, k] -= 1
            n_k[k] -= 1
            if n_wk[w, k] < 0 or n_dk[d, k] < 0 or n_k[k] < 0:
                return t
            total = 0.0
            bw = beta[w]
            for j in range(K):
                total += (n_wk[w, j] + bw) / (n_k[j] + beta_sum) * (n_dk[d, j] + alpha[j])
                cum[j] = total
            u = uniforms[base + t] * total
            k = 0
            while k < K - 1 and cum[k] <= u:
                k += 1
            z[t] = k
            n_wk[w, k] += 1
            n_dk[d, k] += 1
            n_k[k] += 1
    return -1


def run_sweeps(state: SamplerState, hp: HyperParams, n_sweeps: int = 1) -> SamplerState:
    """Advance the chain by ``n_sweeps`` full passes over the tokens."""
    N = state.words.size
    done = 0
    per_block = max(1, _MAX_UNIFORM_BLOCK // max(N, 1))
    while done < n_sweeps:
        n = min(per_block, n_sweeps - done)
        uniforms = state.rng.random(n * N)
        bad = _sweeps(n, state.words, state.doc_index, state.z, state.n_wk, state.n_dk,
                      state.n_k, hp.alpha, hp.beta, hp.beta_sum, uniforms)
        if bad >= 0:
            raise StateCorruption(f"negative count at token {bad}")
        done += n
    state.iteration += n_sweeps
    return state


def gibbs_sweep(state: SamplerState, hp: HyperParams) -> SamplerState:
    """One sweep in document-then-position order; updates ``state`` in place."""
    return run_sweeps(state, hp, 1)


def estimate_phi(state: SamplerState, hp: HyperParams) -> np.ndarray:
    return (state.n_kv + hp.beta) / (state.n_k[:, None] + hp.beta_sum)


def estimate_theta(state: SamplerState, hp: HyperParams) -> np.ndarray:
    return (state.n_dk + hp.alpha) / (state.n_d[:, None] + hp.alpha_sum)


def collapsed_loglik(state: SamplerState, hp: HyperParams) -> float:
    """log p(w, z | alpha, beta) with phi and theta integrated out.

    Sums run per topic first and are combined with ``math.fsum`` so the value
    is exactly invariant to relabelling topics.
    """
    beta, alpha = hp.beta, hp.alpha
    # Each term is lgamma(count + prior) - lgamma(prior), so empty cells add exactly 0.
    per_topic = (gammaln(state.n_wk + beta[:, None]) - gammaln(beta)[:, None]).sum(axis=0)
    per_topic -= gammaln(state.n_k + hp.beta_sum) - gammaln(hp.beta_sum)
    per_topic += (gammaln(state.n_dk + alpha) - gammaln(alpha)).sum(axis=0)
    topic_part = math.fsum(per_topic)
    doc_part = -math.fsum(gammaln(state.n_d + hp.alpha_sum) - gammaln(hp.alpha_sum))
    return topic_part + doc_part


def _snapshot(state, hp, chain_id, seed, store_theta) -> PosteriorSample:
    return PosteriorSample(
        phi=estimate_phi(state, hp),
        theta=estimate_theta(state, hp) if store_theta else None,
        alpha=hp.alpha.copy(),
        beta=hp.beta.copy(),
        chain_id=chain_id,
        iteration=state.iteration,
        seed=seed,
    )


def run_chain(corpus: Corpus, hp: HyperParams, cfg: ChainConfig, chain_id: int = 0) -> ChainResult:
    """Run one chain, recording samples at burn_in, burn_in + lag, ..., iterations.

    The log-likelihood trace is taken every ``loglik_every`` iterations,
    starting from the initial state (iteration 0).
    """
    seed = chain_seed(cfg.seed, chain_id)
    state = init_state(corpus, hp, seed)
    result = ChainResult(chain_id=chain_id)
    record_at = set(cfg.record_iterations)

    def observe():
        it = state.iteration
        if it % cfg.loglik_every == 0:
            result.trace.append((it, collapsed_loglik(state, hp)))
        if it in record_at:
            result.samples.append(_snapshot(state, hp, chain_id, cfg.seed, cfg.store_theta))

    observe()
    stops = sorted(record_at | set(range(0, cfg.iterations + 1, cfg.loglik_every)) | {cfg.iterations})
    for stop in stops:
        if stop <= state.iteration:
            continue
        run_sweeps(state, hp, stop - state.iteration)
        observe()
    log.debug("chain %d finished: %d samples, %d trace points", chain_id, len(result.samples), len(result.trace))
    return result


def _run_chain_star(args):
    return run_chain(*args)


def run_chains(corpus: Corpus, hp: HyperParams, cfg: ChainConfig, jobs: int = 1,
               first_chain: int = 0) -> list[ChainResult]:
    """Run ``cfg.chains`` independent chains with ids first_chain, first_chain+1, ..."""
    tasks = [(corpus, hp, cfg, first_chain + c) for c in range(cfg.chains)]
    if jobs <= 1 or cfg.chains == 1:
        return [run_chain(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, cfg.chains)) as pool:
        return list(pool.map(_run_chain_star, tasks))


def collect_samples(results: list[ChainResult]) -> list[PosteriorSample]:
    return [s for r in results for s in r.samples]
