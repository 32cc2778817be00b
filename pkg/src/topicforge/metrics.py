"""Topic quality metrics: NPMI coherence, distinctiveness, credibility,
cosine geometry, greedy topic alignment and the R-hat diagnostic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import CoocStats
from .errors import DegenerateTopic, DegenerateTrace, DegenerateVector, Undefined, UnseenProduct, ValidationError

TOP_N = 15
NPMI_EPS = 1e-12

# Interpretation bands from expert ratings of topic quality.
NPMI_INCOHERENT = 0.0
NPMI_HIGHLY_COHERENT = 0.5
CD_HIGHLY_SIMILAR = 0.1
CD_HIGHLY_DISSIMILAR = 0.5
CREDIBILITY_LOW = 0.5
RHAT_ACCEPTABLE = 1.1


@dataclass(frozen=True)
class TopicRef:
    sample_id: int
    topic_index: int


@dataclass(frozen=True)
class TopicQuality:
    npmi: float
    cd_min: float | None
    credibility: float | None


def _as_vector(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1:
        raise ValidationError("expected a 1-d vector")
    return u


def cosine_similarity(u, v) -> float:
    u, v = _as_vector(u), _as_vector(v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateVector("cosine similarity of a zero vector")
    return float(min(1.0, max(0.0, np.dot(u / nu, v / nv))))


def cosine_distance(u, v) -> float:
    return 1.0 - cosine_similarity(u, v)


def _unit_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateVector("zero row in topic matrix")
    return a / norms


def cosine_similarity_matrix(a, b=None) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``, clipped to [0, 1]."""
    ua = _unit_rows(a)
    ub = ua if b is None else _unit_rows(b)
    sim = np.clip(ua @ ub.T, 0.0, 1.0)
    if b is None:
        np.fill_diagonal(sim, 1.0)
    return sim


def npmi_pair(i: int, j: int, stats: CoocStats, eps: float = NPMI_EPS) -> float:
    """Normalized PMI of products ``i`` and ``j`` from document frequencies.

    A pair that never co-occurs gets its joint probability floored at ``eps``
    so the score tends to -1 instead of diverging; the result is clamped to
    [-1, 1].
    """
    if stats.df[i] <= 0 or stats.df[j] <= 0:
        raise UnseenProduct(f"product {i if stats.df[i] <= 0 else j} never occurs in the reference corpus")
    p_i = stats.df[i] / stats.D
    p_j = stats.df[j] / stats.D
    p_ij = max(stats.pair(i, j) / stats.D, eps)
    if p_ij >= 1.0:
        return 1.0
    pmi = math.log(p_ij) - math.log(p_i) - math.log(p_j)
    return max(-1.0, min(1.0, pmi / -math.log(p_ij)))


def top_products(topic, top_n: int = TOP_N) -> np.ndarray:
    """Indices of the ``top_n`` most probable products, ties broken by lower id."""
    topic = _as_vector(topic)
    order = np.lexsort((np.arange(topic.size), -topic))
    return order[:top_n]


def topic_coherence(topic, stats: CoocStats, top_n: int = TOP_N, eps: float = NPMI_EPS) -> float:
    """Mean NPMI over all unordered pairs of the topic's top products."""
    topic = _as_vector(topic)
    top = [int(v) for v in top_products(topic, top_n) if topic[v] > 0]
    if len(top) < 2:
        raise DegenerateTopic("need at least two products with positive probability")
    scores = [npmi_pair(a, b, stats, eps) for k, a in enumerate(top) for b in top[k + 1:]]
    return math.fsum(scores) / len(scores)


def distinctiveness_all(sample) -> np.ndarray:
    """Per-topic minimum cosine distance to the other topics of the same sample."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape[0] < 2:
        raise Undefined("distinctiveness needs at least two topics")
    dist = 1.0 - cosine_similarity_matrix(sample)
    np.fill_diagonal(dist, np.inf)
    return dist.min(axis=1)


def topic_distinctiveness(i: int, sample) -> float:
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape[0] < 2:
        raise Undefined("distinctiveness needs at least two topics")
    return min(cosine_distance(sample[i], sample[j]) for j in range(sample.shape[0]) if j != i)


def topic_credibility(t: TopicRef, samples: Sequence) -> float:
    """Average over the other samples of the best cosine match to topic ``t``."""
    if len(samples) < 2:
        raise Undefined("credibility needs at least two samples")
    topic = np.asarray(samples[t.sample_id], dtype=np.float64)[t.topic_index]
    best = [
        cosine_similarity_matrix(topic[None, :], other)[0].max()
        for s, other in enumerate(samples) if s != t.sample_id
    ]
    return math.fsum(best) / len(best)


def credibility_all(samples: Sequence) -> list[np.ndarray]:
    """Credibility of every topic of every sample, one array per sample."""
    S = len(samples)
    if S < 2:
        raise Undefined("credibility needs at least two samples")
    units = [_unit_rows(s) for s in samples]
    out = []
    for t in range(S):
        best = np.zeros(units[t].shape[0])
        for s in range(S):
            if s != t:
                best += np.clip(units[t] @ units[s].T, 0.0, 1.0).max(axis=1)
        out.append(best / (S - 1))
    return out


def max_similarity(a, b) -> np.ndarray:
    """For each row of ``a``, its best cosine similarity among the rows of ``b``."""
    return cosine_similarity_matrix(a, b).max(axis=1)


def greedy_match(sim) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching on a similarity matrix.

    The globally largest remaining entry is taken first; ties go to the
    lowest (row, column) pair. Stops once either side is exhausted.
    """
    sim = np.array(sim, dtype=np.float64)
    rows, cols = sim.shape
    work = sim.copy()
    out = []
    for _ in range(min(rows, cols)):
        flat = int(np.argmax(work))
        i, j = divmod(flat, cols)
        out.append((i, j, float(sim[i, j])))
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    return out


def greedy_align(a, b) -> list[tuple[int, int, float]]:
    return greedy_match(cosine_similarity_matrix(a, b))


def rhat(traces) -> float:
    """Gelman-Rubin potential scale reduction factor for m chains of length n."""
    x = np.asarray(traces, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValidationError("rhat needs at least 2 chains of length >= 2")
    n = x.shape[1]
    # Centre first so large offsets do not cost precision.
    x = x - x.mean()
    w = x.var(axis=1, ddof=1).mean()
    if w == 0:
        raise DegenerateTrace("within-chain variance is zero")
    b_over_n = x.mean(axis=1).var(ddof=1)
    return math.sqrt(((n - 1) / n * w + b_over_n) / w)


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error of the mean; NaNs are ignored."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float("nan")
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def topic_qualities(sample, stats: CoocStats, credibility=None, top_n: int = TOP_N) -> list[TopicQuality]:
    """Coherence and distinctiveness for each topic of one sample.

    ``credibility`` may carry precomputed per-topic values (or be None).
    """
    sample = np.asarray(sample, dtype=np.float64)
    K = sample.shape[0]
    cd = distinctiveness_all(sample) if K > 1 else [None] * K
    cred = [None] * K if credibility is None else credibility
    return [
        TopicQuality(
            npmi=topic_coherence(sample[k], stats, top_n),
            cd_min=None if cd[k] is None else float(cd[k]),
            credibility=None if cred[k] is None else float(cred[k]),
        )
        for k in range(K)
    ]
