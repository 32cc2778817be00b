"""Posterior summary of topic draws.

Topics from many posterior samples are pooled and grouped by average-linkage
agglomerative clustering on cosine distance. In the default constrained mode
two clusters may only merge when they share no source sample, so a cluster's
size counts how many draws contain that topic (its recurrence). Clusters are
then filtered by recurrence and evaluated as a topic model of their own.
"""

from __future__ import annotations

import heapq
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import CoocStats, Corpus
from .errors import EmptyModel, Undefined, ValidationError
from .gibbs import DEFAULT_ALPHA_SUM, PosteriorSample
from .heldout import HeldoutConfig, perplexity
from .metrics import (
    TOP_N,
    TopicRef,
    cosine_similarity_matrix,
    credibility_all,
    distinctiveness_all,
    max_similarity,
    mean_se,
    topic_coherence,
)

log = logging.getLogger(__name__)

CONSTRAINED = "constrained"
WITHIN_SAMPLE = "within-sample"
DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(12))
DEFAULT_MIN_SIZES = (1, 5, 10, 20)
METRICS = ("perplexity", "npmi", "cd_min", "credibility")


@dataclass(frozen=True, eq=False)
class TopicPool:
    vectors: np.ndarray
    refs: tuple[TopicRef, ...]
    S: int
    K_per_sample: tuple[int, ...]
    provenance: tuple[dict, ...] = ()

    @property
    def size(self) -> int:
        return len(self.refs)

    @property
    def sample_of(self) -> np.ndarray:
        return np.fromiter((r.sample_id for r in self.refs), dtype=np.int64, count=len(self.refs))

    def sample_topics(self, s: int) -> np.ndarray:
        return self.vectors[self.sample_of == s]

    def origin(self, i: int) -> dict:
        """Chain, iteration and topic index of pool entry ``i``."""
        ref = self.refs[i]
        info = dict(self.provenance[ref.sample_id]) if self.provenance else {}
        info.update(sample_id=ref.sample_id, topic_index=ref.topic_index)
        return info


@dataclass(frozen=True, eq=False)
class TopicCluster:
    members: tuple[TopicRef, ...]
    indices: tuple[int, ...]
    centroid: np.ndarray

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    distance: float
    new_id: int


@dataclass(frozen=True, eq=False)
class ClusteredModel:
    clusters: tuple[TopicCluster, ...]
    threshold: float
    min_size: int
    mode: str = CONSTRAINED
    S: int = 0

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def centroids(self) -> np.ndarray:
        if not self.clusters:
            return np.zeros((0, 0))
        return np.vstack([c.centroid for c in self.clusters])

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.clusters], dtype=np.int64)


def pool_topics(samples: Sequence[PosteriorSample]) -> TopicPool:
    """Stack every topic of every sample, remembering where it came from."""
    if not samples:
        raise ValidationError("need at least one posterior sample")
    V = samples[0].phi.shape[1]
    if any(s.phi.shape[1] != V for s in samples):
        raise ValidationError("samples disagree on vocabulary size")
    vectors = np.vstack([s.phi for s in samples]).astype(np.float64)
    vectors /= vectors.sum(axis=1, keepdims=True)
    refs = tuple(TopicRef(s, k) for s, smp in enumerate(samples) for k in range(smp.K))
    provenance = tuple({"chain_id": s.chain_id, "iteration": s.iteration} for s in samples)
    return TopicPool(vectors=vectors, refs=refs, S=len(samples),
                     K_per_sample=tuple(s.K for s in samples), provenance=provenance)


def pool_from_matrices(matrices: Sequence) -> TopicPool:
    """Pool built directly from topic matrices (one per sample)."""
    samples = [PosteriorSample(phi=np.asarray(m, dtype=np.float64), alpha=np.ones(len(m)), beta=np.ones(1),
                               chain_id=0, iteration=i) for i, m in enumerate(matrices)]
    return pool_topics(samples)


def clustered_topic(member_vectors) -> np.ndarray:
    """Arithmetic mean of the member topic distributions."""
    m = np.asarray(member_vectors, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValidationError("a cluster needs at least one member")
    return m.mean(axis=0)


def agglomerate(pool: TopicPool, threshold: float, allow_within_sample: bool = False
                ) -> tuple[list[TopicCluster], list[Merge]]:
    """Average-linkage AHC that only merges pairs closer than ``threshold``.

    Unless ``allow_within_sample`` is set, clusters that share a source
    sample never merge. Linkage distances are the mean pairwise cosine
    distance between members, maintained with the Lance-Williams update.
    Candidate pairs live in a heap keyed by (distance, id, id) so ties go to
    the lowest cluster-id pair; merged clusters get fresh ids.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("threshold must lie in [0, 1]")
    P = pool.size
    dist = 1.0 - cosine_similarity_matrix(pool.vectors)
    np.fill_diagonal(dist, 0.0)
    sample_of = pool.sample_of
    masks = np.zeros((P, max(pool.S, 1)), dtype=bool)
    masks[np.arange(P), sample_of] = True

    alive = np.ones(P, dtype=bool)
    slot_id = np.arange(P, dtype=np.int64)
    sizes = np.ones(P, dtype=np.float64)
    members: list[list[int]] = [[i] for i in range(P)]

    def eligible(slot: int, others: np.ndarray) -> np.ndarray:
        ok = alive[others] & (dist[slot, others] < threshold)
        if not allow_within_sample:
            ok &= ~(masks[others] & masks[slot]).any(axis=1)
        return ok

    heap = []
    for i in range(P - 1):
        others = np.arange(i + 1, P)
        for j in others[eligible(i, others)]:
            heap.append((float(dist[i, j]), i, int(j), i, int(j)))
    heapq.heapify(heap)

    merges: list[Merge] = []
    next_id = P
    while heap:
        d, a_id, b_id, sa, sb = heapq.heappop(heap)
        if not (alive[sa] and alive[sb] and slot_id[sa] == a_id and slot_id[sb] == b_id):
            continue
        assert d < threshold, "merge above threshold"
        if not allow_within_sample:
            assert not (masks[sa] & masks[sb]).any(), "merge of clusters sharing a sample"
        na, nb = sizes[sa], sizes[sb]
        row = (na * dist[sa] + nb * dist[sb]) / (na + nb)
        dist[sa, :] = row
        dist[:, sa] = row
        dist[sa, sa] = 0.0
        alive[sb] = False
        sizes[sa] = na + nb
        masks[sa] |= masks[sb]
        members[sa].extend(members[sb])
        members[sb] = []
        slot_id[sa] = next_id
        merges.append(Merge(left=int(a_id), right=int(b_id), distance=d, new_id=next_id))
        log.debug("merge %d + %d at %.6f -> %d", a_id, b_id, d, next_id)
        next_id += 1
        others = np.flatnonzero(alive)
        others = others[others != sa]
        new = int(slot_id[sa])
        for x in others[eligible(sa, others)]:
            xid = int(slot_id[x])
            if xid < new:
                heapq.heappush(heap, (float(row[x]), xid, new, int(x), int(sa)))
            else:
                heapq.heappush(heap, (float(row[x]), new, xid, int(sa), int(x)))

    groups = sorted(sorted(m) for m in members if m)
    clusters = [
        TopicCluster(
            members=tuple(pool.refs[i] for i in g),
            indices=tuple(g),
            centroid=clustered_topic(pool.vectors[g]),
        )
        for g in groups
    ]
    return clusters, merges


def constrained_ahc(pool: TopicPool, threshold: float, allow_within_sample: bool = False) -> list[TopicCluster]:
    return agglomerate(pool, threshold, allow_within_sample)[0]


def filter_clusters(clusters: Sequence[TopicCluster], min_size: int, *, threshold: float = float("nan"),
                    allow_within_sample: bool = False, S: int = 0) -> ClusteredModel:
    """Keep clusters whose recurrence is at least ``min_size``.

    An empty result is returned as an empty model (and logged), not raised.
    """
    if min_size < 1:
        raise ValidationError("min_size must be >= 1")
    kept = tuple(c for c in clusters if c.size >= min_size)
    if not kept:
        log.warning("no cluster reaches min_size=%d at threshold %s", min_size, threshold)
    return ClusteredModel(clusters=kept, threshold=threshold, min_size=min_size,
                          mode=WITHIN_SAMPLE if allow_within_sample else CONSTRAINED, S=S)


@dataclass(eq=False)
class EvalReport:
    """Perplexity plus per-topic coherence, distinctiveness and credibility.

    ``perplexity`` holds one value per evaluated topic set (one per sample for
    raw LDA draws, a single value for a clustered model). ``topic_sample``
    maps each per-topic entry to its topic set so standard errors can be
    taken over topics or over sets.
    """

    label: str
    perplexity: np.ndarray
    perplexity_se: np.ndarray
    npmi: np.ndarray
    cd_min: np.ndarray
    credibility: np.ndarray
    topic_sample: np.ndarray
    n_topics: float = 0.0

    def metric(self, name: str) -> tuple[float, float]:
        """(mean, standard error) for one of ``METRICS``."""
        if name == "perplexity":
            if self.perplexity.size == 1:
                return float(self.perplexity[0]), float(self.perplexity_se[0])
            return mean_se(self.perplexity)
        return mean_se(getattr(self, name))

    def metric_over_samples(self, name: str) -> tuple[float, float]:
        if name == "perplexity":
            return mean_se(self.perplexity)
        values = getattr(self, name)
        per = [np.nanmean(values[self.topic_sample == s]) if np.any(~np.isnan(values[self.topic_sample == s]))
               else np.nan for s in np.unique(self.topic_sample)]
        return mean_se(per)

    def summary(self) -> dict:
        out = {"label": self.label, "n_topics": self.n_topics}
        for name in METRICS:
            mean, se = self.metric(name)
            _, se_s = self.metric_over_samples(name)
            out[name] = {"mean": mean, "se": se, "se_samples": se_s}
        return out


def evaluate_model(model: ClusteredModel, test: Corpus, stats: CoocStats, replication: ClusteredModel | None,
                   alpha_sum: float = DEFAULT_ALPHA_SUM, heldout: HeldoutConfig | None = None,
                   top_n: int = TOP_N, label: str = "") -> EvalReport:
    """Evaluate clustered topics as a model with a symmetric prior of total ``alpha_sum``.

    Credibility of a clustered topic is its best cosine match among the
    centroids of an independent replication clustering.
    """
    if model.n_clusters == 0:
        raise EmptyModel("cannot evaluate a model without clusters")
    heldout = heldout or HeldoutConfig()
    phi = model.centroids
    phi = phi / phi.sum(axis=1, keepdims=True)
    K = phi.shape[0]
    result = perplexity(test, phi, np.full(K, alpha_sum / K), heldout)
    npmi = np.array([topic_coherence(row, stats, top_n) for row in phi])
    try:
        cd = distinctiveness_all(phi)
    except Undefined:
        cd = np.full(K, np.nan)
    if replication is not None and replication.n_clusters > 0:
        cred = max_similarity(phi, replication.centroids)
    else:
        cred = np.full(K, np.nan)
    return EvalReport(
        label=label or f"{model.mode}@{model.threshold:g}/min{model.min_size}",
        perplexity=np.array([result.perplexity]),
        perplexity_se=np.array([result.stderr]),
        npmi=npmi, cd_min=cd, credibility=cred,
        topic_sample=np.zeros(K, dtype=np.int64), n_topics=float(K),
    )


def evaluate_samples(samples: Sequence[PosteriorSample], test: Corpus, stats: CoocStats,
                     heldout: HeldoutConfig | None = None, top_n: int = TOP_N, label: str = "LDA") -> EvalReport:
    """Evaluate raw posterior draws, each with its own alpha."""
    heldout = heldout or HeldoutConfig()
    perp, perp_se, npmi, cd, owner = [], [], [], [], []
    for s, smp in enumerate(samples):
        r = perplexity(test, smp.phi, smp.alpha, heldout)
        perp.append(r.perplexity)
        perp_se.append(r.stderr)
        npmi.extend(topic_coherence(row, stats, top_n) for row in smp.phi)
        cd.extend(distinctiveness_all(smp.phi) if smp.K > 1 else [np.nan] * smp.K)
        owner.extend([s] * smp.K)
    if len(samples) > 1:
        cred = np.concatenate(credibility_all([s.phi for s in samples]))
    else:
        cred = np.full(len(owner), np.nan)
    return EvalReport(
        label=label, perplexity=np.array(perp), perplexity_se=np.array(perp_se),
        npmi=np.array(npmi), cd_min=np.array(cd, dtype=np.float64), credibility=cred,
        topic_sample=np.array(owner, dtype=np.int64),
        n_topics=float(np.mean([s.K for s in samples])),
    )


@dataclass
class SweepCell:
    threshold: float
    min_size: int
    n_clusters: int
    report: EvalReport | None


@dataclass
class SweepReport:
    thresholds: list[float]
    min_sizes: list[int]
    cells: list[SweepCell] = field(default_factory=list)
    mode: str = CONSTRAINED

    def cell(self, threshold: float, min_size: int) -> SweepCell:
        for c in self.cells:
            if math.isclose(c.threshold, threshold, abs_tol=1e-12) and c.min_size == min_size:
                return c
        raise KeyError((threshold, min_size))

    def rows(self) -> list[tuple[float, int, str, float, float, int]]:
        """Long format: (threshold, min_size, metric, mean, stderr, n_clusters)."""
        out = []
        for c in self.cells:
            for name in METRICS:
                mean, se = c.report.metric(name) if c.report is not None else (float("nan"), float("nan"))
                out.append((c.threshold, c.min_size, name, mean, se, c.n_clusters))
        return out


def _sweep_threshold(args):
    (pool, threshold, min_sizes, test, stats, replication_pool, alpha_sum,
     heldout, allow_within_sample, top_n) = args
    clusters = constrained_ahc(pool, threshold, allow_within_sample)
    rep_clusters = (constrained_ahc(replication_pool, threshold, allow_within_sample)
                    if replication_pool is not None else None)
    cells = []
    for m in min_sizes:
        model = filter_clusters(clusters, m, threshold=threshold, allow_within_sample=allow_within_sample, S=pool.S)
        rep = None
        if rep_clusters is not None:
            rep = filter_clusters(rep_clusters, m, threshold=threshold,
                                  allow_within_sample=allow_within_sample, S=replication_pool.S)
        report = None
        if model.n_clusters and test is not None:
            report = evaluate_model(model, test, stats, rep, alpha_sum, heldout, top_n)
        cells.append(SweepCell(threshold=threshold, min_size=m, n_clusters=model.n_clusters, report=report))
    return cells


def sweep(pool: TopicPool, thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
          min_sizes: Sequence[int] = DEFAULT_MIN_SIZES, test: Corpus | None = None,
          stats: CoocStats | None = None, replication_pool: TopicPool | None = None,
          alpha_sum: float = DEFAULT_ALPHA_SUM, heldout: HeldoutConfig | None = None,
          allow_within_sample: bool = False, top_n: int = TOP_N, jobs: int = 1) -> SweepReport:
    """Cluster once per threshold, then filter and evaluate at every min_size.

    The replication pool is clustered with the same settings and supplies the
    reference centroids for credibility. Without a test corpus only cluster
    counts are reported.
    """
    if not thresholds or not min_sizes:
        raise ValidationError("threshold and min_size grids must be non-empty")
    if test is not None and stats is None:
        raise ValidationError("evaluation needs co-occurrence stats")
    thresholds = sorted(float(t) for t in thresholds)
    min_sizes = sorted(int(m) for m in min_sizes)
    heldout = heldout or HeldoutConfig()
    tasks = [(pool, t, min_sizes, test, stats, replication_pool, alpha_sum, heldout, allow_within_sample, top_n)
             for t in thresholds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            per_threshold = list(ex.map(_sweep_threshold, tasks))
    else:
        per_threshold = [_sweep_threshold(t) for t in tasks]
    report = SweepReport(thresholds=thresholds, min_sizes=min_sizes,
                         mode=WITHIN_SAMPLE if allow_within_sample else CONSTRAINED)
    for cells in per_threshold:
        report.cells.extend(cells)
    return report
