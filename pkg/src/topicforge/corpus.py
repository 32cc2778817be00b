"""Transaction corpora: vocabulary selection, basket ingestion, splitting,
co-occurrence counts and synthetic corpora with planted topics."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptyCorpus, EmptyInput, RecordError, SpecError, SplitError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_MIN_BASKET_SIZE = 3
DEFAULT_VOCAB_SIZE = 10_000


def make_rng(*seed_parts: int) -> np.random.Generator:
    """Counter-based (Philox) generator seeded from one or more integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(seed_parts))))


@dataclass(frozen=True, eq=False)
class Vocabulary:
    labels: tuple[str, ...]
    frequency: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.frequency, other.frequency)

    @cached_property
    def index(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("vocabulary labels must be unique")
        if len(self.frequency) != len(self.labels):
            raise ValidationError("frequency length must match labels")


@dataclass(frozen=True)
class IngestSummary:
    kept: int = 0
    dropped_small: int = 0
    tokens_dropped_oov: int = 0


@dataclass(frozen=True)
class Corpus:
    """De-duplicated baskets of integer product ids.

    ``docs`` is a tuple of tuples; the flattened ``words`` / ``offsets``
    arrays are what the samplers consume.
    """

    docs: tuple[tuple[int, ...], ...]
    V: int
    doc_ids: tuple[str, ...] = ()
    vocab: Vocabulary | None = None
    min_basket_size: int = DEFAULT_MIN_BASKET_SIZE
    summary: IngestSummary = field(default_factory=IngestSummary)

    def __post_init__(self):
        if not self.doc_ids:
            object.__setattr__(self, "doc_ids", tuple(str(i) for i in range(len(self.docs))))
        if len(self.doc_ids) != len(self.docs):
            raise ValidationError("doc_ids must match docs")
        if self.vocab is not None and len(self.vocab) != self.V:
            raise ValidationError("vocabulary size does not match V")
        for d, doc in enumerate(self.docs):
            if len(doc) < self.min_basket_size:
                raise ValidationError(f"doc {d} shorter than min_basket_size={self.min_basket_size}")
            if len(set(doc)) != len(doc):
                raise ValidationError(f"doc {d} repeats a product id")
            if doc and (min(doc) < 0 or max(doc) >= self.V):
                raise ValidationError(f"doc {d} has ids outside [0, {self.V})")

    @property
    def D(self) -> int:
        return len(self.docs)

    @cached_property
    def doc_lengths(self) -> np.ndarray:
        return np.fromiter((len(d) for d in self.docs), dtype=np.int64, count=len(self.docs))

    @property
    def N(self) -> int:
        return int(self.doc_lengths.sum())

    @cached_property
    def offsets(self) -> np.ndarray:
        off = np.zeros(self.D + 1, dtype=np.int64)
        np.cumsum(self.doc_lengths, out=off[1:])
        return off

    @cached_property
    def words(self) -> np.ndarray:
        if self.N == 0:
            return np.zeros(0, dtype=np.int64)
        return np.fromiter((w for doc in self.docs for w in doc), dtype=np.int64, count=self.N)

    @cached_property
    def doc_index(self) -> np.ndarray:
        """Document index of every token in ``words``."""
        return np.repeat(np.arange(self.D, dtype=np.int64), self.doc_lengths)

    def labelled_docs(self) -> list[list[str]]:
        if self.vocab is None:
            raise ValidationError("corpus has no vocabulary")
        labels = self.vocab.labels
        return [[labels[w] for w in doc] for doc in self.docs]

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus(
            docs=tuple(self.docs[i] for i in indices),
            V=self.V,
            doc_ids=tuple(self.doc_ids[i] for i in indices),
            vocab=self.vocab,
            min_basket_size=self.min_basket_size,
        )


def _basket_products(record, line: int) -> tuple[str | None, list[str]]:
    if isinstance(record, Mapping):
        if "products" not in record:
            raise RecordError(line, "missing 'products'")
        products, basket_id = record["products"], record.get("id")
    elif isinstance(record, (list, tuple)):
        products, basket_id = record, None
    else:
        raise RecordError(line, f"expected an object or list, got {type(record).__name__}")
    if not isinstance(products, (list, tuple)) or not all(isinstance(p, str) for p in products):
        raise RecordError(line, "'products' must be a list of strings")
    if basket_id is not None and not isinstance(basket_id, (str, int)):
        raise RecordError(line, "'id' must be a string")
    return (None if basket_id is None else str(basket_id)), list(products)


def build_vocabulary(raw_baskets: Iterable, max_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Keep the ``max_size`` labels with the highest document frequency.

    Ties are broken lexicographically, and ids follow the same order.
    """
    if max_size < 1:
        raise ValidationError("max_size must be >= 1")
    df: Counter[str] = Counter()
    n = 0
    for line, record in enumerate(raw_baskets, start=1):
        _, products = _basket_products(record, line)
        df.update(set(products))
        n += 1
    if n == 0:
        raise EmptyInput("no baskets in input stream")
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    return Vocabulary(
        labels=tuple(label for label, _ in ranked),
        frequency=np.array([c for _, c in ranked], dtype=np.int64),
    )


def ingest_baskets(
    raw_baskets: Iterable,
    vocab: Vocabulary,
    min_basket_size: int = DEFAULT_MIN_BASKET_SIZE,
) -> Corpus:
    """Encode baskets against ``vocab``.

    Out-of-vocabulary labels are dropped, repeated labels within a basket
    collapse to one token (first occurrence order), and baskets left with
    fewer than ``min_basket_size`` tokens are discarded.
    """
    if min_basket_size < 1:
        raise ValidationError("min_basket_size must be >= 1")
    index = vocab.index
    docs, ids = [], []
    dropped_small = oov = 0
    for line, record in enumerate(raw_baskets, start=1):
        basket_id, products = _basket_products(record, line)
        seen: dict[int, None] = {}
        for label in products:
            v = index.get(label)
            if v is None:
                oov += 1
            else:
                seen.setdefault(v)
        if len(seen) < min_basket_size:
            dropped_small += 1
            continue
        docs.append(tuple(seen))
        ids.append(basket_id if basket_id is not None else str(line - 1))
    summary = IngestSummary(kept=len(docs), dropped_small=dropped_small, tokens_dropped_oov=oov)
    log.info("ingest: kept=%d dropped_small=%d oov_tokens=%d", *vars(summary).values())
    if not docs:
        raise EmptyCorpus("every basket was dropped during ingestion")
    return Corpus(
        docs=tuple(docs),
        V=len(vocab),
        doc_ids=tuple(ids),
        vocab=vocab,
        min_basket_size=min_basket_size,
        summary=summary,
    )


def split_corpus(corpus: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Random train/test partition; document order is preserved within each part."""
    if corpus.D < 2:
        raise SplitError("need at least 2 documents to split")
    if not 0.0 < test_fraction < 1.0:
        raise SplitError("test_fraction must lie in (0, 1)")
    n_test = int(round(corpus.D * test_fraction))
    if n_test == 0 or n_test == corpus.D:
        raise SplitError(f"fraction {test_fraction} leaves an empty part for D={corpus.D}")
    perm = make_rng(seed).permutation(corpus.D)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return corpus.subset(train_idx.tolist()), corpus.subset(test_idx.tolist())


@dataclass(frozen=True)
class CoocStats:
    """Document-level (co-)occurrence counts.

    ``pair_df`` is a symmetric sparse V x V matrix whose diagonal holds ``df``.
    """

    D: int
    df: np.ndarray
    pair_df: sp.csr_matrix

    @property
    def V(self) -> int:
        return len(self.df)

    def pair(self, i: int, j: int) -> int:
        return int(self.pair_df[i, j])

    def prob(self, i: int) -> float:
        return self.df[i] / self.D

    def joint_prob(self, i: int, j: int) -> float:
        return self.pair(i, j) / self.D

    def pairs(self):
        """Yield ``(i, j, count)`` for every co-occurring pair with i < j, sorted."""
        upper = sp.triu(self.pair_df, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        for k in order:
            yield int(upper.row[k]), int(upper.col[k]), int(upper.data[k])


def incidence_matrix(corpus: Corpus) -> sp.csr_matrix:
    data = np.ones(corpus.N, dtype=np.int64)
    return sp.csr_matrix((data, corpus.words, corpus.offsets), shape=(corpus.D, corpus.V))


def cooccurrence_stats(corpus: Corpus) -> CoocStats:
    if corpus.D == 0:
        raise EmptyCorpus("cannot count co-occurrences of an empty corpus")
    x = incidence_matrix(corpus)
    pair_df = (x.T @ x).tocsr()
    pair_df.sort_indices()
    df = np.asarray(x.sum(axis=0)).ravel().astype(np.int64)
    return CoocStats(D=corpus.D, df=df, pair_df=pair_df)


@dataclass(frozen=True)
class SyntheticTruth:
    phi_true: np.ndarray
    alpha_true: np.ndarray
    seed: int


def block_topics(K: int, V: int, block: int | None = None, weights: str = "uniform", seed: int = 0) -> np.ndarray:
    """K topics with disjoint contiguous supports of ``block`` words each.

    ``weights="dirichlet"`` draws the in-block weights from Dirichlet(1)
    instead of spreading them uniformly.
    """
    block = V // K if block is None else block
    if block < 1 or K * block > V:
        raise SpecError(f"cannot fit {K} disjoint blocks of {block} words into V={V}")
    rng = make_rng(seed)
    phi = np.zeros((K, V))
    for k in range(K):
        if weights == "uniform":
            w = np.full(block, 1.0 / block)
        elif weights == "dirichlet":
            w = rng.dirichlet(np.ones(block))
        else:
            raise SpecError(f"unknown weights kind {weights!r}")
        phi[k, k * block:(k + 1) * block] = w
    return phi


def _doc_length_sampler(doc_len):
    if isinstance(doc_len, (int, np.integer)):
        lo = hi = int(doc_len)
    else:
        lo, hi = (int(x) for x in doc_len)
    if lo < 1 or hi < lo:
        raise SpecError(f"bad doc_len spec {doc_len!r}")
    return lambda rng: int(rng.integers(lo, hi + 1))


def _normalized_topics(phi_spec, K: int, V: int) -> np.ndarray:
    phi = np.array(phi_spec, dtype=float)
    if phi.shape != (K, V):
        raise SpecError(f"phi_spec has shape {phi.shape}, expected {(K, V)}")
    sums = phi.sum(axis=1, keepdims=True)
    if np.any(phi < 0) or not np.all(np.isfinite(phi)) or np.any(sums <= 0):
        raise SpecError("every phi_spec row must be nonnegative with positive mass")
    return phi / sums


def generate_synthetic(
    K: int,
    V: int,
    D: int,
    doc_len=(5, 12),
    alpha_true=None,
    phi_spec=None,
    seed: int = 0,
    min_basket_size: int = DEFAULT_MIN_BASKET_SIZE,
    max_redraws: int = 1000,
) -> tuple[Corpus, SyntheticTruth]:
    """Sample a corpus from the LDA generative process.

    Each document draws theta ~ Dirichlet(alpha_true), then one topic and one
    product per token. Repeated products are collapsed afterwards, exactly as
    ingestion would; a document that collapses below ``min_basket_size`` is
    redrawn so that every document satisfies the corpus invariant.

    ``phi_spec`` is a K x V nonnegative matrix (rows are normalized) or
    ``None`` for disjoint uniform blocks.
    """
    if min(K, V, D) < 1:
        raise SpecError("K, V and D must all be >= 1")
    if min_basket_size > V:
        raise SpecError(f"min_basket_size={min_basket_size} exceeds V={V}")
    phi = block_topics(K, V) if phi_spec is None else _normalized_topics(phi_spec, K, V)
    alpha = np.full(K, 1.0 / K) if alpha_true is None else np.asarray(alpha_true, dtype=float)
    if alpha.shape != (K,) or np.any(alpha <= 0):
        raise SpecError("alpha_true must be a positive K-vector")
    draw_len = _doc_length_sampler(doc_len)
    rng = make_rng(seed)
    cdf = np.cumsum(phi, axis=1)
    cdf[:, -1] = 1.0
    docs = []
    for _ in range(D):
        for _attempt in range(max_redraws):
            theta = rng.dirichlet(alpha) if K > 1 else np.ones(1)
            n = draw_len(rng)
            z = rng.choice(K, size=n, p=theta)
            u = rng.random(n)
            w = (cdf[z] <= u[:, None]).sum(axis=1)
            doc = tuple(dict.fromkeys(int(v) for v in np.minimum(w, V - 1)))
            if len(doc) >= min_basket_size:
                docs.append(doc)
                break
        else:
            raise SpecError("could not draw a document meeting min_basket_size; widen doc_len or V")
    corpus = Corpus(docs=tuple(docs), V=V, min_basket_size=min_basket_size)
    return corpus, SyntheticTruth(phi_true=phi, alpha_true=alpha, seed=seed)


def noise_documents(
    V: int,
    D: int,
    n_topics: int = 3,
    concentration: float = 1.0,
    doc_len=(5, 12),
    alpha=None,
    seed: int = 0,
    min_basket_size: int = DEFAULT_MIN_BASKET_SIZE,
) -> tuple[Corpus, SyntheticTruth]:
    """Documents from ``n_topics`` random Dirichlet(concentration) topics over the full vocabulary."""
    phi = make_rng(seed, 1).dirichlet(np.full(V, concentration), size=n_topics)
    return generate_synthetic(
        n_topics, V, D, doc_len=doc_len, alpha_true=alpha, phi_spec=phi,
        seed=seed, min_basket_size=min_basket_size,
    )


def concat_corpora(*parts: Corpus) -> Corpus:
    """Append corpora sharing one vocabulary size; doc ids are prefixed by part index."""
    V = parts[0].V
    if any(p.V != V for p in parts):
        raise ValidationError("corpora must share V")
    docs, ids = [], []
    for i, p in enumerate(parts):
        docs.extend(p.docs)
        ids.extend(f"{i}:{d}" for d in p.doc_ids)
    return Corpus(
        docs=tuple(docs), V=V, doc_ids=tuple(ids), vocab=parts[0].vocab,
        min_basket_size=min(p.min_basket_size for p in parts),
    )
