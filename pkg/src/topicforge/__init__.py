"""topicforge: market-basket topic models with posterior summarization.

Collapsed Gibbs LDA over basket corpora, left-to-right held-out
perplexity, NPMI / distinctiveness / credibility metrics and a
sample-constrained clustering that pools topics across posterior draws.
"""

__version__ = "0.1.0"

from .corpus import (  # noqa: E402
    CoocStats,
    Corpus,
    Vocabulary,
    build_vocabulary,
    cooccurrence_stats,
    generate_synthetic,
    ingest_baskets,
    make_rng,
    split_corpus,
)
from .gibbs import ChainConfig, HyperParams, PosteriorSample, run_chain, run_chains  # noqa: E402
from .heldout import HeldoutConfig, left_to_right_doc, perplexity  # noqa: E402
from .summary import ClusteredModel, constrained_ahc, evaluate_model, pool_topics, sweep  # noqa: E402

__all__ = [
    "ChainConfig", "ClusteredModel", "CoocStats", "Corpus", "HeldoutConfig", "HyperParams",
    "PosteriorSample", "Vocabulary", "build_vocabulary", "constrained_ahc", "cooccurrence_stats",
    "evaluate_model", "generate_synthetic", "ingest_baskets", "left_to_right_doc", "make_rng",
    "perplexity", "pool_topics", "run_chain", "run_chains", "split_corpus", "sweep",
]
