"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also collected into the pytest
terminal summary) before asserting.
"""

import itertools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from topicforge import io
from topicforge.cli import main
from topicforge.corpus import (
    Corpus,
    concat_corpora,
    cooccurrence_stats,
    generate_synthetic,
    make_rng,
    noise_documents,
    split_corpus,
)
from topicforge.gibbs import (
    ChainConfig,
    HyperParams,
    collect_samples,
    estimate_phi,
    estimate_theta,
    init_state,
    run_chains,
    run_sweeps,
)
from topicforge.heldout import HeldoutConfig, exact_doc_loglik, left_to_right_doc
from topicforge.metrics import (
    TopicRef,
    cosine_distance,
    cosine_similarity,
    cosine_similarity_matrix,
    npmi_pair,
    rhat,
    topic_credibility,
)
from topicforge.summary import (
    constrained_ahc,
    evaluate_model,
    evaluate_samples,
    filter_clusters,
    pool_topics,
    sweep,
)


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def planted_corpus(D=2000, seed=11):
    return generate_synthetic(5, 50, D, alpha_true=np.full(5, 0.1), seed=seed)


def test_criterion_1_gibbs_matches_exact_posterior():
    start = time.perf_counter()
    corpus = Corpus(docs=((0, 1), (1, 2), (0, 2)), V=3, min_basket_size=2)
    K, alpha, beta = 2, np.full(2, 0.5), np.full(3, 0.5)
    hp = HyperParams(alpha=alpha, beta=beta)
    words, docs = corpus.words, corpus.doc_index

    # Exact posterior over the 2^6 assignments via the sequential Polya urn.
    exact = np.zeros(64)
    for code, z in enumerate(itertools.product(range(K), repeat=6)):
        z = z[::-1]  # bit t of code is token t
        n_kv, n_dk, p = np.zeros((K, 3)), np.zeros((3, K)), 1.0
        for t, k in enumerate(z):
            d, w = docs[t], words[t]
            p *= (n_dk[d, k] + alpha[k]) / (n_dk[d].sum() + alpha.sum())
            p *= (n_kv[k, w] + beta[w]) / (n_kv[k].sum() + beta.sum())
            n_dk[d, k] += 1
            n_kv[k, w] += 1
        exact[code] = p
    exact /= exact.sum()

    state = init_state(corpus, hp, seed=2024)
    run_sweeps(state, hp, 1000)
    sweeps = 200_000
    weights = 1 << np.arange(6)
    counts = np.zeros(64, dtype=np.int64)
    for _ in range(sweeps):
        run_sweeps(state, hp, 1)
        counts[int(state.z @ weights)] += 1
    tv = 0.5 * np.abs(counts / sweeps - exact).sum()
    elapsed = time.perf_counter() - start
    ok = tv < 0.02 and elapsed < 60
    report(1, ok, f"TV distance {tv:.4f} (< 0.02) over {sweeps} sweeps in {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_2_left_to_right_matches_enumeration():
    start = time.perf_counter()
    rng = make_rng(77)
    cfg = HeldoutConfig(particles=10_000, seed=5)
    worst = 0.0
    for i in range(50):
        phi = rng.dirichlet(np.ones(6), size=2)
        alpha = rng.uniform(0.05, 3.0, size=2)
        doc = rng.choice(6, size=2, replace=False)
        est, se = left_to_right_doc(doc, phi, alpha, cfg, rng=make_rng(5, i), return_stderr=True)
        exact = exact_doc_loglik(doc, phi, alpha)
        worst = max(worst, abs(est - exact) / se if se > 0 else (0.0 if est == exact else math.inf))
    phi1 = np.array([[0.2, 0.3, 0.5]])
    single = left_to_right_doc([0, 1], phi1, np.ones(1), cfg)
    exact_single = single == math.log(0.2) + math.log(0.3)
    elapsed = time.perf_counter() - start
    ok = worst < 3 and exact_single and elapsed < 60
    report(2, ok, f"max |est-exact|/SE {worst:.2f} (< 3) over 50 instances; K=1 exact={exact_single}; "
                  f"{elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_3_metric_oracles():
    stats = cooccurrence_stats(Corpus(docs=((0, 1), (0, 1), (0, 2), (1, 2)), V=3, min_basket_size=2))
    npmi = npmi_pair(0, 1, stats)
    cos = (cosine_similarity([0.7, 0.3, 0, 0], [0, 0, 0.6, 0.4]),
           cosine_similarity([0.5, 0.5, 0], [0, 0.5, 0.5]),
           cosine_similarity([0.7, 0.3, 0, 0], [0.7, 0.3, 0, 0]))
    r = rhat([[1, 2, 3], [1, 2, 3]])
    samples = [np.array([[0.7, 0.3, 0, 0], [0, 0, 0.6, 0.4]]), np.array([[0.68, 0.32, 0, 0], [0, 0, 0.1, 0.9]])]
    cred = topic_credibility(TopicRef(0, 1), samples)
    checks = {
        "npmi": abs(npmi - (-0.170)) <= 1e-3,
        "cosine": all(abs(c - e) <= 1e-12 for c, e in zip(cos, (0.0, 0.5, 1.0))),
        "rhat": abs(r - 0.8165) <= 1e-4 and abs(r - math.sqrt(2 / 3)) <= 1e-9,
        "credibility": abs(cred - 0.6432) <= 1e-4,
    }
    ok = all(checks.values())
    report(3, ok, f"NPMI {npmi:.4f}, cosine {cos}, R-hat {r:.10f}, credibility {cred:.4f}; "
                  f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    assert ok


def test_criterion_4_planted_topic_recovery():
    start = time.perf_counter()
    corpus, truth = planted_corpus()
    hp = HyperParams.symmetric(5, 50)
    cfg = ChainConfig(iterations=500, burn_in=200, lag=100, chains=2, seed=1)
    samples = collect_samples(run_chains(corpus, hp, cfg))
    pool = pool_topics(samples)
    S = pool.S
    model = filter_clusters(constrained_ahc(pool, 0.35), S, threshold=0.35, S=S)
    dist = 1.0 - cosine_similarity_matrix(model.centroids, truth.phi_true) if model.n_clusters else np.ones((0, 5))
    matched = dist.argmin(axis=1) if model.n_clusters else np.array([])
    distinct = len(set(matched.tolist())) == model.n_clusters
    worst = float(dist.min(axis=1).max()) if model.n_clusters else math.inf
    elapsed = time.perf_counter() - start
    ok = S == 8 and model.n_clusters == 5 and distinct and worst <= 0.1 and elapsed < 300
    report(4, ok, f"{model.n_clusters} clusters (== 5) from S={S}, distinct planted matches={distinct}, "
                  f"max centroid CD {worst:.4f} (<= 0.1), {elapsed:.1f}s (< 300s)")
    assert ok


@pytest.fixture(scope="module")
def noisy_run():
    """Planted topics plus documents from 3 random extra topics, trained with surplus topics."""
    start = time.perf_counter()
    base, _ = generate_synthetic(5, 50, 500, alpha_true=np.full(5, 0.1), seed=21)
    noise, _ = noise_documents(50, 300, n_topics=3, concentration=100.0, seed=22)
    train, test = split_corpus(concat_corpora(base, noise), 0.1, seed=21)
    stats = cooccurrence_stats(train)
    hp = HyperParams.symmetric(25, 50)
    cfg = ChainConfig(iterations=600, burn_in=300, lag=300, chains=4, seed=21)
    primary = collect_samples(run_chains(train, hp, cfg))
    replication = collect_samples(run_chains(train, hp, cfg, first_chain=cfg.chains))
    return dict(train=train, test=test, stats=stats, primary=primary, replication=replication,
                heldout=HeldoutConfig(particles=30, seed=3), setup_seconds=time.perf_counter() - start)


def test_criterion_5_clustered_model_beats_raw_draws(noisy_run):
    start = time.perf_counter()
    r = noisy_run
    S = len(r["primary"])
    min_size, threshold = math.ceil(S / 2), 0.35
    model = filter_clusters(constrained_ahc(pool_topics(r["primary"]), threshold), min_size,
                            threshold=threshold, S=S)
    rep = filter_clusters(constrained_ahc(pool_topics(r["replication"]), threshold), min_size,
                          threshold=threshold, S=len(r["replication"]))
    clustered = evaluate_model(model, r["test"], r["stats"], rep, heldout=r["heldout"])
    raw = evaluate_samples(r["primary"], r["test"], r["stats"], r["heldout"])
    perp_c, perp_r = clustered.metric("perplexity")[0], raw.metric("perplexity")[0]
    cred_c, cred_r = clustered.metric("credibility")[0], raw.metric("credibility")[0]
    elapsed = time.perf_counter() - start + r["setup_seconds"]
    ok = perp_c <= perp_r and cred_c >= cred_r + 0.05 and elapsed < 600
    report(5, ok, f"perplexity clustered {perp_c:.4f} <= raw {perp_r:.4f}; credibility clustered {cred_c:.3f} "
                  f">= raw {cred_r:.3f} + 0.05; K'={model.n_clusters} at min_size {min_size}/{S}, "
                  f"threshold {threshold}; {elapsed:.1f}s (< 600s)")
    assert ok


def test_criterion_6_sweep_structure(noisy_run, tmp_path):
    r = noisy_run
    S, K = len(r["primary"]), r["primary"][0].K
    min_sizes = (1, S // 4, S // 2, S)
    result = sweep(pool_topics(r["primary"]), min_sizes=min_sizes, test=r["test"], stats=r["stats"],
                   replication_pool=pool_topics(r["replication"]), heldout=HeldoutConfig(particles=5, seed=3))
    io.write_sweep(tmp_path / "sweep.csv", result)
    rows = io.read_sweep(tmp_path / "sweep.csv")
    counts = {(row["threshold"], row["min_size"]): row["n_clusters"] for row in rows}
    thresholds = sorted({t for t, _ in counts})
    monotone = all(
        [counts[(t, m)] for m in min_sizes] == sorted((counts[(t, m)] for m in min_sizes), reverse=True)
        for t in thresholds
    )
    unmerged = counts[(0.0, 1)] == S * K
    bounded = all(counts[(t, S)] <= K for t in thresholds)
    ok = monotone and unmerged and bounded and len(thresholds) == 12
    report(6, ok, f"{len(thresholds)} thresholds x {len(min_sizes)} min sizes; non-increasing in min_size={monotone}; "
                  f"(0, 1) cell {counts[(0.0, 1)]} == S*K {S * K}; max n_clusters at min_size S "
                  f"{max(counts[(t, S)] for t in thresholds)} <= K {K}")
    assert ok


def test_criterion_7_invariants(tmp_path):
    failures = []
    corpus, _ = planted_corpus(D=300, seed=5)
    hp = HyperParams.symmetric(6, corpus.V)
    state = init_state(corpus, hp, seed=1)
    for _ in range(50):
        run_sweeps(state, hp, 1)
        try:
            state.check()
        except Exception:
            failures.append("counts")
            break
    if max(np.abs(estimate_phi(state, hp).sum(axis=1) - 1).max(),
           np.abs(estimate_theta(state, hp).sum(axis=1) - 1).max()) > 1e-9:
        failures.append("row sums")

    rng = make_rng(7)
    pool = pool_topics(collect_samples(run_chains(
        corpus, hp, ChainConfig(iterations=60, burn_in=20, lag=20, chains=3, seed=2))))
    for threshold in (0.05, 0.2, 0.35, 0.5, 0.9):
        clusters = constrained_ahc(pool, threshold)
        if any(len({m.sample_id for m in c.members}) != c.size for c in clusters):
            failures.append(f"duplicate sample at {threshold}")
        if sorted(i for c in clusters for i in c.indices) != list(range(pool.size)):
            failures.append(f"partition at {threshold}")

    syn = tmp_path / "syn"
    args = ["--topics", "4", "--iterations", "30", "--burn-in", "10", "--lag", "10", "--chains", "2", "--seed", "3"]
    assert main(["synth", "--out", str(syn), "--topics", "3", "--vocab", "20", "--docs", "60", "--seed", "1"]) == 0
    for name in ("a", "b"):
        assert main(["train", "--corpus", str(syn / "train.jsonl"), "--out", str(tmp_path / name), *args]) == 0
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    if files_a != sorted(p.name for p in (tmp_path / "b").iterdir()) or any(
            (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes() for f in files_a):
        failures.append("determinism")

    stats = cooccurrence_stats(corpus)
    scores = [npmi_pair(i, j, stats) for i in range(corpus.V) for j in range(i + 1, corpus.V)
              if stats.df[i] and stats.df[j]]
    if not all(-1.0 <= s <= 1.0 for s in scores):
        failures.append("npmi range")

    worst_scale = 0.0
    for _ in range(1000):
        u, v = rng.dirichlet(np.full(20, 0.3)), rng.dirichlet(np.full(20, 0.3))
        a, b = rng.uniform(1e-3, 1e3, size=2)
        worst_scale = max(worst_scale, abs(cosine_similarity(a * u, b * v) - cosine_similarity(u, v)))
        worst_scale = max(worst_scale, abs(cosine_distance(u, u)))
    if worst_scale > 1e-12:
        failures.append("cosine scale invariance")

    ok = not failures
    report(7, ok, f"counts/row sums/constraint/partition/determinism/NPMI range ({len(scores)} pairs)/"
                  f"cosine scale invariance (1000 pairs, max dev {worst_scale:.1e}); failed: {failures or 'none'}")
    assert ok


def test_criterion_8_rhat_below_threshold():
    start = time.perf_counter()
    corpus, _ = planted_corpus()
    hp = HyperParams.symmetric(5, 50)
    cfg = ChainConfig(iterations=2000, burn_in=1000, lag=1000, chains=4, seed=8, loglik_every=10)
    results = run_chains(corpus, hp, cfg)
    traces = np.array([[ll for _, ll in res.trace] for res in results])
    value = rhat(traces[:, traces.shape[1] // 2:])
    elapsed = time.perf_counter() - start
    ok = value < 1.1 and elapsed < 120
    report(8, ok, f"R-hat {value:.4f} (< 1.1) over 4 chains x 2000 iterations (second half of trace), "
                  f"{elapsed:.1f}s (< 120s)")
    assert ok
