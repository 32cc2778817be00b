import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topicforge.corpus import Corpus, generate_synthetic, make_rng
from topicforge.errors import ConfigError, StateCorruption
from topicforge.gibbs import (
    ChainConfig,
    HyperParams,
    SamplerState,
    chain_seed,
    collapsed_loglik,
    estimate_phi,
    estimate_theta,
    full_conditional,
    gibbs_sweep,
    init_state,
    run_chain,
    run_chains,
    run_sweeps,
)


def _corpus(seed=0, D=25, V=12):
    return generate_synthetic(3, V, D, doc_len=(3, 6), seed=seed)[0]


def _bare_state(n_wk, n_dk, words=(0,), doc_index=(0,)):
    n_wk = np.asarray(n_wk, dtype=np.int64)
    n_dk = np.asarray(n_dk, dtype=np.int64)
    return SamplerState(
        words=np.asarray(words, dtype=np.int64), doc_index=np.asarray(doc_index, dtype=np.int64),
        offsets=np.array([0, len(words)]), z=np.zeros(len(words), dtype=np.int64),
        n_wk=n_wk, n_dk=n_dk, n_k=n_wk.sum(axis=0), n_d=n_dk.sum(axis=1), rng=make_rng(0),
    )


def _polya_joint_loglik(corpus, z, K, alpha, beta):
    """Sequential Polya-urn evaluation of log p(w, z), independent of the gamma-function form."""
    V = corpus.V
    n_kv = np.zeros((K, V))
    n_dk = np.zeros((corpus.D, K))
    total = 0.0
    t = 0
    for d, doc in enumerate(corpus.docs):
        for w in doc:
            k = z[t]
            total += math.log((n_dk[d, k] + alpha[k]) / (n_dk[d].sum() + alpha.sum()))
            total += math.log((n_kv[k, w] + beta[w]) / (n_kv[k].sum() + beta.sum()))
            n_dk[d, k] += 1
            n_kv[k, w] += 1
            t += 1
    return total


class TestHyperParams:
    def test_symmetric_defaults(self):
        hp = HyperParams.symmetric(50, 100)
        assert hp.alpha_sum == pytest.approx(3.0)
        assert np.all(hp.alpha == 3.0 / 50) and np.all(hp.beta == 0.01)
        assert (hp.K, hp.V) == (50, 100)

    @pytest.mark.parametrize("alpha,beta", [([0.0, 1.0], [1.0]), ([1.0], [-1.0]), ([], [1.0])])
    def test_rejects_non_positive(self, alpha, beta):
        with pytest.raises(ConfigError):
            HyperParams(alpha=np.array(alpha), beta=np.array(beta))


class TestChainConfig:
    def test_defaults_record_five_per_chain(self):
        cfg = ChainConfig()
        assert cfg.record_iterations == [30_000, 35_000, 40_000, 45_000, 50_000]
        assert cfg.chains * len(cfg.record_iterations) == 20

    def test_inclusive_boundaries(self):
        assert ChainConfig(iterations=3, burn_in=0, lag=1).record_iterations == [0, 1, 2, 3]

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(burn_in=10, iterations=10), dict(lag=0),
                                    dict(chains=0), dict(iterations=10, burn_in=5, lag=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ChainConfig(**kw)


class TestInit:
    def test_single_topic(self):
        corpus = _corpus()
        state = init_state(corpus, HyperParams.symmetric(1, corpus.V), seed=0)
        assert np.all(state.z == 0)
        assert state.n_k.tolist() == [corpus.N]

    def test_counts_match_recount(self):
        rng = make_rng(2)
        corpus = Corpus(docs=tuple(tuple(rng.choice(30, 5, replace=False).tolist()) for _ in range(20)), V=30)
        assert corpus.N == 100
        state = init_state(corpus, HyperParams.symmetric(4, corpus.V), seed=3)
        assert state.n_k.sum() == 100
        state.check()

    def test_deterministic(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(3, corpus.V)
        assert np.array_equal(init_state(corpus, hp, 5).z, init_state(corpus, hp, 5).z)

    def test_vocabulary_mismatch(self):
        with pytest.raises(ConfigError):
            init_state(_corpus(), HyperParams.symmetric(3, 5), seed=0)


class TestFullConditional:
    def test_hand_example(self):
        # word 0, doc 0; topic counts already exclude the token being resampled
        state = _bare_state(n_wk=[[2, 0], [3, 3], [0, 0]], n_dk=[[1, 1]])
        hp = HyperParams(alpha=np.full(2, 0.5), beta=np.full(3, 0.1))
        w = full_conditional(state, hp, 0, 0)
        assert w == pytest.approx([(2.1 / 5.3) * 1.5, (0.1 / 3.3) * 1.5])
        assert w / w.sum() == pytest.approx([0.9290, 0.0710], abs=1e-4)

    def test_single_topic(self):
        state = _bare_state(n_wk=[[4], [1]], n_dk=[[2]])
        w = full_conditional(state, HyperParams(alpha=np.ones(1), beta=np.ones(2)), 0, 0)
        assert w.shape == (1,) and w / w.sum() == pytest.approx([1.0])

    def test_symmetric_state_is_uniform(self):
        state = _bare_state(n_wk=[[2, 2, 2], [1, 1, 1]], n_dk=[[1, 1, 1]])
        w = full_conditional(state, HyperParams.symmetric(3, 2), 0, 0)
        assert w / w.sum() == pytest.approx(np.full(3, 1 / 3))

    def test_negative_count(self):
        state = _bare_state(n_wk=[[-1, 2]], n_dk=[[1, 1]])
        with pytest.raises(StateCorruption):
            full_conditional(state, HyperParams.symmetric(2, 1), 0, 0)


class TestSweep:
    def test_single_topic_unchanged(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(1, corpus.V)
        state = init_state(corpus, hp, 0)
        before = state.n_wk.copy()
        gibbs_sweep(state, hp)
        assert state.iteration == 1
        assert np.array_equal(state.n_wk, before) and np.all(state.z == 0)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), K=st.integers(1, 6))
    def test_counts_consistent_after_every_sweep(self, seed, K):
        corpus = _corpus(seed=seed % 7)
        hp = HyperParams.symmetric(K, corpus.V)
        state = init_state(corpus, hp, seed)
        for _ in range(5):
            gibbs_sweep(state, hp)
            state.check()
            assert state.n_k.sum() == corpus.N and (state.z >= 0).all() and (state.z < K).all()

    def test_check_detects_tampering(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(3, corpus.V)
        state = init_state(corpus, hp, 0)
        state.n_wk[0, 0] += 1
        with pytest.raises(StateCorruption):
            state.check()

    def test_corrupted_counts_abort_sweep(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(2, corpus.V)
        state = init_state(corpus, hp, 0)
        state.n_k[:] = 0
        with pytest.raises(StateCorruption):
            run_sweeps(state, hp, 1)


class TestEstimates:
    def test_phi_hand(self):
        state = _bare_state(n_wk=[[2], [3], [5]], n_dk=[[10]])
        phi = estimate_phi(state, HyperParams(alpha=np.ones(1), beta=np.full(3, 0.1)))
        assert phi[0] == pytest.approx([2.1 / 10.3, 3.1 / 10.3, 5.1 / 10.3])
        assert phi[0] == pytest.approx([0.2039, 0.3010, 0.4951], abs=1e-4)

    def test_phi_prior_only(self):
        state = _bare_state(n_wk=np.zeros((4, 2)), n_dk=[[0, 0]])
        assert np.allclose(estimate_phi(state, HyperParams.symmetric(2, 4)), 0.25)

    def test_phi_small_beta_limit(self):
        state = _bare_state(n_wk=[[1], [3]], n_dk=[[4]])
        phi = estimate_phi(state, HyperParams(alpha=np.ones(1), beta=np.full(2, 1e-12)))
        assert phi[0] == pytest.approx([0.25, 0.75])

    def test_theta_hand(self):
        state = _bare_state(n_wk=[[4, 0]], n_dk=[[4, 0]])
        theta = estimate_theta(state, HyperParams(alpha=np.full(2, 1.5), beta=np.ones(1)))
        assert theta[0] == pytest.approx([5.5 / 7, 1.5 / 7])

    def test_theta_prior_only_and_single_topic(self):
        state = _bare_state(n_wk=[[0, 0]], n_dk=[[0, 0]])
        hp = HyperParams(alpha=np.array([1.0, 3.0]), beta=np.ones(1))
        assert estimate_theta(state, hp)[0] == pytest.approx([0.25, 0.75])
        state = _bare_state(n_wk=[[3]], n_dk=[[3]])
        assert estimate_theta(state, HyperParams(alpha=np.ones(1), beta=np.ones(1)))[0] == pytest.approx([1.0])

    def test_rows_normalized(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(4, corpus.V)
        state = init_state(corpus, hp, 1)
        run_sweeps(state, hp, 10)
        assert np.abs(estimate_phi(state, hp).sum(axis=1) - 1).max() < 1e-9
        assert np.abs(estimate_theta(state, hp).sum(axis=1) - 1).max() < 1e-9


class TestLoglik:
    def test_empty_corpus(self):
        c = Corpus(docs=(), V=2)
        hp = HyperParams.symmetric(2, 2)
        assert collapsed_loglik(init_state(c, hp, 0), hp) == 0.0

    def test_single_token(self):
        c = Corpus(docs=((1,),), V=2, min_basket_size=1)
        hp = HyperParams(alpha=np.ones(1), beta=np.full(2, 0.5))
        assert collapsed_loglik(init_state(c, hp, 0), hp) == pytest.approx(math.log(0.5), abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000), K=st.integers(1, 4))
    def test_matches_polya_urn(self, seed, K):
        corpus = _corpus(seed=seed % 5, D=6, V=8)
        hp = HyperParams(alpha=make_rng(seed).uniform(0.1, 2, K), beta=make_rng(seed, 1).uniform(0.05, 1, 8))
        state = init_state(corpus, hp, seed)
        expected = _polya_joint_loglik(corpus, state.z, K, hp.alpha, hp.beta)
        assert collapsed_loglik(state, hp) == pytest.approx(expected, rel=1e-10, abs=1e-9)

    @settings(max_examples=20, deadline=None)
    @given(perm_seed=st.integers(0, 1000))
    def test_label_permutation_invariant(self, perm_seed):
        corpus = _corpus()
        hp = HyperParams.symmetric(4, corpus.V)
        state = init_state(corpus, hp, 2)
        run_sweeps(state, hp, 3)
        ll = collapsed_loglik(state, hp)
        perm = make_rng(perm_seed).permutation(4)
        state.z = perm[state.z]
        state.n_wk, state.n_dk, state.n_k = state.recount()
        assert collapsed_loglik(state, hp) == ll


class TestChains:
    def test_records_and_trace(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(3, corpus.V)
        res = run_chain(corpus, hp, ChainConfig(iterations=3, burn_in=0, lag=1, loglik_every=1))
        assert [s.iteration for s in res.samples] == [0, 1, 2, 3]
        assert [it for it, _ in res.trace] == [0, 1, 2, 3]

    def test_deterministic(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(3, corpus.V)
        cfg = ChainConfig(iterations=40, burn_in=20, lag=10, seed=4)
        a, b = run_chain(corpus, hp, cfg, 1), run_chain(corpus, hp, cfg, 1)
        assert a.trace == b.trace
        assert all(np.array_equal(x.phi, y.phi) for x, y in zip(a.samples, b.samples))

    def test_chain_id_salts_seed(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(3, corpus.V)
        cfg = ChainConfig(iterations=20, burn_in=10, lag=10, seed=4)
        assert run_chain(corpus, hp, cfg, 0).trace != run_chain(corpus, hp, cfg, 1).trace

    def test_chain_seeds_do_not_collide_across_base_seeds(self):
        seeds = {chain_seed(s, c) for s in range(20) for c in range(8)}
        assert len(seeds) == 160

    def test_parallel_matches_serial(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(3, corpus.V)
        cfg = ChainConfig(iterations=30, burn_in=10, lag=10, chains=2, seed=1)
        serial, parallel = run_chains(corpus, hp, cfg), run_chains(corpus, hp, cfg, jobs=2)
        assert [r.trace for r in serial] == [r.trace for r in parallel]

    def test_store_theta(self):
        corpus = _corpus()
        hp = HyperParams.symmetric(3, corpus.V)
        res = run_chain(corpus, hp, ChainConfig(iterations=10, burn_in=5, lag=5, store_theta=True))
        assert res.samples[0].theta.shape == (corpus.D, 3)
