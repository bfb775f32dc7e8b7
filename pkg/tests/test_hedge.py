import math

import numpy as np
import pytest
from sklearn.base import clone

from sympca import hedge
from sympca.cli import gen_matrix
from sympca.hedge import (
    HedgeConfig,
    HedgeTunedPCA,
    burn_in,
    default_beta,
    finalize,
    pairwise_loss,
    post_burn_in_run,
    weights_update,
)
from sympca.linalg import eig_all
from sympca.sampler import EntrySample, EntryStream, RngStream
from sympca.sgd import random_unit, run_fixed


def normalized(w):
    w = np.asarray(w, dtype=np.float64)
    return w / w.sum()


class TestLoss:
    def test_identical(self):
        e = np.eye(3)[0]
        assert pairwise_loss([e, e]) == 1.0

    def test_orthogonal(self):
        assert pairwise_loss(np.eye(2)) == 0.0

    def test_three(self):
        e1, e2 = np.eye(2)
        assert pairwise_loss([e1, e1, e2]) == pytest.approx(1.0 / 3.0, abs=1e-16)

    def test_sign_blind(self):
        e = np.eye(3)[1]
        assert pairwise_loss([e, -e]) == 1.0

    def test_needs_pairs(self):
        with pytest.raises(ValueError):
            pairwise_loss([np.eye(2)[0]])


class TestBeta:
    def test_closed_form(self):
        assert default_beta(math.e**2, 4) == pytest.approx(0.70711, abs=1e-5)

    def test_arithmetic(self):
        assert default_beta(20, 100) == pytest.approx(0.17309, abs=1e-5)

    def test_vanishes(self):
        assert default_beta(20, 10**12) < 1e-5

    def test_single_rate(self):
        assert default_beta(1, 10) == 0.0

    def test_config_default_counts_updates(self):
        cfg = HedgeConfig(K=20, B_max=10_000, check_period=100)
        assert cfg.resolved_beta() == pytest.approx(math.sqrt(math.log(20) / 100))


class TestWeights:
    def test_zero_beta(self):
        pi = np.array([0.2, 0.5, 0.3])
        np.testing.assert_allclose(weights_update(pi, [0.1, 0.9, 0.4], 0.0), pi, rtol=1e-15)

    def test_equal_losses(self):
        pi = np.array([0.2, 0.5, 0.3])
        np.testing.assert_allclose(normalized(weights_update(pi, [0.7] * 3, 2.0)), pi, rtol=1e-15)

    def test_two_experts(self):
        out = normalized(weights_update([0.5, 0.5], [1.0, 0.0], 1.0))
        np.testing.assert_allclose(out, [math.e / (math.e + 1), 1 / (math.e + 1)], rtol=1e-15)
        np.testing.assert_allclose(out, [0.73106, 0.26894], atol=1e-5)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            weights_update([0.0, 1.0], [0, 0], 1.0)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(eps=0.0), dict(eps=1.0), dict(R=1), dict(K=0), dict(rho=1.0), dict(rates=[]),
        dict(rates=[1.0, -1.0]), dict(beta=-1.0), dict(check_period=0), dict(phase2="x"),
        dict(rate_draw="x"), dict(B_max=-1),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            HedgeConfig(**kw)

    def test_geometric_grid(self):
        np.testing.assert_array_equal(HedgeConfig(K=3, rho=0.5).grid(), [0.5, 0.25, 0.125])

    def test_default_grid(self):
        g = hedge.default_grid()
        assert g.size == 21 and g[0] == 0.125 and g[-1] == 2.0**17


def small_cfg(**kw):
    base = dict(eps=0.05, R=3, rates=np.array([0.01, 0.1, 1.0]) / 64, B_max=2000, check_period=100,
                max_steps=5000)
    base.update(kw)
    return HedgeConfig(**base)


class TestBurnIn:
    def test_degenerate_threshold_stops_at_first_check(self):
        st = burn_in(small_cfg(eps=0.1), gen_matrix(8, 0), rng=RngStream(1))
        assert st.complete and st.B == 100

    def test_cap_flags_incomplete(self):
        st = burn_in(small_cfg(eps=0.001, B_max=500), gen_matrix(8, 0), rng=RngStream(1))
        assert not st.complete and st.B == 500

    def test_single_rate(self):
        st = finalize(burn_in(small_cfg(rates=[0.01]), gen_matrix(8, 0), rng=RngStream(1)))
        np.testing.assert_array_equal(st.pi, [1.0])

    def test_trace_rows_per_rate(self):
        st = burn_in(small_cfg(eps=0.001, B_max=300, trace_stride=100), gen_matrix(8, 0), rng=RngStream(1))
        assert [r.t for r in st.trace] == [100] * 3 + [200] * 3 + [300] * 3
        assert [r.k for r in st.trace[:3]] == [0, 1, 2]
        assert all(r.phase == "burn_in" and r.loss is None for r in st.trace)

    def test_interior_rate_d50(self):
        # Seed pinned from the first run: the default grid in gain units on a d=50 Gaussian matrix.
        d = 50
        A = gen_matrix(d, 0)
        cfg = HedgeConfig(eps=0.05, R=4, rates=hedge.default_grid() / d**2, B_max=400_000, check_period=100)
        st = burn_in(cfg, A, rng=RngStream(0))
        k = int(np.argmax(st.losses))
        assert st.complete and st.B == 55_300
        assert 0 < k < 20

    def test_common_start_agrees_immediately(self):
        A = gen_matrix(8, 0)
        w0 = random_unit(RngStream(4), 8)
        st = finalize(burn_in(small_cfg(eps=0.02, rates=[1e-5, 2e-5]), A, w0=w0, rng=RngStream(1)))
        assert st.complete and st.B == 100
        res = post_burn_in_run(st, small_cfg(eps=0.02, rates=[1e-5, 2e-5]))
        assert res.converged and res.steps == 100 and len(res.trace) == 1

    def test_stream_mode_shares_samples(self):
        samples = [EntrySample(i % 4, (3 * i) % 4, 0.25) for i in range(1000)]
        st = burn_in(small_cfg(eps=0.001, B_max=10**6), EntryStream(4, iter(samples)), rng=RngStream(0))
        assert st.B == 1000 and not st.complete


class TestFinalize:
    def test_uniform(self):
        st = burn_in(small_cfg(check_period=None, B_max=0), gen_matrix(4, 0), rng=RngStream(0))
        st.log_pi = np.full(3, 5.0)
        np.testing.assert_allclose(finalize(st).pi, [1 / 3] * 3, rtol=1e-15)

    def test_argmax_preserved(self):
        st = burn_in(small_cfg(check_period=None, B_max=0), gen_matrix(4, 0), rng=RngStream(0))
        st.log_pi = np.array([1.0, 900.0, 3.0])
        f = finalize(st)
        assert f.selected == 1 and np.argmax(f.pi) == 1 and f.phase == "post"

    def test_sums_to_one(self):
        st = finalize(burn_in(small_cfg(eps=0.001), gen_matrix(8, 0), rng=RngStream(1)))
        assert abs(math.fsum(st.pi) - 1.0) <= 1e-12 and np.all(st.pi > 0)

    def test_post_requires_finalize(self):
        st = burn_in(small_cfg(eps=0.1), gen_matrix(8, 0), rng=RngStream(1))
        with pytest.raises(ValueError):
            post_burn_in_run(st, small_cfg())


class TestPostBurnIn:
    def point_mass_state(self, A, cfg, k):
        st = burn_in(cfg, A, rng=RngStream(6))
        st.log_pi = np.where(np.arange(cfg.grid().size) == k, 0.0, -np.inf)
        return finalize(st)

    def test_point_mass_matches_fixed_run(self):
        A = gen_matrix(10, 1)
        cfg = small_cfg(rates=[1e-4, 1e-3, 1e-2], B_max=0, eps=0.001, max_steps=20000, trace_stride=1000)
        st = self.point_mass_state(A, cfg, 1)
        w0, w1 = st.chain(1, 0), st.chain(1, 1)
        res = post_burn_in_run(st, cfg)
        ref = run_fixed(A, w0, 1e-3, 20000, RngStream(6).child(3), trace_stride=1000, companion=w1)
        assert np.array_equal(res.final.w, ref.final.w)
        assert np.array_equal(res.companion.w, ref.companion.w)
        assert [r.loss for r in res.trace] == [r.loss for r in ref.trace]

    def test_once_draw_uses_single_rate(self):
        A = gen_matrix(10, 1)
        cfg = small_cfg(rate_draw="once", eps=0.001, max_steps=3000)
        st = finalize(burn_in(cfg, A, rng=RngStream(2)))
        res = post_burn_in_run(st, cfg, rng=RngStream(2).child(9))
        assert len({r.eta for r in res.trace}) == 1

    def test_lagged_single_chain(self):
        A = gen_matrix(10, 1, "spiked")
        cfg = small_cfg(phase2="lagged", eps=0.05, rates=[0.5 / 100], max_steps=200_000)
        st = finalize(burn_in(cfg, A, rng=RngStream(2)))
        res = post_burn_in_run(st, cfg)
        assert res.companion is None and res.converged
        assert res.trace[0].loss is None

    def test_step_cap_unconverged(self):
        cfg = small_cfg(eps=0.001, max_steps=3000)
        st = finalize(burn_in(cfg, gen_matrix(8, 0), rng=RngStream(1)))
        res = post_burn_in_run(st, cfg)
        assert not res.converged and res.steps == 3000

    def test_reproducible(self):
        A = gen_matrix(20, 3)
        cfg = small_cfg(rates=hedge.default_grid()[:8] / 400, max_steps=30000)

        def run():
            st = finalize(burn_in(cfg, A, rng=RngStream(5)))
            res = post_burn_in_run(st, cfg)
            return st.trace, res.final.w

        (t1, w1), (t2, w2) = run(), run()
        assert t1 == t2 and np.array_equal(w1, w2)


def test_chains_are_independent_runs():
    A = gen_matrix(12, 2)
    cfg = HedgeConfig(eps=0.05, R=2, rates=[1e-4, 1e-3], B_max=7000, check_period=None)
    base = RngStream(8)
    st = burn_in(cfg, A, rng=base)
    for k, eta in enumerate(cfg.grid()):
        for r in range(2):
            c = k * 2 + r
            ref = run_fixed(A, random_unit(base.child(c), 12), eta, 7000, base.child(c), trace_stride=7000)
            assert np.array_equal(st.chain(k, r), ref.final.w)


class TestEstimator:
    def test_fit(self):
        A = gen_matrix(10, 1, "spiked")
        est = HedgeTunedPCA(rates=[0.25, 0.5, 1.0, 4.0], eps=0.02, B_max=200_000, check_period=100,
                            max_steps=2_000_000, random_state=0).fit(A.dense)
        assert est.components_.shape == (1, 10)
        assert est.weights_.sum() == pytest.approx(1.0)
        assert est.selected_rate_ in est.rates_
        assert est.transform(A.dense).shape == (10, 1)

    def test_clone(self):
        est = HedgeTunedPCA(eps=0.1, R=3)
        assert clone(est).get_params() == est.get_params()

    def test_rate_unit(self):
        with pytest.raises(ValueError):
            HedgeTunedPCA(rate_unit="bogus").fit(np.eye(3))


def test_d200_tune_beats_worst_rate():
    # Tune against the slowest fixed rate of the default grid, both capped at 2e7 steps.
    d, cap = 200, 20_000_000
    A = gen_matrix(d, 0)
    cfg = HedgeConfig(eps=0.05, R=4, rates=hedge.default_grid() / d**2, B_max=4_000_000, check_period=100,
                      max_steps=cap, trace_stride=100_000)
    rng = RngStream(0)
    st = finalize(burn_in(cfg, A, rng=rng))
    res = post_burn_in_run(st, cfg, rng=rng.child(st.K * cfg.R))
    tune = res.steps if res.converged else math.inf
    worst = math.inf
    if not math.isinf(tune):
        worst = 0
        for eta in cfg.grid():
            r = run_fixed(A, None, eta, cap, RngStream(0), trace_stride=10_000,
                          companion=random_unit(RngStream(0).child(1), d), stop_loss=0.95)
            worst = max(worst, r.steps if r.converged else math.inf)
    assert tune < worst, f"tune {tune} steps in {cap} (burn-in {st.B}), final agreement {res.trace[-1].loss:.3f}; worst rate {worst}"
