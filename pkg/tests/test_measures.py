"""Tests for measures: free-measure sampling, Gibbs sampler, partition functions, tightness."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gibbswave.linear_system import state_to_vector
from gibbswave.measures import (
    FULL,
    GibbsSampler,
    effective_sample_size,
    estimate_Z,
    estimate_Z_family,
    expected_u_norm_sq,
    gibbs_initial_vectors,
    importance_estimate,
    jackknife_mean,
    quartic_action,
    quartic_action_vector,
    sample_gibbs,
    sample_nu0,
    sample_nu0_vectors,
    split_rhat,
    tightness_report,
)
from gibbswave.spectral_field import SystemState, field_from_function, quartic_integral, u_sobolev_norm


class TestFreeMeasure:
    """Exact Gaussian sampling."""

    @pytest.mark.parametrize("s", [0.0, 1 / 3, 0.49])
    def test_moment_identity(self, s):
        T, m, n = 1.3, 16, 100_000
        st_ = sample_nu0(T, m, 1, np.random.default_rng(11), size=n)
        v = u_sobolev_norm(st_.field, s) ** 2
        assert abs(v.mean() - expected_u_norm_sq(T, m, s)) <= 3 * v.std(ddof=1) / np.sqrt(n)

    def test_per_mode_variance_chi2(self):
        T, m, n = 0.7, 8, 20_000
        phi = sample_nu0(T, m, 1, np.random.default_rng(12), size=n).field.phi_hat
        for k in range(0, m + 1):
            c = phi[:, m + k]
            var = T / (1 + k * k)
            if k == 0:
                stat, dof = np.sum(c.real**2) / var, n
            else:
                stat, dof = np.sum(np.abs(c) ** 2) * 2 / var, 2 * n
            p = stats.chi2.cdf(stat, dof)
            assert 0.005 < p < 0.995, f"mode {k}: p={p}"

    def test_zero_temperature(self):
        st_ = sample_nu0(0.0, 4, 2, np.random.default_rng(0), size=5)
        assert np.all(state_to_vector(st_) == 0.0)

    def test_negative_temperature(self):
        with pytest.raises(ValueError, match="nonnegative"):
            sample_nu0(-1.0, 4, 1, np.random.default_rng(0))

    def test_samples_are_hermitian(self):
        st_ = sample_nu0(1.0, 5, 1, np.random.default_rng(0), size=3)
        st_.validate()

    def test_reservoir_temperatures(self):
        x = sample_nu0_vectors(1.0, 2, 2, np.random.default_rng(0), (50_000,), temperatures=[0.5, 4.0])
        np.testing.assert_allclose(x[:, -2:].var(axis=0), [0.5, 4.0], rtol=0.03)


class TestQuarticAction:
    """(mu / 4T) integral of the projected field to the fourth power."""

    def cos_state(self, m=3):
        c = field_from_function(np.cos, m)
        return SystemState.from_arrays(c, np.zeros_like(c), [0.0])

    def test_mu_zero(self):
        assert quartic_action(self.cos_state(), 0.0, 1.0) == 0.0

    def test_cos_full(self):
        assert quartic_action(self.cos_state(), 4.0, 1.0, FULL) == pytest.approx(3 * np.pi / 4, rel=1e-13)

    def test_projection_to_zero_modes(self):
        assert quartic_action(self.cos_state(), 4.0, 1.0, 0) == pytest.approx(0.0, abs=1e-15)

    def test_vector_form_matches(self):
        st_ = sample_nu0(1.0, 6, 1, np.random.default_rng(0), size=4)
        a = quartic_action(st_, 1.5, 0.8, 3)
        b = quartic_action_vector(state_to_vector(st_), 6, 1.5, 0.8, 3)
        np.testing.assert_allclose(a, b, rtol=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31), mu=st.floats(0, 5), T=st.floats(0.1, 3))
    def test_nonnegative_property(self, seed, mu, T):
        x = sample_nu0_vectors(T, 5, 1, np.random.default_rng(seed), (3,))
        assert np.all(quartic_action_vector(x, 5, mu, T, FULL) >= 0)


class TestGibbsSampler:
    """Independence Metropolis with free-measure proposals."""

    def test_parameter_validation(self):
        with pytest.raises(ValueError, match="temperature must be positive"):
            GibbsSampler(0.0, 1.0, 4)
        with pytest.raises(ValueError, match="reweight_cutoff"):
            GibbsSampler(1.0, 1.0, 4, reweight_cutoff=9)

    def test_mu_zero_accepts_everything(self):
        out = sample_gibbs(GibbsSampler(1.0, 0.0, 8), 2000, burn_in=10, rng=np.random.default_rng(0))
        assert out.acceptance_rate == 1.0

    def test_mu_zero_output_is_free_measure(self):
        out = sample_gibbs(GibbsSampler(1.0, 0.0, 8), 20_000, burn_in=10, rng=np.random.default_rng(0))
        v = u_sobolev_norm(out.states().field, 0.0) ** 2
        assert abs(v.mean() - expected_u_norm_sq(1.0, 8, 0.0)) <= 3 * v.std(ddof=1) / np.sqrt(v.size)

    def test_reweighting_suppresses_quartic(self):
        sampler = GibbsSampler(1.0, 1.0, 16)
        out = sample_gibbs(sampler, 10_000, burn_in=500, rng=np.random.default_rng(1))
        q = quartic_integral(out.states().field.phi_hat)
        free = quartic_integral(sample_nu0(1.0, 16, 1, np.random.default_rng(2), size=10_000).field.phi_hat)
        se_mh = q.std(ddof=1) / np.sqrt(out.ess())
        se_free = free.std(ddof=1) / np.sqrt(free.size)
        assert free.mean() - q.mean() > 3 * np.hypot(se_mh, se_free)

    def test_agrees_with_importance_sampling(self):
        T, mu, m, n = 1.0, 1.0, 8, 20_000
        sampler = GibbsSampler(T, mu, m)
        out = sample_gibbs(sampler, n, burn_in=500, rng=np.random.default_rng(3))
        f = np.tanh(state_to_vector(out.states())[:, 0]) ** 2
        x = sample_nu0_vectors(T, m, 1, np.random.default_rng(4), (n,))
        est, se = importance_estimate(np.tanh(x[:, 0]) ** 2, -sampler.action(x))
        se_mh = f.std(ddof=1) / np.sqrt(out.ess())
        assert abs(f.mean() - est) <= 3 * np.hypot(se, se_mh)

    def test_two_mode_ks(self):
        T, mu = 1.0, 3.0
        sampler = GibbsSampler(T, mu, 1)
        out = sample_gibbs(sampler, 4000, burn_in=200, rng=np.random.default_rng(5), thin=5)
        chain = out.states().field.phi_hat[:, 2]
        a = np.abs(chain) ** 2
        x = sample_nu0_vectors(T, 1, 1, np.random.default_rng(6), (400_000,))
        w = np.exp(-sampler.action(x))
        v = (x[:, 1] ** 2 + x[:, 2] ** 2) / 2
        order = np.argsort(v)
        cw = np.cumsum(w[order]) / w.sum()
        vs = v[order]
        p = stats.kstest(a, lambda t: np.interp(t, vs, cw, left=0.0, right=1.0)).pvalue
        assert p > 0.01

    def test_low_acceptance_warns(self):
        with pytest.warns(RuntimeWarning, match="below 1%"):
            sample_gibbs(GibbsSampler(1.0, 1e4, 8), 5000, burn_in=10, rng=np.random.default_rng(0))

    def test_chain_shapes_and_diagnostics(self):
        out = sample_gibbs(GibbsSampler(1.0, 1.0, 4), 4000, burn_in=100,
                           rng=np.random.default_rng(0), n_chains=4)
        assert out.vectors.shape == (4, 1000, 2 * 9 + 1)
        assert out.split_rhat() < 1.05
        assert 0 < out.ess() <= 4000

    def test_initial_vectors_independent_of_grouping(self):
        from gibbswave.ensemble import streams

        sampler = GibbsSampler(1.0, 1.0, 4)
        full = gibbs_initial_vectors(sampler, streams(0, "init", range(6)), 50)
        part = gibbs_initial_vectors(sampler, streams(0, "init", range(3, 6)), 50)
        np.testing.assert_array_equal(full[3:], part)

    def test_n_samples_validation(self):
        with pytest.raises(ValueError, match="n_samples must be >= 1"):
            sample_gibbs(GibbsSampler(1.0, 1.0, 2), 0)

    def test_cutoff_marginal_unaffected_by_grid(self):
        T, mu, M, n = 1.0, 1.0, 4, 40_000
        vals = []
        for m, seed in ((M, 7), (3 * M, 8)):
            x = sample_nu0_vectors(T, m, 1, np.random.default_rng(seed), (n,))
            la = -quartic_action_vector(x, m, mu, T, M)
            vals.append(importance_estimate(x[:, 1] ** 2 + x[:, m + 1] ** 2, la))
        (a, sa), (b, sb) = vals
        assert abs(a - b) <= 3 * np.hypot(sa, sb)


class TestDiagnostics:
    """ESS, split R-hat and jackknife."""

    def test_iid_ess(self, rng):
        ess = effective_sample_size(rng.standard_normal((2, 5000)))
        assert 8000 < ess <= 12_000

    def test_correlated_ess_smaller(self, rng):
        x = np.cumsum(rng.standard_normal(5000)) * 0.01 + rng.standard_normal(5000)
        assert effective_sample_size(x) < 2500

    def test_rhat_detects_shift(self, rng):
        good = rng.standard_normal((4, 1000))
        bad = good + np.arange(4)[:, None]
        assert split_rhat(good) < 1.01
        assert split_rhat(bad) > 1.1

    def test_jackknife_of_mean(self, rng):
        w = rng.random(500)
        est, se = jackknife_mean(w)
        assert est == pytest.approx(w.mean())
        assert se == pytest.approx(w.std(ddof=1) / np.sqrt(w.size), rel=1e-10)


class TestPartitionFunction:
    """Monte Carlo Z_M."""

    def test_mu_zero_exact(self):
        assert estimate_Z(0.0, 1.0, 8, n=1000, rng=np.random.default_rng(0)) == (1.0, 0.0)

    def test_minimum_draws(self):
        with pytest.raises(ValueError, match="n must be >= 1000"):
            estimate_Z(1.0, 1.0, 8, n=999)

    def test_nonincreasing_common_draws(self):
        fam = estimate_Z_family(1.0, 1.0, 32, [4, 8, 16, 32], n=20_000, rng=np.random.default_rng(1))
        cut = [4, 8, 16, 32]
        for a, b in zip(cut, cut[1:]):
            d = fam["weights"][a] - fam["weights"][b]
            assert d.mean() >= -3 * d.std(ddof=1) / np.sqrt(d.size)

    def test_cutoff_32_vs_64(self):
        z32, s32 = estimate_Z(1.0, 1.0, 64, 32, n=10_000, rng=np.random.default_rng(2))
        z64, s64 = estimate_Z(1.0, 1.0, 64, 64, n=10_000, rng=np.random.default_rng(3))
        assert abs(z32 - z64) < 3 * np.hypot(s32, s64)
        assert 0 < z64 < 1


class TestTightness:
    """Tail masses against the Cauchy-Schwarz bound."""

    def test_requires_s_below_half(self):
        with pytest.raises(ValueError, match="s < 1/2"):
            tightness_report(1.0, 1.0, [4], 0.5, [1.0], n=1000)

    def test_free_measure_bound(self):
        tab = tightness_report(0.0, 1.0, [8, 16], 0.45, [2.0, 4.0, 8.0], n=20_000, rng=np.random.default_rng(0))
        assert all(r.Z == 1.0 for r in tab.rows)
        assert tab.all_within_bound

    def test_masses_decrease_and_vanish(self):
        T, s = 1.0, 0.45
        rms = np.sqrt(expected_u_norm_sq(T, 16, s))
        tab = tightness_report(1.0, T, [4, 8, 16], s, [0.5 * rms, rms, 2 * rms, 10 * rms], n=20_000,
                               rng=np.random.default_rng(1))
        assert tab.all_within_bound
        for M in (4, 8, 16):
            assert np.all(np.diff(tab.masses(M)) <= 0)
            assert tab.masses(M)[-1] < 0.05


def test_importance_weights_shift_invariant(rng):
    v = rng.random(100)
    lw = rng.standard_normal(100)
    np.testing.assert_allclose(importance_estimate(v, lw), importance_estimate(v, lw + 50.0), rtol=1e-12)


def test_no_warning_at_moderate_coupling():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sample_gibbs(GibbsSampler(1.0, 1.0, 4), 200, burn_in=10, rng=np.random.default_rng(0))
