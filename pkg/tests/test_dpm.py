from __future__ import annotations

import numpy as np
import pytest
from scipy import stats
from scipy.cluster.vq import kmeans2

from medchain.conditionals import DpmConditional
from medchain.dpm.model import (
    DpmFit,
    DpPrior,
    Mcmc,
    McmcConfigError,
    fit_normal_dpm,
    fit_poisson_dpm,
    load_fit,
    posterior_predictive,
    save_fit,
)
from medchain.glm import poisson_irls

from helpers import raw_cluster_mean

MC = Mcmc(2000, 500, 5)


def batch_se(x: np.ndarray, n_batches: int = 20) -> float:
    means = np.array([b.mean() for b in np.array_split(np.asarray(x), n_batches)])
    return float(means.std(ddof=1) / np.sqrt(n_batches))


@pytest.fixture(scope="module")
def two_clusters():
    rng = np.random.default_rng(1)
    y = np.where(rng.random(200) < 0.5, -10.0, 10.0) + rng.standard_normal(200)
    return y, fit_normal_dpm(np.ones((200, 1)), y, mcmc=MC, seed=1)


@pytest.fixture(scope="module")
def sloped_poisson():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(1000)
    X = np.column_stack([np.ones(1000), x])
    y = rng.poisson(np.exp(0.3 + 0.5 * x)).astype(float)
    return X, y, fit_poisson_dpm(X, y, np.ones(1000), mcmc=MC, seed=3)


@pytest.fixture(scope="module")
def linear_normal():
    rng = np.random.default_rng(4)
    x = rng.uniform(-2, 2, 300)
    X = np.column_stack([np.ones(300), x])
    y = 1.0 + 2.0 * x + 0.5 * rng.standard_normal(300)
    return X, y, fit_normal_dpm(X, y, mcmc=MC, seed=4)


# ---------------------------------------------------------------------------
# configuration


def test_mcmc_profiles_and_errors():
    assert (Mcmc.profile("long").n_iter, Mcmc.profile("long").burn, Mcmc.profile("long").thin) == (15000, 5000, 10)
    assert Mcmc.profile("desk").n_keep == 300
    with pytest.raises(McmcConfigError):
        Mcmc(500, 500, 1)
    with pytest.raises(McmcConfigError):
        Mcmc.profile("weekend")
    with pytest.raises(ValueError):
        DpPrior(a=0.0)
    with pytest.raises(ValueError):
        DpPrior(mean=np.zeros(2))


def test_design_checks():
    with pytest.raises(ValueError, match="intercept"):
        fit_normal_dpm(np.random.default_rng(0).standard_normal((10, 2)), np.zeros(10))
    with pytest.raises(ValueError):
        fit_normal_dpm(np.ones((1, 1)), np.zeros(1))
    with pytest.raises(ValueError, match="nonnegative integers"):
        fit_poisson_dpm(np.ones((5, 1)), np.array([1, 2, -1, 0, 3.0]))
    with pytest.raises(ValueError, match="offsets"):
        fit_poisson_dpm(np.ones((3, 1)), np.array([1, 2, 3.0]), np.array([1.0, 0.0, 1.0]))


# ---------------------------------------------------------------------------
# normal kernel


def test_constant_response_predictive_mean():
    y = np.full(50, 3.25)
    fit = fit_normal_dpm(np.ones((50, 1)), y, mcmc=Mcmc(600, 200, 2), seed=0)
    pred = posterior_predictive(fit, np.ones((1, 1)), seed=1, mean_only=True)[:, 0]
    assert abs(pred.mean() - 3.25) <= 2 * max(batch_se(pred), 1e-12)


def test_two_separated_clusters(two_clusters):
    y, fit = two_clusters
    # transient singletons come and go; substantive clusters hold >= 5% of units
    big = np.array([np.sum(fit.clusters(r)[2] >= 0.05 * len(y)) for r in range(fit.n_draws)])
    assert np.mean(big == 2) >= 0.9
    assert np.bincount(fit.n_clusters).argmax() == 2
    # the two large clusters reproduce the k-means partition of the same data
    _, km = kmeans2(y[:, None], np.array([[-10.0], [10.0]]), minit="matrix", seed=0)
    agree = []
    for r in range(0, fit.n_draws, 10):
        lab = fit.labels[r]
        main = np.argsort(fit.clusters(r)[2])[-2:]
        sel = np.isin(lab, main)
        contingency = np.array([[np.sum((lab[sel] == m) & (km[sel] == c)) for c in (0, 1)] for m in main])
        agree.append(max(np.trace(contingency), np.trace(contingency[::-1])) / sel.sum())
    assert min(agree) > 0.99


def test_predictive_variance_exceeds_kernel_variance(linear_normal):
    X, y, fit = linear_normal
    pred = posterior_predictive(fit, X[:5], seed=2)
    assert np.all(pred.var(axis=0) >= fit.sig2.mean() * 0.9)
    assert pred.var() >= fit.sig2.mean()


def test_predictive_mean_at_training_row(linear_normal):
    X, y, fit = linear_normal
    row = X[7:8]
    pred = posterior_predictive(fit, np.repeat(row, 50, axis=0), seed=3).mean(axis=1)
    cond = DpmConditional(fit).mixture_mean(np.arange(fit.n_draws), row, None)[:, 0]
    se = np.hypot(batch_se(pred), batch_se(cond))
    assert abs(pred.mean() - cond.mean()) <= 2 * se


def test_predictive_dimension_mismatch(linear_normal):
    _, _, fit = linear_normal
    with pytest.raises(ValueError, match="columns"):
        posterior_predictive(fit, np.ones((2, 3)))


def test_ks_distance_prefers_correct_specification():
    rng = np.random.default_rng(6)
    x = rng.uniform(-2, 2, 300)
    y = 1.0 + 2.0 * x + 0.5 * rng.standard_normal(300)
    X = np.column_stack([np.ones(300), x])
    good = fit_normal_dpm(X, y, mcmc=Mcmc(800, 200, 2), seed=6)
    bad = fit_normal_dpm(X[:, :1], y, mcmc=Mcmc(800, 200, 2), seed=6)
    upper = x > np.median(x)

    def ks(fit, design):
        rep = posterior_predictive(fit, design, seed=7)
        return np.mean([stats.ks_2samp(rep[r, upper], y[upper]).statistic for r in range(0, fit.n_draws, 10)])

    assert ks(good, X) < ks(bad, X[:, :1])


def test_fit_invariants(two_clusters, sloped_poisson):
    for fit in (two_clusters[1], sloped_poisson[2]):
        assert np.all(np.isfinite(fit.lam)) and np.all(fit.lam > 0)
        assert np.all(fit.n_clusters <= fit.n_obs) and np.all(fit.n_clusters >= 1)
        assert np.all(fit.labels < fit.n_clusters[:, None]) and np.all(fit.labels >= 0)
        for r in range(fit.n_draws):
            assert fit.clusters(r)[2].sum() == fit.n_obs
            assert np.array_equal(np.bincount(fit.labels[r], minlength=fit.n_clusters[r]), fit.clusters(r)[2])
    assert np.all(two_clusters[1].sig2 > 0)


def test_relabeling_leaves_predictions_unchanged(linear_normal):
    X, _, fit = linear_normal
    o = fit.offsets
    perm_rows = np.concatenate([o[r] + np.random.default_rng(r).permutation(fit.n_clusters[r])
                                for r in range(fit.n_draws)])
    new_labels = np.empty_like(fit.labels)
    for r in range(fit.n_draws):
        local = perm_rows[o[r]:o[r + 1]] - o[r]
        inverse = np.argsort(local)
        new_labels[r] = inverse[fit.labels[r]]
    relabeled = DpmFit(**{**{k: getattr(fit, k) for k in fit.__dataclass_fields__},
                          "beta": fit.beta[perm_rows], "sig2": fit.sig2[perm_rows], "counts": fit.counts[perm_rows],
                          "labels": new_labels})
    draws = np.arange(fit.n_draws)
    a = DpmConditional(fit).mixture_mean(draws, X[:20], None)
    b = DpmConditional(relabeled).mixture_mean(draws, X[:20], None)
    assert np.allclose(a, b, rtol=0, atol=1e-12)
    for r in range(0, fit.n_draws, 37):
        assert np.array_equal(relabeled.beta[relabeled.offsets[r] + relabeled.labels[r]],
                              fit.beta[fit.offsets[r] + fit.labels[r]])


def test_exchangeability_under_row_permutation(linear_normal):
    X, y, fit = linear_normal
    perm = np.random.default_rng(9).permutation(len(y))
    other = fit_normal_dpm(X[perm], y[perm], mcmc=MC, seed=4)
    for col in range(2):
        a, b = raw_cluster_mean(fit, col), raw_cluster_mean(other, col)
        # rank comparison of the two posterior samples
        assert stats.mannwhitneyu(a[::3], b[::3]).pvalue > 1e-3
        assert abs(a.mean() - b.mean()) < 4 * np.hypot(batch_se(a), batch_se(b)) + 0.05 * a.std()


def test_serialization_round_trip(tmp_path, sloped_poisson):
    _, _, fit = sloped_poisson
    save_fit(fit, tmp_path / "fit.npz")
    back = load_fit(tmp_path / "fit.npz")
    for k in ("labels", "beta", "counts", "lam", "A", "tau", "center", "scale"):
        assert np.array_equal(getattr(fit, k), getattr(back, k))
    assert back.mcmc == fit.mcmc and back.kernel == "poisson"


# ---------------------------------------------------------------------------
# Poisson kernel


def test_intercept_only_rate():
    rng = np.random.default_rng(2)
    off = rng.uniform(0.5, 2.0, 500)
    y = rng.poisson(2.0 * off).astype(float)
    fit = fit_poisson_dpm(np.ones((500, 1)), y, off, mcmc=MC, seed=2)
    rate = np.array([np.exp(fit.clusters(r)[0][:, 0]) @ fit.clusters(r)[2] / 500 for r in range(fit.n_draws)])
    assert 1.8 <= rate.mean() <= 2.2
    assert 0.1 <= fit.meta["acceptance"] <= 0.6


def test_known_slope(sloped_poisson):
    X, y, fit = sloped_poisson
    slope = raw_cluster_mean(fit, 1)
    assert abs(slope.mean() - 0.5) <= 3 * slope.std(ddof=1)
    mle = poisson_irls(X, y).coef[1]
    assert abs(slope.mean() - mle) <= 3 * slope.std(ddof=1)


def test_doubling_offsets(sloped_poisson):
    X, y, fit = sloped_poisson
    doubled = fit_poisson_dpm(X, y, np.full(len(y), 2.0), mcmc=MC, seed=3)
    assert np.allclose(raw_cluster_mean(doubled, 1), raw_cluster_mean(fit, 1), atol=1e-9)
    assert np.allclose(raw_cluster_mean(doubled, 0), raw_cluster_mean(fit, 0) - np.log(2.0), atol=1e-9)
    Xn = X[:10]
    a = posterior_predictive(fit, Xn, np.ones(10), seed=5, mean_only=True)
    b = posterior_predictive(fit, Xn, np.full(10, 2.0), seed=5, mean_only=True)
    assert np.allclose(b, 2.0 * a, rtol=1e-12)


def test_seeded_fits_are_reproducible(sloped_poisson):
    X, y, fit = sloped_poisson
    again = fit_poisson_dpm(X, y, np.ones(len(y)), mcmc=MC, seed=3)
    assert np.array_equal(again.beta, fit.beta) and np.array_equal(again.labels, fit.labels)
