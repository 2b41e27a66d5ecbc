from __future__ import annotations

import numpy as np
import pytest
from scipy.optimize import minimize

from medchain import glm


def test_ols_matches_lstsq(rng):
    X = np.column_stack([np.ones(200), rng.standard_normal((200, 3))])
    y = X @ [1.0, 2.0, -1.0, 0.5] + rng.standard_normal(200)
    res = glm.ols(X, y)
    assert np.allclose(res.coef, np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-10)
    resid = y - X @ res.coef
    assert res.sigma2 == pytest.approx(resid @ resid / 196)
    assert res.ridge == 0.0


def test_poisson_irls_matches_direct_optimization(rng):
    n = 400
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    off = rng.uniform(1, 5, n)
    y = rng.poisson(off * np.exp(X @ [0.3, 0.5]))
    res = glm.poisson_irls(X, y, off)

    def nll(b):
        eta = X @ b + np.log(off)
        return np.exp(eta).sum() - y @ eta

    ref = minimize(nll, np.zeros(2), method="BFGS", options={"gtol": 1e-10}).x
    assert np.allclose(res.coef, ref, atol=1e-6)
    mu = off * np.exp(X @ res.coef)
    assert np.allclose(res.cov, np.linalg.inv(X.T @ (mu[:, None] * X)), rtol=1e-6)


def test_singular_design_falls_back_to_ridge(rng):
    x = rng.standard_normal(50)
    X = np.column_stack([np.ones(50), x, x])
    with pytest.warns(RuntimeWarning, match="ridge"):
        res = glm.ols(X, 1 + x)
    assert res.ridge > 0 and np.all(np.isfinite(res.coef))
    y = rng.poisson(np.exp(0.2 * x))
    with pytest.warns(RuntimeWarning, match="ridge"):
        glm.poisson_irls(X, y)


def test_irls_nonconvergence_raises(rng):
    X = np.column_stack([np.ones(30), rng.standard_normal(30)])
    y = rng.poisson(3.0, 30)
    with pytest.raises(glm.ConvergenceError, match="did not converge"):
        glm.poisson_irls(X, y, max_iter=1)
