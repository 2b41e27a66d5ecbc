"""Compiled Gibbs samplers for Dirichlet-process-mixture regressions.

Both kernels use the auxiliary-component label update (Neal's Algorithm 8,
in the variant that reuses auxiliary components across observations)
followed by within-cluster parameter updates, base-measure hyperparameter
updates and the augmented-Gamma update of the DP mass. Randomness comes from
numba's internal generator, seeded once per call.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NORMAL = 0
POISSON = 1


@njit(cache=True)
def _mvn_cov(mean, cov):
    # eigen route tolerates singular covariances (e.g. a point-mass prior)
    p = mean.shape[0]
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    z = np.random.standard_normal(p)
    out = mean.copy()
    for j in range(p):
        if w[j] > 0.0:
            out += v[:, j] * (np.sqrt(w[j]) * z[j])
    return out


@njit(cache=True)
def _mvn_prec(prec, rhs):
    # draw from N(prec^-1 rhs, prec^-1)
    p = rhs.shape[0]
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(prec, rhs)
    z = np.random.standard_normal(p)
    return mean + np.linalg.solve(L.T, z)


@njit(cache=True)
def _loglik(kernel, yi, xi, logoff_i, beta, sig2):
    eta = 0.0
    for h in range(xi.shape[0]):
        eta += xi[h] * beta[h]
    if kernel == NORMAL:
        r = yi - eta
        return -0.5 * np.log(sig2) - 0.5 * r * r / sig2
    eta += logoff_i
    if eta > 700.0:
        eta = 700.0
    return yi * eta - np.exp(eta)


@njit(cache=True)
def _draw_base(A, tau, a_sig, b_sig, out_beta):
    for h in range(A.shape[0]):
        out_beta[h] = A[h] + np.random.standard_normal() / np.sqrt(tau[h])
    return 1.0 / np.random.gamma(a_sig, 1.0 / b_sig)


@njit(cache=True)
def _cluster_logpost(y, X, logoff, members, nk, beta, A, tau):
    lp = 0.0
    for ii in range(nk):
        i = members[ii]
        eta = logoff[i]
        for h in range(beta.shape[0]):
            eta += X[i, h] * beta[h]
        if eta > 700.0:
            eta = 700.0
        lp += y[i] * eta - np.exp(eta)
    for h in range(beta.shape[0]):
        d = beta[h] - A[h]
        lp -= 0.5 * tau[h] * d * d
    return lp


@njit(cache=True)
def run_sampler(
    kernel, y, X, logoff, H, mu_A, S_A, a_sig, b_sig, tau_shape, tau_rate,
    lam_shape, lam_rate, lam_init, fixed_lam, tau_init, fixed_tau, fixed_A,
    init_beta, init_sig2, n_iter, burn, thin, m_aux, step_init, target_acc, seed,
):
    np.random.seed(seed)
    n, p = X.shape
    cap = n + m_aux + 1
    beta = np.zeros((cap, p))
    sig2 = np.ones(cap)
    counts = np.zeros(cap, dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    K = 1
    beta[0] = init_beta
    sig2[0] = init_sig2
    counts[0] = n
    A = mu_A.copy()
    tau = tau_init.copy()
    lam = lam_init if fixed_lam <= 0.0 else fixed_lam

    n_keep = 0
    for it in range(burn, n_iter):
        if (it - burn) % thin == 0:
            n_keep += 1
    keep_labels = np.zeros((n_keep, n), dtype=np.int32)
    keep_K = np.zeros(n_keep, dtype=np.int64)
    keep_lam = np.zeros(n_keep)
    keep_A = np.zeros((n_keep, p))
    keep_tau = np.zeros((n_keep, p))
    flat_cap = n_keep * 4 + 16
    flat_beta = np.zeros((flat_cap, p))
    flat_sig2 = np.zeros(flat_cap)
    flat_counts = np.zeros(flat_cap, dtype=np.int64)
    n_flat = 0
    trace_K = np.zeros(n_iter, dtype=np.int64)

    log_step = np.log(step_init)
    acc_post = 0
    tries_post = 0
    logw = np.zeros(cap)
    aux_beta = np.zeros((m_aux, p))
    aux_sig2 = np.zeros(m_aux)
    members = np.zeros(n, dtype=np.int64)
    starts = np.zeros(cap + 1, dtype=np.int64)
    fill = np.zeros(cap, dtype=np.int64)
    k_keep = 0

    for it in range(n_iter):
        # ---- label updates; auxiliary components are reused across
        # observations and refreshed once per sweep and whenever one is taken
        for j in range(m_aux):
            aux_sig2[j] = _draw_base(A, tau, a_sig, b_sig, aux_beta[j])
        for i in range(n):
            c = labels[i]
            counts[c] -= 1
            if counts[c] == 0:
                slot = np.random.randint(m_aux)
                aux_beta[slot] = beta[c]
                aux_sig2[slot] = sig2[c]
                last = K - 1
                if c != last:
                    beta[c] = beta[last]
                    sig2[c] = sig2[last]
                    counts[c] = counts[last]
                    for j in range(n):
                        if labels[j] == last:
                            labels[j] = c
                counts[last] = 0
                K -= 1
            xi = X[i]
            mx = -np.inf
            for k in range(K):
                logw[k] = np.log(counts[k]) + _loglik(kernel, y[i], xi, logoff[i], beta[k], sig2[k])
                if logw[k] > mx:
                    mx = logw[k]
            log_new = np.log(lam / m_aux)
            for j in range(m_aux):
                logw[K + j] = log_new + _loglik(kernel, y[i], xi, logoff[i], aux_beta[j], aux_sig2[j])
                if logw[K + j] > mx:
                    mx = logw[K + j]
            tot = 0.0
            for k in range(K + m_aux):
                logw[k] = np.exp(logw[k] - mx)
                tot += logw[k]
            u = np.random.random() * tot
            acc = 0.0
            choice = K + m_aux - 1
            for k in range(K + m_aux):
                acc += logw[k]
                if u < acc:
                    choice = k
                    break
            if choice >= K:
                j = choice - K
                beta[K] = aux_beta[j]
                sig2[K] = aux_sig2[j]
                counts[K] = 0
                aux_sig2[j] = _draw_base(A, tau, a_sig, b_sig, aux_beta[j])
                choice = K
                K += 1
            counts[choice] += 1
            labels[i] = choice

        # ---- member lists (counting sort by label)
        starts[0] = 0
        for k in range(K):
            starts[k + 1] = starts[k] + counts[k]
            fill[k] = starts[k]
        for i in range(n):
            k = labels[i]
            members[fill[k]] = i
            fill[k] += 1

        # ---- within-cluster parameters
        accepted = 0
        for k in range(K):
            s0 = starts[k]
            nk = counts[k]
            mem = members[s0:s0 + nk]
            if kernel == NORMAL:
                XtX = np.zeros((p, p))
                Xty = np.zeros(p)
                for ii in range(nk):
                    i = mem[ii]
                    for h in range(p):
                        Xty[h] += X[i, h] * y[i]
                        for g in range(p):
                            XtX[h, g] += X[i, h] * X[i, g]
                prec = XtX / sig2[k]
                rhs = Xty / sig2[k]
                for h in range(p):
                    prec[h, h] += tau[h]
                    rhs[h] += tau[h] * A[h]
                beta[k] = _mvn_prec(prec, rhs)
                ssr = 0.0
                for ii in range(nk):
                    i = mem[ii]
                    r = y[i]
                    for h in range(p):
                        r -= X[i, h] * beta[k, h]
                    ssr += r * r
                sig2[k] = 1.0 / np.random.gamma(a_sig + 0.5 * nk, 1.0 / (b_sig + 0.5 * ssr))
            else:
                Q = nk * H
                for h in range(p):
                    Q[h, h] += tau[h]
                L = np.linalg.cholesky(Q)
                z = np.random.standard_normal(p)
                prop = beta[k] + np.exp(log_step) * np.linalg.solve(L.T, z)
                cur_lp = _cluster_logpost(y, X, logoff, mem, nk, beta[k], A, tau)
                new_lp = _cluster_logpost(y, X, logoff, mem, nk, prop, A, tau)
                if np.log(np.random.random()) < new_lp - cur_lp:
                    beta[k] = prop
                    accepted += 1
        if kernel == POISSON:
            if it < burn:
                log_step += (accepted / K - target_acc) / (it + 1.0) ** 0.6
            else:
                acc_post += accepted
                tries_post += K

        # ---- base-measure mean (Kalman form so a singular prior covariance is allowed)
        if not fixed_A:
            bbar = np.zeros(p)
            for k in range(K):
                bbar += beta[k]
            bbar /= K
            S = S_A.copy()
            for h in range(p):
                S[h, h] += 1.0 / (tau[h] * K)
            G = np.linalg.solve(S, S_A).T
            mean = mu_A + G @ (bbar - mu_A)
            cov = S_A - G @ S_A
            A = _mvn_cov(mean, cov)

        # ---- base-measure precisions
        if not fixed_tau:
            for h in range(p):
                ss = 0.0
                for k in range(K):
                    d = beta[k, h] - A[h]
                    ss += d * d
                tau[h] = np.random.gamma(tau_shape + 0.5 * K, 1.0 / (tau_rate + 0.5 * ss))

        # ---- DP mass
        if fixed_lam <= 0.0:
            eta = np.random.beta(lam + 1.0, n)
            rate = lam_rate - np.log(eta)
            odds = (lam_shape + K - 1.0) / (n * rate)
            if np.random.random() < odds / (1.0 + odds):
                lam = np.random.gamma(lam_shape + K, 1.0 / rate)
            else:
                lam = np.random.gamma(lam_shape + K - 1.0, 1.0 / rate)

        trace_K[it] = K
        if it >= burn and (it - burn) % thin == 0:
            if n_flat + K > flat_cap:
                new_cap = 2 * flat_cap + K
                nb = np.zeros((new_cap, p))
                ns = np.zeros(new_cap)
                nc = np.zeros(new_cap, dtype=np.int64)
                nb[:n_flat] = flat_beta[:n_flat]
                ns[:n_flat] = flat_sig2[:n_flat]
                nc[:n_flat] = flat_counts[:n_flat]
                flat_beta, flat_sig2, flat_counts, flat_cap = nb, ns, nc, new_cap
            for k in range(K):
                flat_beta[n_flat + k] = beta[k]
                flat_sig2[n_flat + k] = sig2[k]
                flat_counts[n_flat + k] = counts[k]
            n_flat += K
            for i in range(n):
                keep_labels[k_keep, i] = labels[i]
            keep_K[k_keep] = K
            keep_lam[k_keep] = lam
            keep_A[k_keep] = A
            keep_tau[k_keep] = tau
            k_keep += 1

    acc_rate = acc_post / tries_post if tries_post > 0 else np.nan
    return (
        keep_labels, keep_K, flat_beta[:n_flat].copy(), flat_sig2[:n_flat].copy(),
        flat_counts[:n_flat].copy(), keep_lam, keep_A, keep_tau, trace_K, acc_rate, np.exp(log_step),
    )
