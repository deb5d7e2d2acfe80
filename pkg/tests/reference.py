"""Loop-based reference implementations used as test oracles.

Written independently of the package: explicit inverses, no batching, no
shared helpers.
"""

import numpy as np


def kf_update(m, P, y, H, R):
    S = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(S)
    return m + K @ (y - H @ m), P - K @ S @ K.T


def kf_predict(m, P, F, Q):
    return F @ m, F @ P @ F.T + Q


def oikf_update(m, P, y, H, r_diag, variant, max_iters=10, tol=1e-6, ceiling=1e12):
    """One outlier-insensitive update; returns (mean, cov, gamma, iterations)."""
    n = len(y)
    cap = ceiling * max(r_diag)
    gamma_prev = None
    if variant == "EM":
        cur_m, cur_P = kf_update(m, P, y, H, np.diag(r_diag))
        gamma_prev = np.zeros(n)
    else:
        cur_m, cur_P = m, None
    used = 0
    for _ in range(max_iters):
        gamma = np.zeros(n)
        for k in range(n):
            resid = y[k] - H[k] @ cur_m
            stat = resid ** 2
            if variant == "EM":
                stat += H[k] @ cur_P @ H[k]
            gamma[k] = min(max(stat - r_diag[k], 0.0), cap - r_diag[k])
        cur_m, cur_P = kf_update(m, P, y, H, np.diag(np.asarray(r_diag) + gamma))
        used += 1
        if gamma_prev is not None:
            changes = []
            for a, b in zip(gamma, gamma_prev):
                big = max(abs(a), abs(b))
                changes.append(abs(a - b) / big if big > 0 else 0.0)
            if max(changes) < tol:
                gamma_prev = gamma
                break
        gamma_prev = gamma
    return cur_m, cur_P, gamma_prev, used


def run_filter(obs, F, Q, H, R, m0, P0, engine, max_iters=10, tol=1e-6):
    m, P = np.asarray(m0, float), np.asarray(P0, float)
    r_diag = np.diag(R)
    means = []
    for y in obs:
        m, P = kf_predict(m, P, F, Q)
        if engine == "KF":
            m, P = kf_update(m, P, y, H, R)
        else:
            m, P, _, _ = oikf_update(m, P, y, H, r_diag, engine, max_iters, tol)
        means.append(m)
    return np.array(means)
