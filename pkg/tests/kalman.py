"""Kalman filter and backward-smoothing oracle for linear-Gaussian state-space models.

z_0 ~ N(0, tm I), z_{t+1} = A z_t + N(0, tm I), x_t = C z_t + N(0, tg I).
"""

import numpy as np


def kalman_filter(A, C, tm, tg, x):
    """Filtered means/covariances and the exact log evidence log p(x_{0:T})."""
    A, C = np.atleast_2d(A), np.atleast_2d(C)
    dz, dx = A.shape[0], C.shape[0]
    Q, R = tm * np.eye(dz), tg * np.eye(dx)
    m_pred, P_pred = np.zeros(dz), Q.copy()
    means, covs, loglik = [], [], 0.0
    for t, xt in enumerate(np.atleast_2d(x)):
        if t:
            m_pred, P_pred = A @ means[-1], A @ covs[-1] @ A.T + Q
        S = C @ P_pred @ C.T + R
        r = xt - C @ m_pred
        sign, logdet = np.linalg.slogdet(2 * np.pi * S)
        loglik += -0.5 * (logdet + r @ np.linalg.solve(S, r))
        G = P_pred @ C.T @ np.linalg.inv(S)
        means.append(m_pred + G @ r)
        covs.append(P_pred - G @ C @ P_pred)
    return np.array(means), np.array(covs), float(loglik)


def backward_kernels(A, tm, means, covs):
    """Exact smoothing factorisation p(z_T | x) prod p(z_t | z_{t+1}, x_{0:t}).

    Returns [(J_t, h_t, V_t)] for t < T with mean J_t z_{t+1} + h_t and covariance V_t.
    """
    A = np.atleast_2d(A)
    Q = tm * np.eye(A.shape[0])
    out = []
    for m, P in zip(means[:-1], covs[:-1]):
        J = P @ A.T @ np.linalg.inv(A @ P @ A.T + Q)
        out.append((J, m - J @ A @ m, P - J @ A @ P))
    return out
