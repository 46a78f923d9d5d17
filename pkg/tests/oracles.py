"""Independent reference computations used to check the library.

These deliberately avoid the code paths they verify: the kernel oracle
integrates the process covariance numerically, and the likelihood oracle
uses dense inversion instead of Cholesky factors.
"""

from __future__ import annotations

import numpy as np

from ioulme.covariance import assemble_q
from ioulme.likelihood import ParamVector

_NODES, _WEIGHTS = np.polynomial.legendre.leggauss(160)
_X01 = 0.5 * (_NODES + 1.0)
_W01 = 0.5 * _WEIGHTS


def iou_covariance_quadrature(alpha: float, tau: float, s: float, t: float) -> float:
    """cov(W(s), W(t)) by 2-D quadrature of the stationary OU covariance.

    Integrates tau^2/(2 alpha) exp(-alpha |u - v|) over [0,s] x [0,t],
    splitting the inner integral at the diagonal kink u = v.
    """
    lo, hi = min(s, t), max(s, t)
    if lo == 0.0:
        return 0.0
    u = lo * _X01
    v_below = u[:, None] * _X01[None, :]
    inner_below = (u[:, None] * _W01[None, :] * np.exp(-alpha * (u[:, None] - v_below))).sum(axis=1)
    v_above = u[:, None] + (hi - u[:, None]) * _X01[None, :]
    inner_above = ((hi - u[:, None]) * _W01[None, :] * np.exp(-alpha * (v_above - u[:, None]))).sum(axis=1)
    outer = lo * (_W01 * (inner_below + inner_above)).sum()
    return float(tau**2 / (2.0 * alpha) * outer)


def dense_log_likelihood(dataset, theta, spec) -> float:
    """Per-subject Gaussian log-density via slogdet and explicit inversion."""
    total = 0.0
    for s in dataset.subjects:
        q = assemble_q(s, theta.cov, spec)
        r = s.y - s.x_design @ theta.beta
        sign, logdet = np.linalg.slogdet(q)
        assert sign > 0, f"non-PD covariance for subject {s.id}"
        total += -0.5 * s.n_obs * np.log(2.0 * np.pi) - 0.5 * (logdet + r @ np.linalg.inv(q) @ r)
    return float(total)


def fd_gradient(fun, x0: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite differences with a per-coordinate scaled step."""
    x0 = np.asarray(x0, dtype=float)
    out = np.empty_like(x0)
    for i in range(x0.size):
        h = rel_step * max(1.0, abs(x0[i]))
        up, dn = x0.copy(), x0.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (fun(up) - fun(dn)) / (2.0 * h)
    return out


def fd_jacobian(fun, x0: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a vector-valued function; columns index x."""
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for i in range(x0.size):
        h = rel_step * max(1.0, abs(x0[i]))
        up, dn = x0.copy(), x0.copy()
        up[i] += h
        dn[i] -= h
        cols.append((np.asarray(fun(up)) - np.asarray(fun(dn))) / (2.0 * h))
    return np.stack(cols, axis=-1)


def brute_force_information_blocks(dataset, theta: ParamVector, spec):
    """A_hat and U_hat by dense per-subject inverses and explicit traces."""
    from ioulme.covariance import assemble_q_dv

    n_v = theta.cov.p_gamma + 3
    a_hat = np.zeros((theta.p_beta, theta.p_beta))
    u_hat = np.zeros((n_v, n_v))
    for s in dataset.subjects:
        qinv = np.linalg.inv(assemble_q(s, theta.cov, spec))
        a_hat += s.x_design.T @ qinv @ s.x_design
        dq = [assemble_q_dv(s, theta.cov, spec, j) for j in range(n_v)]
        for j in range(n_v):
            for k in range(n_v):
                u_hat[j, k] += 0.5 * np.trace(qinv @ dq[j] @ qinv @ dq[k])
    n = dataset.n_subjects
    return a_hat / n, u_hat / n
