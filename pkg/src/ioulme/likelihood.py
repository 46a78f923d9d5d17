"""Exact Gaussian log-likelihood, analytic score, and observed information.

Each subject contributes an independent Gaussian term with mean X beta and
covariance Q(v); evaluation goes through per-subject Cholesky factors.
Subjects are packed into stacked groups of equal length so the heavy
linear algebra runs batched; groups where every subject shares one
covariance matrix (a balanced design) are factorized once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import (
    CovParams,
    KernelSpec,
    TimeGridCache,
    build_q,
    build_q_derivs,
    build_q_second_deriv,
)
from .data import Dataset

__all__ = [
    "ParamVector",
    "PackedDataset",
    "LikelihoodWorkspace",
    "CholeskyFailure",
    "pack",
    "log_likelihood",
    "score",
    "observed_information",
    "normalized_score",
    "fisher_blocks",
]

_LOG_2PI = float(np.log(2.0 * np.pi))

# Non-shared groups are split so batched derivative tensors stay bounded
# regardless of the number of subjects.
_CHUNK = 1024


class CholeskyFailure(Exception):
    """Q(v) is not numerically positive definite for some subject.

    Signals a parameter outside the effective parameter space; optimizers
    treat the point as infeasible.
    """

    def __init__(self, subject_id):
        self.subject_id = subject_id
        super().__init__(f"covariance not positive definite for subject {subject_id!r}")


@dataclass(frozen=True)
class ParamVector:
    """Full parameter theta = (beta, gamma, alpha-or-hurst, tau, sigma2)."""

    beta: np.ndarray
    cov: CovParams

    def __post_init__(self):
        b = np.array(self.beta, dtype=float).ravel()
        b.setflags(write=False)
        object.__setattr__(self, "beta", b)

    @property
    def p_beta(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.p_beta + self.cov.p_gamma + 3

    def to_flat(self, spec: KernelSpec) -> np.ndarray:
        return np.concatenate([self.beta, self.cov.to_v(spec)])

    @classmethod
    def from_flat(cls, flat, p_beta: int, spec: KernelSpec) -> "ParamVector":
        flat = np.asarray(flat, dtype=float)
        return cls(beta=flat[:p_beta], cov=CovParams.from_v(flat[p_beta:], spec))

    def names(self, spec: KernelSpec) -> list[str]:
        return (
            [f"beta{i + 1}" for i in range(self.p_beta)]
            + [f"gamma{i + 1}" for i in range(self.cov.p_gamma)]
            + [spec.kernel_param_name, "tau", "sigma2"]
        )

    @classmethod
    def all_ones(cls, p_beta: int, p_gamma: int, spec: KernelSpec) -> "ParamVector":
        return cls.from_flat(np.ones(p_beta + p_gamma + 3), p_beta, spec)

    @classmethod
    def from_dict(cls, raw: dict, spec: KernelSpec) -> "ParamVector":
        """Build from named fields: beta, gamma, alpha|hurst, tau, sigma2 (or sigma)."""
        for key in ("beta", "gamma", "tau"):
            if key not in raw:
                raise ValueError(f"theta is missing field '{key}'")
        kp_name = spec.kernel_param_name
        if kp_name not in raw:
            raise ValueError(f"theta is missing field '{kp_name}'")
        if "sigma2" in raw:
            sigma2 = float(raw["sigma2"])
        elif "sigma" in raw:
            sigma2 = float(raw["sigma"]) ** 2
        else:
            raise ValueError("theta is missing field 'sigma2'")
        cov = CovParams(
            gamma=np.asarray(raw["gamma"], dtype=float),
            tau=float(raw["tau"]),
            sigma2=sigma2,
            alpha=float(raw[kp_name]) if kp_name == "alpha" else None,
            hurst=float(raw[kp_name]) if kp_name == "hurst" else None,
        )
        return cls(beta=np.asarray(raw["beta"], dtype=float), cov=cov)

    def to_dict(self, spec: KernelSpec) -> dict:
        return {
            "beta": [float(v) for v in self.beta],
            "gamma": [float(v) for v in self.cov.gamma],
            spec.kernel_param_name: float(self.cov.kernel_param(spec)),
            "tau": float(self.cov.tau),
            "sigma2": float(self.cov.sigma2),
        }


@dataclass(frozen=True)
class _Group:
    n: int
    ids: tuple
    times: np.ndarray  # (K, n)
    y: np.ndarray  # (K, n)
    x: np.ndarray  # (K, n, p_beta)
    z: np.ndarray  # (K, n, p_b)
    shared: bool  # one covariance matrix serves the whole group
    cache: TimeGridCache | None = None  # unique time-pair gather for kernels

    @property
    def size(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class PackedDataset:
    """Dataset rearranged into stacked equal-length groups."""

    groups: tuple[_Group, ...]
    n_subjects: int
    n_obs_total: int
    p_beta: int
    p_b: int


def pack(dataset: Dataset, allow_shared: bool = True) -> PackedDataset:
    """Stack subjects by series length; detect groups with one common Q."""
    by_n: dict[int, list] = {}
    for s in dataset.subjects:
        by_n.setdefault(s.n_obs, []).append(s)
    groups = []
    for n, subs in sorted(by_n.items()):
        times = np.stack([s.times for s in subs])
        y = np.stack([s.y for s in subs])
        x = np.stack([s.x_design for s in subs])
        z = np.stack([s.z_design for s in subs])
        ids = tuple(s.id for s in subs)
        shared = bool(
            allow_shared
            and len(subs) > 1
            and np.all(times == times[0])
            and np.all(z == z[0])
        )
        if shared:
            groups.append(_Group(n, ids, times, y, x, z, True))
        else:
            for lo in range(0, len(subs), _CHUNK):
                hi = lo + _CHUNK
                cache = TimeGridCache.build(times[lo:hi])
                groups.append(_Group(n, ids[lo:hi], times[lo:hi], y[lo:hi], x[lo:hi], z[lo:hi], False, cache))
    return PackedDataset(
        groups=tuple(groups),
        n_subjects=dataset.n_subjects,
        n_obs_total=dataset.n_obs_total,
        p_beta=dataset.p_beta,
        p_b=dataset.p_b,
    )


def _as_packed(data) -> PackedDataset:
    return data if isinstance(data, PackedDataset) else pack(data)


def _cholesky_group(group: _Group, params: CovParams, spec: KernelSpec):
    """Factorize the group's covariance; returns (chol, logdet_per_subject)."""
    if group.shared:
        q = build_q(group.times[0], group.z[0], params, spec)
        try:
            chol = np.linalg.cholesky(q)
        except np.linalg.LinAlgError:
            raise CholeskyFailure(group.ids[0]) from None
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol)))
        return chol, np.full(group.size, logdet)
    q = build_q(group.times, group.z, params, spec, group.cache)
    try:
        chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        for i in range(group.size):
            try:
                np.linalg.cholesky(q[i])
            except np.linalg.LinAlgError:
                raise CholeskyFailure(group.ids[i]) from None
        raise CholeskyFailure(group.ids[0]) from None
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    return chol, logdet


class _GroupWork:
    """Factorization and solved residuals of one group at a fixed theta."""

    def __init__(self, group: _Group, theta: ParamVector, spec: KernelSpec):
        self.group = group
        self.chol, self.logdet = _cholesky_group(group, theta.cov, spec)
        self.resid = group.y - group.x @ theta.beta
        if group.shared:
            # one factor, many right-hand sides
            z1 = np.linalg.solve(self.chol, self.resid.T)
            self.solved = np.linalg.solve(self.chol.T, z1).T
        else:
            z1 = np.linalg.solve(self.chol, self.resid[..., None])
            self.solved = np.linalg.solve(np.swapaxes(self.chol, -1, -2), z1)[..., 0]
        self._qinv = None
        self._dq = None

    @property
    def qinv(self) -> np.ndarray:
        if self._qinv is None:
            eye = np.eye(self.group.n)
            inv_l = np.linalg.solve(self.chol, eye if self.group.shared else np.broadcast_to(eye, self.chol.shape).copy())
            self._qinv = np.swapaxes(inv_l, -1, -2) @ inv_l
        return self._qinv

    def dq(self, theta: ParamVector, spec: KernelSpec) -> list[np.ndarray]:
        if self._dq is None:
            g = self.group
            if g.shared:
                self._dq = build_q_derivs(g.times[0], g.z[0], theta.cov, spec)
            else:
                self._dq = build_q_derivs(g.times, g.z, theta.cov, spec, g.cache)
        return self._dq


class LikelihoodWorkspace:
    """Per-theta factorizations reused across likelihood, score, and information."""

    def __init__(self, data, theta: ParamVector, spec: KernelSpec):
        problems = theta.cov.violations(spec)
        if problems:
            raise ValueError("; ".join(problems))
        self.packed = _as_packed(data)
        if self.packed.p_beta != theta.p_beta:
            raise ValueError(f"beta has {theta.p_beta} entries, design has {self.packed.p_beta} columns")
        self.theta = theta
        self.spec = spec
        self.works = [_GroupWork(g, theta, spec) for g in self.packed.groups]
        self.n_subjects = self.packed.n_subjects
        self._loglik = None

    def log_likelihood(self) -> float:
        if self._loglik is None:
            total = -0.5 * _LOG_2PI * self.packed.n_obs_total
            for w in self.works:
                quad = np.einsum("kn,kn->k", w.resid, w.solved)
                total -= 0.5 * (np.sum(w.logdet) + np.sum(quad))
            self._loglik = float(total)
        return self._loglik

    def score(self) -> np.ndarray:
        theta, spec = self.theta, self.spec
        n_v = theta.cov.p_gamma + 3
        beta_block = np.zeros(theta.p_beta)
        v_block = np.zeros(n_v)
        for w in self.works:
            a = w.solved
            beta_block += np.einsum("knp,kn->p", w.group.x, a)
            dq = w.dq(theta, spec)
            qinv = w.qinv
            k_subj = w.group.size
            for j in range(n_v):
                if w.group.shared:
                    quad = np.einsum("kn,nm,km->", a, dq[j], a, optimize=True)
                    tr = k_subj * np.einsum("nm,mn->", qinv, dq[j])
                else:
                    quad = np.einsum("kn,knm,km->", a, dq[j], a, optimize=True)
                    tr = np.einsum("knm,kmn->", qinv, dq[j])
                v_block[j] += 0.5 * (quad - tr)
        return np.concatenate([beta_block, v_block])

    def observed_information(self) -> np.ndarray:
        """Normalized observed information: -(1/N) times the Hessian of the log-likelihood."""
        theta, spec = self.theta, self.spec
        p_beta, n_v = theta.p_beta, theta.cov.p_gamma + 3
        p = p_beta + n_v
        hess = np.zeros((p, p))
        for w in self.works:
            g = w.group
            a = w.solved
            qinv = w.qinv
            dq = w.dq(theta, spec)
            if g.shared:
                b = [a @ dq[j] for j in range(n_v)]  # (K, n) each
                c = [qinv @ dq[j] for j in range(n_v)]  # (n, n) each
                hess[:p_beta, :p_beta] -= np.einsum("knp,nm,kmq->pq", g.x, qinv, g.x, optimize=True)
                for j in range(n_v):
                    m_j = b[j] @ qinv
                    hess[:p_beta, p_beta + j] -= np.einsum("knp,kn->p", g.x, m_j)
                for j in range(n_v):
                    for k in range(j, n_v):
                        term = -2.0 * np.einsum("kn,nm,km->", b[j], qinv, b[k], optimize=True)
                        term += g.size * np.einsum("nm,mn->", c[j], c[k])
                        d2 = build_q_second_deriv(g.times[0], g.z[0], theta.cov, spec, j, k)
                        if d2 is not None:
                            term += np.einsum("kn,nm,km->", a, d2, a, optimize=True)
                            term -= g.size * np.einsum("nm,mn->", qinv, d2)
                        hess[p_beta + j, p_beta + k] += 0.5 * term
            else:
                b = [np.einsum("knm,km->kn", dq[j], a) for j in range(n_v)]
                c = [qinv @ dq[j] for j in range(n_v)]  # (K, n, n) each
                hess[:p_beta, :p_beta] -= np.einsum("knp,knm,kmq->pq", g.x, qinv, g.x, optimize=True)
                for j in range(n_v):
                    m_j = np.einsum("knm,km->kn", qinv, b[j])
                    hess[:p_beta, p_beta + j] -= np.einsum("knp,kn->p", g.x, m_j)
                for j in range(n_v):
                    for k in range(j, n_v):
                        term = -2.0 * np.einsum("kn,knm,km->", b[j], qinv, b[k], optimize=True)
                        term += np.einsum("knm,kmn->", c[j], c[k])
                        d2 = build_q_second_deriv(g.times, g.z, theta.cov, spec, j, k, g.cache)
                        if d2 is not None:
                            term += np.einsum("kn,knm,km->", a, d2, a, optimize=True)
                            term -= np.einsum("knm,kmn->", qinv, d2)
                        hess[p_beta + j, p_beta + k] += 0.5 * term
        i_upper = np.triu_indices(p, 1)
        hess[(i_upper[1], i_upper[0])] = hess[i_upper]
        return -hess / self.n_subjects

    def fisher_blocks(self) -> tuple[np.ndarray, np.ndarray]:
        """(A_hat, U_hat): normalized information blocks, no response involved.

        A_hat = (1/N) sum X' Q^-1 X; U_hat[j,k] = (1/N) sum tr(Q^-1 dQ_j Q^-1 dQ_k)/2.
        """
        theta, spec = self.theta, self.spec
        n_v = theta.cov.p_gamma + 3
        a_hat = np.zeros((theta.p_beta, theta.p_beta))
        u_hat = np.zeros((n_v, n_v))
        for w in self.works:
            g = w.group
            qinv = w.qinv
            dq = w.dq(theta, spec)
            c = [qinv @ dq[j] for j in range(n_v)]
            if g.shared:
                a_hat += np.einsum("knp,nm,kmq->pq", g.x, qinv, g.x, optimize=True)
                for j in range(n_v):
                    for k in range(j, n_v):
                        u_hat[j, k] += 0.5 * g.size * np.einsum("nm,mn->", c[j], c[k])
            else:
                a_hat += np.einsum("knp,knm,kmq->pq", g.x, qinv, g.x, optimize=True)
                for j in range(n_v):
                    for k in range(j, n_v):
                        u_hat[j, k] += 0.5 * np.einsum("knm,kmn->", c[j], c[k])
        i_upper = np.triu_indices(n_v, 1)
        u_hat[(i_upper[1], i_upper[0])] = u_hat[i_upper]
        n = self.n_subjects
        return a_hat / n, u_hat / n


def log_likelihood(data, theta: ParamVector, spec: KernelSpec) -> float:
    """Exact Gaussian log-likelihood of the dataset at theta.

    Raises CholeskyFailure when any subject's covariance is not
    numerically positive definite.
    """
    return LikelihoodWorkspace(data, theta, spec).log_likelihood()


def score(data, theta: ParamVector, spec: KernelSpec) -> np.ndarray:
    """Analytic gradient of the log-likelihood, length p."""
    return LikelihoodWorkspace(data, theta, spec).score()


def observed_information(data, theta: ParamVector, spec: KernelSpec) -> np.ndarray:
    """Normalized observed information -(1/N) d2 loglik, p x p symmetric."""
    return LikelihoodWorkspace(data, theta, spec).observed_information()


def normalized_score(data, theta: ParamVector, spec: KernelSpec) -> np.ndarray:
    """Score divided by sqrt(N)."""
    ws = LikelihoodWorkspace(data, theta, spec)
    return ws.score() / np.sqrt(ws.n_subjects)


def fisher_blocks(data, theta: ParamVector, spec: KernelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Estimated information blocks (A_hat, U_hat) at theta's covariance parameters."""
    return LikelihoodWorkspace(data, theta, spec).fisher_blocks()
