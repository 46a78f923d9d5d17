"""Per-subject marginal covariance Q = Z G(gamma) Z' + H + sigma2 I.

Assembles the covariance of one subject's response vector and its analytic
first and second derivatives with respect to the covariance parameters
v = (gamma, alpha-or-hurst, tau, sigma2). All builders broadcast over a
leading batch axis, so stacked subjects are assembled in one call.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

__all__ = [
    "KernelKind",
    "GParam",
    "KernelSpec",
    "CovParams",
    "g_matrix",
    "g_matrix_dgamma",
    "g_matrix_d2gamma",
    "assemble_q",
    "assemble_q_dv",
    "assemble_q_d2v",
    "kernel_matrix",
    "build_q",
    "build_q_derivs",
    "build_q_second_deriv",
]


class KernelKind(enum.Enum):
    IOU = "iou"
    FBM = "fbm"


class GParam(enum.Enum):
    PAPER_BIVARIATE = "paper_bivariate"
    CHOLESKY_FACTOR = "cholesky_factor"


@dataclass(frozen=True)
class KernelSpec:
    """Which system-noise kernel and random-effects parameterization apply."""

    kind: KernelKind = KernelKind.IOU
    g_param: GParam = GParam.PAPER_BIVARIATE

    def p_b_for(self, p_gamma: int) -> int:
        """Random-effect dimension implied by the gamma length."""
        if self.g_param is GParam.PAPER_BIVARIATE:
            if p_gamma != 3:
                raise ValueError(f"paper bivariate G requires 3 gamma parameters, got {p_gamma}")
            return 2
        p_b = int((math.isqrt(8 * p_gamma + 1) - 1) // 2)
        if p_b * (p_b + 1) // 2 != p_gamma:
            raise ValueError(f"gamma length {p_gamma} is not a triangular number")
        return p_b

    @property
    def kernel_param_name(self) -> str:
        return "alpha" if self.kind is KernelKind.IOU else "hurst"

    @classmethod
    def from_dict(cls, raw: dict) -> "KernelSpec":
        return cls(
            kind=KernelKind(raw.get("kind", "iou")),
            g_param=GParam(raw.get("g_param", "paper_bivariate")),
        )

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "g_param": self.g_param.value}


@dataclass(frozen=True)
class CovParams:
    """Covariance parameters v = (gamma, alpha-or-hurst, tau, sigma2)."""

    gamma: np.ndarray
    tau: float
    sigma2: float
    alpha: float | None = None
    hurst: float | None = None

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float).ravel()
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    @classmethod
    def iou(cls, gamma, alpha, tau, sigma2) -> "CovParams":
        return cls(gamma=gamma, tau=float(tau), sigma2=float(sigma2), alpha=float(alpha))

    @classmethod
    def fbm(cls, gamma, hurst, tau, sigma2) -> "CovParams":
        return cls(gamma=gamma, tau=float(tau), sigma2=float(sigma2), hurst=float(hurst))

    @property
    def p_gamma(self) -> int:
        return self.gamma.shape[0]

    def kernel_param(self, spec: KernelSpec) -> float:
        value = self.alpha if spec.kind is KernelKind.IOU else self.hurst
        if value is None:
            raise ValueError(f"{spec.kernel_param_name} is not set on these parameters")
        return value

    def violations(self, spec: KernelSpec) -> list[str]:
        """Domain violations; empty when the parameter lies in the model space."""
        out = []
        if not np.all(np.isfinite(self.gamma)):
            out.append("gamma has non-finite entries")
        if spec.kind is KernelKind.IOU:
            if self.alpha is None or not np.isfinite(self.alpha) or self.alpha <= 0:
                out.append(f"alpha must be positive, got {self.alpha}")
        else:
            if self.hurst is None or not np.isfinite(self.hurst) or not (0 < self.hurst < 1):
                out.append(f"hurst must lie in (0, 1), got {self.hurst}")
        if not np.isfinite(self.tau) or self.tau <= 0:
            out.append(f"tau must be positive, got {self.tau}")
        if not np.isfinite(self.sigma2) or self.sigma2 <= 0:
            out.append(f"sigma2 must be positive, got {self.sigma2}")
        try:
            spec.p_b_for(self.p_gamma)
        except ValueError as exc:
            out.append(str(exc))
        return out

    def g_is_psd(self, spec: KernelSpec, tol: float = 1e-10) -> bool:
        g = g_matrix(self.gamma, spec)
        return bool(np.min(np.linalg.eigvalsh(g)) >= -tol)

    def to_v(self, spec: KernelSpec) -> np.ndarray:
        return np.concatenate([self.gamma, [self.kernel_param(spec), self.tau, self.sigma2]])

    @classmethod
    def from_v(cls, v: np.ndarray, spec: KernelSpec) -> "CovParams":
        v = np.asarray(v, dtype=float)
        gamma, kernel_param, tau, sigma2 = v[:-3], float(v[-3]), float(v[-2]), float(v[-1])
        if spec.kind is KernelKind.IOU:
            return cls.iou(gamma, kernel_param, tau, sigma2)
        return cls.fbm(gamma, kernel_param, tau, sigma2)


def _chol_template(gamma: np.ndarray, p_b: int) -> np.ndarray:
    """Lower-triangular L filled column-major from gamma."""
    L = np.zeros((p_b, p_b))
    k = 0
    for j in range(p_b):
        for i in range(j, p_b):
            L[i, j] = gamma[k]
            k += 1
    return L


def _chol_basis(p_b: int, k: int) -> np.ndarray:
    """Elementary matrix with a single 1 at the k-th column-major slot."""
    E = np.zeros((p_b, p_b))
    idx = 0
    for j in range(p_b):
        for i in range(j, p_b):
            if idx == k:
                E[i, j] = 1.0
                return E
            idx += 1
    raise IndexError(f"gamma component {k} out of range")


def g_matrix(gamma, spec: KernelSpec) -> np.ndarray:
    """Random-effects covariance G(gamma), symmetric p_b x p_b."""
    gamma = np.asarray(gamma, dtype=float).ravel()
    p_b = spec.p_b_for(gamma.shape[0])
    if spec.g_param is GParam.PAPER_BIVARIATE:
        g1, g2, g3 = gamma
        return np.array([[g1 * g1, g2], [g2, g3 * g3]])
    L = _chol_template(gamma, p_b)
    return L @ L.T


def g_matrix_dgamma(gamma, spec: KernelSpec, k: int) -> np.ndarray:
    """Elementwise partial derivative of G with respect to gamma[k]."""
    gamma = np.asarray(gamma, dtype=float).ravel()
    p_b = spec.p_b_for(gamma.shape[0])
    if spec.g_param is GParam.PAPER_BIVARIATE:
        if k == 0:
            return np.array([[2.0 * gamma[0], 0.0], [0.0, 0.0]])
        if k == 1:
            return np.array([[0.0, 1.0], [1.0, 0.0]])
        if k == 2:
            return np.array([[0.0, 0.0], [0.0, 2.0 * gamma[2]]])
        raise IndexError(f"gamma component {k} out of range")
    L = _chol_template(gamma, p_b)
    E = _chol_basis(p_b, k)
    return E @ L.T + L @ E.T


def g_matrix_d2gamma(gamma, spec: KernelSpec, j: int, k: int) -> np.ndarray:
    """Second partial derivative of G with respect to gamma[j], gamma[k]."""
    gamma = np.asarray(gamma, dtype=float).ravel()
    p_b = spec.p_b_for(gamma.shape[0])
    if spec.g_param is GParam.PAPER_BIVARIATE:
        out = np.zeros((2, 2))
        if j == k == 0:
            out[0, 0] = 2.0
        elif j == k == 2:
            out[1, 1] = 2.0
        return out
    Ej = _chol_basis(p_b, j)
    Ek = _chol_basis(p_b, k)
    return Ej @ Ek.T + Ek @ Ej.T


_KERNEL_FNS = {
    KernelKind.IOU: (
        kernels.iou_kernel,
        kernels.iou_kernel_dalpha,
        kernels.iou_kernel_dtau,
        kernels.iou_kernel_d2alpha,
        kernels.iou_kernel_dalpha_dtau,
        kernels.iou_kernel_d2tau,
    ),
    KernelKind.FBM: (
        kernels.fbm_kernel,
        kernels.fbm_kernel_dhurst,
        kernels.fbm_kernel_dtau,
        kernels.fbm_kernel_d2hurst,
        kernels.fbm_kernel_dhurst_dtau,
        kernels.fbm_kernel_d2tau,
    ),
}


def _time_grid(times: np.ndarray):
    times = np.asarray(times, dtype=float)
    return times[..., :, None], times[..., None, :]


class TimeGridCache:
    """Unique (min, max) time pairs of a stacked grid.

    Kernel matrices depend on times only through the pair
    (min(s,t), max(s,t)); on designs drawn from a common grid the number
    of distinct pairs is tiny compared to the K*n*n grid cells, so
    kernels are evaluated once per pair and gathered. build() returns
    None when the pair set is not substantially smaller than the grid.
    """

    __slots__ = ("shape", "m", "b", "inv")

    def __init__(self, shape, m, b, inv):
        self.shape = shape
        self.m = m
        self.b = b
        self.inv = inv

    @classmethod
    def build(cls, times) -> "TimeGridCache | None":
        s, t = _time_grid(times)
        m = np.minimum(s, t)
        b = np.maximum(s, t)
        flat = np.column_stack([m.ravel(), b.ravel()])
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        if uniq.shape[0] * 4 > flat.shape[0]:
            return None
        return cls(m.shape, uniq[:, 0].copy(), uniq[:, 1].copy(), inv.astype(np.intp).reshape(m.shape))

    def expand(self, values: np.ndarray) -> np.ndarray:
        return values[self.inv]


def _zgz(z: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = (z @ g) @ np.swapaxes(z, -1, -2)
    # contraction order differs across the diagonal; symmetrize exactly
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def _kernel_eval(fn, params: CovParams, spec: KernelSpec, times, cache: TimeGridCache | None):
    kp = params.kernel_param(spec)
    if cache is not None:
        return cache.expand(fn(kp, params.tau, cache.m, cache.b))
    s_grid, t_grid = _time_grid(times)
    return fn(kp, params.tau, s_grid, t_grid)


def kernel_matrix(times, params: CovParams, spec: KernelSpec, cache: TimeGridCache | None = None) -> np.ndarray:
    """System-noise covariance H over the time grid, shape (..., n, n)."""
    return _kernel_eval(_KERNEL_FNS[spec.kind][0], params, spec, times, cache)


def build_q(times, z, params: CovParams, spec: KernelSpec, cache: TimeGridCache | None = None) -> np.ndarray:
    """Q = Z G Z' + H + sigma2 I for times (..., n) and z (..., n, p_b)."""
    h = kernel_matrix(times, params, spec, cache)
    q = _zgz(np.asarray(z, dtype=float), g_matrix(params.gamma, spec)) + h
    n = q.shape[-1]
    q[..., np.arange(n), np.arange(n)] += params.sigma2
    return q


def build_q_derivs(times, z, params: CovParams, spec: KernelSpec, cache: TimeGridCache | None = None) -> list[np.ndarray]:
    """All first derivatives of Q, ordered (gamma_1..gamma_pg, alpha|hurst, tau, sigma2)."""
    times = np.asarray(times, dtype=float)
    z = np.asarray(z, dtype=float)
    _, dk_fn, dtau_fn = _KERNEL_FNS[spec.kind][:3]
    n = times.shape[-1]
    batch = times.shape[:-1]
    out = []
    for k in range(params.p_gamma):
        out.append(np.broadcast_to(_zgz(z, g_matrix_dgamma(params.gamma, spec, k)), batch + (n, n)))
    out.append(np.broadcast_to(_kernel_eval(dk_fn, params, spec, times, cache), batch + (n, n)))
    out.append(np.broadcast_to(_kernel_eval(dtau_fn, params, spec, times, cache), batch + (n, n)))
    eye = np.broadcast_to(np.eye(n), batch + (n, n))
    out.append(eye)
    return out


def build_q_second_deriv(
    times, z, params: CovParams, spec: KernelSpec, j: int, k: int, cache: TimeGridCache | None = None
) -> np.ndarray | None:
    """Second derivative of Q for v-components (j, k); None when identically zero.

    Structural zeros: any pair mixing a gamma component with a kernel
    parameter, and any pair involving sigma2.
    """
    times = np.asarray(times, dtype=float)
    z = np.asarray(z, dtype=float)
    pg = params.p_gamma
    n_v = pg + 3
    if not (0 <= j < n_v and 0 <= k < n_v):
        raise IndexError(f"v component out of range: ({j}, {k})")
    j, k = min(j, k), max(j, k)
    i_kernel, i_tau, i_sigma2 = pg, pg + 1, pg + 2
    if k == i_sigma2:
        return None
    if j < pg:
        if k >= pg:
            return None
        d2g = g_matrix_d2gamma(params.gamma, spec, j, k)
        if not d2g.any():
            return None
        return _zgz(z, d2g)
    d2k_fn, dkdtau_fn, d2tau_fn = _KERNEL_FNS[spec.kind][3:]
    if j == i_kernel and k == i_kernel:
        fn = d2k_fn
    elif j == i_kernel and k == i_tau:
        fn = dkdtau_fn
    else:
        fn = d2tau_fn
    batch = times.shape[:-1]
    n = times.shape[-1]
    return np.broadcast_to(_kernel_eval(fn, params, spec, times, cache), batch + (n, n))


def assemble_q(subject, params: CovParams, spec: KernelSpec) -> np.ndarray:
    """Marginal covariance of one subject's response vector."""
    return build_q(subject.times, subject.z_design, params, spec)


def assemble_q_dv(subject, params: CovParams, spec: KernelSpec, component_index: int) -> np.ndarray:
    """Derivative of Q with respect to v[component_index]."""
    derivs = build_q_derivs(subject.times, subject.z_design, params, spec)
    return np.array(derivs[component_index])


def assemble_q_d2v(subject, params: CovParams, spec: KernelSpec, j: int, k: int) -> np.ndarray:
    """Second derivative of Q with respect to (v[j], v[k]); zeros where structural."""
    out = build_q_second_deriv(subject.times, subject.z_design, params, spec, j, k)
    if out is None:
        n = subject.times.shape[0]
        return np.zeros((n, n))
    return np.array(out)
