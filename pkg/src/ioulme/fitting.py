"""Maximum-likelihood fitting with studentized standard errors.

Optimizers: Nelder-Mead (the reference simulation method), a Newton trust
region driven by the analytic score and observed information, and a hybrid
that polishes the simplex solution with Newton steps. Positivity of
(alpha, tau, sigma2) is handled either by a log-scale reparameterization
or by penalizing infeasible proposals in raw coordinates.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np

from .covariance import GParam, KernelKind, KernelSpec
from .likelihood import CholeskyFailure, LikelihoodWorkspace, PackedDataset, ParamVector, pack

__all__ = [
    "Optimizer",
    "PositivityTransform",
    "FitConfig",
    "FitResult",
    "InformationError",
    "fit",
    "studentized_se",
    "studentize",
    "profile_surface",
]


class Optimizer(enum.Enum):
    NELDER_MEAD = "nelder_mead"
    NEWTON_TRUST_REGION = "newton_trust_region"
    HYBRID = "hybrid"


class PositivityTransform(enum.Enum):
    LOG_SCALE = "log"
    RAW = "raw"


class InformationError(RuntimeError):
    """An estimated information block is singular."""

    def __init__(self, block: str):
        self.block = block
        super().__init__(f"estimated information block {block} is singular")


@dataclass(frozen=True)
class FitConfig:
    optimizer: Optimizer = Optimizer.HYBRID
    initial: ParamVector | str = "all-ones"
    positivity_transform: PositivityTransform = PositivityTransform.LOG_SCALE
    max_iters: int = 4000
    newton_max_iters: int = 100
    f_tol: float = 1e-8
    x_tol: float = 1e-6
    # relative simplex f-spread tolerance, scaled by |f| at the start as in
    # widely used simplex implementations; 0 disables the relative criterion
    f_rel_tol: float = 0.0
    # optimizer coordinate for the noise variance: "sigma2" or "sigma" (s.d.)
    sigma_coordinate: str = "sigma2"
    penalty_value: float = -1e12
    keep_trace: bool = False
    compute_se: bool = True

    def __post_init__(self):
        if self.max_iters < 1 or self.newton_max_iters < 1:
            raise ValueError("iteration budgets must be >= 1")
        if self.f_tol <= 0 or self.x_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.sigma_coordinate not in ("sigma2", "sigma"):
            raise ValueError(f"unknown sigma_coordinate {self.sigma_coordinate!r}")

    @classmethod
    def from_dict(cls, raw: dict, spec: KernelSpec) -> "FitConfig":
        initial = raw.get("initial", "all-ones")
        if isinstance(initial, dict):
            initial = ParamVector.from_dict(initial, spec)
        return cls(
            optimizer=Optimizer(raw.get("optimizer", "hybrid")),
            initial=initial,
            positivity_transform=PositivityTransform(raw.get("positivity_transform", "log")),
            max_iters=int(raw.get("max_iters", 4000)),
            newton_max_iters=int(raw.get("newton_max_iters", 100)),
            f_tol=float(raw.get("f_tol", 1e-8)),
            x_tol=float(raw.get("x_tol", 1e-6)),
            f_rel_tol=float(raw.get("f_rel_tol", 0.0)),
            sigma_coordinate=str(raw.get("sigma_coordinate", "sigma2")),
            penalty_value=float(raw.get("penalty_value", -1e12)),
            keep_trace=bool(raw.get("keep_trace", False)),
            compute_se=bool(raw.get("compute_se", True)),
        )

    def to_dict(self, spec: KernelSpec) -> dict:
        initial = self.initial if isinstance(self.initial, str) else self.initial.to_dict(spec)
        return {
            "optimizer": self.optimizer.value,
            "initial": initial,
            "positivity_transform": self.positivity_transform.value,
            "max_iters": self.max_iters,
            "newton_max_iters": self.newton_max_iters,
            "f_tol": self.f_tol,
            "x_tol": self.x_tol,
            "f_rel_tol": self.f_rel_tol,
            "sigma_coordinate": self.sigma_coordinate,
            "penalty_value": self.penalty_value,
            "keep_trace": self.keep_trace,
            "compute_se": self.compute_se,
        }


@dataclass
class FitResult:
    theta_hat: ParamVector
    loglik_at_max: float
    converged: bool
    reason: str
    iterations: int
    n_evals: int
    a_hat: np.ndarray | None = None
    u_hat: np.ndarray | None = None
    se: np.ndarray | None = None
    trace: list = field(default_factory=list)
    wall_time_ms: float = 0.0

    def to_json_dict(self, spec: KernelSpec) -> dict:
        names = self.theta_hat.names(spec)
        flat = self.theta_hat.to_flat(spec)
        estimates = {name: float(v) for name, v in zip(names, flat)}
        estimates["sigma"] = float(np.sqrt(self.theta_hat.cov.sigma2))
        if spec.kind is KernelKind.IOU:
            # omega = tau^2 / alpha^2, a reparameterization reported for reference
            estimates["omega"] = float(self.theta_hat.cov.tau**2 / self.theta_hat.cov.alpha**2)
        out = {
            "estimates": estimates,
            "se": None if self.se is None else {n: float(v) for n, v in zip(names, self.se)},
            "loglik": float(self.loglik_at_max),
            "converged": bool(self.converged),
            "reason": self.reason,
            "iterations": int(self.iterations),
            "n_evals": int(self.n_evals),
            "wall_time_ms": float(self.wall_time_ms),
        }
        if self.se is not None:
            out["se"]["sigma"] = float(self.se[-1] / (2.0 * np.sqrt(self.theta_hat.cov.sigma2)))
        return out


def _positive_indices(p_beta: int, p_gamma: int) -> list[int]:
    base = p_beta + p_gamma
    return [base, base + 1, base + 2]


class _Transform:
    """Map between raw theta and unconstrained optimizer coordinates.

    Log scale sends (alpha, tau, sigma2) through log; the fBm hurst
    parameter lives in (0,1) and goes through logit instead. In raw mode
    the noise variance may be carried as its standard deviation
    (sigma_coordinate="sigma"), matching the conventional listing of the
    parameter vector as (beta, gamma, alpha, tau, sigma).
    """

    def __init__(self, kind: PositivityTransform, spec: KernelSpec, p_beta: int, p_gamma: int, sigma_coordinate: str = "sigma2"):
        self.kind = kind
        self.p_beta = p_beta
        self.p_gamma = p_gamma
        self.pos_idx = _positive_indices(p_beta, p_gamma)
        self.kernel_idx = self.pos_idx[0]
        self.sigma_idx = self.pos_idx[2]
        self.logit_kernel = spec.kind is KernelKind.FBM
        self.sigma_as_sd = sigma_coordinate == "sigma" and kind is PositivityTransform.RAW

    def to_opt(self, flat: np.ndarray) -> np.ndarray:
        u = np.array(flat, dtype=float)
        if self.kind is PositivityTransform.RAW:
            if self.sigma_as_sd:
                u[self.sigma_idx] = np.sqrt(max(flat[self.sigma_idx], 0.0))
            return u
        for i in self.pos_idx:
            if i == self.kernel_idx and self.logit_kernel:
                h = flat[i]
                u[i] = np.log(h / (1.0 - h))
            else:
                u[i] = np.log(flat[i])
        return u

    def from_opt(self, u: np.ndarray) -> np.ndarray:
        x = np.array(u, dtype=float)
        if self.kind is PositivityTransform.RAW:
            if self.sigma_as_sd:
                x[self.sigma_idx] = u[self.sigma_idx] ** 2
            return x
        for i in self.pos_idx:
            if i == self.kernel_idx and self.logit_kernel:
                x[i] = 1.0 / (1.0 + np.exp(-u[i]))
            else:
                x[i] = np.exp(u[i])
        return x

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Diagonal of d(raw)/d(opt) evaluated at raw point x."""
        j = np.ones_like(x)
        if self.kind is PositivityTransform.RAW:
            if self.sigma_as_sd:
                j[self.sigma_idx] = 2.0 * np.sqrt(max(x[self.sigma_idx], 0.0))
            return j
        for i in self.pos_idx:
            if i == self.kernel_idx and self.logit_kernel:
                j[i] = x[i] * (1.0 - x[i])
            else:
                j[i] = x[i]
        return j

    def d2(self, x: np.ndarray) -> np.ndarray:
        """Diagonal of d2(raw)/d(opt)2 at raw point x."""
        h = np.zeros_like(x)
        if self.kind is PositivityTransform.RAW:
            if self.sigma_as_sd:
                h[self.sigma_idx] = 2.0
            return h
        for i in self.pos_idx:
            if i == self.kernel_idx and self.logit_kernel:
                h[i] = x[i] * (1.0 - x[i]) * (1.0 - 2.0 * x[i])
            else:
                h[i] = x[i]
        return h

    def domain_violation(self, flat: np.ndarray) -> float:
        """Distance from the raw parameter space; 0 when feasible."""
        total = 0.0
        for i in self.pos_idx:
            if i == self.kernel_idx and self.logit_kernel:
                total += max(0.0, -flat[i]) + max(0.0, flat[i] - 1.0)
            else:
                total += max(0.0, -flat[i])
        if any(flat[i] == 0.0 for i in self.pos_idx):
            total += 1e-8
        return total


class _Objective:
    """Penalized negative log-likelihood over optimizer coordinates."""

    def __init__(self, packed, spec, transform, p_beta, penalty_value, keep_trace):
        self.packed = packed
        self.spec = spec
        self.transform = transform
        self.p_beta = p_beta
        self.penalty = abs(penalty_value)
        self.n_evals = 0
        self.trace = [] if keep_trace else None

    def theta_at(self, u: np.ndarray) -> ParamVector:
        return ParamVector.from_flat(self.transform.from_opt(u), self.p_beta, self.spec)

    def neg_loglik(self, u: np.ndarray) -> float:
        self.n_evals += 1
        flat = self.transform.from_opt(u)
        violation = self.transform.domain_violation(flat)
        if violation > 0.0:
            return self.penalty * (1.0 + violation)
        theta = ParamVector.from_flat(flat, self.p_beta, self.spec)
        try:
            value = LikelihoodWorkspace(self.packed, theta, self.spec).log_likelihood()
        except (CholeskyFailure, ValueError):
            return self.penalty
        if not np.isfinite(value):
            return self.penalty
        if self.trace is not None:
            self.trace.append(float(value))
        return -value


def _initial_simplex(u0: np.ndarray) -> np.ndarray:
    """Vertices at u0 plus one step per coordinate: 0.1 * max(1, |u0_i|)."""
    p = u0.size
    simplex = np.tile(u0, (p + 1, 1))
    for i in range(p):
        simplex[i + 1, i] += 0.1 * max(1.0, abs(u0[i]))
    return simplex


def _run_nelder_mead(obj: _Objective, u0: np.ndarray, config: FitConfig):
    """Nelder-Mead simplex minimization of the penalized negative log-likelihood.

    This is the classic variant used by the standard statistical-software
    `optim` routine (Nash): reflection/expansion with an unconditional
    contraction whenever the reflected point fails to beat the best vertex,
    and a shrink toward the best vertex when everything else fails.
    max_iters bounds function evaluations. Stops when the simplex f-spread
    and diameter are within (f_tol, x_tol), or, when f_rel_tol > 0, when the
    f-spread falls below f_rel_tol * (|f at start| + f_rel_tol).
    """
    fn = obj.neg_loglik
    n = u0.size
    reflect, contract, expand = 1.0, 0.5, 2.0
    points = _initial_simplex(u0)
    fvals = np.empty(n + 1)
    fvals[0] = fn(points[0])
    evals = 1
    convtol_rel = config.f_rel_tol * (abs(fvals[0]) + config.f_rel_tol) if config.f_rel_tol > 0 else None
    oldsize = float(np.sum(np.abs(points[1:] - points[0])))
    calcvert = True
    best = 0
    iterations = 0
    converged = False
    reason = "iteration budget exhausted"
    while evals <= config.max_iters:
        if calcvert:
            for j in range(n + 1):
                if j != best:
                    fvals[j] = fn(points[j])
                    evals += 1
            calcvert = False
        best = int(np.argmin(fvals))
        worst = int(np.argmax(fvals))
        f_best, f_worst = fvals[best], fvals[worst]
        spread = f_worst - f_best
        diameter = float(np.max(np.abs(points - points[best])))
        if spread <= config.f_tol and diameter <= config.x_tol:
            converged = True
            reason = f"simplex diameter {diameter:.2e} and f-spread {spread:.2e} within tolerances"
            break
        if convtol_rel is not None and spread <= convtol_rel:
            converged = True
            reason = f"simplex f-spread {spread:.2e} within relative tolerance {convtol_rel:.2e}"
            break
        iterations += 1
        centroid = (points.sum(axis=0) - points[worst]) / n
        reflected = (1.0 + reflect) * centroid - reflect * points[worst]
        f_reflected = fn(reflected)
        evals += 1
        if f_reflected < f_best:
            expanded = expand * reflected + (1.0 - expand) * centroid
            f_expanded = fn(expanded)
            evals += 1
            if f_expanded < f_reflected:
                points[worst], fvals[worst] = expanded, f_expanded
            else:
                points[worst], fvals[worst] = reflected, f_reflected
        else:
            if f_reflected < f_worst:
                points[worst], fvals[worst] = reflected, f_reflected
            contracted = (1.0 - contract) * points[worst] + contract * centroid
            f_contracted = fn(contracted)
            evals += 1
            if f_contracted < fvals[worst]:
                points[worst], fvals[worst] = contracted, f_contracted
            elif f_reflected >= f_worst:
                # shrink everything toward the best vertex (a fixed point of the map)
                points[:] = contract * (points - points[best]) + points[best]
                size = float(np.sum(np.abs(points - points[best])))
                calcvert = True
                if size < oldsize:
                    oldsize = size
                else:
                    reason = "simplex degenerated without converging"
                    break
    best = int(np.argmin(fvals))
    return points[best], -float(fvals[best]), converged, reason, iterations


def _run_newton(obj: _Objective, u0: np.ndarray, config: FitConfig, n_subjects: int):
    """Trust-region Newton ascent using analytic score and observed information."""
    transform = obj.transform
    u = np.array(u0, dtype=float)

    def evaluate(u_pt):
        flat = transform.from_opt(u_pt)
        if transform.domain_violation(flat) > 0.0:
            return None
        theta = ParamVector.from_flat(flat, obj.p_beta, obj.spec)
        try:
            ws = LikelihoodWorkspace(obj.packed, theta, obj.spec)
            return ws.log_likelihood(), ws, flat
        except (CholeskyFailure, ValueError):
            return None

    state = evaluate(u)
    if state is None:
        return u, -np.inf, False, "infeasible start for newton stage", 0
    f, ws, flat = state
    radius = 1.0
    converged = False
    reason = "iteration budget exhausted"
    iters = 0
    for iters in range(1, config.newton_max_iters + 1):
        g_raw = ws.score()
        hess_raw = -n_subjects * ws.observed_information()
        gate = 1e-4 * (1.0 + abs(f)) / np.sqrt(n_subjects)
        if np.linalg.norm(g_raw) <= gate:
            converged = True
            reason = f"gradient norm {np.linalg.norm(g_raw):.2e} <= {gate:.2e}"
            break
        jac = transform.jacobian(flat)
        g_u = jac * g_raw
        hess_u = jac[:, None] * hess_raw * jac[None, :] + np.diag(g_raw * transform.d2(flat))
        # curvature of -loglik, eigenvalue-floored so the step is always ascent
        w, vecs = np.linalg.eigh(-hess_u)
        w = np.maximum(w, 1e-8)
        step = vecs @ ((vecs.T @ g_u) / w)
        norm = np.linalg.norm(step)
        if norm > radius:
            step *= radius / norm
            norm = radius
        predicted = float(g_u @ step - 0.5 * step @ (vecs @ ((vecs.T @ step) * w)))
        trial = evaluate(u + step)
        actual = -np.inf if trial is None else trial[0] - f
        ratio = actual / predicted if predicted > 0 else -np.inf
        if actual > 0.0:
            u = u + step
            f, ws, flat = trial
            if obj.trace is not None:
                obj.trace.append(float(f))
        if ratio < 0.25:
            radius = max(radius * 0.25, 1e-12)
        elif ratio > 0.75 and norm >= 0.99 * radius:
            radius = min(radius * 4.0, 1e4)
        if radius <= 1e-12:
            reason = "trust region collapsed"
            break
        obj.n_evals += 1
    return u, f, converged, reason, iters


def _resolve_initial(config: FitConfig, p_beta: int, p_gamma: int, spec: KernelSpec) -> ParamVector:
    if isinstance(config.initial, ParamVector):
        return config.initial
    if config.initial == "all-ones":
        return ParamVector.all_ones(p_beta, p_gamma, spec)
    raise ValueError(f"unknown initial point {config.initial!r}")


def fit(dataset, spec: KernelSpec, config: FitConfig = FitConfig()) -> FitResult:
    """Maximize the log-likelihood; always returns a FitResult.

    Non-convergence is reported through converged/reason, not raised. A
    dataset with fewer observations than parameters is refused as
    under-identified. Raw-transform fits raise if the initial point is
    infeasible.
    """
    t_start = time.perf_counter()
    packed = pack(dataset)
    p_beta = packed.p_beta
    p_gamma = 3 if spec.g_param is GParam.PAPER_BIVARIATE else packed.p_b * (packed.p_b + 1) // 2
    initial = _resolve_initial(config, p_beta, p_gamma, spec)
    p = initial.p

    transform = _Transform(config.positivity_transform, spec, p_beta, p_gamma, config.sigma_coordinate)
    obj = _Objective(packed, spec, transform, p_beta, config.penalty_value, config.keep_trace)

    if packed.n_obs_total < p:
        try:
            loglik0 = -obj.neg_loglik(transform.to_opt(initial.to_flat(spec)))
        except Exception:
            loglik0 = float("nan")
        return FitResult(
            theta_hat=initial,
            loglik_at_max=loglik0,
            converged=False,
            reason="under-identified",
            iterations=0,
            n_evals=obj.n_evals,
            wall_time_ms=(time.perf_counter() - t_start) * 1e3,
        )

    flat0 = initial.to_flat(spec)
    if transform.domain_violation(flat0) > 0.0:
        raise ValueError("infeasible initial point under the raw transform")
    u0 = transform.to_opt(flat0)

    if config.optimizer is Optimizer.NELDER_MEAD:
        u_best, loglik, converged, reason, iters = _run_nelder_mead(obj, u0, config)
    elif config.optimizer is Optimizer.NEWTON_TRUST_REGION:
        u_best, loglik, converged, reason, iters = _run_newton(obj, u0, config, packed.n_subjects)
    else:
        u_nm, f_nm, conv_nm, reason_nm, it_nm = _run_nelder_mead(obj, u0, config)
        u_best, loglik, converged, reason, iters = _run_newton(obj, u_nm, config, packed.n_subjects)
        iters += it_nm
        # newton only ever accepts improving steps, so loglik >= f_nm here
        if not np.isfinite(loglik) or loglik < f_nm:
            u_best, loglik, converged, reason = u_nm, f_nm, conv_nm, reason_nm

    theta_hat = obj.theta_at(u_best)
    result = FitResult(
        theta_hat=theta_hat,
        loglik_at_max=float(loglik),
        converged=bool(converged),
        reason=reason,
        iterations=int(iters),
        n_evals=obj.n_evals,
        trace=obj.trace or [],
        wall_time_ms=(time.perf_counter() - t_start) * 1e3,
    )
    if config.compute_se:
        try:
            ws = LikelihoodWorkspace(packed, theta_hat, spec)
            a_hat, u_hat_m = ws.fisher_blocks()
            result.a_hat, result.u_hat = a_hat, u_hat_m
            result.se = _se_from_blocks(a_hat, u_hat_m, packed.n_subjects)
        except (CholeskyFailure, InformationError, ValueError):
            pass
    return result


def _se_from_blocks(a_hat: np.ndarray, u_hat: np.ndarray, n_subjects: int) -> np.ndarray:
    variances = []
    for name, block in (("A", a_hat), ("U", u_hat)):
        w, vecs = np.linalg.eigh(block)
        if w.min() <= 1e-12 * max(w.max(), 1e-300):
            raise InformationError(name)
        variances.append(np.sum(vecs * vecs / w, axis=1))
    return np.sqrt(np.concatenate(variances) / n_subjects)


def studentized_se(dataset, fit_result: FitResult, spec: KernelSpec) -> np.ndarray:
    """Asymptotically efficient standard errors from the estimated information.

    sqrt of diag((1/N) blockdiag(A_hat, U_hat)^-1) evaluated at theta_hat.
    Raises InformationError naming the singular block.
    """
    packed = dataset if isinstance(dataset, PackedDataset) else pack(dataset)
    ws = LikelihoodWorkspace(packed, fit_result.theta_hat, spec)
    a_hat, u_hat = ws.fisher_blocks()
    fit_result.a_hat, fit_result.u_hat = a_hat, u_hat
    se = _se_from_blocks(a_hat, u_hat, ws.n_subjects)
    fit_result.se = se
    return se


def _block_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    w = np.maximum(w, 0.0)
    return v @ np.diag(np.sqrt(w)) @ v.T


def studentize(theta_hat: np.ndarray, theta0: np.ndarray, a_hat: np.ndarray, u_hat: np.ndarray, n_subjects: int) -> np.ndarray:
    """blockdiag(A_hat, U_hat)^(1/2) sqrt(N) (theta_hat - theta0), flat coordinates."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta0 = np.asarray(theta0, dtype=float)
    p_beta = a_hat.shape[0]
    diff = theta_hat - theta0
    out = np.empty_like(diff)
    out[:p_beta] = _block_sqrt(a_hat) @ diff[:p_beta]
    out[p_beta:] = _block_sqrt(u_hat) @ diff[p_beta:]
    return np.sqrt(n_subjects) * out


def profile_surface(dataset, spec: KernelSpec, fixed_params: ParamVector, grid_alpha, grid_tau) -> np.ndarray:
    """Log-likelihood over an (alpha, tau) grid with the rest of theta fixed.

    Cells where the covariance fails to factorize are NaN, not errors.
    Returns a (len(grid_alpha), len(grid_tau)) array.
    """
    grid_alpha = np.asarray(grid_alpha, dtype=float)
    grid_tau = np.asarray(grid_tau, dtype=float)
    for name, grid in (("alpha", grid_alpha), ("tau", grid_tau)):
        if grid.size == 0:
            raise ValueError(f"{name} grid is empty")
        if not np.all(np.isfinite(grid)):
            raise ValueError(f"{name} grid has non-finite entries")
        if grid.size > 1 and not np.all(np.diff(grid) > 0):
            raise ValueError(f"{name} grid must be strictly increasing")
    packed = pack(dataset)
    flat0 = fixed_params.to_flat(spec)
    kernel_idx = fixed_params.p_beta + fixed_params.cov.p_gamma
    out = np.full((grid_alpha.size, grid_tau.size), np.nan)
    for i, a in enumerate(grid_alpha):
        for j, t in enumerate(grid_tau):
            flat = flat0.copy()
            flat[kernel_idx] = a
            flat[kernel_idx + 1] = t
            try:
                theta = ParamVector.from_flat(flat, fixed_params.p_beta, spec)
                out[i, j] = LikelihoodWorkspace(packed, theta, spec).log_likelihood()
            except (CholeskyFailure, ValueError):
                pass
    return out
