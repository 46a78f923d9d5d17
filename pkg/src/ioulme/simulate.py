"""Synthetic longitudinal data generation and Monte Carlo bias studies.

Designs follow the reference simulation layout: balanced subjects share
the grid t = 1..n_points; unbalanced subjects observe a random subset of
{1..20} with between 15 and 19 points. Randomness is counter-based
(Philox keyed by seed, replication, and subject), so parallel generation
is order-independent and replications are reproducible bit for bit.
"""

from __future__ import annotations

import enum
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .covariance import GParam, KernelSpec, build_q, g_matrix, kernel_matrix
from .data import Dataset, Subject
from .fitting import FitConfig, FitResult, fit
from .likelihood import CholeskyFailure, ParamVector

__all__ = [
    "DesignKind",
    "DesignConfig",
    "DesignSkeleton",
    "McConfig",
    "McReport",
    "generate_design",
    "simulate_responses",
    "run_mc_study",
    "mcse",
    "reporting_names",
    "to_reporting",
    "canonicalize_estimate",
]

_TAG_DESIGN = np.uint64(0xD351)
_TAG_NOISE = np.uint64(0x0153)

_UNBALANCED_GRID_MAX = 20
_UNBALANCED_N_LOW = 15
_UNBALANCED_N_HIGH = 20  # exclusive: floor(Uniform[15,20)) lies in {15..19}


def _stream(seed: int, tag: np.uint64, replication: int, subject: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), tag], dtype=np.uint64)
    counter = np.array([0, 0, np.uint64(replication), np.uint64(subject)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


class DesignKind(enum.Enum):
    BALANCED = "balanced"
    UNBALANCED = "unbalanced"


@dataclass(frozen=True)
class DesignConfig:
    kind: DesignKind = DesignKind.BALANCED
    n_subjects: int = 250
    n_points: int = 20
    design_seed: int = 0
    x2_per_subject: bool = False  # default: one Bernoulli draw per observation

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "DesignConfig":
        return cls(
            kind=DesignKind(raw.get("kind", "balanced")),
            n_subjects=int(raw.get("n_subjects", 250)),
            n_points=int(raw.get("n_points", 20)),
            design_seed=int(raw.get("design_seed", 0)),
            x2_per_subject=bool(raw.get("x2_per_subject", False)),
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "n_subjects": self.n_subjects,
            "n_points": self.n_points,
            "design_seed": self.design_seed,
            "x2_per_subject": self.x2_per_subject,
        }


@dataclass(frozen=True)
class SubjectDesign:
    id: str
    times: np.ndarray
    x: np.ndarray  # (n, 2): x1 = t, x2 in {0, 1}
    z: np.ndarray  # (n, 2): (1, t)


@dataclass(frozen=True)
class DesignSkeleton:
    """Times and covariates for every subject; responses not yet drawn."""

    subjects: tuple[SubjectDesign, ...]
    horizon: float
    p_beta: int = 2
    p_b: int = 2

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)


def generate_design(config: DesignConfig, replication: int = 0) -> DesignSkeleton:
    """Deterministic skeleton for the given design seed (and replication, in fresh mode)."""
    subjects = []
    horizon = float(config.n_points if config.kind is DesignKind.BALANCED else _UNBALANCED_GRID_MAX)
    for i in range(config.n_subjects):
        rng = _stream(config.design_seed, _TAG_DESIGN, replication, i)
        if config.kind is DesignKind.BALANCED:
            times = np.arange(1.0, config.n_points + 1.0)
        else:
            span = _UNBALANCED_N_HIGH - _UNBALANCED_N_LOW
            n_i = _UNBALANCED_N_LOW + int(span * rng.random())
            n_i = min(n_i, _UNBALANCED_N_HIGH - 1)
            picks = rng.choice(_UNBALANCED_GRID_MAX, size=n_i, replace=False)
            times = np.sort(picks.astype(float) + 1.0)
        n_i = times.shape[0]
        if config.x2_per_subject:
            x2 = np.full(n_i, float(rng.integers(0, 2)))
        else:
            x2 = rng.integers(0, 2, size=n_i).astype(float)
        x = np.column_stack([times, x2])
        z = np.column_stack([np.ones(n_i), times])
        subjects.append(SubjectDesign(id=f"subj{i:05d}", times=times, x=x, z=z))
    return DesignSkeleton(subjects=tuple(subjects), horizon=horizon)


def simulate_responses(
    skeleton: DesignSkeleton,
    true_theta: ParamVector,
    spec: KernelSpec,
    noise_seed: int,
    replication: int = 0,
    decomposed: bool = False,
) -> Dataset:
    """Draw responses Y ~ N(X beta, Q(v)) subject by subject.

    The default draws each subject's vector through a Cholesky factor of
    Q. Decomposed mode draws the random effect, system-noise vector, and
    measurement error separately; the two modes agree in law.
    """
    problems = true_theta.cov.violations(spec)
    if problems:
        raise ValueError("; ".join(problems))
    cov = true_theta.cov
    beta = true_theta.beta
    subjects = []
    g_chol = None
    if decomposed:
        g = g_matrix(cov.gamma, spec)
        try:
            g_chol = np.linalg.cholesky(g)
        except np.linalg.LinAlgError:
            raise CholeskyFailure("G(gamma)") from None
    for i, sd in enumerate(skeleton.subjects):
        rng = _stream(noise_seed, _TAG_NOISE, replication, i)
        n = sd.times.shape[0]
        mean = sd.x @ beta
        if decomposed:
            # H is PSD but can be numerically near-singular for smooth paths
            # on dense grids; draw through an eigenvalue factor instead
            h = kernel_matrix(sd.times, cov, spec)
            w_eig, vecs = np.linalg.eigh(h)
            if np.min(w_eig) < -1e-8 * max(np.max(w_eig), 1.0):
                raise CholeskyFailure(sd.id)
            h_factor = vecs * np.sqrt(np.maximum(w_eig, 0.0))
            b = g_chol @ rng.standard_normal(g_chol.shape[0])
            w = h_factor @ rng.standard_normal(n)
            eps = np.sqrt(cov.sigma2) * rng.standard_normal(n)
            y = mean + sd.z @ b + w + eps
        else:
            q = build_q(sd.times, sd.z, cov, spec)
            try:
                chol = np.linalg.cholesky(q)
            except np.linalg.LinAlgError:
                raise CholeskyFailure(sd.id) from None
            y = mean + chol @ rng.standard_normal(n)
        subjects.append(Subject(id=sd.id, times=sd.times, y=y, x_design=sd.x, z_design=sd.z))
    return Dataset(
        subjects=tuple(subjects),
        horizon=skeleton.horizon,
        p_beta=skeleton.p_beta,
        p_b=skeleton.p_b,
    )


def mcse(estimates) -> float:
    """Monte Carlo standard error: sqrt(sum (x_m - mean)^2 / (M (M-1)))."""
    x = np.asarray(estimates, dtype=float)
    m = x.shape[0]
    if m < 2:
        raise ValueError("MCSE needs at least 2 replications")
    return float(np.sqrt(np.sum((x - x.mean()) ** 2) / (m * (m - 1))))


def reporting_names(theta: ParamVector, spec: KernelSpec) -> list[str]:
    """Parameter names in reporting order: sigma (not sigma2) last."""
    return theta.names(spec)[:-1] + ["sigma"]


def canonicalize_estimate(flat: np.ndarray, p_beta: int, p_gamma: int, spec: KernelSpec) -> np.ndarray:
    """Resolve sign ambiguities: gamma components entering G quadratically
    and tau (which enters the kernel squared) are mapped to their
    nonnegative representatives."""
    out = np.array(flat, dtype=float)
    if spec.g_param is GParam.PAPER_BIVARIATE:
        out[p_beta] = abs(out[p_beta])
        out[p_beta + 2] = abs(out[p_beta + 2])
    else:
        # column sign flips leave L L' invariant; make the diagonal nonnegative
        p_b = spec.p_b_for(p_gamma)
        idx = 0
        for col in range(p_b):
            if out[p_beta + idx] < 0:
                span = p_b - col
                out[p_beta + idx : p_beta + idx + span] *= -1.0
            idx += p_b - col
    out[p_beta + p_gamma + 1] = abs(out[p_beta + p_gamma + 1])
    return out


def to_reporting(flat_internal: np.ndarray, p_beta: int, p_gamma: int) -> np.ndarray:
    """Internal flat theta (ends in sigma2) to reporting scale (ends in sigma)."""
    out = np.array(flat_internal, dtype=float)
    out[-1] = np.sqrt(out[-1])
    return out


@dataclass(frozen=True)
class McConfig:
    true_theta: ParamVector
    n_replications: int
    noise_seed: int = 0
    fit: FitConfig = field(default_factory=FitConfig)
    design_mode: str = "frozen"  # "frozen": one skeleton for every replication

    def __post_init__(self):
        if self.n_replications < 2:
            raise ValueError("n_replications must be >= 2 (MCSE needs M-1)")
        if self.design_mode not in ("frozen", "fresh"):
            raise ValueError(f"unknown design_mode {self.design_mode!r}")

    @classmethod
    def from_dict(cls, raw: dict, spec: KernelSpec) -> "McConfig":
        if "true_theta" not in raw:
            raise ValueError("mc config is missing field 'true_theta'")
        return cls(
            true_theta=ParamVector.from_dict(raw["true_theta"], spec),
            n_replications=int(raw.get("n_replications", 2)),
            noise_seed=int(raw.get("noise_seed", 0)),
            fit=FitConfig.from_dict(raw.get("fit", {}), spec),
            design_mode=str(raw.get("design_mode", "frozen")),
        )


@dataclass
class McReport:
    param_names: list[str]  # reporting order, sigma last
    true_values: np.ndarray  # reporting scale
    estimates: np.ndarray  # (M, p) reporting scale; NaN rows for failures
    estimates_internal: np.ndarray  # (M, p) internal scale (sigma2 last)
    converged: np.ndarray  # (M,) bool
    logliks: np.ndarray  # (M,)
    wall_times_ms: np.ndarray  # (M,)
    bias: np.ndarray
    mcse: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    n_failures: int
    n_replications: int

    def to_json_dict(self) -> dict:
        return {
            "parameters": [
                {
                    "name": name,
                    "true": float(self.true_values[i]),
                    "bias": float(self.bias[i]),
                    "mcse": float(self.mcse[i]),
                    "mean": float(self.mean[i]),
                    "sd": float(self.sd[i]),
                }
                for i, name in enumerate(self.param_names)
            ],
            "n_replications": int(self.n_replications),
            "n_failures": int(self.n_failures),
            "wall_time_ms_per_replication": [float(v) for v in self.wall_times_ms],
        }


_WORKER_STATE: dict = {}


def _init_worker(payload: dict) -> None:
    _WORKER_STATE.update(payload)


def _run_replication(m: int):
    state = _WORKER_STATE
    mc: McConfig = state["mc_config"]
    design: DesignConfig = state["design_config"]
    spec: KernelSpec = state["spec"]
    skeleton = state["skeleton"]
    if skeleton is None:
        skeleton = generate_design(design, replication=m)
    t0 = time.perf_counter()
    dataset = simulate_responses(skeleton, mc.true_theta, spec, mc.noise_seed, replication=m)
    result: FitResult = fit(dataset, spec, mc.fit)
    wall = (time.perf_counter() - t0) * 1e3
    return m, bool(result.converged), result.theta_hat.to_flat(spec), float(result.loglik_at_max), wall


def run_mc_study(
    mc_config: McConfig,
    design_config: DesignConfig,
    spec: KernelSpec,
    threads: int | None = None,
) -> McReport:
    """Fit every replication and aggregate bias and MCSE.

    Non-converged fits are recorded but excluded from bias/MCSE.
    Results are aggregated in replication order, so the report is
    identical for any worker count.
    """
    m_total = mc_config.n_replications
    skeleton = generate_design(design_config) if mc_config.design_mode == "frozen" else None
    payload = {
        "mc_config": mc_config,
        "design_config": design_config,
        "spec": spec,
        "skeleton": skeleton,
    }
    results: list = [None] * m_total
    if threads is not None and threads <= 1:
        _init_worker(payload)
        for m in range(m_total):
            results[m] = _run_replication(m)
    else:
        with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker, initargs=(payload,)) as pool:
            for item in pool.map(_run_replication, range(m_total), chunksize=4):
                results[item[0]] = item

    theta0 = mc_config.true_theta
    p_beta, p_gamma = theta0.p_beta, theta0.cov.p_gamma
    p = theta0.p
    names = reporting_names(theta0, spec)
    true_internal = canonicalize_estimate(theta0.to_flat(spec), p_beta, p_gamma, spec)
    true_report = to_reporting(true_internal, p_beta, p_gamma)

    internal = np.full((m_total, p), np.nan)
    report_scale = np.full((m_total, p), np.nan)
    converged = np.zeros(m_total, dtype=bool)
    logliks = np.full(m_total, np.nan)
    walls = np.zeros(m_total)
    for m, conv, flat, loglik, wall in results:
        canon = canonicalize_estimate(flat, p_beta, p_gamma, spec)
        internal[m] = canon
        report_scale[m] = to_reporting(canon, p_beta, p_gamma)
        converged[m] = conv
        logliks[m] = loglik
        walls[m] = wall

    ok = report_scale[converged]
    n_ok = ok.shape[0]
    if n_ok >= 2:
        mean = ok.mean(axis=0)
        bias = mean - true_report
        sd = ok.std(axis=0, ddof=1)
        mcse_vec = np.array([mcse(ok[:, j]) for j in range(p)])
    else:
        mean = bias = sd = mcse_vec = np.full(p, np.nan)

    return McReport(
        param_names=names,
        true_values=true_report,
        estimates=report_scale,
        estimates_internal=internal,
        converged=converged,
        logliks=logliks,
        wall_times_ms=walls,
        bias=bias,
        mcse=mcse_vec,
        mean=mean,
        sd=sd,
        n_failures=int(m_total - converged.sum()),
        n_replications=m_total,
    )
