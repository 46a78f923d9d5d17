"""Empirical checks of the asymptotic theory behind the estimator.

Verifies, at simulation scale: the quadratic expansion of the local
log-likelihood ratio, the central limit behavior of the normalized score,
stabilization and nondegeneracy of the estimated information blocks,
normality of the studentized estimator, and the decay of third-derivative
magnitudes used to control the expansion remainder.

Every check is a pure function of its seeds and configs: rerunning with
the same arguments reproduces the report exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .covariance import KernelSpec
from .data import Dataset, Subject
from .fitting import studentize
from .likelihood import (
    CholeskyFailure,
    LikelihoodWorkspace,
    ParamVector,
    pack,
)
from .simulate import DesignConfig, DesignSkeleton, generate_design, simulate_responses

__all__ = [
    "LanCheckReport",
    "CltReport",
    "InfoLimitReport",
    "NormalityReport",
    "lan_expansion_check",
    "score_clt_check",
    "information_limit_check",
    "studentized_normality",
    "third_derivative_bound_check",
]


def skeleton_dataset(skeleton: DesignSkeleton) -> Dataset:
    """Dataset with zero responses; enough for information-block computations."""
    subjects = tuple(
        Subject(id=sd.id, times=sd.times, y=np.zeros(sd.times.shape[0]), x_design=sd.x, z_design=sd.z)
        for sd in skeleton.subjects
    )
    return Dataset(subjects=subjects, horizon=skeleton.horizon, p_beta=skeleton.p_beta, p_b=skeleton.p_b)


def _blockdiag(a: np.ndarray, u: np.ndarray) -> np.ndarray:
    p = a.shape[0] + u.shape[0]
    out = np.zeros((p, p))
    out[: a.shape[0], : a.shape[0]] = a
    out[a.shape[0] :, a.shape[0] :] = u
    return out


def _default_directions(p: int, extra_random: int, seed: int) -> tuple[np.ndarray, list[str]]:
    dirs = [np.eye(p)[i] for i in range(p)]
    labels = [f"e{i + 1}" for i in range(p)]
    rng = np.random.default_rng(seed)
    for r in range(extra_random):
        v = rng.standard_normal(p)
        dirs.append(v / np.linalg.norm(v))
        labels.append(f"rand{r + 1}")
    return np.array(dirs), labels


@dataclass
class LanCheckReport:
    n_values: list[int]
    direction_labels: list[str]
    directions: np.ndarray  # (n_dir, p)
    mean_abs_residual: np.ndarray  # (n_N, n_dir), remainder against the fixed information
    mcse_abs_residual: np.ndarray  # (n_N, n_dir)
    mean_abs_residual_local: np.ndarray  # same, expansion around each dataset's own I_N
    mean_abs_variant_gap: np.ndarray  # mean |fixed - local| per cell
    skipped: list  # (N, label) cells that were infeasible
    replications: int

    def to_json_dict(self) -> dict:
        return {
            "n_values": [int(n) for n in self.n_values],
            "directions": {
                label: [float(v) for v in vec]
                for label, vec in zip(self.direction_labels, self.directions)
            },
            "mean_abs_residual": {
                label: {str(n): float(self.mean_abs_residual[i, j]) for i, n in enumerate(self.n_values)}
                for j, label in enumerate(self.direction_labels)
            },
            "mcse_abs_residual": {
                label: {str(n): float(self.mcse_abs_residual[i, j]) for i, n in enumerate(self.n_values)}
                for j, label in enumerate(self.direction_labels)
            },
            "mean_abs_residual_local": {
                label: {str(n): float(self.mean_abs_residual_local[i, j]) for i, n in enumerate(self.n_values)}
                for j, label in enumerate(self.direction_labels)
            },
            "mean_abs_variant_gap": {
                label: {str(n): float(self.mean_abs_variant_gap[i, j]) for i, n in enumerate(self.n_values)}
                for j, label in enumerate(self.direction_labels)
            },
            "skipped": [[int(n), label] for n, label in self.skipped],
            "replications": int(self.replications),
        }


def lan_expansion_check(
    true_theta: ParamVector,
    spec: KernelSpec,
    design_config: DesignConfig,
    n_values,
    directions=None,
    direction_labels=None,
    replications: int = 200,
    noise_seed: int = 0,
    extra_random_directions: int = 3,
    direction_seed: int = 7011,
) -> LanCheckReport:
    """Remainder of the local quadratic expansion across sample sizes.

    For each N and direction u, computes per replication
    R_N(u) = [l(theta0 + u/sqrt(N)) - l(theta0)] - [score(theta0)'u/sqrt(N)
    - u' I u / 2], with I the block-diagonal estimated information on the
    largest design (and, as a variant, each dataset's own observed
    information). Reports mean |R_N(u)| and its Monte Carlo error.
    """
    n_values = sorted(int(n) for n in n_values)
    p = true_theta.p
    if directions is None:
        directions, direction_labels = _default_directions(p, extra_random_directions, direction_seed)
    else:
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        if direction_labels is None:
            direction_labels = [f"u{i + 1}" for i in range(directions.shape[0])]

    flat0 = true_theta.to_flat(spec)
    p_beta = true_theta.p_beta

    largest = generate_design(replace(design_config, n_subjects=n_values[-1]))
    ws = LikelihoodWorkspace(skeleton_dataset(largest), true_theta, spec)
    a_hat, u_hat = ws.fisher_blocks()
    info_fixed = _blockdiag(a_hat, u_hat)

    n_dir = directions.shape[0]
    mean_abs = np.full((len(n_values), n_dir), np.nan)
    mcse_abs = np.full((len(n_values), n_dir), np.nan)
    mean_abs_local = np.full((len(n_values), n_dir), np.nan)
    mean_gap = np.full((len(n_values), n_dir), np.nan)
    skipped = []

    for i_n, n in enumerate(n_values):
        skeleton = generate_design(replace(design_config, n_subjects=n))
        sqrt_n = np.sqrt(n)
        quad_fixed = np.array([d @ info_fixed @ d for d in directions])
        resid = np.full((replications, n_dir), np.nan)
        resid_local = np.full((replications, n_dir), np.nan)
        feasible = np.ones(n_dir, dtype=bool)
        for m in range(replications):
            data = pack(simulate_responses(skeleton, true_theta, spec, noise_seed, replication=m))
            ws0 = LikelihoodWorkspace(data, true_theta, spec)
            ll0 = ws0.log_likelihood()
            delta = ws0.score() / sqrt_n
            info_local = ws0.observed_information()
            for j, u in enumerate(directions):
                if not feasible[j]:
                    continue
                flat_u = flat0 + u / sqrt_n
                try:
                    theta_u = ParamVector.from_flat(flat_u, p_beta, spec)
                    ll_u = LikelihoodWorkspace(data, theta_u, spec).log_likelihood()
                except (CholeskyFailure, ValueError):
                    feasible[j] = False
                    continue
                linear = float(delta @ u)
                resid[m, j] = (ll_u - ll0) - (linear - 0.5 * quad_fixed[j])
                resid_local[m, j] = (ll_u - ll0) - (linear - 0.5 * float(u @ info_local @ u))
        for j, label in enumerate(direction_labels):
            if not feasible[j]:
                skipped.append((n, label))
                continue
            vals = np.abs(resid[:, j])
            mean_abs[i_n, j] = vals.mean()
            mcse_abs[i_n, j] = vals.std(ddof=1) / np.sqrt(replications)
            mean_abs_local[i_n, j] = np.abs(resid_local[:, j]).mean()
            mean_gap[i_n, j] = np.abs(resid[:, j] - resid_local[:, j]).mean()

    return LanCheckReport(
        n_values=n_values,
        direction_labels=list(direction_labels),
        directions=directions,
        mean_abs_residual=mean_abs,
        mcse_abs_residual=mcse_abs,
        mean_abs_residual_local=mean_abs_local,
        mean_abs_variant_gap=mean_gap,
        skipped=skipped,
        replications=replications,
    )


@dataclass
class CltReport:
    info: np.ndarray  # blockdiag(A_hat, U_hat) at the true covariance parameters
    emp_cov: np.ndarray
    emp_mean: np.ndarray
    mean_mcse: np.ndarray
    entry_mcse: np.ndarray
    max_abs_dev: float
    max_dev_units: float  # worst deviation measured in its own MCSE
    p_beta: int
    replications: int

    def to_json_dict(self) -> dict:
        return {
            "info": self.info.tolist(),
            "empirical_covariance": self.emp_cov.tolist(),
            "empirical_mean": self.emp_mean.tolist(),
            "mean_mcse": self.mean_mcse.tolist(),
            "entry_mcse": self.entry_mcse.tolist(),
            "max_abs_deviation": float(self.max_abs_dev),
            "max_deviation_in_mcse_units": float(self.max_dev_units),
            "p_beta": int(self.p_beta),
            "replications": int(self.replications),
        }


def score_clt_check(
    true_theta: ParamVector,
    spec: KernelSpec,
    design_config: DesignConfig,
    n: int,
    replications: int,
    noise_seed: int = 0,
) -> CltReport:
    """Empirical covariance of the normalized score against the information.

    The theoretical target is block diagonal: the beta-v cross block is
    zero and the diagonal blocks are A_hat and U_hat on the same design.
    """
    skeleton = generate_design(replace(design_config, n_subjects=int(n)))
    ws = LikelihoodWorkspace(skeleton_dataset(skeleton), true_theta, spec)
    a_hat, u_hat = ws.fisher_blocks()
    info = _blockdiag(a_hat, u_hat)

    p = true_theta.p
    sqrt_n = np.sqrt(n)
    deltas = np.empty((replications, p))
    for m in range(replications):
        data = simulate_responses(skeleton, true_theta, spec, noise_seed, replication=m)
        deltas[m] = LikelihoodWorkspace(data, true_theta, spec).score() / sqrt_n

    centered = deltas - deltas.mean(axis=0)
    emp_cov = centered.T @ centered / (replications - 1)
    products = centered[:, :, None] * centered[:, None, :]
    entry_mcse = products.std(axis=0, ddof=1) / np.sqrt(replications)
    dev = np.abs(emp_cov - info)
    with np.errstate(divide="ignore", invalid="ignore"):
        units = np.where(entry_mcse > 0, dev / entry_mcse, np.inf * (dev > 0))
    return CltReport(
        info=info,
        emp_cov=emp_cov,
        emp_mean=deltas.mean(axis=0),
        mean_mcse=deltas.std(axis=0, ddof=1) / np.sqrt(replications),
        entry_mcse=entry_mcse,
        max_abs_dev=float(dev.max()),
        max_dev_units=float(units.max()),
        p_beta=true_theta.p_beta,
        replications=replications,
    )


@dataclass
class InfoLimitReport:
    n_values: list[int]
    a_blocks: list[np.ndarray]
    u_blocks: list[np.ndarray]
    a_consecutive_change: list[float]  # max |A_(N_i) - A_(N_i-1)| entrywise
    u_consecutive_change: list[float]
    a_min_eigenvalues: list[float]
    u_min_eigenvalues: list[float]

    def to_json_dict(self) -> dict:
        return {
            "n_values": [int(n) for n in self.n_values],
            "a_consecutive_change": [float(v) for v in self.a_consecutive_change],
            "u_consecutive_change": [float(v) for v in self.u_consecutive_change],
            "a_min_eigenvalues": [float(v) for v in self.a_min_eigenvalues],
            "u_min_eigenvalues": [float(v) for v in self.u_min_eigenvalues],
            "a_blocks": [a.tolist() for a in self.a_blocks],
            "u_blocks": [u.tolist() for u in self.u_blocks],
        }


def information_limit_check(
    spec: KernelSpec,
    design_config: DesignConfig,
    theta: ParamVector,
    n_values,
) -> InfoLimitReport:
    """A_hat and U_hat on nested designs of growing size.

    Designs are nested because subject-level randomness is keyed by
    subject index; stabilization of the blocks is the finite-sample
    analogue of the information limit conditions.
    """
    n_values = sorted(int(n) for n in n_values)
    a_blocks, u_blocks = [], []
    for n in n_values:
        skeleton = generate_design(replace(design_config, n_subjects=n))
        ws = LikelihoodWorkspace(skeleton_dataset(skeleton), theta, spec)
        a_hat, u_hat = ws.fisher_blocks()
        a_blocks.append(a_hat)
        u_blocks.append(u_hat)
    a_change = [float(np.max(np.abs(a_blocks[i] - a_blocks[i - 1]))) for i in range(1, len(a_blocks))]
    u_change = [float(np.max(np.abs(u_blocks[i] - u_blocks[i - 1]))) for i in range(1, len(u_blocks))]
    return InfoLimitReport(
        n_values=n_values,
        a_blocks=a_blocks,
        u_blocks=u_blocks,
        a_consecutive_change=a_change,
        u_consecutive_change=u_change,
        a_min_eigenvalues=[float(np.min(np.linalg.eigvalsh(a))) for a in a_blocks],
        u_min_eigenvalues=[float(np.min(np.linalg.eigvalsh(u))) for u in u_blocks],
    )


@dataclass
class NormalityReport:
    param_names: list[str]  # internal names; last component is sigma2
    studentized: np.ndarray  # (M_used, p)
    qq_correlation: np.ndarray  # (p,)
    hist_edges: np.ndarray  # (n_bins + 1,)
    hist_counts: np.ndarray  # (p, n_bins)
    hist_expected: np.ndarray  # (n_bins,)
    exempt: list[str]
    low_power: bool
    replications_used: int

    def to_json_dict(self) -> dict:
        return {
            "param_names": self.param_names,
            "qq_correlation": {n: float(v) for n, v in zip(self.param_names, self.qq_correlation)},
            "exempt": self.exempt,
            "low_power": bool(self.low_power),
            "replications_used": int(self.replications_used),
            "hist_edges": [float(v) for v in self.hist_edges],
            "hist_expected": [float(v) for v in self.hist_expected],
            "hist_counts": {n: [int(c) for c in row] for n, row in zip(self.param_names, self.hist_counts)},
        }


def _normal_cdf(x: np.ndarray) -> np.ndarray:
    from scipy.special import ndtr

    return ndtr(x)


def _normal_quantiles(m: int) -> np.ndarray:
    from scipy.special import ndtri

    return ndtri((np.arange(1, m + 1) - 0.5) / m)


def studentized_normality(
    estimates_internal: np.ndarray,
    design_data,
    spec: KernelSpec,
    true_theta: ParamVector,
    n_bins: int = 30,
    hist_range: tuple[float, float] = (-4.0, 4.0),
) -> NormalityReport:
    """Studentize replication estimates and compare them to a standard normal.

    Each replication's estimate is rescaled by the square root of the
    information blocks evaluated at that replication's own estimate on
    the frozen design. The sigma2 component is reported but exempt from
    normality expectations.
    """
    estimates = np.atleast_2d(np.asarray(estimates_internal, dtype=float))
    m_total, p = estimates.shape
    if np.allclose(estimates.std(axis=0), 0.0):
        raise ValueError("zero variance: all estimates are equal")
    if isinstance(design_data, DesignSkeleton):
        design_data = skeleton_dataset(design_data)
    packed = pack(design_data)
    n_subjects = packed.n_subjects
    flat0 = true_theta.to_flat(spec)
    p_beta = true_theta.p_beta

    studentized = np.empty((m_total, p))
    for m in range(m_total):
        theta_m = ParamVector.from_flat(estimates[m], p_beta, spec)
        ws = LikelihoodWorkspace(packed, theta_m, spec)
        a_hat, u_hat = ws.fisher_blocks()
        studentized[m] = studentize(estimates[m], flat0, a_hat, u_hat, n_subjects)

    quantiles = _normal_quantiles(m_total)
    qq_corr = np.empty(p)
    for j in range(p):
        qq_corr[j] = np.corrcoef(np.sort(studentized[:, j]), quantiles)[0, 1]

    edges = np.linspace(hist_range[0], hist_range[1], n_bins + 1)
    counts = np.stack([np.histogram(studentized[:, j], bins=edges)[0] for j in range(p)])
    expected = m_total * np.diff(_normal_cdf(edges))

    names = true_theta.names(spec)
    return NormalityReport(
        param_names=names,
        studentized=studentized,
        qq_correlation=qq_corr,
        hist_edges=edges,
        hist_counts=counts,
        hist_expected=expected,
        exempt=[names[-1]],
        low_power=m_total < 50,
        replications_used=m_total,
    )


def third_derivative_bound_check(
    dataset,
    theta: ParamVector,
    spec: KernelSpec,
    radius: float,
    n_points: int = 10,
    fd_step: float = 1e-4,
    seed: int = 90210,
) -> dict:
    """Scaled magnitude of the third log-likelihood derivative near theta.

    Samples points in a ball of radius c/sqrt(N) around theta, computes
    the derivative tensor of the observed information by central finite
    differences, and reports max |entry| / sqrt(N). Infeasible sample
    points are skipped.
    """
    packed = pack(dataset) if isinstance(dataset, Dataset) else dataset
    n_subjects = packed.n_subjects
    flat0 = theta.to_flat(spec)
    p = flat0.size
    p_beta = theta.p_beta
    rng = np.random.default_rng(seed)
    points = [flat0]
    ball = radius / np.sqrt(n_subjects)
    for _ in range(max(0, n_points - 1)):
        direction = rng.standard_normal(p)
        direction /= np.linalg.norm(direction)
        points.append(flat0 + ball * rng.random() * direction)

    def info_at(flat):
        return LikelihoodWorkspace(packed, ParamVector.from_flat(flat, p_beta, spec), spec).observed_information()

    per_point = []
    skipped = 0
    beta_block_max = 0.0
    for pt in points:
        try:
            worst = 0.0
            for i in range(p):
                h = fd_step * max(1.0, abs(pt[i]))
                up, dn = pt.copy(), pt.copy()
                up[i] += h
                dn[i] -= h
                slab = (info_at(up) - info_at(dn)) / (2.0 * h)
                worst = max(worst, float(np.max(np.abs(slab))))
                if i < p_beta:
                    beta_block_max = max(beta_block_max, float(np.max(np.abs(slab[:p_beta, :p_beta]))))
            per_point.append(worst)
        except (CholeskyFailure, ValueError):
            skipped += 1
    if not per_point:
        raise RuntimeError("every sampled point was infeasible")
    scaled = float(max(per_point) / np.sqrt(n_subjects))
    return {
        "max_scaled_norm": scaled,
        "per_point_max": [float(v) for v in per_point],
        "pure_beta_block_max": float(beta_block_max),
        "points_skipped": int(skipped),
        "radius": float(radius),
        "n_subjects": int(n_subjects),
    }
