import hypothesis
import numpy as np
import pytest

from ioulme.covariance import CovParams, GParam, KernelKind, KernelSpec
from ioulme.data import Dataset, Subject
from ioulme.likelihood import ParamVector

hypothesis.settings.register_profile(
    "default", max_examples=25, deadline=None, derandomize=True
)
hypothesis.settings.load_profile("default")


REFERENCE_THETA = ParamVector(
    beta=[-0.25, 0.50],
    cov=CovParams.iou([1.25, 1.00, 1.50], 1.30, 0.40, 1.25**2),
)

REFERENCE_TABLE1_N250 = {
    "beta1": (-0.0006, 0.0028),
    "beta2": (-0.0026, 0.0043),
    "gamma1": (-0.0170, 0.0027),
    "gamma2": (-0.0358, 0.0052),
    "gamma3": (-0.0111, 0.0022),
    "alpha": (0.8481, 0.0121),
    "tau": (0.2459, 0.0040),
    "sigma": (-0.0026, 0.0005),
}

# bias signs of the unbalanced N=250 reference row
REFERENCE_TABLE2_N250_SIGNS = {
    "beta1": +1,
    "beta2": -1,
    "gamma1": -1,
    "gamma2": -1,
    "gamma3": -1,
    "alpha": +1,
    "tau": +1,
    "sigma": -1,
}


@pytest.fixture
def paper_theta() -> ParamVector:
    return REFERENCE_THETA


@pytest.fixture
def iou_spec() -> KernelSpec:
    return KernelSpec(kind=KernelKind.IOU, g_param=GParam.PAPER_BIVARIATE)


@pytest.fixture
def fbm_spec() -> KernelSpec:
    return KernelSpec(kind=KernelKind.FBM, g_param=GParam.CHOLESKY_FACTOR)


def random_instance(rng: np.random.Generator, kind: KernelKind, g_param: GParam, n_subjects=None, max_points=4):
    """A small random dataset plus parameters, for derivative checking."""
    n_subjects = n_subjects or int(rng.integers(1, 6))
    p_beta = int(rng.integers(1, 3))
    p_b = 2 if g_param is GParam.PAPER_BIVARIATE else int(rng.integers(1, 3))
    p_gamma = 3 if g_param is GParam.PAPER_BIVARIATE else p_b * (p_b + 1) // 2
    subjects = []
    for i in range(n_subjects):
        n = int(rng.integers(1, max_points + 1))
        times = np.sort(rng.uniform(0.3, 8.0, size=n))
        while np.any(np.diff(times) < 1e-3):
            times = np.sort(rng.uniform(0.3, 8.0, size=n))
        subjects.append(
            Subject(
                id=f"s{i}",
                times=times,
                y=rng.normal(size=n),
                x_design=rng.normal(size=(n, p_beta)),
                z_design=rng.normal(size=(n, p_b)),
            )
        )
    dataset = Dataset(subjects=tuple(subjects), horizon=8.0, p_beta=p_beta, p_b=p_b)
    gamma = rng.uniform(0.4, 1.5, size=p_gamma)
    if g_param is GParam.PAPER_BIVARIATE:
        gamma[1] = rng.uniform(-0.5, 0.5)  # keep G comfortably positive definite
    spec = KernelSpec(kind=kind, g_param=g_param)
    if kind is KernelKind.IOU:
        cov = CovParams.iou(gamma, alpha=rng.uniform(0.4, 2.5), tau=rng.uniform(0.2, 1.2), sigma2=rng.uniform(0.5, 2.0))
    else:
        cov = CovParams.fbm(gamma, hurst=rng.uniform(0.15, 0.85), tau=rng.uniform(0.2, 1.2), sigma2=rng.uniform(0.5, 2.0))
    theta = ParamVector(beta=rng.normal(size=p_beta), cov=cov)
    return dataset, theta, spec
