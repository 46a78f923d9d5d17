import numpy as np
import pytest

from ioulme.covariance import CovParams, GParam, KernelKind, KernelSpec, assemble_q
from ioulme.data import Dataset, Subject
from ioulme.likelihood import (
    CholeskyFailure,
    LikelihoodWorkspace,
    ParamVector,
    fisher_blocks,
    log_likelihood,
    normalized_score,
    observed_information,
    pack,
    score,
)
from ioulme.simulate import DesignConfig, DesignKind, generate_design, simulate_responses

from conftest import REFERENCE_THETA, random_instance
from oracles import brute_force_information_blocks, dense_log_likelihood, fd_gradient, fd_jacobian

SPEC = KernelSpec()
ALL_VARIANTS = [
    (KernelKind.IOU, GParam.PAPER_BIVARIATE),
    (KernelKind.IOU, GParam.CHOLESKY_FACTOR),
    (KernelKind.FBM, GParam.PAPER_BIVARIATE),
    (KernelKind.FBM, GParam.CHOLESKY_FACTOR),
]


def single_obs_dataset(y, x, z, p_beta=1, p_b=2):
    s = Subject(id="one", times=[1.0], y=[y], x_design=[[x]], z_design=[list(z)])
    return Dataset(subjects=(s,), horizon=1.0, p_beta=p_beta, p_b=p_b)


class TestLogLikelihood:
    def test_standard_normal_density_at_mean(self):
        # n = 1, residual 0, Q = 1
        ds = single_obs_dataset(0.0, 0.0, (0.0, 0.0))
        theta = ParamVector(beta=[0.0], cov=CovParams.iou([0.0, 0.0, 0.0], 1.0, 1e-12, 1.0))
        assert log_likelihood(ds, theta, SPEC) == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)

    def test_scalar_gaussian_density(self):
        # n = 1, residual 2, Q = 4
        ds = single_obs_dataset(2.0, 0.0, (0.0, 0.0))
        theta = ParamVector(beta=[0.0], cov=CovParams.iou([0.0, 0.0, 0.0], 1.0, 1e-12, 4.0))
        want = -0.5 * np.log(2 * np.pi) - 0.5 * np.log(4.0) - 0.5
        assert log_likelihood(ds, theta, SPEC) == pytest.approx(want, abs=1e-12)

    def test_matches_dense_reference_on_simulated_data(self):
        skeleton = generate_design(DesignConfig(kind=DesignKind.BALANCED, n_subjects=12, n_points=6, design_seed=3))
        ds = simulate_responses(skeleton, REFERENCE_THETA, SPEC, noise_seed=4)
        got = log_likelihood(ds, REFERENCE_THETA, SPEC)
        want = dense_log_likelihood(ds, REFERENCE_THETA, SPEC)
        assert got == pytest.approx(want, rel=1e-9)

    def test_logdet_matches_dense_determinant_small_n(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            ds, theta, spec = random_instance(rng, KernelKind.IOU, GParam.PAPER_BIVARIATE, n_subjects=1, max_points=5)
            ws = LikelihoodWorkspace(ds, theta, spec)
            chol = ws.works[0].chol
            q = assemble_q(ds.subjects[0], theta.cov, spec)
            got = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)))
            _, want = np.linalg.slogdet(q)
            assert got == pytest.approx(want, rel=1e-10)

    def test_cholesky_failure_names_subject(self):
        # indefinite G with a dominant off-diagonal drives Q indefinite
        s_ok = Subject(id="fine", times=[1.0], y=[0.0], x_design=[[1.0]], z_design=[[0.0, 0.0]])
        s_bad = Subject(id="broken", times=[1.0, 2.0], y=[0.0, 0.0], x_design=[[1.0], [1.0]],
                        z_design=[[1.0, -1.0], [1.0, 1.0]])
        ds = Dataset(subjects=(s_ok, s_bad), horizon=2.0, p_beta=1, p_b=2)
        theta = ParamVector(beta=[0.0], cov=CovParams.iou([0.1, 50.0, 0.1], 1.0, 0.1, 0.01))
        with pytest.raises(CholeskyFailure) as err:
            log_likelihood(ds, theta, SPEC)
        assert err.value.subject_id == "broken"

    def test_deterministic(self):
        skeleton = generate_design(DesignConfig(n_subjects=5, n_points=4, design_seed=1))
        ds = simulate_responses(skeleton, REFERENCE_THETA, SPEC, noise_seed=2)
        assert log_likelihood(ds, REFERENCE_THETA, SPEC) == log_likelihood(ds, REFERENCE_THETA, SPEC)


class TestScore:
    def test_beta_block_zero_at_zero_residual(self):
        rng = np.random.default_rng(9)
        skeleton = generate_design(DesignConfig(n_subjects=4, n_points=5, design_seed=5))
        ds = simulate_responses(skeleton, REFERENCE_THETA, SPEC, noise_seed=6)
        # overwrite responses with the exact mean
        subjects = tuple(
            Subject(id=s.id, times=s.times, y=s.x_design @ REFERENCE_THETA.beta, x_design=s.x_design, z_design=s.z_design)
            for s in ds.subjects
        )
        ds0 = Dataset(subjects=subjects, horizon=ds.horizon, p_beta=2, p_b=2)
        g = score(ds0, REFERENCE_THETA, SPEC)
        np.testing.assert_allclose(g[:2], 0.0, atol=1e-10)

    @pytest.mark.parametrize("kind,g_param", ALL_VARIANTS)
    def test_matches_finite_differences(self, kind, g_param):
        rng = np.random.default_rng(hash((kind.value, g_param.value)) % 2**32)
        for _ in range(10):
            ds, theta, spec = random_instance(rng, kind, g_param)
            packed = pack(ds)
            flat0 = theta.to_flat(spec)

            def ll(flat):
                return log_likelihood(packed, ParamVector.from_flat(flat, theta.p_beta, spec), spec)

            fd = fd_gradient(ll, flat0, rel_step=1e-5)
            got = score(packed, theta, spec)
            scale = np.maximum(np.abs(fd), np.abs(got))
            assert np.all(np.abs(got - fd) <= 1e-6 * scale + 1e-8 * (1 + np.max(scale)))

    def test_normalized_score_is_score_over_sqrt_n(self):
        rng = np.random.default_rng(10)
        ds, theta, spec = random_instance(rng, KernelKind.IOU, GParam.PAPER_BIVARIATE, n_subjects=4)
        got = normalized_score(ds, theta, spec)
        np.testing.assert_array_equal(got * np.sqrt(4), score(ds, theta, spec))

    def test_score_mean_zero_at_truth(self):
        # empirical unbiasedness across replications
        design = DesignConfig(kind=DesignKind.BALANCED, n_subjects=200, n_points=8, design_seed=13)
        skeleton = generate_design(design)
        reps = 200
        draws = np.empty((reps, 8))
        for m in range(reps):
            ds = simulate_responses(skeleton, REFERENCE_THETA, SPEC, noise_seed=14, replication=m)
            draws[m] = normalized_score(ds, REFERENCE_THETA, SPEC)
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(mean) <= 4 * se)


class TestObservedInformation:
    def test_beta_block_closed_form(self):
        rng = np.random.default_rng(15)
        ds, theta, spec = random_instance(rng, KernelKind.IOU, GParam.PAPER_BIVARIATE, n_subjects=4)
        info = observed_information(ds, theta, spec)
        want = np.zeros((theta.p_beta, theta.p_beta))
        for s in ds.subjects:
            qinv = np.linalg.inv(assemble_q(s, theta.cov, spec))
            want += s.x_design.T @ qinv @ s.x_design
        want /= ds.n_subjects
        np.testing.assert_allclose(info[: theta.p_beta, : theta.p_beta], want, rtol=1e-10)

    @pytest.mark.parametrize("kind,g_param", ALL_VARIANTS)
    def test_matches_finite_differences_of_score(self, kind, g_param):
        rng = np.random.default_rng(hash(("info", kind.value, g_param.value)) % 2**32)
        for _ in range(6):
            ds, theta, spec = random_instance(rng, kind, g_param)
            packed = pack(ds)
            flat0 = theta.to_flat(spec)

            def grad(flat):
                return score(packed, ParamVector.from_flat(flat, theta.p_beta, spec), spec)

            hess_fd = fd_jacobian(grad, flat0, rel_step=1e-5)
            want = -(hess_fd + hess_fd.T) / 2.0 / ds.n_subjects
            got = observed_information(packed, theta, spec)
            scale = np.maximum(np.abs(want), np.abs(got))
            assert np.all(np.abs(got - want) <= 1e-5 * scale + 1e-7 * (1 + scale.max()))

    def test_symmetric(self):
        rng = np.random.default_rng(16)
        ds, theta, spec = random_instance(rng, KernelKind.IOU, GParam.CHOLESKY_FACTOR)
        info = observed_information(ds, theta, spec)
        assert np.max(np.abs(info - info.T)) <= 1e-10

    def test_shared_and_generic_paths_agree(self):
        skeleton = generate_design(DesignConfig(kind=DesignKind.BALANCED, n_subjects=6, n_points=5, design_seed=17))
        ds = simulate_responses(skeleton, REFERENCE_THETA, SPEC, noise_seed=18)
        shared = pack(ds, allow_shared=True)
        plain = pack(ds, allow_shared=False)
        assert shared.groups[0].shared and not any(g.shared for g in plain.groups)
        np.testing.assert_allclose(log_likelihood(shared, REFERENCE_THETA, SPEC),
                                   log_likelihood(plain, REFERENCE_THETA, SPEC), rtol=1e-13)
        np.testing.assert_allclose(score(shared, REFERENCE_THETA, SPEC),
                                   score(plain, REFERENCE_THETA, SPEC), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(observed_information(shared, REFERENCE_THETA, SPEC),
                                   observed_information(plain, REFERENCE_THETA, SPEC), rtol=1e-10, atol=1e-12)


class TestWorkspace:
    def test_factor_reproduces_q(self):
        rng = np.random.default_rng(19)
        ds, theta, spec = random_instance(rng, KernelKind.IOU, GParam.PAPER_BIVARIATE, n_subjects=3)
        ws = LikelihoodWorkspace(ds, theta, spec)
        idx = 0
        for work in ws.works:
            g = work.group
            for k in range(g.size):
                chol = work.chol if g.shared else work.chol[k]
                q = assemble_q(ds.subjects[idx], theta.cov, spec)
                # packing groups subjects by length, so match on id
                subj = next(s for s in ds.subjects if s.id == g.ids[k])
                q = assemble_q(subj, theta.cov, spec)
                np.testing.assert_allclose(chol @ chol.T, q, rtol=1e-10)
                idx += 1

    def test_reusable_across_calls(self):
        rng = np.random.default_rng(20)
        ds, theta, spec = random_instance(rng, KernelKind.IOU, GParam.PAPER_BIVARIATE)
        ws = LikelihoodWorkspace(ds, theta, spec)
        ll1, s1, i1 = ws.log_likelihood(), ws.score(), ws.observed_information()
        np.testing.assert_array_equal(s1, ws.score())
        assert ll1 == ws.log_likelihood()

    def test_rejects_domain_violations(self):
        ds = single_obs_dataset(0.0, 0.0, (0.0, 0.0))
        bad = ParamVector(beta=[0.0], cov=CovParams.iou([0.0, 0.0, 0.0], -1.0, 1.0, 1.0))
        with pytest.raises(ValueError, match="alpha"):
            log_likelihood(ds, bad, SPEC)


class TestFisherBlocks:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(22)
        for kind, g_param in ALL_VARIANTS:
            ds, theta, spec = random_instance(rng, kind, g_param, n_subjects=3)
            a_got, u_got = fisher_blocks(ds, theta, spec)
            a_want, u_want = brute_force_information_blocks(ds, theta, spec)
            np.testing.assert_allclose(a_got, a_want, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(u_got, u_want, rtol=1e-10, atol=1e-12)

    def test_u_symmetric(self):
        rng = np.random.default_rng(23)
        ds, theta, spec = random_instance(rng, KernelKind.IOU, GParam.PAPER_BIVARIATE)
        _, u_hat = fisher_blocks(ds, theta, spec)
        assert np.max(np.abs(u_hat - u_hat.T)) <= 1e-12


class TestParamVector:
    def test_flat_round_trip(self):
        theta = REFERENCE_THETA
        flat = theta.to_flat(SPEC)
        back = ParamVector.from_flat(flat, 2, SPEC)
        np.testing.assert_array_equal(back.to_flat(SPEC), flat)
        assert back.cov.alpha == theta.cov.alpha

    def test_names(self):
        assert REFERENCE_THETA.names(SPEC) == [
            "beta1", "beta2", "gamma1", "gamma2", "gamma3", "alpha", "tau", "sigma2",
        ]

    def test_from_dict_accepts_sigma(self):
        raw = {"beta": [0.0], "gamma": [1.0, 0.0, 1.0], "alpha": 1.0, "tau": 0.5, "sigma": 2.0}
        theta = ParamVector.from_dict(raw, SPEC)
        assert theta.cov.sigma2 == 4.0

    def test_from_dict_missing_field(self):
        with pytest.raises(ValueError, match="tau"):
            ParamVector.from_dict({"beta": [0.0], "gamma": [1.0], "alpha": 1.0, "sigma2": 1.0}, SPEC)
