import dataclasses

import numpy as np
import pytest

from betacat.calibration import (
    LogNormalPrior,
    NormalPrior,
    OptimizerConfig,
    PriorConfig,
    _initial_items,
    _JointPosterior,
    _MarginalPosterior,
    calibrate,
    covariance_from_hessian,
    initial_thetas,
    laplace_uncertainty,
    posterior_predictive_check,
    sample_information_band,
)
from betacat.data import ScoreMatrix, load_model, save_model
from betacat.errors import (
    ConvergenceError,
    InsufficientDataError,
    SingularHessianError,
    ValidationError,
)
from betacat.model import item_information_array
from betacat.scoring import pearson_correlation
from betacat.simulation import TruthSpec, default_battery, generate_dataset, unit_meta


def fd_gradient(f, v, h=1e-6):
    return np.array([(f(v + e) - f(v - e)) / (2 * h) for e in np.eye(v.size) * h])


class TestPriors:
    def test_defaults(self):
        d = PriorConfig().to_dict()
        assert d["beta"] == {"dist": "normal", "mean": 0.0, "sd": 2.0}
        assert d["alpha"] == {"dist": "lognormal", "mu": 0.0, "sigma": 1.0}
        assert d["omega"] == {"dist": "normal", "mean": 0.0, "sd": 10.0}
        assert d["gamma1"] == {"dist": "normal", "mean": -2.0, "sd": 1.0}
        assert d["gamma2"] == {"dist": "normal", "mean": 2.0, "sd": 1.0}

    def test_round_trip(self):
        p = PriorConfig(beta=NormalPrior(1.0, 3.0), alpha=LogNormalPrior(0.2, 0.5))
        assert PriorConfig.from_dict(p.to_dict()) == p

    def test_validation(self):
        with pytest.raises(ValidationError):
            NormalPrior(0.0, 0.0)
        with pytest.raises(ValidationError):
            LogNormalPrior(0.0, -1.0)
        with pytest.raises(ValidationError):
            PriorConfig.from_dict({"kappa": {"mean": 0, "sd": 1}})
        with pytest.raises(ValidationError):
            PriorConfig(alpha=NormalPrior(0.0, 1.0))

    def test_lognormal_density(self):
        from scipy import stats

        p = LogNormalPrior(0.3, 0.7)
        x = 1.9
        np.testing.assert_allclose(p.logpdf_log(np.log(x)), stats.lognorm(0.7, scale=np.exp(0.3)).logpdf(x), rtol=1e-12)

    def test_optimizer_config_validation(self):
        for kw in (dict(method="mcmc"), dict(se_mode="full"), dict(quadrature_nodes=5)):
            with pytest.raises(ValidationError):
                OptimizerConfig(**kw)


class TestPosteriorGradients:
    @pytest.fixture(scope="class")
    @staticmethod
    def data():
        bank = default_battery(n_items=5)
        return generate_dataset(TruthSpec(bank, 60, seed=4, missing_rate=0.1))[0]

    def test_marginal(self, data):
        post = _MarginalPosterior(data, PriorConfig())
        rng = np.random.default_rng(0)
        v = _initial_items(5, PriorConfig()).ravel() + rng.normal(0, 0.3, 25)
        g = post.value_and_grad(v)[1]
        np.testing.assert_allclose(g, fd_gradient(lambda u: post.value_and_grad(u)[0], v), rtol=1e-5, atol=1e-5)

    def test_joint(self, data):
        post = _JointPosterior(data, PriorConfig())
        rng = np.random.default_rng(1)
        v = np.concatenate([_initial_items(5, PriorConfig()).ravel(), initial_thetas(data)])
        v = v + rng.normal(0, 0.3, v.size)
        g = post.value_and_grad(v)[1]
        np.testing.assert_allclose(g, fd_gradient(lambda u: post.value_and_grad(u)[0], v), rtol=1e-5, atol=1e-5)

    def test_marginal_matches_direct_quadrature(self, data):
        # each respondent's marginal likelihood by adaptive quadrature
        from scipy import integrate

        from betacat.model import log_density_array

        prior = PriorConfig()
        post = _MarginalPosterior(data, prior, nodes=401)
        bank = default_battery(n_items=5)
        v = np.column_stack(
            [np.log(bank.arrays()[0]), bank.arrays()[1], bank.arrays()[2], bank.arrays()[3],
             np.log(bank.arrays()[4] - bank.arrays()[3])]
        ).ravel()
        total = 0.0
        for i in range(data.shape[0]):
            f = lambda t: np.exp(log_density_array(*bank.arrays(), t, data.values[i]).sum()) * np.exp(-t * t / 2) / np.sqrt(2 * np.pi)
            total += np.log(integrate.quad(f, -8, 8, epsabs=1e-14, limit=200)[0])
        prior_only = post.value_and_grad(v)[0] + total
        from betacat.calibration import _item_prior

        np.testing.assert_allclose(prior_only, -_item_prior(v.reshape(5, 5), prior)[0], atol=1e-6)


class TestCalibrate:
    def test_fit_properties(self, small_fit):
        d = small_fit.diagnostics
        assert d["converged"] and d["grad_norm"] <= small_fit.config.gtol
        assert all(it.gamma1 < it.gamma2 and it.alpha > 0 for it in small_fit.bank)
        assert small_fit.bank["T03"].median_minutes == default_battery()["T03"].median_minutes
        assert d["trace"][-1] == pytest.approx(small_fit.log_posterior)
        assert np.all(np.diff(d["trace"][-5:]) >= -1e-9)
        assert len(small_fit.theta_estimates()) == 300

    def test_recovery_twenty_items(self):
        bank = default_battery(seed=20, n_items=20)
        data, _ = generate_dataset(TruthSpec(bank, 1000, seed=20))
        fit = calibrate(data, config=OptimizerConfig(compute_se=False))
        for k in (0, 1):
            assert pearson_correlation(bank.arrays()[k], fit.bank.arrays()[k]) >= 0.9

    def test_thetas_shrink_when_all_equal(self, battery):
        spread, alpha = {}, {}
        for sd in (1e-9, 1.0):
            data, _ = generate_dataset(TruthSpec(battery, 300, theta_sd=sd, seed=2))
            fit = calibrate(data, config=OptimizerConfig(compute_se=False))
            spread[sd], alpha[sd] = np.std(fit.thetas), np.median(fit.bank.arrays()[0])
        assert spread[1e-9] < 0.6 * spread[1.0]
        assert alpha[1e-9] < 0.25 * alpha[1.0]

    def test_single_test(self):
        data = ScoreMatrix(tuple(f"r{i}" for i in range(20)), ("A",), np.full((20, 1), 0.5))
        with pytest.raises(InsufficientDataError) as err:
            calibrate(data)
        assert err.value.code == "INSUFFICIENT_TESTS"

    def test_too_few_respondents(self, small_dataset):
        with pytest.raises(InsufficientDataError) as err:
            calibrate(small_dataset[0].select_respondents(range(5)))
        assert err.value.code == "INSUFFICIENT_RESPONDENTS"

    def test_test_without_interior_scores(self, small_dataset):
        values = np.array(small_dataset[0].values)
        values[:, 2] = np.where(values[:, 2] > 0.5, 1.0, 0.0)
        data = ScoreMatrix(small_dataset[0].respondent_ids, small_dataset[0].test_ids, values)
        with pytest.raises(ValidationError) as err:
            calibrate(data)
        assert err.value.code == "DEGENERATE_TEST"

    def test_deterministic(self, small_dataset, fast_config):
        data = small_dataset[0].select_respondents(range(120))
        a = calibrate(data, config=fast_config)
        b = calibrate(data, config=fast_config)
        assert a.bank == b.bank
        np.testing.assert_array_equal(a.thetas, b.thetas)

    def test_jitter_reaches_same_mode(self, small_dataset):
        data = small_dataset[0].select_respondents(range(120))
        a = calibrate(data, config=OptimizerConfig(compute_se=False))
        b = calibrate(data, config=OptimizerConfig(compute_se=False, init_jitter=0.2, seed=5))
        np.testing.assert_allclose(a.bank.arrays(), b.bank.arrays(), atol=1e-5)

    def test_non_convergence_raises_with_model(self, small_dataset):
        data = small_dataset[0].select_respondents(range(120))
        cfg = OptimizerConfig(max_iter=3, newton_steps=0)
        with pytest.raises(ConvergenceError) as err:
            calibrate(data, config=cfg)
        assert err.value.model is not None and not err.value.diagnostics["converged"]
        model = calibrate(data, config=dataclasses.replace(cfg, raise_on_failure=False))
        assert not model.diagnostics["converged"] and model.se == {}

    def test_joint_method(self):
        bank = default_battery(seed=1)
        data, _ = generate_dataset(TruthSpec(bank, 300, seed=1))
        fit = calibrate(data, config=OptimizerConfig(method="joint", se_mode="conditional"))
        assert fit.diagnostics["converged"]
        assert pearson_correlation(bank.arrays()[1], fit.bank.arrays()[1]) > 0.95
        # the joint mode trades theta spread for alpha along the likelihood ridge
        assert np.std(fit.thetas) < 0.8
        assert set(fit.se) == set(bank.ids)

    def test_saved_model(self, small_fit, battery, tmp_path):
        saved = small_fit.to_saved(unit_meta(battery))
        assert saved.provenance["method"].startswith("marginal MAP")
        assert saved.provenance["dataset_sha256"] == small_fit.data_fingerprint
        save_model(tmp_path / "m.json", saved)
        back = load_model(tmp_path / "m.json")
        assert back.bank == small_fit.bank
        np.testing.assert_array_equal(back.item_cov["T01"], small_fit.item_cov["T01"])


class TestLaplace:
    def test_standard_errors_present(self, small_fit):
        assert set(small_fit.se) == set(small_fit.bank.ids)
        for se in small_fit.se.values():
            assert all(0 < v < 1 for v in se.values())
        assert np.all(small_fit.theta_se > 0) and np.all(small_fit.theta_se < 1)

    def test_scaling_with_sample_size(self):
        bank = default_battery(seed=3)
        se = {}
        for n in (170, 1194):
            data, _ = generate_dataset(TruthSpec(bank, n, seed=n))
            fit = calibrate(data)
            se[n] = np.median([s["beta"] for s in fit.se.values()])
        ratio = se[170] / se[1194]
        assert 1.8 < ratio < 3.8  # sqrt(1194 / 170) = 2.65

    def test_tight_prior_kills_se(self, small_dataset):
        data = small_dataset[0].select_respondents(range(150))
        fit = calibrate(data, priors=PriorConfig(alpha=LogNormalPrior(0.0, 1e-4)))
        assert max(s["alpha"] for s in fit.se.values()) < 1e-3
        assert min(s["beta"] for s in fit.se.values()) > 1e-2

    def test_zero_row(self):
        H = np.eye(4)
        H[2, 2] = 0.0
        with pytest.raises(SingularHessianError):
            covariance_from_hessian(H)

    def test_indefinite(self):
        with pytest.raises(SingularHessianError):
            covariance_from_hessian(np.diag([1.0, -2.0]))

    def test_inverse(self):
        H = np.array([[4.0, 1.0], [1.0, 3.0]])
        np.testing.assert_allclose(covariance_from_hessian(H), np.linalg.inv(H), rtol=1e-12)

    def test_joint_modes(self):
        bank = default_battery(seed=1)
        data, _ = generate_dataset(TruthSpec(bank, 300, seed=1))
        fit = calibrate(data, config=OptimizerConfig(method="joint", compute_se=False))
        joint = laplace_uncertainty(fit, data, mode="joint")
        cond = laplace_uncertainty(fit, data, mode="conditional")
        # integrating over theta can only widen the item intervals
        for tid in bank.ids:
            assert joint.se[tid]["beta"] >= cond.se[tid]["beta"] * (1 - 1e-9)
        with pytest.raises(ValidationError):
            laplace_uncertainty(fit, data, mode="other")


class TestInformationBand:
    def test_no_draws(self, small_fit):
        grid = np.linspace(-4, 4, 9)
        band = sample_information_band(small_fit, "T01", grid, 0)
        assert band.draws.shape == (0, 9)
        it = small_fit.bank["T01"]
        np.testing.assert_array_equal(
            band.mean_curve, item_information_array(it.alpha, it.beta, it.omega, it.gamma1, it.gamma2, grid)
        )

    def test_zero_se(self, small_fit):
        band = sample_information_band(small_fit, "T02", [-1, 0, 1], 20, se_scale=0.0)
        np.testing.assert_allclose(band.draws, np.tile(band.mean_curve, (20, 1)), rtol=1e-12)

    def test_width_grows_with_scale(self, small_fit):
        grid = np.linspace(-3, 3, 13)
        widths = []
        for s in (0.5, 2.0):
            band = sample_information_band(small_fit, "T04", grid, 400, seed=1, se_scale=s)
            widths.append(np.mean(np.percentile(band.draws, 97.5, axis=0) - np.percentile(band.draws, 2.5, axis=0)))
        assert widths[1] > widths[0]

    def test_deterministic_and_needs_covariance(self, small_fit, battery):
        a = sample_information_band(small_fit, "T05", [0.0], 10, seed=3)
        b = sample_information_band(small_fit, "T05", [0.0], 10, seed=3)
        np.testing.assert_array_equal(a.draws, b.draws)
        bare = small_fit.to_saved()
        bare.item_cov.clear()
        with pytest.raises(ValidationError):
            sample_information_band(bare, "T05", [0.0], 10)


class TestPosteriorPredictive:
    def test_self_consistency(self, small_fit, small_dataset):
        ppc = posterior_predictive_check(small_fit, small_dataset[0], n_reps=100, seed=0)
        assert np.mean([r.envelope_coverage() for r in ppc.values()]) >= 0.9

    def test_single_rep(self, small_fit, small_dataset):
        ppc = posterior_predictive_check(small_fit, small_dataset[0], n_reps=1)
        assert ppc["T01"].replicated.shape == (1, 20)
        with pytest.raises(ValidationError):
            posterior_predictive_check(small_fit, small_dataset[0], n_reps=0)

    def test_boundary_frequencies(self, small_fit, small_dataset):
        ppc = posterior_predictive_check(small_fit, small_dataset[0], n_reps=200, seed=2)
        n = small_dataset[0].shape[0]
        for res in ppc.values():
            mean_rep = res.replicated_boundary.mean(axis=0)
            p = res.expected_boundary
            # replicate means average 200 * n draws; allow for theta-draw spread as well
            tol = 4 * np.sqrt(p * (1 - p) / (200 * n)) + 0.01
            assert np.all(np.abs(mean_rep - p) <= tol)
