import numpy as np
import pytest

from betacat.errors import ValidationError
from betacat.model import ItemBank, ItemParams, category_probs, item_information
from betacat.scoring import pearson_correlation
from betacat.simulation import (
    TruthSpec,
    default_battery,
    expected_category_counts,
    generate_dataset,
    grid_mle,
    numeric_fisher_info,
    oracle_log_density,
    random_items,
    sample_scores,
    unit_meta,
)
from betacat.model import log_density


class TestGenerateDataset:
    def test_deterministic(self, battery):
        a, ta = generate_dataset(TruthSpec(battery, 50, seed=3, missing_rate=0.2))
        b, tb = generate_dataset(TruthSpec(battery, 50, seed=3, missing_rate=0.2))
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(ta, tb)
        assert a.fingerprint() == b.fingerprint()

    def test_prefix_stable(self, battery):
        small, _ = generate_dataset(TruthSpec(battery, 10, seed=5))
        big, _ = generate_dataset(TruthSpec(battery, 20, seed=5))
        np.testing.assert_array_equal(small.values, big.values[:10])

    def test_missing_rate(self, battery):
        data, _ = generate_dataset(TruthSpec(battery, 2000, seed=1, missing_rate=0.3))
        assert data.n_missing / data.values.size == pytest.approx(0.3, abs=0.01)

    def test_spec_validation(self, battery):
        for kw in (dict(n_respondents=0), dict(n_respondents=5, theta_sd=0.0), dict(n_respondents=5, missing_rate=1.0)):
            with pytest.raises(ValidationError):
                TruthSpec(battery, **kw)

    def test_zero_alpha_scores_independent_of_theta(self):
        bank = ItemBank((ItemParams("Z", 0.0, 0.2, 1.0, -1.0, 1.5),))
        data, thetas = generate_dataset(TruthSpec(bank, 20000, seed=9))
        r = pearson_correlation(data.values[:, 0], thetas)
        assert abs(r) < 4 / np.sqrt(20000)

    def test_boundary_frequencies(self):
        item = ItemParams("B", 1.2, 0.0, 1.0, -1.0, 1.4)
        n = 100_000
        rng = np.random.default_rng(77)
        y = sample_scores(ItemBank((item,)), np.full(n, 0.3), rng)[:, 0]
        p = category_probs(item, 0.3)
        observed = ((y == 0).mean(), ((y > 0) & (y < 1)).mean(), (y == 1).mean())
        se = np.sqrt(np.array(p) * (1 - np.array(p)) / n)
        assert np.all(np.abs(np.array(observed) - p) < 3 * se)

    def test_interior_draws_strictly_inside(self):
        bank = ItemBank((ItemParams("E", 3.0, 0.0, -3.0, -5.0, 5.0),))
        y = sample_scores(bank, np.linspace(-3, 3, 5000), np.random.default_rng(0))
        assert np.all((y == 0) | (y == 1) | ((y > 0) & (y < 1)))

    def test_expected_counts(self, toy_bank):
        counts = expected_category_counts(toy_bank, [0.0, 1.0])
        np.testing.assert_allclose(counts.sum(axis=1), 2.0)

    def test_default_battery(self):
        bank = default_battery()
        assert len(bank) == 18 and bank.ids[0] == "T01"
        assert default_battery(seed=1) != bank
        assert all(it.median_minutes for it in bank)
        assert all(m.scale(0.25) == 0.25 for m in unit_meta(bank).values())


class TestOracles:
    def test_oracle_density_agrees(self):
        for item in random_items(np.random.default_rng(4), 20):
            for t in (-2.0, 0.5):
                for y in (0.0, 0.2, 0.77, 1.0):
                    np.testing.assert_allclose(oracle_log_density(item, t, y), log_density(item, t, y), rtol=1e-10)

    def test_fisher_zero_alpha(self):
        assert abs(numeric_fisher_info(ItemParams("Z", 0.0, 0.5, 1.0, -2.0, 2.0), 0.7)) < 1e-8

    def test_fisher_additivity(self):
        a = ItemParams("a", 1.1, 0.2, 0.5, -2.0, 1.5)
        b = ItemParams("b", 0.6, -0.5, 1.5, -1.0, 2.5)
        # two independent scores: the joint score is the sum, cross terms vanish in expectation
        t = 0.4
        total = numeric_fisher_info(a, t) + numeric_fisher_info(b, t)
        np.testing.assert_allclose(total, item_information(a, t) + item_information(b, t), rtol=1e-6)

    def test_grid_mle_trivial_cases(self, symmetric_item):
        bank = ItemBank((symmetric_item,))
        assert grid_mle(bank, [], "map").value == 0.0
        assert grid_mle(bank, [("S", 0.5)], "map").value == pytest.approx(0.0, abs=1e-9)
        assert grid_mle(bank, [("S", 0.5)], "mle").value == pytest.approx(0.0, abs=1e-9)
        with pytest.raises(ValidationError):
            grid_mle(bank, [], "median")
