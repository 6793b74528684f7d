import numpy as np
import pytest
from scipy.stats import multivariate_normal

from adello_lab.data import (
    AugmentConfig,
    HiddenLabelError,
    LongTailSpec,
    bayes_posterior,
    expected_bayes_accuracy_mc,
    lt_class_counts,
    make_task,
    read_split_csv,
    reweight_posterior,
    sample_split,
    strong_augment,
    weak_augment,
    write_split_csv,
)


class TestCounts:
    def test_cifar_constants(self):
        c = lt_class_counts(1500, 100, 10)
        assert c[0] == 1500 and c[-1] == 15
        # hand evaluation of 1500 * 100 ** (-1/9) = 898.65...
        assert c[1] == 899

    def test_no_imbalance(self):
        assert np.all(lt_class_counts(300, 1, 7) == 300)

    def test_reversed_monotone(self):
        c = lt_class_counts(300, 0.02, 100)
        assert np.all(np.diff(c) >= 0)
        assert c[0] == 300 and c[-1] == 15000

    @pytest.mark.parametrize("gamma", [0.01, 0.5, 1.0, 3.0, 100.0])
    def test_direction_and_floor(self, gamma):
        c = lt_class_counts(5, gamma, 12)
        assert c.min() >= 1
        d = np.diff(c)
        if gamma < 1:
            assert np.all(d >= 0)
        elif gamma > 1:
            assert np.all(d <= 0)
        else:
            assert np.all(d == 0)

    def test_floor_of_one(self):
        assert lt_class_counts(2, 1000, 5)[-1] == 1

    def test_round_half_up(self):
        assert list(lt_class_counts(5, 2, 2)) == [5, 3]  # 2.5 rounds up
        assert list(lt_class_counts(3, 36, 2)) == [3, 1]  # 0.083 is floored to 1

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            LongTailSpec(K=1, N1=10, gamma_l=1, gamma_u=1, M1=10)
        with pytest.raises(ValueError):
            LongTailSpec(K=3, N1=0, gamma_l=1, gamma_u=1, M1=10)


class TestTask:
    def test_deterministic(self):
        a, b = make_task(3, 4, 2.0, 1.0, 7), make_task(3, 4, 2.0, 1.0, 7)
        np.testing.assert_array_equal(a.means, b.means)
        np.testing.assert_array_equal(a.ood_mean, b.ood_mean)
        assert a.means.tobytes() == b.means.tobytes()

    def test_separation(self):
        t = make_task(2, 6, 3.0, 0.5, 1)
        allm = np.vstack([t.means, t.ood_mean])
        d = np.linalg.norm(allm[:, None] - allm[None], axis=-1)
        assert d[np.triu_indices(len(allm), 1)].min() >= 1.5

    def test_impossible_separation(self):
        with pytest.raises(RuntimeError):
            make_task(2, 5, 2.0, 1.0, 0, max_tries=3)

    def test_rejects_low_dim(self):
        with pytest.raises(ValueError):
            make_task(1, 2, 1.0, 1.0, 0)

    def test_well_separated_bayes_error_zero(self):
        t = make_task(2, 2, 20.0, 0.1, 3)
        emp, closed = expected_bayes_accuracy_mc(t, [0.5, 0.5], 5000, 0)
        assert emp == 1.0 and closed == pytest.approx(1.0, abs=1e-12)

    def test_monte_carlo_matches_closed_form(self):
        t = make_task(2, 5, 0.5, 1.0, 11)
        emp, closed = expected_bayes_accuracy_mc(t, np.full(5, 0.2), 10_000, 0)
        assert abs(emp - closed) <= 0.02
        assert closed < 0.9  # genuinely overlapping classes


class TestSplit:
    def test_balanced(self):
        t = make_task(2, 4, 2.0, 1.0, 0)
        s = sample_split(t, LongTailSpec(4, 10, 1, 1, 30), 5, 0)
        assert np.all(np.bincount(s.y_labeled) == 10)
        assert np.all(np.bincount(s.hidden_unlabeled_labels(True)) == 30)
        assert np.all(np.bincount(s.y_test) == 5)

    def test_counts_and_reversed(self):
        t = make_task(2, 5, 2.0, 1.0, 0)
        spec = LongTailSpec(5, 60, 50, 0.02, 600)
        s = sample_split(t, spec, 10, 1)
        nl = np.bincount(s.y_labeled, minlength=5)
        nu = np.bincount(s.hidden_unlabeled_labels(True), minlength=5)
        np.testing.assert_array_equal(nl, spec.labeled_counts)
        np.testing.assert_array_equal(nu, spec.unlabeled_counts)
        assert nl.argmax() == 0 and nu.argmin() == 0

    def test_deterministic(self):
        t = make_task(2, 3, 2.0, 1.0, 0)
        spec = LongTailSpec(3, 20, 5, 5, 50)
        a, b = sample_split(t, spec, 10, 4), sample_split(t, spec, 10, 4)
        for f in ("x_labeled", "y_labeled", "x_unlabeled", "x_test", "y_test"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
        assert a.hidden_unlabeled_labels(True).tobytes() == b.hidden_unlabeled_labels(True).tobytes()

    def test_hidden_labels_gated(self):
        t = make_task(2, 3, 2.0, 1.0, 0)
        s = sample_split(t, LongTailSpec(3, 5, 1, 1, 5), 2, 0)
        with pytest.raises(HiddenLabelError):
            s.hidden_unlabeled_labels()

    def test_shared_class_conditionals(self):
        # labeled and unlabeled draws of one class come from the same Gaussian
        t = make_task(2, 2, 3.0, 1.0, 0)
        s = sample_split(t, LongTailSpec(2, 4000, 1, 1, 4000), 1, 0)
        yu = s.hidden_unlabeled_labels(True)
        for k in range(2):
            ml = s.x_labeled[s.y_labeled == k].mean(0)
            mu = s.x_unlabeled[yu == k].mean(0)
            np.testing.assert_allclose(ml, t.means[k], atol=0.06)
            np.testing.assert_allclose(mu, t.means[k], atol=0.06)

    def test_ood_injection(self):
        t = make_task(2, 3, 2.0, 1.0, 0)
        s = sample_split(t, LongTailSpec(3, 5, 1, 1, 30, ood_fraction=0.25), 2, 0)
        yu = s.hidden_unlabeled_labels(True)
        assert (yu == 3).sum() == 30 and len(yu) == 120
        assert s.y_labeled.max() == 2

    def test_priors_from_spec(self):
        spec = LongTailSpec(3, 100, 4, 0.25, 40)
        t = make_task(2, 3, 2.0, 1.0, 0).with_priors(spec)
        np.testing.assert_allclose(t.labeled_prior, np.array([100, 50, 25]) / 175)
        np.testing.assert_allclose(t.unlabeled_prior, np.array([40, 80, 160]) / 280)

    def test_csv_round_trip(self, tmp_path):
        t = make_task(3, 3, 2.0, 1.0, 0)
        s = sample_split(t, LongTailSpec(3, 4, 2, 2, 6), 2, 0)
        path = write_split_csv(tmp_path / "split.csv", s)
        header = path.read_text().splitlines()[0]
        assert header == "feature_0,feature_1,feature_2,label,split"
        back = read_split_csv(path)
        np.testing.assert_array_equal(back["labeled"][0], s.x_labeled)
        np.testing.assert_array_equal(back["test"][1], s.y_test)
        assert np.all(back["unlabeled"][1] == -1)
        revealed = read_split_csv(write_split_csv(tmp_path / "diag.csv", s, diagnostics=True))
        np.testing.assert_array_equal(revealed["unlabeled"][1], s.hidden_unlabeled_labels(True))


class TestAugment:
    def test_weak_identity(self, rng):
        x = rng.normal(size=5)
        np.testing.assert_array_equal(weak_augment(x, AugmentConfig(0, 0, 0), rng), x)

    def test_weak_unbiased(self, rng):
        x = np.array([1.0, -2.0])
        draws = weak_augment(np.tile(x, (1000, 1)), AugmentConfig(0.1, 0.1, 0), rng)
        # 4 standard errors of a mean of 1000 N(0, 0.1^2) draws
        assert np.all(np.abs(draws.mean(0) - x) < 4 * 0.1 / np.sqrt(1000))
        assert draws.std(0) == pytest.approx([0.1, 0.1], rel=0.1)

    def test_reproducible(self):
        x = np.ones(3)
        cfg = AugmentConfig(0.2, 0.4, 0.3)
        a = strong_augment(x, cfg, np.random.default_rng(5))
        b = strong_augment(x, cfg, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_strong_identity(self, rng):
        x = rng.normal(size=4)
        np.testing.assert_array_equal(strong_augment(x, AugmentConfig(0, 0, 0), rng), x)

    def test_full_dropout(self, rng):
        out = strong_augment(np.ones(6), AugmentConfig(0.5, 0.5, 1.0), rng)
        np.testing.assert_array_equal(out, np.zeros(6))

    def test_dropout_rate_binomial(self, rng):
        x = np.ones((10_000, 2))
        out = strong_augment(x, AugmentConfig(0.0, 0.5, 0.2), rng)
        n = out.size
        frac = (out == 0).mean()
        assert abs(frac - 0.2) <= 3 * np.sqrt(0.2 * 0.8 / n)

    def test_strong_at_least_weak(self):
        with pytest.raises(ValueError):
            AugmentConfig(weak_sigma=0.5, strong_sigma=0.1)


class TestBayes:
    def test_matches_scipy_density(self, rng):
        t = make_task(3, 4, 1.5, 0.8, 2)
        prior = rng.dirichlet(np.ones(4))
        x = rng.normal(size=3)
        dens = np.array([multivariate_normal(m, 0.64 * np.eye(3)).pdf(x) for m in t.means]) * prior
        np.testing.assert_allclose(bayes_posterior(t, x, prior), dens / dens.sum(), rtol=1e-10)

    def test_equidistant_uniform(self):
        t = make_task(2, 3, 1.0, 1.0, 0)
        t = t.__class__(
            means=np.array([[1.0, 0.0], [-0.5, np.sqrt(3) / 2], [-0.5, -np.sqrt(3) / 2]]),
            sigma=1.0,
            seed=0,
            ood_mean=t.ood_mean,
        )
        np.testing.assert_allclose(bayes_posterior(t, [0.0, 0.0], np.full(3, 1 / 3)), np.full(3, 1 / 3), atol=1e-15)

    def test_at_class_mean(self):
        t = make_task(2, 4, 8.0, 0.5, 0)
        for k in range(4):
            assert bayes_posterior(t, t.means[k], np.full(4, 0.25))[k] > 0.99

    def test_scorer_identity(self, rng):
        t = make_task(2, 5, 1.0, 1.0, 0)
        pl, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        x = rng.normal(scale=2, size=(200, 2))
        gU = bayes_posterior(t, x, q)
        gL = bayes_posterior(t, x, pl)
        np.testing.assert_allclose(reweight_posterior(gL, pl, q), gU, atol=1e-10, rtol=0)
        gB = reweight_posterior(gU, q, np.full(5, 0.2))
        np.testing.assert_allclose(gB, bayes_posterior(t, x, np.full(5, 0.2)), atol=1e-10, rtol=0)
