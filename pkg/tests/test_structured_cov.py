import numpy as np
import pytest

from swedge.structured_cov import (
    StructuredInverse,
    VarianceComponents,
    dense_observed_cov,
    invert_observed_cov,
    logdet_observed_cov,
    quadratic_form,
)


def random_case(rng):
    J = rng.integers(1, 5)
    sizes = rng.integers(0, 5, size=J)
    if sizes.sum() == 0:
        sizes[0] = 1
    s2 = rng.uniform(0.1, 3.0)
    t2 = rng.uniform(0, 2.0) * rng.integers(0, 2)
    k2 = rng.uniform(0, 2.0) * rng.integers(0, 2)
    return sizes, s2, t2, k2


class TestSmallExamples:
    def test_independence_is_identity(self):
        inv = invert_observed_cov([2], VarianceComponents(1.0))
        np.testing.assert_allclose(inv.dense(), np.eye(2), atol=1e-15)

    def test_exchangeable_two_by_two(self):
        inv = invert_observed_cov([2], VarianceComponents(1.0, 1.0))
        np.testing.assert_allclose(inv.dense(), [[2 / 3, -1 / 3], [-1 / 3, 2 / 3]], atol=1e-14)

    def test_nested_matches_dense(self):
        vc = VarianceComponents(0.9, 0.1, 0.05)
        inv = invert_observed_cov([3, 2], vc)
        dense = np.linalg.inv(dense_observed_cov([3, 2], 0.9, 0.1, 0.05))
        np.testing.assert_allclose(inv.dense(), dense, atol=1e-10)

    def test_logdet_examples(self):
        assert logdet_observed_cov([1], VarianceComponents(1.0)) == pytest.approx(0.0, abs=1e-15)
        assert logdet_observed_cov([2], VarianceComponents(1.0, 1.0)) == pytest.approx(np.log(3.0))
        dense = np.linalg.slogdet(dense_observed_cov([3, 2], 0.9, 0.1, 0.05))[1]
        assert logdet_observed_cov([3, 2], VarianceComponents(0.9, 0.1, 0.05)) == pytest.approx(dense, abs=1e-10)

    def test_quadratic_forms(self):
        inv = invert_observed_cov([2, 3], VarianceComponents(1.0))
        assert quadratic_form(inv, np.ones(5), np.ones(5)) == pytest.approx(5.0)
        inv = invert_observed_cov([2], VarianceComponents(1.0, 1.0))
        assert quadratic_form(inv, np.ones(2), np.ones(2)) == pytest.approx(2 / 3)


class TestAgainstDense:
    def test_random_draws(self, rng):
        for _ in range(200):
            sizes, s2, t2, k2 = random_case(rng)
            inv = StructuredInverse(sizes, s2, t2, k2)
            cov = dense_observed_cov(sizes, s2, t2, k2)
            np.testing.assert_allclose(inv.dense() @ cov, np.eye(cov.shape[0]), atol=1e-10)
            assert inv.logdet == pytest.approx(np.linalg.slogdet(cov)[1], abs=1e-10)
            assert inv.trace() == pytest.approx(np.trace(np.linalg.inv(cov)), abs=1e-10)

    def test_apply_matches_dense_and_is_symmetric(self, rng):
        for _ in range(50):
            sizes, s2, t2, k2 = random_case(rng)
            inv = StructuredInverse(sizes, s2, t2, k2)
            m = inv.n_records
            u, v = rng.normal(size=m), rng.normal(size=(m, 3))
            np.testing.assert_allclose(inv.apply(v), inv.dense() @ v, atol=1e-10)
            assert inv.quadratic_form(u, v[:, 0]) == pytest.approx(inv.quadratic_form(v[:, 0], u), abs=1e-10)

    def test_logdet_increases_with_sigma2(self, rng):
        for _ in range(50):
            sizes, s2, t2, k2 = random_case(rng)
            lo = StructuredInverse(sizes, s2, t2, k2).logdet
            hi = StructuredInverse(sizes, s2 + rng.uniform(0.01, 1.0), t2, k2).logdet
            assert hi > lo

    def test_negative_components_allowed_when_pd(self):
        # correlation-type parameters may be negative as long as the matrix is PD
        inv = StructuredInverse([3, 3], 1.2, -0.05, 0.1)
        cov = dense_observed_cov([3, 3], 1.2, -0.05, 0.1)
        np.testing.assert_allclose(inv.dense(), np.linalg.inv(cov), atol=1e-12)


class TestErrors:
    def test_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            StructuredInverse([2], 0.0)

    def test_all_sizes_zero(self):
        with pytest.raises(ValueError):
            StructuredInverse([0, 0], 1.0, 0.5)

    def test_length_mismatch(self):
        inv = StructuredInverse([2, 2], 1.0, 0.5)
        with pytest.raises(ValueError):
            inv.apply(np.ones(3))

    def test_components_validation(self):
        with pytest.raises(ValueError):
            VarianceComponents(-1.0)
