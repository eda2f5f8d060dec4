import numpy as np
import pytest

import poselift.autodiff as ad
from poselift.errors import NonFiniteValue, NonScalarLoss, ShapeMismatch


def fd_check(build, arrays, eps=1e-5, tol=1e-4):
    """Central-difference check of a scalar graph builder over named arrays."""
    err = ad.check_gradients(build, arrays, eps=eps)
    assert err < tol, f"max relative gradient error {err}"


def rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


class TestPrimitiveValues:
    def test_add_zero(self):
        a = ad.constant([[1.0, -2.0]])
        np.testing.assert_array_equal(ad.add(a, np.zeros((1, 2))).value, a.value)

    def test_sum_gradient_is_ones(self):
        p = ad.parameter(np.arange(6.0).reshape(2, 3))
        ad.backward(ad.total(p))
        np.testing.assert_array_equal(p.grad, np.ones((2, 3)))

    def test_vector_norm_gradient(self):
        p = ad.parameter([3.0, 4.0])
        ad.backward(ad.vector_norm(p))
        np.testing.assert_allclose(p.grad, [0.6, 0.8])

    def test_inner_product_gradient(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 3))
        p = ad.parameter(x)
        ad.backward(ad.total(ad.mul(p, p)))
        np.testing.assert_allclose(p.grad, 2 * x)

    def test_constant_loss_gives_no_gradient(self):
        p = ad.parameter(np.ones(3))
        loss = ad.total(ad.constant(np.ones(3)))
        ad.backward(loss)
        assert p.grad is None

    def test_leaky_relu_slope_at_zero(self):
        p = ad.parameter([0.0, -1.0, 1.0])
        ad.backward(ad.total(ad.leaky_relu(p)))
        np.testing.assert_allclose(p.grad, [1.0, 0.01, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(ad.constant(np.ones((2, 3))), ad.constant(np.ones((4, 5))))
        with pytest.raises(ShapeMismatch):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteValue):
            ad.constant([np.nan])
        with pytest.raises(NonFiniteValue):
            ad.div(ad.constant([1.0]), ad.constant([0.0]))

    def test_non_scalar_loss(self):
        with pytest.raises(NonScalarLoss):
            ad.backward(ad.parameter(np.ones(3)))

    def test_forward_determinism(self):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 5, 7), rand(rng, 7, 3)
        one = ad.matmul(ad.constant(a), ad.constant(b)).value
        two = ad.matmul(ad.constant(a), ad.constant(b)).value
        assert one.tobytes() == two.tobytes()


class TestPrimitiveGradients:
    """Each primitive against central finite differences at random points."""

    def test_add_sub_mul_div(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            arrays = {"a": rand(rng, 3, 4), "b": rand(rng, 3, 4)}
            fd_check(lambda n: ad.total(ad.mul(ad.add(n["a"], n["b"]), ad.sub(n["a"], n["b"]))), arrays)
            denom = {"a": rand(rng, 3, 4), "b": rng.uniform(0.5, 2.0, size=(3, 4))}
            fd_check(lambda n: ad.total(ad.div(n["a"], n["b"])), denom)

    def test_matmul(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            arrays = {"a": rand(rng, 4, 5), "b": rand(rng, 5, 2)}
            fd_check(lambda n: ad.total(ad.matmul(n["a"], n["b"])), arrays)

    def test_batched_matmul(self):
        rng = np.random.default_rng(4)
        arrays = {"a": rand(rng, 3, 2, 4), "b": rand(rng, 3, 4, 2)}
        fd_check(lambda n: ad.total(ad.matmul(n["a"], n["b"])), arrays)

    def test_concat_reshape_transpose(self):
        rng = np.random.default_rng(5)
        arrays = {"a": rand(rng, 2, 3), "b": rand(rng, 2, 5)}
        fd_check(
            lambda n: ad.total(
                ad.mul(
                    ad.reshape(ad.concat([n["a"], n["b"]], axis=1), (4, 4)),
                    ad.transpose_last2(ad.reshape(ad.concat([n["a"], n["b"]], axis=1), (4, 4))),
                )
            ),
            arrays,
        )

    def test_leaky_relu_away_from_kink(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            a = rand(rng, 4, 4)
            a[np.abs(a) < 1e-2] = 0.5  # keep clear of the kink
            fd_check(lambda n: ad.total(ad.leaky_relu(n["a"])), {"a": a}, tol=1e-5)

    def test_abs_away_from_kink(self):
        rng = np.random.default_rng(7)
        a = rand(rng, 5, 2)
        a[np.abs(a) < 1e-2] = -0.7
        fd_check(lambda n: ad.l1_sum(n["a"]), {"a": a}, tol=1e-5)

    def test_frobenius_norm_and_axes(self):
        rng = np.random.default_rng(8)
        arrays = {"a": rand(rng, 3, 4, 2) + 3.0}
        fd_check(lambda n: ad.total(ad.frobenius_norm(n["a"], axes=(1, 2))), arrays)
        fd_check(lambda n: ad.frobenius_norm(n["a"]), arrays)

    def test_sin_cos(self):
        rng = np.random.default_rng(9)
        arrays = {"a": rand(rng, 6)}
        fd_check(lambda n: ad.total(ad.add(ad.sin(n["a"]), ad.cos(n["a"]))), arrays)

    def test_skew_batch(self):
        rng = np.random.default_rng(10)
        arrays = {"v": rand(rng, 4, 3), "w": rand(rng, 4, 3, 3)}
        fd_check(lambda n: ad.total(ad.mul(ad.skew_batch(n["v"]), n["w"])), arrays)

    def test_rodrigues_batch(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            arrays = {"v": rand(rng, 3, 3), "x": rand(rng, 3, 5, 3)}
            fd_check(
                lambda n: ad.total(
                    ad.matmul(n["x"], ad.transpose_last2(ad.rodrigues_batch(n["v"])))
                ),
                arrays,
            )

    def test_rodrigues_batch_through_zero(self):
        # removable singularity: gradients stay finite and match FD near 0
        arrays = {"v": np.array([[1e-5, -2e-5, 1e-5]])}
        fd_check(lambda n: ad.total(ad.rodrigues_batch(n["v"])), arrays, eps=1e-6, tol=1e-4)

    def test_take_and_center_rows(self):
        rng = np.random.default_rng(12)
        perm = np.array([2, 0, 1, 1])
        arrays = {"a": rand(rng, 4, 3, 2)}
        fd_check(lambda n: ad.total(ad.mul(ad.take_rows(n["a"], perm), n["a"])), arrays)
        fd_check(lambda n: ad.total(ad.mul(ad.center_rows(n["a"], 1), n["a"])), arrays)

    def test_random_composite_graphs(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            arrays = {"w": rand(rng, 4, 3), "b": rand(rng, 3), "x": rand(rng, 2, 4)}

            def build(n):
                h = ad.leaky_relu(ad.add(ad.matmul(n["x"], n["w"]), n["b"]))
                return ad.add(
                    ad.l1_sum(h), ad.frobenius_norm(ad.add(h, ad.constant(np.ones(3))))
                )

            fd_check(build, arrays)


class TestAccumulation:
    def test_fanout_accumulates_sum_of_paths(self):
        rng = np.random.default_rng(14)
        x = rand(rng, 3, 3)
        # shared node consumed twice
        p = ad.parameter(x)
        h = ad.mul(p, p)
        loss = ad.total(ad.add(h, h))
        ad.backward(loss)
        shared = p.grad.copy()
        # unrolled graph with duplicated leaves
        p1, p2 = ad.parameter(x), ad.parameter(x)
        loss2 = ad.total(ad.add(ad.mul(p1, p1), ad.mul(p2, p2)))
        ad.backward(loss2)
        np.testing.assert_allclose(shared, p1.grad + p2.grad)

    def test_quadratic_is_exact_under_central_differences(self):
        rng = np.random.default_rng(15)
        arrays = {"x": rand(rng, 4)}
        err = ad.check_gradients(
            lambda n: ad.total(ad.mul(n["x"], n["x"])), arrays, eps=1e-4
        )
        assert err < 1e-8

    def test_check_gradients_skips_kink_straddling_coordinates(self):
        # one coordinate sits inside the +/- eps window of the |x| kink, where
        # the central difference is not a derivative; it must be skipped, not
        # reported as an error
        arrays = {"x": np.array([5e-6, 2.0, -3.0])}
        err = ad.check_gradients(lambda n: ad.l1_sum(n["x"]), arrays, eps=1e-5)
        assert err < 1e-9


def test_rotation_coeffs_match_reference():
    theta = np.array([1e-12, 1e-6, 1e-3, 0.5, np.pi, 6.0])
    k1, k2 = ad.rotation_coeffs(ad.constant(theta**2))
    # naive formulas cancel catastrophically near 0; use the series there
    with np.errstate(invalid="ignore", divide="ignore"):
        ref1 = np.where(theta < 1e-4, 1.0 - theta**2 / 6, np.sin(theta) / theta)
        ref2 = np.where(theta < 1e-4, 0.5 - theta**2 / 24, (1 - np.cos(theta)) / theta**2)
    np.testing.assert_allclose(k1.value, ref1, atol=1e-12)
    np.testing.assert_allclose(k2.value, ref2, atol=1e-12)
