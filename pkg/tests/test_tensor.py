import numpy as np
import pytest
from scipy import special, stats

from bedl import tensor as T

from conftest import check_grads

rng = np.random.default_rng(7)


def _param(shape):
    return T.Parameter(rng.normal(size=shape))


def test_forward_values_match_numpy():
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 3.0
    ta, tb = T.constant(a), T.constant(b)
    np.testing.assert_allclose((ta + tb).data, a + b)
    np.testing.assert_allclose((ta * tb).data, a * b)
    np.testing.assert_allclose((ta / tb).data, a / b)
    np.testing.assert_allclose(T.exp(ta).data, np.exp(a))
    np.testing.assert_allclose(T.log(tb).data, np.log(b))
    np.testing.assert_allclose(T.logsumexp(ta, axis=1).data, special.logsumexp(a, axis=1))
    np.testing.assert_allclose(T.normal_cdf(ta).data, stats.norm.cdf(a), atol=1e-14)
    np.testing.assert_allclose(T.normal_pdf(ta).data, stats.norm.pdf(a), atol=1e-14)
    np.testing.assert_allclose(T.lgamma(tb).data, special.gammaln(b))
    np.testing.assert_allclose(T.digamma(tb).data, special.digamma(b))


def test_exp_scaled_cdf_matches_definition():
    # exp(a) * Phi(-b), checked where the naive form is still finite
    a = T.constant(np.array([0.5, -2.0, 3.0]))
    b = T.constant(np.array([1.0, -1.5, 4.0]))
    out = T.exp_scaled_cdf(a, b)
    np.testing.assert_allclose(out.data, np.exp(a.data) * stats.norm.cdf(-b.data), rtol=1e-12)


def test_exp_scaled_cdf_no_overflow():
    # elu-moment regime: a huge but a - b^2/2 <= 0
    out = T.exp_scaled_cdf(T.constant(500.0), T.constant(40.0))
    assert np.isfinite(out.data)
    # log of exp(500)*Phi(-40) via log of Mills-ratio form
    expected = 500.0 + stats.norm.logcdf(-40.0)
    np.testing.assert_allclose(np.log(out.data), expected, rtol=1e-10)


def test_composite_gradcheck():
    p = _param((3, 4))
    q = _param((3, 4))

    def f():
        z = T.exp(0.3 * p) * T.normal_cdf(q) + T.square(p - q) / (T.square(q) + 1.0)
        return T.tsum(T.log(z + 2.0)) + T.logsumexp(p + q)

    check_grads(f, [p, q], rel_tol=1e-6)


def test_special_fn_gradcheck():
    p = T.Parameter(np.array([0.7, 1.9, 3.1]))
    q = T.Parameter(np.array([-0.4, 0.2, 1.1]))

    def f():
        return T.tsum(
            T.lgamma(p) + T.digamma(p) + T.normal_pdf(q) + T.exp_scaled_cdf(q, p)
        )

    check_grads(f, [p, q], rel_tol=1e-5)


def test_broadcast_gradcheck():
    p = T.Parameter(rng.normal(size=(1, 4)))
    q = T.Parameter(rng.normal(size=(3, 1)))

    def f():
        return T.tsum(T.square(p * q + p - q))

    check_grads(f, [p, q], rel_tol=1e-6)


def test_matmul_reshape_take_stack_gradcheck():
    p = _param((3, 4))
    q = _param((4, 2))

    def f():
        z = T.matmul(p, q)  # (3, 2)
        z = T.reshape(z, (2, 3))
        z = T.stack([z[0], z[1] * 2.0], axis=0)
        return T.tmean(T.square(z))

    check_grads(f, [p, q], rel_tol=1e-6)


def test_extract_patches_matches_manual_conv():
    x = rng.normal(size=(2, 5, 5, 3))
    patches = T.extract_patches(T.constant(x), kernel=2, stride=2).data
    assert patches.shape == (2, 2, 2, 12)
    manual = x[0, 2:4, 2:4, :].reshape(-1)
    # layout: kernel positions blocked, channels fastest
    np.testing.assert_allclose(
        patches[0, 1, 1],
        np.concatenate([x[0, 2 + i, 2 + j, :] for i in range(2) for j in range(2)]),
    )
    assert manual.size == patches.shape[-1]


def test_extract_patches_gradcheck():
    p = _param((1, 4, 4, 2))

    def f():
        return T.tsum(T.square(T.extract_patches(p, kernel=3, stride=1)))

    check_grads(f, [p], rel_tol=1e-6)


def test_where_clamp_gradients_route_correctly():
    p = T.Parameter(np.array([-2.0, -0.5, 0.5, 2.0]))
    out = T.tsum(T.where(p.data > 0, T.square(p), T.exp(p)))
    out.backward()
    expected = np.where(p.data > 0, 2 * p.data, np.exp(p.data))
    np.testing.assert_allclose(p.grad, expected)

    p2 = T.Parameter(np.array([-2.0, 0.3, 5.0]))
    T.tsum(T.clamp(p2, -1.0, 1.0)).backward()
    np.testing.assert_allclose(p2.grad, [0.0, 1.0, 0.0])


def test_logsumexp_is_stable():
    big = T.constant(np.array([1000.0, 1000.0 + np.log(2.0)]))
    np.testing.assert_allclose(T.logsumexp(big).data, 1000.0 + np.log(3.0))


def test_division_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        T.constant(1.0) / T.constant(0.0)


def test_domain_errors():
    with pytest.raises(ValueError):
        T.log(T.constant(-1.0))
    with pytest.raises(ValueError):
        T.sqrt(T.constant(-1.0))


def test_nonfinite_result_raises_numerics_error():
    with np.errstate(over="ignore"), pytest.raises(T.NumericsError):
        T.exp(T.constant(1000.0))


def test_backward_requires_scalar_and_single_use():
    p = _param((3,))
    out = T.tsum(p)
    with pytest.raises(ValueError):
        T.square(p).backward()  # non-scalar root
    out.backward()
    with pytest.raises(RuntimeError):
        out.backward()


def test_grad_accumulates_across_tapes_until_zeroed():
    p = T.Parameter(np.array([2.0]))
    T.tsum(T.square(p)).backward()
    T.tsum(T.square(p)).backward()
    np.testing.assert_allclose(p.grad, [8.0])
    p.zero_grad()
    assert p.grad is None


def test_diamond_graph_gradient():
    # y = x*x reused on both branches: d/dx (x^2 + 3x^2) = 8x
    p = T.Parameter(np.array([1.5]))
    z = T.square(p)
    (T.tsum(z + 3.0 * z)).backward()
    np.testing.assert_allclose(p.grad, [12.0])
