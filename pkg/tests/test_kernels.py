import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgpopgd.kernels import KernelSpec, gram, k, k02, k20, k22

mpmath.mp.dps = 40


def _fd_oracle(spec, x, xp, h=1e-3):
    """Central differences of k computed in 40-digit arithmetic."""
    sf2, l = mpmath.mpf(spec.signal_variance), mpmath.mpf(spec.length_scale)

    def kk(a, b):
        return sf2 * mpmath.exp(-((a - b) ** 2) / (2 * l * l))

    x, xp, h = mpmath.mpf(x), mpmath.mpf(xp), mpmath.mpf(h)
    d2 = (kk(x + h, xp) - 2 * kk(x, xp) + kk(x - h, xp)) / h**2

    def d2x(b):
        return (kk(x + h, b) - 2 * kk(x, b) + kk(x - h, b)) / h**2

    d22 = (d2x(xp + h) - 2 * d2x(xp) + d2x(xp - h)) / h**2
    return float(d2), float(d22)


def test_values_at_zero_separation():
    spec = KernelSpec(2.0, 3.0)
    assert k(spec, 1.0, 1.0) == pytest.approx(2.0)
    assert k02(spec, 1.0, 1.0) == pytest.approx(-2.0 / 9.0)
    assert k22(spec, 1.0, 1.0) == pytest.approx(3 * 2.0 / 81.0)


def test_second_derivative_blocks_match_high_precision_differences():
    rng = np.random.default_rng(11)
    for _ in range(5):
        spec = KernelSpec(rng.uniform(0.5, 5.0), rng.uniform(1.0, 15.0))
        l = spec.length_scale
        for x, xp in rng.uniform(-10, 10, (20, 2)):
            d2, d22 = _fd_oracle(spec, x, xp)
            floor02 = 1e-6 * spec.signal_variance / l**2
            floor22 = 1e-6 * spec.signal_variance / l**4
            assert k02(spec, x, xp) == pytest.approx(d2, rel=1e-4, abs=floor02)
            assert k22(spec, x, xp) == pytest.approx(d22, rel=1e-4, abs=floor22)


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_k20_is_transpose_of_k02(x, xp):
    spec = KernelSpec(1.3, 4.0)
    assert k20(spec, x, xp) == k02(spec, xp, x)


def test_gram_shapes_and_symmetry():
    spec = KernelSpec()
    pts = np.linspace(-8, 8, 7)
    K = gram(spec, pts)
    assert K.shape == (7, 7)
    np.testing.assert_allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-10
    K22 = gram(spec, pts, "K22")
    np.testing.assert_allclose(K22, K22.T)
    assert gram(spec, pts, "K02", np.array([0.0, 1.0])).shape == (7, 2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8, unique=True))
def test_joint_prior_covariance_is_psd(xs):
    spec = KernelSpec(1.0, 5.0)
    d = np.linspace(-10, 10, 4)
    x = np.asarray(xs)
    top = np.hstack([gram(spec, x), gram(spec, x, "K20", d)])
    bot = np.hstack([gram(spec, d, "K02", x), gram(spec, d, "K22")])
    joint = np.vstack([top, bot])
    assert np.linalg.eigvalsh(joint).min() > -1e-8 * np.abs(joint).max()


def test_invalid_inputs():
    with pytest.raises(ValueError):
        KernelSpec(signal_variance=0)
    with pytest.raises(ValueError):
        KernelSpec(length_scale=-1)
    with pytest.raises(ValueError):
        gram(KernelSpec(), [])
    with pytest.raises(ValueError):
        gram(KernelSpec(), [0.0], "K11")
