import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capskit import squash as sq
from capskit.errors import InvalidArgument
from capskit.squash import SquashSpec

NORM_SPECS = [SquashSpec.norm(m) for m in (1, 2, 3, 4, 5, 10)] + [SquashSpec.infinity()]
nonzero = arrays(np.float64, 5, elements=st.floats(-20, 20, allow_nan=False)).filter(
    lambda s: np.linalg.norm(s) > 1e-6)


def test_parse_and_names():
    for name in sq.VALID_NAMES:
        assert SquashSpec.parse(name).name == name
    assert SquashSpec.parse("S3") == SquashSpec.norm(3)
    with pytest.raises(InvalidArgument, match="s1, s2, s3, s4, s5, s10, sinf, kl"):
        SquashSpec.parse("s99")
    with pytest.raises(InvalidArgument):
        SquashSpec.norm(0)


def test_norm_m_examples():
    for m in (1, 2, 3, 10):
        assert sq.squash_norm_m(np.zeros(2), m).tolist() == [0.0, 0.0]
        np.testing.assert_allclose(sq.squash_norm_m(np.array([1.0, 0.0]), m), [0.5, 0.0],
                                   atol=1e-15)
    np.testing.assert_allclose(sq.squash_norm_m(np.array([3.0, 4.0]), 1), [0.525, 0.7],
                               atol=1e-15)
    np.testing.assert_allclose(sq.squash_norm_m(np.array([1.0, 2.0]), 3),
                               [0.9 / math.sqrt(5), 1.8 / math.sqrt(5)], atol=1e-15)


def test_inf_examples():
    np.testing.assert_allclose(sq.squash_inf(np.array([3.0, -4.0])), [0.48, -0.64], atol=1e-15)
    assert sq.squash_inf(np.zeros(2)).tolist() == [0.0, 0.0]
    np.testing.assert_allclose(sq.squash_inf(np.array([1.0, 1.0])), [0.5 / math.sqrt(2)] * 2,
                               atol=1e-15)


def test_s2_is_the_classic_squash(rng):
    s = rng.normal(size=(1000, 8)) * rng.uniform(0.01, 10, size=(1000, 1))
    np.testing.assert_allclose(sq.squash_norm_m(s, 2), sq.squash_eq1(s), rtol=0, atol=1e-12)


def test_large_m_does_not_overflow():
    s = np.array([1e40, 3e39])
    v = sq.squash_norm_m(s, 10)
    assert np.all(np.isfinite(v))
    assert np.linalg.norm(v) < 1.0
    g = sq.squash_backward(s, SquashSpec.norm(10), np.ones(2))
    assert np.all(np.isfinite(g))


def test_kl_examples():
    v = sq.squash_kl(np.array([[1.0, 0.0]]), np.array([[1 / math.sqrt(2), 0.0]]))
    np.testing.assert_allclose(v, [[0.70710678 / 1.70710678, 0.0]], atol=1e-8)
    s = np.arange(6.0).reshape(3, 2)
    assert not sq.squash_kl(s, np.zeros((3, 2))).any()
    with pytest.raises(InvalidArgument):
        sq.squash_kl(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(InvalidArgument):
        sq.squash_kl(np.zeros((2, 2)), np.zeros((3, 2)))


def test_kl_common_sigma_scale_keeps_directions(rng):
    s = rng.normal(size=(4, 3))
    sig = rng.normal(size=(4, 3))
    a, b = sq.squash_kl(s, sig), sq.squash_kl(s, 3.7 * sig)
    for j in range(4):
        cos = a[j] @ b[j] / (np.linalg.norm(a[j]) * np.linalg.norm(b[j]))
        assert cos == pytest.approx(1.0, abs=1e-12)


def test_zero_grad_in_zero_grad_out(rng):
    s = rng.normal(size=8)
    for spec in NORM_SPECS:
        assert not sq.squash_backward(s, spec, np.zeros(8)).any()
    gs, gsig = sq.squash_kl_backward(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)),
                                     np.zeros((3, 4)))
    assert not gs.any() and not gsig.any()


def test_inf_tie_uses_lowest_index():
    s = np.array([2.0, -2.0, 1.0])
    g = sq.squash_backward(s, SquashSpec.infinity(), np.array([1.0, 0.0, 0.0]))
    # one-sided difference that moves only coordinate 0 upward
    h = 1e-7
    up = s.copy()
    up[0] += h
    fd0 = (sq.squash_inf(up)[0] - sq.squash_inf(s)[0]) / h
    assert g[0] == pytest.approx(fd0, rel=1e-5)


@pytest.mark.parametrize("spec", NORM_SPECS, ids=str)
@given(s=nonzero)
def test_direction_and_bound(spec, s):
    v = sq.squash(s, spec)
    r = np.linalg.norm(v)
    assert r < 1.0
    cos = v @ s / (np.linalg.norm(s) * r) if r > 0 else 1.0
    assert cos == pytest.approx(1.0, abs=1e-12)
    q = np.abs(s).max() if spec.variant == "inf" else np.sum(np.abs(s) ** spec.m) ** (1 / spec.m)
    x = q if spec.variant == "inf" else q ** spec.m
    assert r == pytest.approx(x / (1 + x), rel=1e-10, abs=1e-300)


@pytest.mark.parametrize("spec", NORM_SPECS, ids=str)
@given(s=nonzero, t=st.floats(1.01, 3.0))
def test_monotone_in_scale(spec, s, t):
    small = np.linalg.norm(sq.squash(0.3 * s, spec))
    large = np.linalg.norm(sq.squash(0.3 * t * s, spec))
    assert large >= small
    if 0 < small < 0.999:
        assert large > small


@pytest.mark.parametrize("m", [1, 2, 3, 5, 10])
def test_magnitude_tends_to_one(m):
    d = np.ones(4) / 2.0
    mags = [np.linalg.norm(sq.squash_norm_m(t * d, m)) for t in (1, 10, 100, 1e4)]
    assert mags == sorted(mags)
    assert mags[-1] > 0.999


def test_steepening_with_m():
    d = np.array([3.0, 1.0, 2.0])
    gaps = []
    for m in (2, 3, 4, 5, 10):
        unit = d / np.sum(d ** m) ** (1 / m)
        hi = np.linalg.norm(sq.squash_norm_m(1.1 * unit, m))
        lo = np.linalg.norm(sq.squash_norm_m(0.9 * unit, m))
        gaps.append(hi - lo)
    assert all(b > a for a, b in zip(gaps, gaps[1:]))


def test_magnitude_curve_matches_squash():
    x = np.linspace(0, 3, 31)
    for spec in NORM_SPECS:
        unit = np.array([1.0, 0.0, 0.0])
        direct = np.linalg.norm(sq.squash(x[:, None] * unit, spec), axis=-1)
        np.testing.assert_allclose(sq.magnitude(x, spec), direct, atol=1e-12)


def test_saturation_gradient_is_finite():
    s = np.array([1e6, 1.0])
    v = sq.squash_norm_m(s, 5)
    assert np.linalg.norm(v) <= sq.SATURATION
    assert np.all(np.isfinite(sq.squash_backward(s, SquashSpec.norm(5), np.ones(2))))
