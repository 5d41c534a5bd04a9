"""Squash nonlinearities for capsule activity vectors.

All variants keep the direction of the input and only rescale its length::

    S_m    v = N / (1 + N) * s / ||s||_2,   N = ||s||_m ** m
    S_inf  v = q / (1 + q) * s / ||s||_2,   q = ||s||_inf
    kl     v_j = ||sigma_j|| / (1 + max_k ||sigma_k||) * s_j

``S_2`` is the classic capsule squash.  Functions operate on the last axis
and broadcast over any leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

ZERO_GUARD = 1e-12
SATURATION = 1.0 - 1e-12

VALID_NAMES = ("s1", "s2", "s3", "s4", "s5", "s10", "sinf", "kl")


@dataclass(frozen=True)
class SquashSpec:
    """Which squash to apply: ``norm`` (with order ``m``), ``inf`` or ``kl``."""

    variant: str = "norm"
    m: int = 2

    def __post_init__(self):
        if self.variant not in ("norm", "inf", "kl"):
            raise InvalidArgument(f"unknown squash variant {self.variant!r}")
        if self.variant == "norm" and (int(self.m) != self.m or self.m < 1):
            raise InvalidArgument(f"squash order m must be a positive integer, got {self.m}")

    @classmethod
    def norm(cls, m: int) -> "SquashSpec":
        return cls("norm", m)

    @classmethod
    def infinity(cls) -> "SquashSpec":
        return cls("inf", 0)

    @classmethod
    def kl(cls) -> "SquashSpec":
        return cls("kl", 0)

    @classmethod
    def parse(cls, name: str) -> "SquashSpec":
        """Parse one of :data:`VALID_NAMES`."""
        key = name.strip().lower()
        if key == "sinf":
            return cls.infinity()
        if key == "kl":
            return cls.kl()
        if key in VALID_NAMES:
            return cls.norm(int(key[1:]))
        raise InvalidArgument(
            f"unknown squash {name!r}; valid names: {', '.join(VALID_NAMES)}")

    @property
    def name(self) -> str:
        if self.variant == "norm":
            return f"s{self.m}"
        return "sinf" if self.variant == "inf" else "kl"

    def __str__(self) -> str:
        return self.name


def _sigmoid_pair(x):
    # (sigmoid(x), 1 - sigmoid(x)) without overflow for any finite x
    f = np.exp(-np.logaddexp(0.0, -x))
    return f, np.exp(-np.logaddexp(0.0, x))


def squash_eq1(s):
    """Reference ``||s||^2 / (1 + ||s||^2) * s / ||s||`` evaluated literally."""
    s = np.asarray(s, dtype=np.float64)
    r = np.linalg.norm(s, axis=-1, keepdims=True)
    safe = np.where(r < ZERO_GUARD, 1.0, r)
    v = (r ** 2 / (1.0 + r ** 2)) * s / safe
    return np.where(r < ZERO_GUARD, 0.0, v)


def _norm_m_terms(s, m):
    a = np.abs(s)
    r = np.linalg.norm(s, axis=-1, keepdims=True)
    zero = r < ZERO_GUARD
    big = np.where(zero, 1.0, a.max(axis=-1, keepdims=True))
    # log ||s||_m with the max factored out, so a**m never overflows
    total = np.where(zero, 1.0, np.sum((a / big) ** m, axis=-1, keepdims=True))
    log_q = np.log(big) + np.log(total) / m
    f, one_minus_f = _sigmoid_pair(m * log_q)
    return a, r, zero, log_q, f, one_minus_f


def squash_norm_m(s, m: int):
    """``S_m`` squash along the last axis."""
    if m < 1:
        raise InvalidArgument(f"m must be >= 1, got {m}")
    s = np.asarray(s, dtype=np.float64)
    _, r, zero, _, f, _ = _norm_m_terms(s, m)
    f = np.minimum(f, SATURATION)
    v = f * s / np.where(zero, 1.0, r)
    return np.where(zero, 0.0, v)


def squash_inf(s):
    """``S_inf`` squash along the last axis."""
    s = np.asarray(s, dtype=np.float64)
    r = np.linalg.norm(s, axis=-1, keepdims=True)
    zero = r < ZERO_GUARD
    q = np.abs(s).max(axis=-1, keepdims=True)
    f = np.minimum(q / (1.0 + q), SATURATION)
    v = f * s / np.where(zero, 1.0, r)
    return np.where(zero, 0.0, v)


def squash_kl(s_all, sigma_all):
    """KL-routing squash over ``J`` capsules (second-to-last axis).

    ``sigma_all[..., j, :]`` is the coupling-weighted sum of
    Frobenius-normalised votes for capsule ``j``.
    """
    s_all = np.asarray(s_all, dtype=np.float64)
    sigma_all = np.asarray(sigma_all, dtype=np.float64)
    if s_all.shape != sigma_all.shape:
        raise InvalidArgument(f"s {s_all.shape} and sigma {sigma_all.shape} must align")
    if s_all.ndim < 2 or s_all.shape[-2] == 0:
        raise InvalidArgument("kl squash needs at least one capsule (J >= 1)")
    nrm = np.linalg.norm(sigma_all, axis=-1, keepdims=True)          # [..., J, 1]
    den = 1.0 + nrm.max(axis=-2, keepdims=True)
    return (nrm / den) * s_all


def squash_kl_backward(s_all, sigma_all, grad_v):
    """Returns ``(grad_s, grad_sigma)`` for :func:`squash_kl`."""
    nrm = np.linalg.norm(sigma_all, axis=-1, keepdims=True)
    den = 1.0 + nrm.max(axis=-2, keepdims=True)
    grad_s = (nrm / den) * grad_v
    a = np.sum(grad_v * s_all, axis=-1, keepdims=True)               # [..., J, 1]
    grad_nrm = a / den
    # the shared denominator depends on the largest norm (lowest index on ties)
    k_star = np.argmax(nrm, axis=-2)[..., None, :]
    shared = -np.sum(a * nrm, axis=-2, keepdims=True) / den ** 2
    np.put_along_axis(grad_nrm, k_star,
                      np.take_along_axis(grad_nrm, k_star, axis=-2) + shared, axis=-2)
    unit = np.where(nrm < ZERO_GUARD, 0.0, sigma_all / np.where(nrm < ZERO_GUARD, 1.0, nrm))
    return grad_s, grad_nrm * unit


def squash(s, spec: SquashSpec):
    """Apply a per-capsule squash (``norm`` or ``inf``)."""
    if spec.variant == "norm":
        return squash_norm_m(s, spec.m)
    if spec.variant == "inf":
        return squash_inf(s)
    raise InvalidArgument("kl squash needs the routing aggregates; call squash_kl")


def squash_backward(s, spec: SquashSpec, grad_v):
    """Vector-Jacobian product of :func:`squash` at ``s``."""
    s = np.asarray(s, dtype=np.float64)
    grad_v = np.asarray(grad_v, dtype=np.float64)
    if spec.variant == "norm":
        m = spec.m
        a, r, zero, log_q, f, one_minus_f = _norm_m_terms(s, m)
        q = np.exp(log_q)
        # d f / d s_k = m f (1 - f) sign(s_k) (|s_k| / q)^(m-1) / q
        df = m * f * one_minus_f * np.sign(s) * (a / q) ** (m - 1) / q
        df = np.where(f >= SATURATION, 0.0, df)
        f = np.minimum(f, SATURATION)
    elif spec.variant == "inf":
        a = np.abs(s)
        r = np.linalg.norm(s, axis=-1, keepdims=True)
        zero = r < ZERO_GUARD
        k_star = np.argmax(a, axis=-1)[..., None]
        q = np.take_along_axis(a, k_star, axis=-1)
        f = q / (1.0 + q)
        df = np.zeros_like(s)
        np.put_along_axis(df, k_star, np.take_along_axis(np.sign(s), k_star, axis=-1)
                          / (1.0 + q) ** 2, axis=-1)
        df = np.where(f >= SATURATION, 0.0, df)
        f = np.minimum(f, SATURATION)
    else:
        raise InvalidArgument("kl squash backward is squash_kl_backward")

    r_safe = np.where(zero, 1.0, r)
    # v = g * s with g = f / r
    grad_g = df / r_safe - f * s / r_safe ** 3
    dot = np.sum(grad_v * s, axis=-1, keepdims=True)
    grad_s = (f / r_safe) * grad_v + dot * grad_g
    return np.where(zero, 0.0, grad_s)


def magnitude(norm_value, spec: SquashSpec):
    """Output length of ``S_m`` / ``S_inf`` as a function of the input's m-norm.

    For ``norm`` this is ``x**m / (1 + x**m)``; for ``inf`` it is ``x / (1 + x)``.
    """
    x = np.asarray(norm_value, dtype=np.float64)
    if spec.variant == "inf":
        return x / (1.0 + x)
    if spec.variant != "norm":
        raise InvalidArgument("magnitude curve is defined for norm and inf squashes only")
    with np.errstate(divide="ignore"):
        f, _ = _sigmoid_pair(spec.m * np.log(x))
    return np.where(x == 0, 0.0, f)

