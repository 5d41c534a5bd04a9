"""Routing between a layer of input capsules and a layer of output capsules.

Two procedures are provided:

* ``dynamic_routing``: routing-by-agreement.  Logits start at zero, the
  coupling coefficients are a softmax over output capsules, and after every
  iteration but the last the logits grow by the dot product between each
  output vector and the vote it received.
* ``self_routing``: one pass; each input capsule predicts its own coupling
  coefficients from a private routing matrix.

The backward passes differentiate through every routing iteration (no
stop-gradient on the coupling coefficients).

Arrays carry a leading batch axis ``N``; unbatched inputs are accepted and
the batch axis is dropped again on output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, InvalidArgument
from .squash import (SquashSpec, squash, squash_backward, squash_kl,
                     squash_kl_backward)
from .tensor import matvec_votes, matvec_votes_backward, softmax, softmax_backward


@dataclass(frozen=True)
class RoutingSpec:
    method: str = "dynamic"          # "dynamic" | "self"
    iterations: int = 3
    squash: SquashSpec = field(default_factory=SquashSpec)

    def __post_init__(self):
        if self.method not in ("dynamic", "self"):
            raise ConfigError(f"unknown routing method {self.method!r}")
        if self.method == "dynamic" and self.iterations < 1:
            raise ConfigError(f"dynamic routing needs iterations >= 1, got {self.iterations}")

    @classmethod
    def dynamic(cls, iterations: int = 3, squash: SquashSpec = SquashSpec()) -> "RoutingSpec":
        return cls("dynamic", iterations, squash)

    @classmethod
    def self_routing(cls, squash: SquashSpec = SquashSpec()) -> "RoutingSpec":
        return cls("self", 1, squash)


@dataclass
class RoutingOutput:
    """Result of one routing pass.

    ``c_history`` holds the coupling coefficients used at each iteration.
    The private fields are what the backward pass needs, stored output-major.
    """

    v: np.ndarray
    c: np.ndarray
    b: Optional[np.ndarray] = None
    c_history: list = field(default_factory=list)
    squash: SquashSpec = field(default_factory=SquashSpec)
    _single: bool = False
    _u_hat: Optional[np.ndarray] = None
    _vote_scale: Optional[np.ndarray] = None
    _c: list = field(default_factory=list)
    _s: list = field(default_factory=list)
    _sigma: list = field(default_factory=list)
    _v: list = field(default_factory=list)
    _u: Optional[np.ndarray] = None   # self routing only


def _batch(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise InvalidArgument(f"expected {ndim}-d input (optionally batched), got shape {x.shape}")


# Internally votes are kept output-major, ``[N, Nout, Nin, d]``, so that both
# the weighted sum over inputs and the agreement are batched matmuls.

def _aggregate(c, u_hat, spec, vote_scale):
    # s_j = sum_i c_ij u_hat_ij, then squash
    s = (c[:, :, None, :] @ u_hat)[:, :, 0, :]
    if spec.variant == "kl":
        if vote_scale is None:
            raise ConfigError("kl squash needs the Frobenius norms of the transforms")
        sigma = ((c * vote_scale)[:, :, None, :] @ u_hat)[:, :, 0, :]
        return s, sigma, squash_kl(s, sigma)
    return s, None, squash(s, spec)


def _aggregate_backward(grad_v, c, u_hat, spec, vote_scale, s, sigma):
    # Returns (terms, grad_c, grad_vote_scale).  The vote gradient is the sum
    # of outer products coef[n, j, i] * vec[n, j, d] listed in ``terms``.
    if spec.variant == "kl":
        gs, gsigma = squash_kl_backward(s, sigma, grad_v)
        g_cu = (u_hat @ gsigma[..., None])[..., 0]
        grad_c = (u_hat @ gs[..., None])[..., 0] + g_cu * vote_scale
        terms = [(c, gs), (c * vote_scale, gsigma)]
        return terms, grad_c, np.sum(g_cu * c, axis=0)
    gs = squash_backward(s, spec, grad_v)
    grad_c = (u_hat @ gs[..., None])[..., 0]
    return [(c, gs)], grad_c, None


def _sum_outer(terms):
    coefs = np.stack([a for a, _ in terms], axis=-1)      # [N, Nout, Nin, T]
    vecs = np.stack([b for _, b in terms], axis=-2)       # [N, Nout, T, d]
    return coefs @ vecs


def _finish(out: RoutingOutput, c, b) -> RoutingOutput:
    # public arrays are input-major: c[..., i, j]
    sl = 0 if out._single else slice(None)
    out.v = out._v[-1][sl]
    out.c = c.transpose(0, 2, 1)[sl]
    out.b = None if b is None else b.transpose(0, 2, 1)[sl]
    out.c_history = [ct.transpose(0, 2, 1)[sl] for ct in out._c]
    return out


def dynamic_routing(u_hat, iterations: int = 3, squash_spec: SquashSpec = SquashSpec(),
                    vote_scale=None) -> RoutingOutput:
    """Routing-by-agreement over votes ``u_hat[N, Nin, Nout, dout]``.

    ``vote_scale[Nin, Nout]`` (``1 / ||W_ij||_F``) is required by the kl
    squash and ignored otherwise.
    """
    if iterations < 1:
        raise InvalidArgument(f"iterations must be >= 1, got {iterations}")
    u_hat, single = _batch(u_hat, 3)
    u_t = np.ascontiguousarray(u_hat.transpose(0, 2, 1, 3))
    scale_t = None if vote_scale is None else np.ascontiguousarray(vote_scale.T)
    n, nout, nin, _ = u_t.shape
    b = np.zeros((n, nout, nin))
    out = RoutingOutput(v=None, c=None, squash=squash_spec, _single=single,
                        _u_hat=u_t, _vote_scale=scale_t)
    for it in range(iterations):
        c = softmax(b, axis=1)
        s, sigma, v = _aggregate(c, u_t, squash_spec, scale_t)
        out._c.append(c)
        out._s.append(s)
        out._sigma.append(sigma)
        out._v.append(v)
        if it < iterations - 1:
            b = b + (u_t @ v[..., None])[..., 0]
    return _finish(out, c, b)


def routing_backward(out: RoutingOutput, grad_v):
    """Backprop through dynamic routing.

    Returns ``(grad_u_hat, grad_vote_scale)``; the second item is ``None``
    unless the kl squash was used.
    """
    grad_v = np.asarray(grad_v, dtype=np.float64)
    if out._single:
        grad_v = grad_v[None]
    u_t, spec, scale = out._u_hat, out.squash, out._vote_scale
    terms = []
    grad_scale = None if scale is None or spec.variant != "kl" else np.zeros_like(scale)
    grad_b = None   # gradient w.r.t. the logits produced by iteration t
    gv = grad_v
    for t in range(len(out._c) - 1, -1, -1):
        c, s, sigma, v = out._c[t], out._s[t], out._sigma[t], out._v[t]
        if grad_b is not None:
            # b_{t+1} = b_t + <v_t, u_hat>
            gv = (grad_b[:, :, None, :] @ u_t)[:, :, 0, :]
            terms.append((grad_b, v))
        more, gc, gscale = _aggregate_backward(gv, c, u_t, spec, scale, s, sigma)
        terms.extend(more)
        if gscale is not None:
            grad_scale += gscale
        gb = softmax_backward(c, gc, axis=1)
        grad_b = gb if grad_b is None else grad_b + gb
    grad_u = _sum_outer(terms).transpose(0, 2, 1, 3)
    if grad_scale is not None:
        grad_scale = grad_scale.T
    return (grad_u[0] if out._single else grad_u), grad_scale


def dynamic_routing_backward(out: RoutingOutput, grad_v):
    """Gradient of the routed outputs w.r.t. the votes ``u_hat``."""
    return routing_backward(out, grad_v)[0]


def self_routing(u, W_route, W_pose, squash_spec: SquashSpec = SquashSpec(),
                 vote_scale=None) -> RoutingOutput:
    """Non-iterative routing.

    ``u`` is ``[N, Nin, din]``, ``W_route`` is ``[Nin, din, Nout]`` and
    ``W_pose`` is ``[Nin, Nout, dout, din]``.  Coupling logits are
    ``W_route[i].T @ u[i]``.
    """
    if W_route is None:
        raise ConfigError("self routing requires W_route")
    u, single = _batch(u, 2)
    nin, din, nout = W_route.shape
    if u.shape[1:] != (nin, din):
        raise InvalidArgument(f"capsules {u.shape[1:]} do not match W_route {W_route.shape}")
    logits = (u[:, :, None, :] @ W_route)[:, :, 0, :]          # [N, Nin, Nout]
    c_t = np.ascontiguousarray(softmax(logits, axis=-1).transpose(0, 2, 1))
    u_t = np.ascontiguousarray(matvec_votes(W_pose, u).transpose(0, 2, 1, 3))
    scale_t = None if vote_scale is None else np.ascontiguousarray(vote_scale.T)
    s, sigma, v = _aggregate(c_t, u_t, squash_spec, scale_t)
    out = RoutingOutput(v=None, c=None, squash=squash_spec, _single=single,
                        _u_hat=u_t, _vote_scale=scale_t, _c=[c_t], _s=[s], _sigma=[sigma],
                        _v=[v], _u=u)
    return _finish(out, c_t, None)


def self_routing_backward(out: RoutingOutput, grad_v, W_route, W_pose):
    """Returns ``(grad_u, grad_W_route, grad_W_pose, grad_vote_scale)``."""
    grad_v = np.asarray(grad_v, dtype=np.float64)
    if out._single:
        grad_v = grad_v[None]
    c_t = out._c[0]
    u = out._u
    terms, gc_t, gscale = _aggregate_backward(grad_v, c_t, out._u_hat, out.squash,
                                              out._vote_scale, out._s[0], out._sigma[0])
    gu_t = _sum_outer(terms)
    glogits = softmax_backward(c_t, gc_t, axis=1).transpose(0, 2, 1)   # [N, Nin, Nout]
    grad_W_route = np.einsum("nij,nik->ikj", glogits, u)
    grad_u = (glogits[:, :, None, :] @ W_route.transpose(0, 2, 1))[:, :, 0, :]
    grad_W_pose, gu2 = matvec_votes_backward(gu_t.transpose(0, 2, 1, 3), W_pose, u)
    grad_u = grad_u + gu2
    if gscale is not None:
        gscale = gscale.T
    if out._single:
        grad_u = grad_u[0]
    return grad_u, grad_W_route, grad_W_pose, gscale
