"""Finite-difference oracle and the gradient-check battery.

The oracle only ever evaluates forward code.  Each registered check draws
random small inputs, reduces the op's output to a scalar with a random
projection, and compares the analytic backward pass against central
differences.  Single ops are compared coordinate by coordinate; the full
network is compared along one random direction per parameter block.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import capsnet, routing, squash, tensor
from .errors import OracleError
from .routing import RoutingSpec
from .squash import SquashSpec

DEFAULT_EPS = 1e-5
LINEAR_EPS = 0.5
TIE_MARGIN = 1e-3
MIN_COUPLING = 1e-3
REL_FLOOR = 1e-8
OP_THRESHOLD = 1e-6
COMPOSITE_THRESHOLD = 1e-5


def finite_diff(f: Callable[[np.ndarray], float], theta, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat, gflat = theta.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(theta)
        flat[k] = orig - eps
        fm = f(theta)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate "
                              f"{tuple(int(i) for i in np.unravel_index(k, theta.shape))}")
        gflat[k] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(analytic, numeric) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


@dataclass
class GradReport:
    op: str
    trials: int
    max_rel_err: float
    max_abs_err: float
    worst_index: tuple
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.threshold

    def row(self) -> list:
        return [self.op, self.trials, f"{self.max_rel_err:.3e}", f"{self.max_abs_err:.3e}",
                "pass" if self.passed else "FAIL"]


REPORT_HEADER = ["op", "trials", "max_rel_err", "max_abs_err", "pass"]


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# individual checks: each returns a list of (analytic, numeric) array pairs

def _gap_ok(x, margin=TIE_MARGIN) -> bool:
    # largest and second-largest |x_k| along the last axis are separated
    a = np.sort(np.abs(x), axis=-1)
    return bool(np.all(a[..., -1] - a[..., -2] >= margin))


def _check_conv(rng, eps):
    c, f = rng.integers(1, 3), rng.integers(1, 3)
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(c, 6, 6))
    k = rng.normal(size=(f, c, 3, 3))
    b = rng.normal(size=f)
    out = tensor.conv2d(x, k, b, stride)
    G = rng.normal(size=out.shape)
    gx, gk, gb = tensor.conv2d_backward(G, x, k, stride)
    return [
        (gx, finite_diff(lambda t: np.sum(G * tensor.conv2d(t, k, b, stride)), x, eps)),
        (gk, finite_diff(lambda t: np.sum(G * tensor.conv2d(x, t, b, stride)), k, eps)),
        (gb, finite_diff(lambda t: np.sum(G * tensor.conv2d(x, k, t, stride)), b, eps)),
    ]


def _check_softmax(rng, eps):
    z = rng.normal(size=(3, 5))
    G = rng.normal(size=z.shape)
    y = tensor.softmax(z, axis=-1)
    return [(tensor.softmax_backward(y, G, axis=-1),
             finite_diff(lambda t: np.sum(G * tensor.softmax(t, axis=-1)), z, eps))]


def _check_votes(rng, eps):
    W = rng.normal(size=(3, 2, 4, 3))
    u = rng.normal(size=(2, 3, 3))
    G = rng.normal(size=(2, 3, 2, 4))
    gW, gu = tensor.matvec_votes_backward(G, W, u)
    return [(gW, finite_diff(lambda t: np.sum(G * tensor.matvec_votes(t, u)), W, eps)),
            (gu, finite_diff(lambda t: np.sum(G * tensor.matvec_votes(W, t)), u, eps))]


def _squash_check(spec: SquashSpec):
    def check(rng, eps):
        while True:
            s = rng.normal(size=8)
            if spec.variant != "inf" or _gap_ok(s):
                break
        G = rng.normal(size=8)
        return [(squash.squash_backward(s, spec, G),
                 finite_diff(lambda t: float(G @ squash.squash(t, spec)), s, eps))]
    return check


def _check_squash_kl(rng, eps):
    while True:
        s = rng.normal(size=(3, 4))
        sig = rng.normal(size=(3, 4))
        nrm = np.linalg.norm(sig, axis=-1)
        if np.sort(nrm)[-1] - np.sort(nrm)[-2] >= TIE_MARGIN:
            break
    G = rng.normal(size=s.shape)
    gs, gsig = squash.squash_kl_backward(s, sig, G)
    return [(gs, finite_diff(lambda t: np.sum(G * squash.squash_kl(t, sig)), s, eps)),
            (gsig, finite_diff(lambda t: np.sum(G * squash.squash_kl(s, t)), sig, eps))]


def _routing_ok(spec, out) -> bool:
    # saturated couplings leave near-zero vote gradients that only measure noise
    if min(np.min(c) for c in out._c) < MIN_COUPLING:
        return False
    if spec.variant == "inf":
        return all(_gap_ok(s) for s in out._s)
    if spec.variant == "kl":
        # the shared denominator switches between capsules at norm ties
        return all(_gap_ok(np.linalg.norm(sg, axis=-1)) for sg in out._sigma)
    return True


def _routing_check(spec: SquashSpec, iterations=3, nin=3, nout=2, dout=4):
    def check(rng, eps):
        scale = rng.uniform(0.5, 2.0, size=(nin, nout)) if spec.variant == "kl" else None
        while True:
            u_hat = rng.normal(size=(nin, nout, dout))
            out = routing.dynamic_routing(u_hat, iterations, spec, scale)
            if _routing_ok(spec, out):
                break
        G = rng.normal(size=(nout, dout))

        def f(t):
            return np.sum(G * routing.dynamic_routing(t, iterations, spec, scale).v)

        g_u, g_scale = routing.routing_backward(out, G)
        pairs = [(g_u, finite_diff(f, u_hat, eps))]
        if scale is not None:
            pairs.append((g_scale, finite_diff(
                lambda t: np.sum(G * routing.dynamic_routing(u_hat, iterations, spec, t).v),
                scale, eps)))
        return pairs
    return check


def _self_routing_check(spec: SquashSpec, nin=3, din=3, nout=2, dout=4):
    def check(rng, eps):
        W_route = rng.normal(size=(nin, din, nout))
        W_pose = rng.normal(size=(nin, nout, dout, din))
        while True:
            u = rng.normal(size=(nin, din))
            out = routing.self_routing(u, W_route, W_pose, spec)
            if _routing_ok(spec, out):
                break
        G = rng.normal(size=(nout, dout))
        g_u, g_route, g_pose, _ = routing.self_routing_backward(out, G, W_route, W_pose)
        return [
            (g_u, finite_diff(
                lambda t: np.sum(G * routing.self_routing(t, W_route, W_pose, spec).v), u, eps)),
            (g_route, finite_diff(
                lambda t: np.sum(G * routing.self_routing(u, t, W_pose, spec).v), W_route, eps)),
            (g_pose, finite_diff(
                lambda t: np.sum(G * routing.self_routing(u, W_route, t, spec).v), W_pose, eps)),
        ]
    return check


def _network_ok(arch, params, x, labels) -> bool:
    # keep samples away from the ReLU, hinge and max-norm kinks
    res = capsnet.forward(x, params, arch)
    if np.min(np.abs(res.cache["h1"])) < TIE_MARGIN:
        return False
    sc = res.class_scores
    # tiny activations make every gradient tiny and the comparison is then
    # pure rounding noise
    if np.min(np.linalg.norm(res.cache["u"], axis=-1)) < 0.25 or np.min(sc) < 0.05:
        return False
    if np.min(np.abs(sc - capsnet.M_PLUS)) < TIE_MARGIN or \
            np.min(np.abs(sc - capsnet.M_MINUS)) < TIE_MARGIN:
        return False
    rout = res.cache["routing"]
    if arch.routing.squash.variant == "inf":
        if not _gap_ok(res.cache["pre"]):
            return False
        if not all(_gap_ok(s) for s in rout._s):
            return False
    if arch.routing.squash.variant == "kl":
        return all(_gap_ok(np.linalg.norm(sg, axis=-1)) for sg in rout._sigma)
    return True


def _network_check(method: str, spec: SquashSpec):
    arch = capsnet.preset("tiny", RoutingSpec(method, 3, spec))

    def check(rng, eps):
        while True:
            params = capsnet.init_params(arch, rng)
            for name, v in params.items():
                if name.endswith("bias"):
                    v[...] = rng.normal(scale=0.1, size=v.shape)
                else:
                    v *= 4.0
            x = rng.uniform(size=(2, arch.in_channels, arch.image_size, arch.image_size))
            labels = rng.integers(0, arch.n_classes, size=2)
            if _network_ok(arch, params, x, labels):
                break
        _, _, grads, _ = capsnet.loss_and_grad(params, arch, x, labels)
        # One random unit direction per parameter block.  Coordinate-wise
        # checks drown in rounding noise on the many near-zero entries.
        pairs = []
        for name, value in params.items():
            d = rng.normal(size=value.shape)
            d /= np.linalg.norm(d)

            def f(t, name=name, value=value, d=d):
                p = params.copy()
                setattr(p, name, value + t[0] * d)
                return float(np.sum(capsnet.margin_loss(
                    capsnet.forward(x, p, arch).class_scores, labels)))
            pairs.append((np.array([np.sum(getattr(grads, name) * d)]),
                          finite_diff(f, np.zeros(1), eps)))
        return pairs
    return check


def _registry():
    reg = {
        # linear in the perturbed argument, so central differences are exact
        # at any step and a large one keeps rounding noise down
        "conv2d": ("tensor", _check_conv, OP_THRESHOLD, LINEAR_EPS),
        "softmax": ("tensor", _check_softmax, OP_THRESHOLD, DEFAULT_EPS),
        "matvec_votes": ("tensor", _check_votes, OP_THRESHOLD, LINEAR_EPS),
    }
    specs = [SquashSpec.norm(m) for m in (1, 2, 3, 4, 5, 10)] + [SquashSpec.infinity()]
    for spec in specs:
        reg[f"squash_{spec.name}"] = ("squash", _squash_check(spec), OP_THRESHOLD,
                                          DEFAULT_EPS)
    reg["squash_kl"] = ("squash", _check_squash_kl, OP_THRESHOLD, DEFAULT_EPS)
    for spec in [SquashSpec.norm(m) for m in (1, 2, 3)] + [SquashSpec.infinity(), SquashSpec.kl()]:
        reg[f"dynamic_routing_{spec.name}"] = ("routing", _routing_check(spec),
                                               COMPOSITE_THRESHOLD, DEFAULT_EPS)
    for spec in (SquashSpec.norm(2), SquashSpec.infinity()):
        reg[f"self_routing_{spec.name}"] = ("routing", _self_routing_check(spec),
                                            COMPOSITE_THRESHOLD, DEFAULT_EPS)
    for method in ("dynamic", "self"):
        for spec in [SquashSpec.norm(m) for m in (1, 2, 3)] + [SquashSpec.infinity(),
                                                               SquashSpec.kl()]:
            reg[f"network_{method}_{spec.name}"] = ("network", _network_check(method, spec),
                                                    COMPOSITE_THRESHOLD, DEFAULT_EPS)
    return reg


REGISTRY = _registry()
GROUPS = ("tensor", "squash", "routing", "network")


def check_op(name: str, trials: int = 50, seed: int = 0, threshold: float | None = None,
             eps: float | None = None) -> GradReport:
    """Run ``trials`` randomized comparisons for a registered backward pass."""
    if name not in REGISTRY:
        raise KeyError(f"unknown op {name!r}")
    _, check, default, op_eps = REGISTRY[name]
    rng = np.random.default_rng(seed)
    worst_rel, worst_abs, worst_idx = 0.0, 0.0, ()
    for trial in range(trials):
        for k, (a, n) in enumerate(check(rng, op_eps if eps is None else eps)):
            rel = rel_error(a, n)
            i = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
            if rel.size and rel[i] > worst_rel:
                worst_rel, worst_idx = float(rel[i]), (trial, k) + tuple(int(j) for j in i)
            if rel.size:
                worst_abs = max(worst_abs, float(np.max(np.abs(a - n))))
    return GradReport(name, trials, worst_rel, worst_abs, worst_idx,
                      default if threshold is None else threshold)


def run_battery(only: str | None = None, trials: int = 50, seed: int = 0) -> list[GradReport]:
    """Every registered check, optionally restricted to one group or op name."""
    names = [n for n, (g, *_) in REGISTRY.items()
             if only is None or only == g or only == n]
    if not names:
        raise KeyError(f"nothing registered under {only!r}; groups are {', '.join(GROUPS)}")
    return [check_op(n, trials, seed) for n in names]
